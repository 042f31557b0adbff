"""Datasets, configuration, the fitted bundle and evaluation reports of the pipeline."""

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from django.conf import settings

from cluster.models import ClusterModel
from forest.models import ForestHyper, ForestModel
from numcore.errors import DatasetError, PdsmError
from reduce.models import PcaModel
from styleembed.models import StyleModel
from synthsite.models import CohortConfig
from taskmodel.models import FEATURE_WIDTH, TrainConfig

MODES = ('pdsm', 'single_model', 'single_visit')
BASELINES = ('pretrained', 'pooled-finetune')

# dotted config key -> PipelineConfig field
CONFIG_KEYS = {
    'styleembed.weights_dir': 'style_weights_dir',
    'styleembed.layers': 'style_layers',
    'cluster.k': 'k',
    'cluster.restarts': 'restarts',
    'cluster.max_iter': 'max_iter',
    'taskmodel.pretrain.epochs': 'pretrain_epochs',
    'taskmodel.pretrain.learning_rate': 'pretrain_learning_rate',
    'taskmodel.finetune.epochs': 'finetune_epochs',
    'taskmodel.finetune.learning_rate': 'finetune_learning_rate',
    'taskmodel.batch_size': 'batch_size',
    'taskmodel.momentum': 'momentum',
    'taskmodel.weight_decay': 'weight_decay',
    'taskmodel.min_finetune_samples': 'min_finetune_samples',
    'taskmodel.use_bias': 'use_bias',
    'reduce.components': 'components',
    'forest.n_trees': 'n_trees',
    'forest.max_features': 'max_features',
    'forest.min_samples_leaf': 'min_samples_leaf',
    'forest.max_depth': 'max_depth',
    'forest.bootstrap': 'bootstrap',
    'pipeline.baseline': 'baseline',
    'run.seed': 'seed',
    'run.threads': 'threads',
}

COHORT_PREFIX = 'synthsite.'


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 5
    restarts: int = 10
    max_iter: int = 100
    pretrain_epochs: int = 60
    pretrain_learning_rate: float = 0.01
    finetune_epochs: int = 30
    finetune_learning_rate: float = 0.002
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    min_finetune_samples: int = 4
    use_bias: bool = True
    components: int = 32
    n_trees: int = 200
    max_features: int = 0
    min_samples_leaf: int = 2
    max_depth: int = 0
    bootstrap: bool = True
    baseline: str = 'pretrained'
    style_weights_dir: str = ''
    style_layers: tuple = (1, 2)
    seed: int = 42
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.style_layers, str):
            layers = tuple(int(part) for part in self.style_layers.split(',') if part.strip())
            object.__setattr__(self, 'style_layers', layers)
        if self.k < 1:
            raise PdsmError('cluster.k must be >= 1')
        if self.baseline not in BASELINES:
            raise PdsmError(f'unknown baseline {self.baseline!r}')

    @classmethod
    def from_dotted(cls, values=None):
        """Settings defaults overlaid with `values` (dotted keys); synthsite.* keys are ignored here."""
        merged = {**settings.PDSM_DEFAULTS, **(values or {})}
        kwargs = {CONFIG_KEYS[key]: value for key, value in merged.items() if key in CONFIG_KEYS}
        return cls(**kwargs)

    def to_dotted(self, include_run=True):
        """Dotted view; run.threads is left out of anything persisted since results do not depend on it."""
        data = asdict(self)
        data['style_layers'] = ','.join(str(n) for n in self.style_layers)
        dotted = {key: data[name] for key, name in CONFIG_KEYS.items()}
        if not include_run:
            dotted.pop('run.threads')
        return dotted

    def pretrain_config(self):
        return TrainConfig(
            epochs=self.pretrain_epochs, batch_size=self.batch_size, learning_rate=self.pretrain_learning_rate,
            momentum=self.momentum, weight_decay=self.weight_decay, seed=self.seed,
        )

    def finetune_config(self):
        return TrainConfig(
            epochs=self.finetune_epochs, batch_size=self.batch_size, learning_rate=self.finetune_learning_rate,
            momentum=self.momentum, weight_decay=self.weight_decay, seed=self.seed,
        )

    def forest_hyper(self):
        return ForestHyper(
            n_trees=self.n_trees, max_features=self.max_features, min_samples_leaf=self.min_samples_leaf,
            max_depth=self.max_depth, bootstrap=self.bootstrap,
        )

    def single_model(self):
        """
        The baseline: one pseudo-domain, and either no fine-tuning (the
        pre-trained network is the only extractor) or fine-tuning on all of D_f.
        """
        epochs = self.finetune_epochs if self.baseline == 'pooled-finetune' else 0
        return replace(self, k=1, finetune_epochs=epochs)


def cohort_config(values=None):
    """CohortConfig and train fraction from settings defaults overlaid with dotted `values`."""
    merged = {**settings.PDSM_DEFAULTS, **(values or {})}
    names = {f.name for f in fields(CohortConfig)}
    kwargs = {key[len(COHORT_PREFIX):]: value for key, value in merged.items()
              if key.startswith(COHORT_PREFIX) and key[len(COHORT_PREFIX):] in names}
    return CohortConfig(**kwargs), float(merged['synthsite.train_fraction'])


@dataclass(frozen=True, eq=False)
class PredictionTriplet:
    """One patient's ⟨x(0), x(12), s(48)⟩; the images are LabeledImage references."""

    patient_id: str
    site_id: str
    week0: object
    week12: object
    outcome: float


@dataclass(frozen=True)
class PredictionDataset:
    """D_p: one triplet per patient."""

    triplets: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'triplets', tuple(self.triplets))
        ids = [t.patient_id for t in self.triplets]
        duplicated = sorted({pid for pid in ids if ids.count(pid) > 1})
        if duplicated:
            raise DatasetError('more than one triplet for patients', duplicated)
        bad = [t.patient_id for t in self.triplets if not np.isfinite(t.outcome)]
        if bad:
            raise DatasetError('non-finite week-48 outcome for patients', bad)

    def __iter__(self):
        return iter(self.triplets)

    def __len__(self):
        return len(self.triplets)

    @property
    def outcomes(self):
        return np.array([t.outcome for t in self.triplets], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class PipelineBundle:
    """
    Everything predict_outcome needs, plus the training reduced features so the
    single-visit forest can be re-fit from the bundle alone.

    training: {'patients': [...], 'z0': (n, m), 'z12': (n, m), 's48': (n,)}
    summary: assignment counts, cluster composition and the fine-tune check.
    """

    style: StyleModel
    cluster: ClusterModel
    pretrained: object
    pdsms: tuple
    pca: PcaModel
    forest: ForestModel
    config: dict
    seed: int
    training: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'pdsms', tuple(self.pdsms))
        if len(self.pdsms) != self.cluster.k:
            raise PdsmError(f'{len(self.pdsms)} PDSMs for k={self.cluster.k}')
        if self.style.embedding_dimension != self.cluster.dimension:
            raise PdsmError('cluster centroids do not match the style embedding dimension')
        if self.pca.dimension != FEATURE_WIDTH:
            raise PdsmError(f'PCA expects {self.pca.dimension} features, networks give {FEATURE_WIDTH}')
        if self.forest.input_dimension != 2 * self.pca.m:
            raise PdsmError(f'forest takes {self.forest.input_dimension} inputs, expected {2 * self.pca.m}')

    @property
    def k(self):
        return self.cluster.k


@dataclass(frozen=True)
class EvalReport:
    mode: str
    r2: float
    mse: float
    n_test: int
    pairs: tuple = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise PdsmError(f'unknown evaluation mode {self.mode!r}')
        if self.mse < 0:
            raise PdsmError('MSE must be non-negative')

    def to_dict(self):
        return {
            'mode': self.mode,
            'r2': self.r2,
            'mse': self.mse,
            'n_test': self.n_test,
            'pairs': [{'patient_id': p, 'truth': t, 'prediction': y} for p, t, y in self.pairs],
        }

    def to_text(self):
        lines = [
            f'mode    {self.mode}',
            f'n_test  {self.n_test}',
            f'R2      {self.r2:.4f}',
            f'MSE     {self.mse:.4f}',
            '',
            f"{'patient':<10} {'truth':>8} {'predicted':>10}",
        ]
        lines += [f'{p:<10} {t:>8.4f} {y:>10.4f}' for p, t, y in self.pairs]
        return '\n'.join(lines) + '\n'


BENCHMARK_COLUMNS = (
    'pdsm_r2', 'pdsm_mse', 'single_model_r2', 'single_model_mse', 'single_visit_r2', 'single_visit_mse',
)


@dataclass(frozen=True)
class BenchmarkTable:
    """One row per seed plus a final mean row."""

    rows: tuple
    finetune_checks: tuple = ()

    def to_dict(self):
        return {'columns': ['seed', *BENCHMARK_COLUMNS], 'rows': list(self.rows),
                'finetune_checks': list(self.finetune_checks)}

    def to_text(self):
        header = f"{'seed':>6} " + ' '.join(f'{name:>16}' for name in BENCHMARK_COLUMNS)
        lines = [header, '-' * len(header)]
        for row in self.rows:
            lines.append(f"{str(row['seed']):>6} " + ' '.join(f'{row[name]:>16.4f}' for name in BENCHMARK_COLUMNS))
        if self.finetune_checks:
            lines += ['', 'fine-tune check (training MSE on each pseudo-domain subset)',
                      f"{'seed':>6} {'domain':>6} {'n':>4} {'pretrained':>11} {'finetuned':>10} {'fallback':>8}"]
            for check in self.finetune_checks:
                lines.append(
                    f"{check['seed']:>6} {check['domain']:>6} {check['n']:>4} "
                    f"{check['pretrained_mse']:>11.4f} {check['finetuned_mse']:>10.4f} {str(check['fallback']):>8}"
                )
        return '\n'.join(lines) + '\n'
