"""Task network, its training configuration, and the labeled image datasets it trains on."""

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from numcore.errors import PdsmError, ShapeError
from numcore.models import STANDARD_DTYPE
from numcore.rng import rng_for
from numcore.storage import load_image, read_json, read_tensor, write_json, write_tensor

# Width of the penultimate layer; the downstream PCA reduces exactly this many features.
FEATURE_WIDTH = 512

LINEAGE_PRETRAINED = 'pretrained'
LINEAGE_FINETUNED = 'finetuned'

MANIFEST_NAME = 'network.json'


@dataclass(frozen=True, eq=False)
class LabeledImage:
    """An image reference with its qSteatosis target; `volume` short-circuits disk reads."""

    image_id: str
    path: str = ''
    target: float = float('nan')
    patient_id: str = ''
    site_id: str = ''
    week: int = 0
    volume: object = None

    def load(self):
        if self.volume is not None:
            return self.volume
        return load_image(self.path, image_id=self.image_id)


@dataclass(frozen=True)
class FeatureDataset:
    """D_f: labeled (image, qSteatosis) pairs."""

    items: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'items', tuple(self.items))
        bad = [item.image_id for item in self.items if not np.isfinite(item.target)]
        if bad:
            raise PdsmError(f"non-finite targets for images: {', '.join(bad)}")

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def with_items(self, items):
        return FeatureDataset(tuple(items))

    @property
    def targets(self):
        return np.array([item.target for item in self.items], dtype=np.float64)


@dataclass(frozen=True)
class Architecture:
    """
    Input E x S x S; per block a 3x3 conv (padding 1), ReLU and 2x2 max-pool;
    global average pool; dense -> 512 + ReLU; dense -> 1.
    """

    echoes: int = 6
    size: int = 64
    block_channels: tuple = (16, 32, 64)
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'block_channels', tuple(int(c) for c in self.block_channels))
        if self.size % (2 ** len(self.block_channels)):
            raise PdsmError(f'image size {self.size} must be divisible by {2 ** len(self.block_channels)}')

    @property
    def input_shape(self):
        return (self.echoes, self.size, self.size)

    def parameter_shapes(self):
        shapes = {}
        channels = self.echoes
        for index, out_channels in enumerate(self.block_channels, start=1):
            shapes[f'conv{index}.weight'] = (out_channels, channels, 3, 3)
            if self.use_bias:
                shapes[f'conv{index}.bias'] = (out_channels,)
            channels = out_channels
        shapes['fc.weight'] = (FEATURE_WIDTH, channels)
        if self.use_bias:
            shapes['fc.bias'] = (FEATURE_WIDTH,)
        shapes['head.weight'] = (1, FEATURE_WIDTH)
        shapes['head.bias'] = (1,)
        return shapes

    def to_dict(self):
        data = asdict(self)
        data['block_channels'] = list(self.block_channels)
        data['feature_width'] = FEATURE_WIDTH
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(
            echoes=int(data['echoes']), size=int(data['size']),
            block_channels=tuple(data['block_channels']), use_bias=bool(data['use_bias']),
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise PdsmError('epochs must be >= 0')
        if self.learning_rate <= 0:
            raise PdsmError('learning rate must be > 0')
        if self.batch_size < 1:
            raise PdsmError('batch size must be >= 1')

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class TaskNetwork:
    """
    m_p or one of its pseudo-domain clones m_p^d.

    Predictions are made in standardized target units and mapped back with
    target_mean / target_std. Parameters are read-only; training produces a
    new network.
    """

    architecture: Architecture
    params: dict
    seed: int = 0
    lineage: str = LINEAGE_PRETRAINED
    domain: int = None
    fallback: bool = False
    target_mean: float = 0.0
    target_std: float = 1.0
    train_config: dict = field(default_factory=dict)
    final_loss: float = float('nan')

    def __post_init__(self):
        expected = self.architecture.parameter_shapes()
        if set(expected) != set(self.params):
            raise PdsmError(f'parameter names {sorted(self.params)} do not match architecture')
        for name, shape in expected.items():
            value = self.params[name]
            if value.shape != shape:
                raise ShapeError(name, shape, value.shape, 'TaskNetwork')
            if not np.all(np.isfinite(value)):
                raise PdsmError(f'parameter {name} has non-finite values')
            value.setflags(write=False)

    @property
    def dtype(self):
        return self.params['head.weight'].dtype

    @property
    def feature_width(self):
        return self.params['head.weight'].shape[1]

    @property
    def output_weights(self):
        """Head weights in target units: prediction = output_weights . features + output_bias."""
        return self.params['head.weight'][0].astype(np.float64) * self.target_std

    @property
    def output_bias(self):
        return float(self.params['head.bias'][0]) * self.target_std + self.target_mean

    @property
    def lineage_tag(self):
        if self.lineage == LINEAGE_FINETUNED:
            return f'{LINEAGE_FINETUNED}({self.domain + 1})'
        return self.lineage

    def copy_params(self, dtype=None):
        return {name: np.array(value, dtype=dtype or value.dtype) for name, value in self.params.items()}

    def astype(self, dtype):
        """Same network with parameters cast (float64 for gradient checks)."""
        return replace(self, params=self.copy_params(dtype))

    def snapshot(self):
        """Bytes of every parameter, for equality checks."""
        return b''.join(self.params[name].tobytes() for name in sorted(self.params))


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    image_id: str = ''
    lineage: str = ''

    def __post_init__(self):
        if self.values.shape != (FEATURE_WIDTH,):
            raise ShapeError('length', FEATURE_WIDTH, self.values.shape, 'FeatureVector')


def initial_params(architecture, seed, dtype=STANDARD_DTYPE):
    """Glorot-normal weights (one seeded stream per tensor), zero biases."""
    params = {}
    for name, shape in architecture.parameter_shapes().items():
        if name.endswith('.bias'):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        receptive = int(np.prod(shape[2:]))
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        rng = rng_for(seed, 'init', name)
        params[name] = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape).astype(dtype)
    return params


def save_network(network, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, value in network.params.items():
        write_tensor(directory / f'{name}.tns', value)
    write_json(directory / MANIFEST_NAME, {
        'architecture': network.architecture.to_dict(),
        'parameters': sorted(network.params),
        'seed': network.seed,
        'lineage': network.lineage,
        'domain': network.domain,
        'fallback': network.fallback,
        'target_mean': network.target_mean,
        'target_std': network.target_std,
        'train_config': network.train_config,
        'final_loss': None if not np.isfinite(network.final_loss) else network.final_loss,
    })


def load_network(directory):
    directory = Path(directory)
    manifest = read_json(directory / MANIFEST_NAME)
    params = {name: read_tensor(directory / f'{name}.tns') for name in manifest['parameters']}
    final_loss = manifest.get('final_loss')
    return TaskNetwork(
        architecture=Architecture.from_dict(manifest['architecture']),
        params=params,
        seed=int(manifest['seed']),
        lineage=manifest['lineage'],
        domain=manifest['domain'],
        fallback=bool(manifest['fallback']),
        target_mean=float(manifest['target_mean']),
        target_std=float(manifest['target_std']),
        train_config=manifest['train_config'],
        final_loss=float('nan') if final_loss is None else float(final_loss),
    )
