"""Site profiles, simulated patients and the cohort manifest (JSON lines)."""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from numcore.errors import DatasetError, PdsmError

WEEKS = (0, 12, 48)
LABELED_WEEKS = (0, 48)
STEATOSIS_RANGE = (0.0, 4.0)


@dataclass(frozen=True)
class SiteProfile:
    """Scanner appearance of one clinical site."""

    site_id: str
    vendor: int = 0
    gain: float = 1.0
    bias_amplitude: float = 0.0
    bias_angle: float = 0.0
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    gamma: float = 1.0

    def __post_init__(self):
        if not 0.5 <= self.gain <= 1.5:
            raise PdsmError(f'{self.site_id}: gain {self.gain} outside [0.5, 1.5]')
        if not 0.6 <= self.gamma <= 1.6:
            raise PdsmError(f'{self.site_id}: gamma {self.gamma} outside [0.6, 1.6]')
        if min(self.noise_sigma, self.blur_sigma, self.bias_amplitude) < 0:
            raise PdsmError(f'{self.site_id}: sigmas and bias amplitude must be >= 0')

    @classmethod
    def neutral(cls, site_id, vendor=0, noise_sigma=0.0):
        return cls(site_id=site_id, vendor=vendor, noise_sigma=noise_sigma)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PatientSim:
    patient_id: str
    site_id: str
    s0: float
    responder: bool
    s12: float
    s48: float

    def __post_init__(self):
        low, high = STEATOSIS_RANGE
        for name in ('s0', 's12', 's48'):
            if not low <= getattr(self, name) <= high:
                raise PdsmError(f'{self.patient_id}: {name}={getattr(self, name)} outside [0, 4]')
        if not min(self.s0, self.s48) <= self.s12 <= max(self.s0, self.s48):
            raise PdsmError(f'{self.patient_id}: week-12 latent not between s0 and s48')

    def latent(self, week):
        return {0: self.s0, 12: self.s12, 48: self.s48}[week]

    def label(self, week):
        """qSteatosis as recorded: observed at weeks 0 and 48 only."""
        return self.latent(week) if week in LABELED_WEEKS else None


@dataclass(frozen=True)
class CohortConfig:
    patients: int = 74
    sites: int = 28
    vendors: int = 3
    echoes: int = 6
    image_size: int = 64
    heterogeneity: float = 1.0
    noise_sigma: float = 0.02
    responder_rate: float = 0.6
    max_fat_fraction: float = 0.3

    def __post_init__(self):
        if self.patients < 2:
            raise PdsmError('a cohort needs at least 2 patients')
        if self.sites < 1 or self.vendors < 1 or self.echoes < 1:
            raise PdsmError('sites, vendors and echoes must be >= 1')
        if self.image_size < 8:
            raise PdsmError('image_size must be >= 8')
        if self.heterogeneity < 0 or self.noise_sigma < 0:
            raise PdsmError('heterogeneity and noise_sigma must be >= 0')
        if not 0 <= self.responder_rate <= 1 or not 0 <= self.max_fat_fraction <= 1:
            raise PdsmError('responder_rate and max_fat_fraction must lie in [0, 1]')

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode('utf-8')).hexdigest()


@dataclass(frozen=True)
class VisitRecord:
    patient_id: str
    site_id: str
    week: int
    image_path: str
    qsteatosis: float = None

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class CohortManifest:
    """
    One record per visit. `root` is the directory image paths are relative to;
    `config` and `sites` come from the manifest header.
    """

    records: tuple
    config_hash: str
    seed: int
    root: Path = Path('.')
    config: dict = field(default_factory=dict)
    sites: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'records', tuple(self.records))
        object.__setattr__(self, 'sites', tuple(self.sites))
        object.__setattr__(self, 'root', Path(self.root))
        for record in self.records:
            if record.week not in WEEKS:
                raise DatasetError(f'unknown visit week {record.week}', [record.patient_id])
            if (record.qsteatosis is None) == (record.week in LABELED_WEEKS):
                raise DatasetError(f'qSteatosis must be present exactly at weeks 0 and 48 (week {record.week})',
                                   [record.patient_id])
        weeks = {}
        for record in self.records:
            weeks.setdefault(record.patient_id, []).append(record.week)
        broken = sorted(pid for pid, seen in weeks.items() if sorted(seen) != list(WEEKS))
        if broken:
            raise DatasetError('patients without exactly one visit at weeks 0, 12 and 48', broken)

    @property
    def patient_ids(self):
        return sorted({record.patient_id for record in self.records})

    def visits(self, patient_id):
        return {r.week: r for r in self.records if r.patient_id == patient_id}

    def image_path(self, record):
        return self.root / record.image_path

    def site_vendors(self):
        return {site.site_id: site.vendor for site in self.sites}

    def subset(self, patient_ids):
        keep = set(patient_ids)
        return CohortManifest(
            records=[r for r in self.records if r.patient_id in keep],
            config_hash=self.config_hash, seed=self.seed, root=self.root,
            config=self.config, sites=self.sites,
        )


def write_manifest(manifest, path):
    """Header line (config hash, seed, config, site profiles), then one line per visit."""
    header = {
        'kind': 'header',
        'config_hash': manifest.config_hash,
        'seed': manifest.seed,
        'config': manifest.config,
        'sites': [site.to_dict() for site in manifest.sites],
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(record.to_dict(), sort_keys=True) for record in manifest.records]
    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')


def read_manifest(path):
    path = Path(path)
    lines = [line for line in path.read_text(encoding='utf-8').splitlines() if line.strip()]
    if not lines:
        raise DatasetError(f'{path}: empty manifest')
    header = json.loads(lines[0])
    if header.get('kind') != 'header':
        raise DatasetError(f'{path}: first line is not a manifest header')
    records = [VisitRecord(**json.loads(line)) for line in lines[1:]]
    return CohortManifest(
        records=records,
        config_hash=header['config_hash'],
        seed=int(header['seed']),
        root=path.parent,
        config=header.get('config', {}),
        sites=[SiteProfile(**site) for site in header.get('sites', [])],
    )
