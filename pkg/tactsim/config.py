"""
config.py
---------

JSON run configuration loaded into nested dataclasses.
"""

import hashlib
import json
from dataclasses import dataclass, field, fields, asdict, is_dataclass
from pathlib import Path

from .fesim import SimParams, SolverSettings
from .geometry import default_indenters, shapes_from_config, build_sensor_skin, build_core
from .logger import attach_to_log

logger = attach_to_log()


@dataclass
class MeshConfig:
    radius: float = 6.7e-3
    cyl_length: float = 8e-3
    resolution: float = 1e-3
    gap: float = 1e-3
    dorsal_fraction: float = 0.5
    strict_resolution: bool = False
    core_resolution: float = 1e-3

    def build(self):
        """
        Skin mesh and core body described by this configuration.
        """
        skin = build_sensor_skin(self.radius, self.cyl_length, self.resolution, strict=self.strict_resolution,
                                 dorsal_fraction=self.dorsal_fraction)
        core = build_core(self.radius, self.cyl_length, self.gap, self.core_resolution)
        return skin, core


@dataclass
class SensorConfig:
    indenters: list = field(default_factory=lambda: ['sphere_small', 'sphere_medium', 'sphere_large',
                                                     'flat_cylinder', 'cube', 'ring', 'edge'])
    n_points: int = 10
    n_angled_per_point: int = 4
    angle_deg: float = 30.0
    normal_depth: float = 3e-3
    angled_depth: float = 1.5e-3
    increment: float = 1e-4
    contact_margin: float = 2e-3
    electrode_spacing: float = 1.8e-3
    kernel_radius: float = 2e-3
    pressure_coefficient: float = 1e-3
    gap_coefficient: float = 1e3
    noise_sigma: float = 0.0
    n_sensors: int = 1
    gain_sigma: float = 0.1


@dataclass
class DatasetConfig:
    n_field_nodes: int = 128
    test_fraction: float = 0.2
    leave_out: list = field(default_factory=lambda: ['ring', 'sphere_small'])
    studies: list = field(default_factory=lambda: ['contiguous', 'random', 'leave_one_out', 'cross_sensor'])


@dataclass
class NetworkConfig:
    scale: int = 4


@dataclass
class TrainingConfig:
    targets: list = field(default_factory=lambda: ['location', 'force', 'field'])
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    optimizer: str = 'sgd'
    valid_fraction: float = 0.1


@dataclass
class CalibrationConfig:
    enabled: bool = False
    budget: int = 40
    indenter: str = 'sphere_medium'
    trajectory_index: int = 10
    w1: float = 1.0
    w2: float = 1e4
    thickness_penalty: str = 'signed'


@dataclass
class Config:
    """
    Complete run configuration.

    Parameters
    ----------
    seed: int
        Top-level seed every stage seed is derived from
    mesh, params, solver, sensor, dataset, network, training, calibration
        Blocks of the configuration
    shapes: list of dict
        Named indenters (`name`, `kind`, `dimensions`, `pose`), the default family if empty
    """
    seed: int = 0
    mesh: MeshConfig = field(default_factory=MeshConfig)
    params: SimParams = field(default_factory=SimParams)
    solver: SolverSettings = field(default_factory=SolverSettings)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    shapes: list = field(default_factory=list)

    def indenters(self):
        """
        Indenter shapes selected by `sensor.indenters`, by name.
        """
        available = shapes_from_config({'shapes': self.shapes}) if self.shapes else default_indenters()
        missing = [name for name in self.sensor.indenters if name not in available]
        if missing:
            raise ValueError('unknown indenter(s) {}; available are {}'.format(missing, sorted(available)))
        return {name: available[name] for name in self.sensor.indenters}

    def to_dict(self):
        data = {}
        for f in fields(self):
            value = getattr(self, f.name)
            data[f.name] = value.to_dict() if hasattr(value, 'to_dict') else \
                asdict(value) if is_dataclass(value) else value
        return data

    def sha256(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _build(cls, data, path):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValueError('config block `{}` must be an object'.format(path))
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError('unknown key(s) in config block `{}`: {}'.format(path, unknown))
    return cls(**data)


_BLOCKS = {'mesh': MeshConfig, 'params': SimParams, 'solver': SolverSettings, 'sensor': SensorConfig,
           'dataset': DatasetConfig, 'network': NetworkConfig, 'training': TrainingConfig,
           'calibration': CalibrationConfig}


def config_from_dict(data):
    """
    Build a Config from a parsed JSON object, rejecting unknown keys.
    """
    data = dict(data or {})
    unknown = sorted(set(data) - set(_BLOCKS) - {'seed', 'shapes'})
    if unknown:
        raise ValueError('unknown top-level config key(s): {}'.format(unknown))
    blocks = {name: _build(cls, data.get(name), name) for name, cls in _BLOCKS.items()}
    return Config(seed=int(data.get('seed', 0)), shapes=list(data.get('shapes', [])), **blocks)


def load_config(filepath=None):
    """
    Load a JSON configuration, the defaults if `filepath` is None.
    """
    if filepath is None:
        return Config()
    with open(filepath, 'r') as fin:
        data = json.load(fin)
    logger.debug('loaded config {}'.format(filepath))
    return config_from_dict(data)


def save_config(config, filepath):
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, 'w') as fout:
        json.dump(config.to_dict(), fout, indent=2)


def derive_seed(seed, stage):
    """
    Seed of a pipeline stage: first 4 bytes of SHA-256("<seed>:<stage>").
    """
    digest = hashlib.sha256('{}:{}'.format(seed, stage).encode()).digest()
    return int.from_bytes(digest[:4], 'little')
