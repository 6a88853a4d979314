from .version import __version__

__all__ = ['TriMesh', 'RigidTransform', 'IndenterShape', 'IndenterKind', 'CoreBody', 'build_sensor_skin',
           'build_core', 'signed_distance', 'default_indenters', 'enclosed_volume',
           'SimParams', 'SolverSettings', 'SimState', 'IncrementRecord', 'MembraneSolver', 'internal_forces',
           'cavity_constraint', 'contact_forces', 'solve_increment', 'run_trajectory', 'simulate_many',
           'Trajectory', 'ElectrodeArray', 'VirtualSensor', 'make_trajectories', 'synthesize_electrodes',
           'CalibrationProblem', 'cost', 'calibrate',
           'RegistrationObservation', 'frame_from_three_points', 'chordal_mean',
           'RawStream', 'TactileDataset', 'tare', 'lowpass_zero_phase', 'subsample_increments', 'assemble',
           'split',
           'NetworkSpec', 'PointSetRegressor', 'TrainedModel', 'forward', 'train', 'evaluate_features',
           'evaluate_field',
           'Config', 'load_config', 'attach_to_log']

from .geometry import TriMesh, RigidTransform, IndenterShape, IndenterKind, CoreBody, build_sensor_skin, \
    build_core, signed_distance, default_indenters, enclosed_volume
from .fesim import SimParams, SolverSettings, SimState, IncrementRecord, MembraneSolver, internal_forces, \
    cavity_constraint, contact_forces, solve_increment, run_trajectory, simulate_many
from .sensor import Trajectory, ElectrodeArray, VirtualSensor, make_trajectories, synthesize_electrodes
from .calib import CalibrationProblem, cost, calibrate
from .register import RegistrationObservation, frame_from_three_points, chordal_mean
from .pipeline import RawStream, TactileDataset, tare, lowpass_zero_phase, subsample_increments, assemble, split
from .regress import NetworkSpec, PointSetRegressor, TrainedModel, forward, train, evaluate_features, \
    evaluate_field
from .config import Config, load_config
from .logger import attach_to_log
