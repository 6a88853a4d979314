"""
pipeline.py
-----------

Signal processing of recorded streams and assembly of tactile datasets.

Streams are tared, their forces low-pass filtered forward and backward, and
subsampled at the end of every displacement increment. Simulated
trajectories are turned into dataset rows of electrode coordinates and
values with contact location, force and displacement-field targets, which
are split by trajectory, by row, by indenter or by sensor.
"""

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import signal as sps
from sklearn.model_selection import GroupShuffleSplit, train_test_split
from sklearn.preprocessing import MinMaxScaler

from .sensor import NUM_ELECTRODES
from .logger import attach_to_log

logger = attach_to_log()

NUM_FIELD_NODES = 128

SPLIT_POLICIES = ('contiguous', 'random', 'leave_one_indenter_out', 'cross_sensor')

TARGETS = ('location', 'force', 'field')


@dataclass(frozen=True, eq=False)
class RawStream:
    """
    Time series of one trajectory on one sensor.

    Parameters
    ----------
    timestamps: (n,) float
        Strictly increasing sample times (s)
    electrodes: (n, 19) float
        Electrode values
    forces: (n, 3) float
        Net contact force (N)
    indenter_tip: None or (n, 3) float
        Indenter tip positions (m)
    trajectory_id: int
    sensor_id: int
    indenter_kind: str
    start_tip: None or (3,) float
        Tip position at the start of the trajectory, the first tip sample if None
    """
    timestamps: np.ndarray
    electrodes: np.ndarray
    forces: np.ndarray
    indenter_tip: np.ndarray = None
    trajectory_id: int = 0
    sensor_id: int = 0
    indenter_kind: str = ''
    start_tip: np.ndarray = None

    def __post_init__(self):
        timestamps = np.asarray(self.timestamps, dtype=float).ravel()
        electrodes = np.asarray(self.electrodes, dtype=float).reshape(len(timestamps), -1)
        forces = np.asarray(self.forces, dtype=float).reshape(len(timestamps), 3)
        if np.any(np.diff(timestamps) <= 0):
            raise ValueError('timestamps of trajectory {} are not strictly increasing'.format(self.trajectory_id))
        object.__setattr__(self, 'timestamps', timestamps)
        object.__setattr__(self, 'electrodes', electrodes)
        object.__setattr__(self, 'forces', forces)
        if self.indenter_tip is not None:
            tip = np.asarray(self.indenter_tip, dtype=float).reshape(len(timestamps), 3)
            object.__setattr__(self, 'indenter_tip', tip)
            if self.start_tip is None and len(tip):
                object.__setattr__(self, 'start_tip', tip[0].copy())

    def __len__(self):
        return len(self.timestamps)

    @property
    def sample_rate(self):
        """
        Median sample rate (Hz).
        """
        if len(self) < 2:
            raise ValueError('sample rate needs at least two samples')
        return float(1.0 / np.median(np.diff(self.timestamps)))

    def take(self, indices):
        tip = None if self.indenter_tip is None else self.indenter_tip[indices]
        return replace(self, timestamps=self.timestamps[indices], electrodes=self.electrodes[indices],
                       forces=self.forces[indices], indenter_tip=tip)


def tare(stream):
    """
    Subtract the first sample from the electrode values and forces.
    """
    if not len(stream):
        raise ValueError('cannot tare an empty stream')
    return replace(stream, electrodes=stream.electrodes - stream.electrodes[0], forces=stream.forces - stream.forces[0])


def lowpass_zero_phase(signal, sample_rate, cutoff=5.0, order=1):
    """
    Butterworth low-pass filter applied forward and backward.

    Parameters
    ----------
    signal: (n,) or (n, k) float
        Samples along the first axis
    sample_rate: float
        Sampling frequency (Hz)
    cutoff: float
        Cutoff frequency (Hz)
    order: int
        Filter order

    Returns
    -------
    as_float: same shape as signal
    """
    signal = np.asarray(signal, dtype=float)
    if sample_rate <= 2.0 * cutoff:
        raise ValueError('cutoff {} Hz is above the Nyquist frequency of {} Hz sampling'.format(cutoff, sample_rate))
    if len(signal) < 3:
        raise ValueError('zero-phase filtering needs at least 3 samples, got {}'.format(len(signal)))
    b, a = sps.butter(order, cutoff, btype='low', fs=sample_rate)
    padlen = min(3 * max(len(a), len(b)), len(signal) - 1)
    return sps.filtfilt(b, a, signal, axis=0, padtype='odd', padlen=padlen)


def path_length(stream):
    """
    (n,) distance travelled by the indenter tip since the start of the trajectory.
    """
    if stream.indenter_tip is None:
        raise ValueError('trajectory {} has no indenter tip positions'.format(stream.trajectory_id))
    points = np.vstack([stream.start_tip, stream.indenter_tip])
    return np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))


def subsample_increments(stream, increment=1e-4):
    """
    Keep the last sample of every displacement increment.

    Samples are binned by path length s into bins ceil(s / increment); bin 0
    (before the first increment is reached) is dropped.
    """
    bins = np.ceil(path_length(stream) / increment - 1e-6).astype(int)
    keep = np.flatnonzero((bins > 0) & np.append(bins[1:] != bins[:-1], True))
    return stream.take(keep)


def process_stream(stream, cutoff=5.0, increment=1e-4, filter_electrodes=False):
    """
    Tare, filter the forces (and optionally the electrodes) and subsample one stream.
    """
    stream = tare(stream)
    rate = stream.sample_rate
    forces = lowpass_zero_phase(stream.forces, rate, cutoff)
    electrodes = lowpass_zero_phase(stream.electrodes, rate, cutoff) if filter_electrodes else stream.electrodes
    return subsample_increments(replace(stream, forces=forces, electrodes=electrodes), increment)


def align_streams(left, right, on='time', tolerance=0.01):
    """
    Join two time-stamped tables on their nearest timestamps.

    Rows of `left` without a `right` sample within `tolerance` seconds are dropped.
    """
    left = left.sort_values(on)
    right = right.sort_values(on)
    merged = pd.merge_asof(left, right, on=on, direction='nearest', tolerance=tolerance)
    return merged.dropna().reset_index(drop=True)


def import_streams(table, mapping):
    """
    Streams from a recorded table through a column mapping.

    Parameters
    ----------
    table: str or Path or pandas.DataFrame
        CSV file or table with one row per sample
    mapping: str or Path or dict
        JSON mapping with `time`, `electrodes` (19 columns), `forces` (3),
        `tip` (3, optional), `trajectory_id`, and optional `sensor_id`,
        `indenter_kind` and `scale` ({'forces': .., 'tip': ..}) entries

    Returns
    -------
    as_list: list of RawStream
    """
    if isinstance(table, (str, Path)):
        table = pd.read_csv(table)
    if isinstance(mapping, (str, Path)):
        with open(mapping, 'r') as fin:
            mapping = json.load(fin)
    for key in ('time', 'electrodes', 'forces', 'trajectory_id'):
        if key not in mapping:
            raise ValueError('column mapping lacks `{}`'.format(key))
    if len(mapping['electrodes']) != NUM_ELECTRODES or len(mapping['forces']) != 3:
        raise ValueError('column mapping needs {} electrode and 3 force columns'.format(NUM_ELECTRODES))
    scale = mapping.get('scale', {})

    streams = []
    for trajectory_id, group in table.groupby(mapping['trajectory_id'], sort=True):
        group = group.sort_values(mapping['time'])
        tip = group[mapping['tip']].to_numpy() * scale.get('tip', 1.0) if 'tip' in mapping else None
        streams.append(RawStream(
            timestamps=group[mapping['time']].to_numpy(),
            electrodes=group[mapping['electrodes']].to_numpy(),
            forces=group[mapping['forces']].to_numpy() * scale.get('forces', 1.0),
            indenter_tip=tip,
            trajectory_id=int(trajectory_id),
            sensor_id=int(group[mapping['sensor_id']].iloc[0]) if 'sensor_id' in mapping else 0,
            indenter_kind=str(group[mapping['indenter_kind']].iloc[0]) if 'indenter_kind' in mapping else ''))
    logger.info('imported {} streams'.format(len(streams)))
    return streams


def dataset_columns(n_field_nodes=NUM_FIELD_NODES):
    """
    Column order of the dataset CSV.
    """
    columns = ['sensor_id', 'indenter_kind', 'trajectory_id', 'increment']
    columns += ['e{}'.format(i) for i in range(1, NUM_ELECTRODES + 1)]
    columns += ['{}{}'.format(axis, i) for i in range(1, NUM_ELECTRODES + 1) for axis in ('ex', 'ey', 'ez')]
    columns += ['cx', 'cy', 'cz', 'fx', 'fy', 'fz']
    columns += ['d{}{}'.format(i, axis) for i in range(1, n_field_nodes + 1) for axis in 'xyz']
    return columns


def _target_columns(target, n_field_nodes):
    if target == 'location':
        return ['cx', 'cy', 'cz']
    if target == 'force':
        return ['fx', 'fy', 'fz']
    if target == 'field':
        return ['d{}{}'.format(i, axis) for i in range(1, n_field_nodes + 1) for axis in 'xyz']
    raise ValueError('unknown target {}, expected one of {}'.format(target, TARGETS))


class TargetNormalization:
    """
    Per-column min/max scaling of the regression targets to [0, 1].
    """

    def __init__(self, scalers=None):
        self.scalers = scalers or {}

    @classmethod
    def fit(cls, dataset):
        scalers = {}
        for target in TARGETS:
            scalers[target] = MinMaxScaler().fit(dataset.targets(target, normalized=False))
        return cls(scalers)

    def transform(self, target, values):
        return self.scalers[target].transform(np.asarray(values, dtype=float))

    def inverse(self, target, values):
        return self.scalers[target].inverse_transform(np.asarray(values, dtype=float))

    def to_dict(self):
        return {target: {'min': scaler.data_min_.tolist(), 'max': scaler.data_max_.tolist()}
                for target, scaler in self.scalers.items()}

    @classmethod
    def from_dict(cls, data):
        scalers = {}
        for target, bounds in data.items():
            # refitting on the two extreme rows restores the scaler exactly
            scalers[target] = MinMaxScaler().fit(np.array([bounds['min'], bounds['max']], dtype=float))
        return cls(scalers)


@dataclass
class TactileDataset:
    """
    Dataset rows with trajectory provenance.

    Parameters
    ----------
    table: pandas.DataFrame
        Rows in `dataset_columns` order
    field_node_ids: (128,) int
        Skin nodes of the displacement-field target
    seed: int
        Seed the dataset was assembled with
    mesh_sha256: str
        Digest of the skin mesh
    normalization: None or TargetNormalization
        Target normalization fitted on training rows
    """
    table: pd.DataFrame
    field_node_ids: np.ndarray
    seed: int = 0
    mesh_sha256: str = ''
    normalization: TargetNormalization = None

    def __len__(self):
        return len(self.table)

    @property
    def n_field_nodes(self):
        return len(self.field_node_ids)

    @property
    def electrode_values(self):
        return self.table[['e{}'.format(i) for i in range(1, NUM_ELECTRODES + 1)]].to_numpy(dtype=float)

    @property
    def electrode_coords(self):
        columns = ['{}{}'.format(axis, i) for i in range(1, NUM_ELECTRODES + 1) for axis in ('ex', 'ey', 'ez')]
        return self.table[columns].to_numpy(dtype=float).reshape(-1, NUM_ELECTRODES, 3)

    @property
    def trajectory_ids(self):
        return self.table['trajectory_id'].to_numpy()

    def targets(self, target, normalized=False):
        """
        (n, 3) or (n, 384) target values, optionally normalized to [0, 1].
        """
        values = self.table[_target_columns(target, self.n_field_nodes)].to_numpy(dtype=float)
        if normalized:
            if self.normalization is None:
                raise ValueError('dataset has no normalization; split it or fit one first')
            values = self.normalization.transform(target, values)
        return values

    def subset(self, indices, normalization=None):
        return replace(self, table=self.table.iloc[np.sort(indices)].reset_index(drop=True),
                       normalization=normalization if normalization is not None else self.normalization)

    def manifest(self):
        return {'seed': self.seed, 'field_node_ids': [int(i) for i in self.field_node_ids],
                'normalization': None if self.normalization is None else self.normalization.to_dict(),
                'mesh_sha256': self.mesh_sha256, 'rows': len(self)}

    def table_sha256(self):
        return hashlib.sha256(self.table.to_csv(index=False).encode()).hexdigest()

    def write(self, filepath):
        """
        Write the rows as CSV and the manifest next to it (`<name>.manifest.json`).
        """
        filepath = Path(filepath)
        filepath.parent.mkdir(parents=True, exist_ok=True)
        self.table.to_csv(filepath, index=False)
        with open(filepath.with_suffix('.manifest.json'), 'w') as fout:
            json.dump(self.manifest(), fout, indent=2)

    @classmethod
    def read(cls, filepath):
        filepath = Path(filepath)
        with open(filepath.with_suffix('.manifest.json'), 'r') as fin:
            manifest = json.load(fin)
        table = pd.read_csv(filepath, dtype={'indenter_kind': str})
        normalization = manifest.get('normalization')
        return cls(table, np.array(manifest['field_node_ids'], dtype=int), manifest.get('seed', 0),
                   manifest.get('mesh_sha256', ''),
                   TargetNormalization.from_dict(normalization) if normalization else None)


def assemble(runs, sensors, field_nodes, seed=0, mesh_sha256=''):
    """
    Dataset rows of simulated trajectories read out by virtual sensors.

    Parameters
    ----------
    runs: list of (int, Trajectory, list of IncrementRecord)
        Globally unique trajectory id, trajectory and its simulated increments
    sensors: list of VirtualSensor
        Sensors synthesizing the electrode values
    field_nodes: (128,) int
        Skin nodes of the displacement-field target
    seed: int
        Seed of the electrode noise
    mesh_sha256: str
        Digest of the skin mesh, stored in the manifest

    Returns
    -------
    as_dataset: TactileDataset
        One row per converged increment and sensor, ordered by
        (sensor_id, indenter_kind, trajectory_id, increment)
    """
    field_nodes = np.asarray(field_nodes, dtype=int)
    columns = dataset_columns(len(field_nodes))
    rows = []
    for sensor in sensors:
        num_nodes = sensor.skin.num_nodes
        coords = sensor.electrodes.positions.ravel()
        for trajectory_id, trajectory, records in runs:
            for record in records:
                if record.diverged:
                    break
                if record.nodal_displacements.shape != (num_nodes, 3):
                    raise ValueError('trajectory {} was simulated on another mesh ({} nodes, sensor has {})'.format(
                        trajectory_id, len(record.nodal_displacements), num_nodes))
                noise_seed = np.random.SeedSequence([seed, sensor.sensor_id, trajectory_id, record.increment])
                values = sensor.synthesize(record, seed=noise_seed)
                rows.append([sensor.sensor_id, trajectory.indenter.name, trajectory_id, record.increment] +
                            list(values) + list(coords) + list(trajectory.contact_point) + list(record.net_force) +
                            list(record.nodal_displacements[field_nodes].ravel()))
    if not rows:
        raise ValueError('no converged increments to assemble')
    table = pd.DataFrame(rows, columns=columns)
    table = table.sort_values(['sensor_id', 'indenter_kind', 'trajectory_id', 'increment'], kind='mergesort')
    logger.info('assembled {} rows from {} trajectories and {} sensors'.format(len(table), len(runs), len(sensors)))
    return TactileDataset(table.reset_index(drop=True), field_nodes, seed, mesh_sha256)


def split(dataset, policy, seed=0, test_fraction=0.2, indenter=None, train_sensor=None, test_sensor=None):
    """
    Train/test partition of a dataset.

    Parameters
    ----------
    dataset: TactileDataset
    policy: str
        'contiguous' (by trajectory), 'random' (by row),
        'leave_one_indenter_out' (test on `indenter`) or
        'cross_sensor' (train on `train_sensor`, test on `test_sensor`)
    seed: int
        Random seed of the contiguous and random policies
    test_fraction: float
        Test share of the contiguous and random policies

    Returns
    -------
    train: TactileDataset
    test: TactileDataset
        Both carry the target normalization fitted on the training rows
    """
    if not len(dataset):
        raise ValueError('cannot split an empty dataset')
    table = dataset.table
    rows = np.arange(len(table))
    if policy == 'contiguous':
        splitter = GroupShuffleSplit(n_splits=1, test_size=test_fraction, random_state=seed)
        train_rows, test_rows = next(splitter.split(rows, groups=table['trajectory_id'].to_numpy()))
    elif policy == 'random':
        train_rows, test_rows = train_test_split(rows, test_size=test_fraction, random_state=seed)
    elif policy == 'leave_one_indenter_out':
        held_out = (table['indenter_kind'] == indenter).to_numpy()
        if not held_out.any():
            raise ValueError('indenter {} is absent from the dataset'.format(indenter))
        train_rows, test_rows = rows[~held_out], rows[held_out]
    elif policy == 'cross_sensor':
        sensor_ids = set(table['sensor_id'].unique())
        if train_sensor not in sensor_ids or test_sensor not in sensor_ids or train_sensor == test_sensor:
            raise ValueError('cross-sensor split needs two distinct sensors among {}, got {} and {}'.format(
                sorted(sensor_ids), train_sensor, test_sensor))
        train_rows = rows[(table['sensor_id'] == train_sensor).to_numpy()]
        test_rows = rows[(table['sensor_id'] == test_sensor).to_numpy()]
    else:
        raise ValueError('unknown split policy {}, expected one of {}'.format(policy, SPLIT_POLICIES))
    if not len(train_rows) or not len(test_rows):
        raise ValueError('{} split left an empty side ({} train, {} test rows)'.format(
            policy, len(train_rows), len(test_rows)))

    train = dataset.subset(train_rows)
    normalization = TargetNormalization.fit(train)
    logger.debug('{} split: {} train / {} test rows'.format(policy, len(train_rows), len(test_rows)))
    return dataset.subset(train_rows, normalization), dataset.subset(test_rows, normalization)
