import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import signal as sps

from tactsim.geometry import build_sensor_skin, build_core, default_indenters
from tactsim.fesim import IncrementRecord
from tactsim.sensor import NUM_ELECTRODES, Trajectory, build_virtual_sensors, sample_field_nodes
from tactsim.pipeline import RawStream, TactileDataset, TargetNormalization, tare, lowpass_zero_phase, \
    subsample_increments, process_stream, align_streams, import_streams, dataset_columns, assemble, split


def ramp_stream(z, rate=1000.0, seed=0):
    """
    Stream of an indenter moving along z with the tip positions `z`.
    """
    z = np.asarray(z, dtype=float)
    n = len(z)
    rng = np.random.default_rng(seed)
    tip = np.zeros((n, 3))
    tip[:, 2] = z
    forces = np.zeros((n, 3))
    forces[:, 2] = -100.0 * z + 0.3
    electrodes = rng.normal(0.0, 1.0, (n, NUM_ELECTRODES)) + 5.0
    return RawStream(np.arange(n) / rate, electrodes, forces, tip, trajectory_id=3)


def test_tare():
    stream = tare(ramp_stream(np.arange(20) * 1e-5))
    np.testing.assert_array_equal(stream.electrodes[0], 0.0)
    np.testing.assert_array_equal(stream.forces[0], 0.0)
    np.testing.assert_allclose(stream.forces[-1, 2], -100.0 * 19e-5)


def test_stream_timestamps_increase():
    try:
        RawStream([0.0, 0.2, 0.1], np.zeros((3, NUM_ELECTRODES)), np.zeros((3, 3)))
    except ValueError:
        pass
    else:
        raise AssertionError('unordered timestamps accepted')


def test_filter_keeps_constant():
    signal = np.full((500, 2), 3.5)
    np.testing.assert_allclose(lowpass_zero_phase(signal, 1000.0), 3.5, atol=1e-9)


def test_filter_attenuates_mains():
    t = np.arange(2000) / 1000.0
    filtered = lowpass_zero_phase(np.sin(2 * np.pi * 50.0 * t), 1000.0, cutoff=5.0, order=1)
    assert np.abs(filtered[500:1500]).max() < 0.015


def test_filter_has_zero_phase():
    rate = 100.0
    t = np.arange(1000) / rate
    filtered = lowpass_zero_phase(np.sin(2 * np.pi * t), rate, cutoff=5.0, order=1)
    b, a = sps.butter(1, 5.0, btype='low', fs=rate)
    _, response = sps.freqz(b, a, worN=[1.0], fs=rate)
    expected = np.abs(response[0]) ** 2

    window = (t >= 2.0) & (t < 8.0)
    in_phase = 2.0 * np.mean(filtered[window] * np.sin(2 * np.pi * t[window]))
    quadrature = 2.0 * np.mean(filtered[window] * np.cos(2 * np.pi * t[window]))
    assert abs(in_phase - expected) < 0.02 * expected
    assert abs(quadrature) < 0.01


def test_filter_limits():
    for kwargs in ({'signal': np.zeros(100), 'sample_rate': 8.0}, {'signal': np.zeros(2), 'sample_rate': 1000.0}):
        try:
            lowpass_zero_phase(cutoff=5.0, **kwargs)
        except ValueError:
            continue
        raise AssertionError('filtered {} samples at {} Hz'.format(len(kwargs['signal']), kwargs['sample_rate']))


def test_subsample_increments():
    stream = ramp_stream(np.arange(301) * 1e-5)
    subsampled = subsample_increments(stream, 1e-4)
    assert len(subsampled) == 30
    np.testing.assert_allclose(subsampled.indenter_tip[:, 2], np.arange(1, 31) * 1e-4, atol=1e-12)
    # every kept sample is in its own increment already
    assert len(subsample_increments(subsampled, 1e-4)) == 30


def test_subsample_keeps_end_of_dwell():
    z = np.concatenate([np.arange(151) * 1e-5, np.full(50, 150e-5), np.arange(151, 301) * 1e-5])
    stream = ramp_stream(z)
    subsampled = subsample_increments(stream, 1e-4)
    assert len(subsampled) == 30
    assert abs(subsampled.timestamps[14] - 0.2) < 1e-12
    assert abs(subsampled.indenter_tip[14, 2] - 150e-5) < 1e-12


def test_process_stream():
    stream = ramp_stream(np.arange(301) * 1e-5, seed=2)
    processed = process_stream(stream, cutoff=5.0, increment=1e-4)
    assert len(processed) == 30
    kept = np.arange(10, 301, 10)
    # electrodes are tared but not filtered
    np.testing.assert_allclose(processed.electrodes, stream.electrodes[kept] - stream.electrodes[0])
    assert (processed.forces[:, 2] < 0).all()
    assert processed.trajectory_id == 3


def test_align_streams():
    left = pd.DataFrame({'time': [0.0, 0.1, 0.2, 0.3], 'force': [1.0, 2.0, 3.0, 4.0]})
    right = pd.DataFrame({'time': [0.001, 0.102, 0.5], 'tip': [10.0, 20.0, 30.0]})
    merged = align_streams(left, right, tolerance=0.01)
    assert len(merged) == 2
    np.testing.assert_array_equal(merged['force'], [1.0, 2.0])
    np.testing.assert_array_equal(merged['tip'], [10.0, 20.0])


def recorded_table():
    rows = []
    for trajectory in (4, 1):
        for k in range(10):
            row = {'t': k * 1e-3, 'traj': trajectory, 'sensor': 2, 'fx': 0.0, 'fy': 0.0, 'fz': -10.0 * k,
                   'x': 0.0, 'y': 0.0, 'z': 0.01 * k}
            row.update({'E{}'.format(i): float(i + k) for i in range(1, NUM_ELECTRODES + 1)})
            rows.append(row)
    return pd.DataFrame(rows)


def test_import_streams():
    mapping = {'time': 't', 'electrodes': ['E{}'.format(i) for i in range(1, NUM_ELECTRODES + 1)],
               'forces': ['fx', 'fy', 'fz'], 'tip': ['x', 'y', 'z'], 'trajectory_id': 'traj', 'sensor_id': 'sensor',
               'scale': {'forces': 1e-3, 'tip': 1e-3}}
    streams = import_streams(recorded_table(), mapping)
    assert [s.trajectory_id for s in streams] == [1, 4]
    assert all(s.sensor_id == 2 for s in streams)
    np.testing.assert_allclose(streams[0].forces[:, 2], -1e-2 * np.arange(10))
    np.testing.assert_allclose(streams[0].indenter_tip[:, 2], 1e-5 * np.arange(10))
    try:
        import_streams(recorded_table(), {'time': 't', 'electrodes': ['E1'], 'forces': ['fx', 'fy', 'fz'],
                                          'trajectory_id': 'traj'})
    except ValueError:
        pass
    else:
        raise AssertionError('mapping with one electrode column accepted')


def simulated_runs(skin, diverged_trajectory=None):
    """
    Three indenters with two trajectories of three increments each.
    """
    shapes = default_indenters()
    rng = np.random.default_rng(0)
    pattern = rng.normal(0.0, 1.0, (skin.num_nodes, 3))
    pattern[skin.anchored] = 0.0
    runs = []
    trajectory_id = 0
    for name in ('sphere_medium', 'cube', 'ring'):
        for _ in range(2):
            trajectory = Trajectory(shapes[name], [4e-3, 0.0, -6.7e-3], [0.0, 0.0, 1.0], depth=3e-4)
            records = []
            for k in (1, 2, 3):
                records.append(IncrementRecord(
                    increment=k, indenter_displacement=np.array([0.0, 0.0, k * 1e-4]),
                    net_force=np.array([0.01 * trajectory_id, 0.0, -0.1 * k * (trajectory_id + 1)]),
                    nodal_displacements=1e-6 * k * (trajectory_id + 1) * pattern, cavity_pressure=100.0,
                    sensor_thickness=15.1e-3, diverged=trajectory_id == diverged_trajectory and k == 3,
                    pressure_change=float(k)))
            runs.append((trajectory_id, trajectory, records))
            trajectory_id += 1
    return runs


def dataset_fixture(diverged_trajectory=None):
    skin = build_sensor_skin(resolution=2e-3, strict=False)
    core = build_core(resolution=2e-3)
    sensors = build_virtual_sensors(skin, core, n_sensors=2, seed=1)
    field_nodes = sample_field_nodes(skin, 8, seed=0)
    return assemble(simulated_runs(skin, diverged_trajectory), sensors, field_nodes, seed=5,
                    mesh_sha256=skin.sha256())


def test_assemble():
    dataset = dataset_fixture()
    assert list(dataset.table.columns) == dataset_columns(8)
    assert len(dataset) == 36
    assert dataset.n_field_nodes == 8
    keys = ['sensor_id', 'indenter_kind', 'trajectory_id', 'increment']
    pd.testing.assert_frame_equal(dataset.table, dataset.table.sort_values(keys).reset_index(drop=True))
    assert dataset.electrode_values.shape == (36, NUM_ELECTRODES)
    assert dataset.electrode_coords.shape == (36, NUM_ELECTRODES, 3)
    assert dataset.targets('field').shape == (36, 24)
    np.testing.assert_allclose(dataset.targets('location')[0], [4e-3, 0.0, -6.7e-3])
    # assembly is deterministic
    pd.testing.assert_frame_equal(dataset.table, dataset_fixture().table)


def test_assemble_stops_at_divergence():
    dataset = dataset_fixture(diverged_trajectory=2)
    assert len(dataset) == 34
    rows = dataset.table[dataset.table['trajectory_id'] == 2]
    assert sorted(rows['increment'].unique()) == [1, 2]


def test_assemble_rejects_other_mesh():
    skin = build_sensor_skin(resolution=2e-3, strict=False)
    core = build_core(resolution=2e-3)
    sensors = build_virtual_sensors(skin, core)
    trajectory = Trajectory(default_indenters()['cube'], [4e-3, 0.0, -6.7e-3], [0.0, 0.0, 1.0], depth=1e-4)
    record = IncrementRecord(increment=1, indenter_displacement=np.zeros(3), net_force=np.zeros(3),
                             nodal_displacements=np.zeros((5, 3)), cavity_pressure=0.0, sensor_thickness=0.0)
    try:
        assemble([(0, trajectory, [record])], sensors, [0, 1])
    except ValueError:
        pass
    else:
        raise AssertionError('records of another mesh assembled')


def check_partition(dataset, train, test):
    assert len(train) + len(test) == len(dataset)
    assert len(train) > 0 and len(test) > 0
    keys = ['sensor_id', 'trajectory_id', 'increment']
    combined = pd.concat([train.table, test.table])[keys].sort_values(keys).reset_index(drop=True)
    pd.testing.assert_frame_equal(combined, dataset.table[keys].sort_values(keys).reset_index(drop=True))


def test_contiguous_split():
    dataset = dataset_fixture()
    train, test = split(dataset, 'contiguous', seed=0, test_fraction=0.34)
    check_partition(dataset, train, test)
    assert not set(train.trajectory_ids) & set(test.trajectory_ids)


def test_random_split():
    dataset = dataset_fixture()
    train, test = split(dataset, 'random', seed=0, test_fraction=0.2)
    check_partition(dataset, train, test)
    assert len(test) == 8
    again, _ = split(dataset, 'random', seed=0, test_fraction=0.2)
    pd.testing.assert_frame_equal(train.table, again.table)


def test_leave_one_indenter_out():
    dataset = dataset_fixture()
    train, test = split(dataset, 'leave_one_indenter_out', indenter='cube')
    check_partition(dataset, train, test)
    assert set(test.table['indenter_kind']) == {'cube'}
    assert 'cube' not in set(train.table['indenter_kind'])
    try:
        split(dataset, 'leave_one_indenter_out', indenter='edge')
    except ValueError:
        pass
    else:
        raise AssertionError('held out an absent indenter')


def test_cross_sensor_split():
    dataset = dataset_fixture()
    train, test = split(dataset, 'cross_sensor', train_sensor=0, test_sensor=1)
    check_partition(dataset, train, test)
    assert set(train.table['sensor_id']) == {0}
    assert set(test.table['sensor_id']) == {1}
    for kwargs in ({'train_sensor': 0, 'test_sensor': 0}, {'train_sensor': 0, 'test_sensor': 7}):
        try:
            split(dataset, 'cross_sensor', **kwargs)
        except ValueError:
            continue
        raise AssertionError('cross-sensor split with {}'.format(kwargs))


def test_unknown_policy():
    try:
        split(dataset_fixture(), 'by_moon_phase')
    except ValueError:
        pass
    else:
        raise AssertionError('unknown split policy accepted')


def test_normalization():
    dataset = dataset_fixture()
    train, test = split(dataset, 'contiguous', seed=1, test_fraction=0.34)
    assert train.normalization is test.normalization
    for target in ('location', 'force', 'field'):
        normalized = train.targets(target, normalized=True)
        assert normalized.min() >= -1e-12
        assert normalized.max() <= 1.0 + 1e-12
        np.testing.assert_allclose(train.normalization.inverse(target, normalized), train.targets(target),
                                   rtol=1e-9, atol=1e-15)
    restored = TargetNormalization.from_dict(train.normalization.to_dict())
    for target in ('location', 'force', 'field'):
        np.testing.assert_allclose(restored.transform(target, test.targets(target)),
                                   test.targets(target, normalized=True), atol=1e-12)
    try:
        dataset.targets('force', normalized=True)
    except ValueError:
        pass
    else:
        raise AssertionError('normalized targets without a normalization')


def test_dataset_io():
    dataset = dataset_fixture()
    train, _ = split(dataset, 'random', seed=0)
    with tempfile.TemporaryDirectory() as tmp:
        filepath = Path(tmp) / 'dataset' / 'train.csv'
        train.write(filepath)
        assert filepath.with_suffix('.manifest.json').exists()
        loaded = TactileDataset.read(filepath)
    pd.testing.assert_frame_equal(loaded.table, train.table, check_dtype=False)
    np.testing.assert_array_equal(loaded.field_node_ids, train.field_node_ids)
    assert loaded.seed == 5
    assert loaded.mesh_sha256 == train.mesh_sha256
    np.testing.assert_allclose(loaded.targets('force', normalized=True), train.targets('force', normalized=True),
                               atol=1e-12)


if __name__ == '__main__':
    for name, function in list(globals().items()):
        if name.startswith('test_') and callable(function):
            function()
