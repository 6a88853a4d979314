import tempfile
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from tactsim.geometry import RigidTransform
from tactsim.register import RegistrationObservation, frame_from_three_points, chordal_mean, triple_estimates, \
    register, fit_rigid_transform, workspace_grid, workspace_rms_error, read_points_csv, write_points_csv, \
    write_transform_json, read_transform_json

TRUTH = RigidTransform(Rotation.from_euler('zyx', [0.7, -0.2, 0.4]).as_matrix(), [0.12, -0.05, 0.31])


def observed(points_r, noise=0.0, seed=0):
    points_r = np.asarray(points_r, dtype=float)
    points_b = TRUTH.apply(points_r)
    if noise:
        points_b = points_b + np.random.default_rng(seed).normal(0.0, noise, points_b.shape)
    return RegistrationObservation(points_r, points_b)


def test_exact_registration():
    points = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.08, 0.0], [0.02, 0.03, 0.06]]
    estimate = register(observed(points))
    np.testing.assert_allclose(estimate.rotation, TRUTH.rotation, atol=1e-10)
    np.testing.assert_allclose(estimate.translation, TRUTH.translation, atol=1e-10)
    assert len(triple_estimates(observed(points))) == 4


def test_three_points_are_enough():
    points = [[0.0, 0.0, 0.0], [0.05, 0.01, 0.0], [0.01, 0.07, 0.02]]
    estimate = register(observed(points))
    np.testing.assert_allclose(estimate.as_matrix(), TRUTH.as_matrix(), atol=1e-10)


def test_collinear_points():
    try:
        frame_from_three_points([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0])
    except ValueError:
        pass
    else:
        raise AssertionError('frame from collinear points')
    try:
        register(observed([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.3, 0.0, 0.0]]))
    except ValueError:
        pass
    else:
        raise AssertionError('registration from collinear points')


def test_collinear_triples_are_skipped():
    # the first three points are collinear, every other triple is usable
    points = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [0.05, 0.08, 0.01]]
    observation = observed(points)
    assert len(triple_estimates(observation)) == 3
    np.testing.assert_allclose(register(observation).as_matrix(), TRUTH.as_matrix(), atol=1e-10)


def test_frame_from_three_points():
    frame = frame_from_three_points([1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 3.0, 0.0])
    np.testing.assert_allclose(frame.rotation, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(frame.translation, [1.0, 0.0, 0.0])


def test_chordal_mean():
    rotation = Rotation.from_rotvec([0.1, 0.5, -0.3]).as_matrix()
    np.testing.assert_allclose(chordal_mean([rotation, rotation]), rotation, atol=1e-12)
    plus = Rotation.from_rotvec([0.0, 0.0, 0.4]).as_matrix()
    minus = Rotation.from_rotvec([0.0, 0.0, -0.4]).as_matrix()
    np.testing.assert_allclose(chordal_mean([plus, minus]), np.eye(3), atol=1e-12)
    mean = chordal_mean(Rotation.random(5, random_state=3).as_matrix())
    np.testing.assert_allclose(mean.T @ mean, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(mean) - 1.0) < 1e-12


def test_noisy_registration():
    rng = np.random.default_rng(4)
    points = rng.uniform(-0.05, 0.05, size=(6, 3)) + [0.4, 0.0, 0.2]
    observation = observed(points, noise=1e-4, seed=5)
    grid = workspace_grid([0.4, 0.0, 0.2], 0.05)
    assert grid.shape == (125, 3)
    assert workspace_rms_error(register(observation), TRUTH, grid) < 1e-3
    assert workspace_rms_error(fit_rigid_transform(observation), TRUTH, grid) < 1e-3
    assert workspace_rms_error(TRUTH, TRUTH, grid) == 0.0


def test_observation_validation():
    for points_r, points_b in ((np.zeros((4, 3)), np.zeros((3, 3))), (np.zeros((2, 3)), np.zeros((2, 3)))):
        try:
            RegistrationObservation(points_r, points_b)
        except ValueError:
            continue
        raise AssertionError('accepted {} and {} points'.format(len(points_r), len(points_b)))


def test_points_csv():
    points = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.08, 0.0], [0.02, 0.03, 0.06]]
    observation = observed(points)
    with tempfile.TemporaryDirectory() as tmp:
        filepath = Path(tmp) / 'points.csv'
        write_points_csv(observation, filepath)
        loaded = read_points_csv(filepath)
    assert loaded.labels == ('p1', 'p2', 'p3', 'p4')
    np.testing.assert_allclose(loaded.points_R, observation.points_R)
    np.testing.assert_allclose(loaded.points_B, observation.points_B)


def test_transform_json():
    with tempfile.TemporaryDirectory() as tmp:
        filepath = Path(tmp) / 'registration' / 'transform.json'
        write_transform_json(TRUTH, filepath, rms_error=0.0)
        loaded = read_transform_json(filepath)
    np.testing.assert_allclose(loaded.as_matrix(), TRUTH.as_matrix(), atol=1e-12)


if __name__ == '__main__':
    for name, function in list(globals().items()):
        if name.startswith('test_') and callable(function):
            function()
