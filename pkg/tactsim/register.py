"""
register.py
-----------

Mechanical registration of the sensor frame to the robot frame.

Every triple of corresponding points defines an intermediate frame in both
the robot frame R and the sensor frame B; each triple gives an estimate of
the robot-to-sensor transform and the estimates are averaged.
"""

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .geometry import RigidTransform
from .logger import attach_to_log

logger = attach_to_log()

MIN_TRIANGLE_AREA = 1e-12


@dataclass(frozen=True, eq=False)
class RegistrationObservation:
    """
    The same points measured in the robot frame and in the sensor frame.

    Parameters
    ----------
    points_R: (n, 3) float
        Points in the robot frame (m)
    points_B: (n, 3) float
        Points in the sensor frame (m)
    labels: None or list of str
        Names of the points
    """
    points_R: np.ndarray
    points_B: np.ndarray
    labels: tuple = None

    def __post_init__(self):
        points_r = np.array(self.points_R, dtype=float).reshape(-1, 3)
        points_b = np.array(self.points_B, dtype=float).reshape(-1, 3)
        if len(points_r) != len(points_b):
            raise ValueError('point counts differ: {} in R, {} in B'.format(len(points_r), len(points_b)))
        if len(points_r) < 3:
            raise ValueError('registration needs at least 3 points, got {}'.format(len(points_r)))
        object.__setattr__(self, 'points_R', points_r)
        object.__setattr__(self, 'points_B', points_b)
        labels = tuple(self.labels) if self.labels is not None else tuple('p{}'.format(i + 1) for i in range(len(points_r)))
        object.__setattr__(self, 'labels', labels)

    def transformed(self, transform_b=None, transform_r=None):
        """
        Observation with the sensor points moved by `transform_b` and the robot points by `transform_r`.
        """
        points_b = self.points_B if transform_b is None else transform_b.apply(self.points_B)
        points_r = self.points_R if transform_r is None else transform_r.apply(self.points_R)
        return RegistrationObservation(points_r, points_b, self.labels)


def frame_from_three_points(p1, p2, p3):
    """
    Intermediate frame of three non-collinear points.

    Origin at p1, x axis towards p2, z axis along the normal of the triangle.

    Returns
    -------
    as_transform: RigidTransform
        Pose of the intermediate frame in the frame the points are given in
    """
    p1, p2, p3 = (np.asarray(p, dtype=float) for p in (p1, p2, p3))
    normal = np.cross(p2 - p1, p3 - p1)
    area = 0.5 * np.linalg.norm(normal)
    if area <= MIN_TRIANGLE_AREA:
        raise ValueError('collinear points (triangle area {:.3e} m^2)'.format(area))
    x = (p2 - p1) / np.linalg.norm(p2 - p1)
    z = normal / np.linalg.norm(normal)
    y = np.cross(z, x)
    return RigidTransform(np.stack([x, y, z], axis=1), p1)


def chordal_mean(rotations):
    """
    Rotation closest in the Frobenius norm to the element-wise mean of `rotations`.
    """
    u, _, vt = np.linalg.svd(np.mean(rotations, axis=0))
    correction = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    return u @ correction @ vt


def triple_estimates(observation):
    """
    Robot-to-sensor transform estimated from every non-collinear point triple.

    Returns
    -------
    as_list: list of (tuple of int, RigidTransform)
    """
    estimates = []
    for triple in itertools.combinations(range(len(observation.points_R)), 3):
        try:
            frame_r = frame_from_three_points(*observation.points_R[list(triple)])
            frame_b = frame_from_three_points(*observation.points_B[list(triple)])
        except ValueError as error:
            logger.warning('skipping points {}: {}'.format([observation.labels[i] for i in triple], error))
            continue
        estimates.append((triple, frame_b.compose(frame_r.inverse())))
    return estimates


def register(observation):
    """
    Transform from the robot frame to the sensor frame.

    Parameters
    ----------
    observation: RegistrationObservation

    Returns
    -------
    as_transform: RigidTransform
        Chordal mean of the per-triple rotations with the mean translation
    """
    estimates = triple_estimates(observation)
    if not estimates:
        raise ValueError('every point triple is collinear')
    if len(estimates) == 1:
        return estimates[0][1]
    rotations = np.stack([transform.rotation for _, transform in estimates])
    translations = np.stack([transform.translation for _, transform in estimates])
    logger.debug('averaging {} triple estimates'.format(len(estimates)))
    return RigidTransform(chordal_mean(rotations), translations.mean(axis=0))


def fit_rigid_transform(observation):
    """
    Least-squares rigid transform of all points at once (SVD of the cross-covariance).
    """
    centroid_r = observation.points_R.mean(axis=0)
    centroid_b = observation.points_B.mean(axis=0)
    covariance = (observation.points_R - centroid_r).T @ (observation.points_B - centroid_b)
    u, _, vt = np.linalg.svd(covariance)
    correction = np.diag([1.0, 1.0, np.sign(np.linalg.det(vt.T @ u.T))])
    rotation = vt.T @ correction @ u.T
    return RigidTransform(rotation, centroid_b - rotation @ centroid_r)


def workspace_grid(center, half_extent, n=5):
    """
    (n^3, 3) regular grid of points in a cube around `center`.
    """
    axis = np.linspace(-half_extent, half_extent, n)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing='ij'), axis=-1).reshape(-1, 3)
    return grid + np.asarray(center, dtype=float)


def workspace_rms_error(estimate, truth, points):
    """
    RMS distance between the images of `points` under two transforms.
    """
    difference = estimate.apply(points) - truth.apply(points)
    return float(np.sqrt(np.mean(np.sum(difference ** 2, axis=1))))


def read_points_csv(filepath):
    """
    Observation from a CSV with columns label, xR, yR, zR, xB, yB, zB.
    """
    table = pd.read_csv(filepath)
    missing = [c for c in ('label', 'xR', 'yR', 'zR', 'xB', 'yB', 'zB') if c not in table.columns]
    if missing:
        raise ValueError('points CSV {} lacks columns {}'.format(filepath, missing))
    return RegistrationObservation(table[['xR', 'yR', 'zR']].to_numpy(), table[['xB', 'yB', 'zB']].to_numpy(),
                                   tuple(table['label'].astype(str)))


def write_points_csv(observation, filepath):
    table = pd.DataFrame(np.hstack([observation.points_R, observation.points_B]),
                         columns=['xR', 'yR', 'zR', 'xB', 'yB', 'zB'])
    table.insert(0, 'label', observation.labels)
    table.to_csv(filepath, index=False)


def write_transform_json(transform, filepath, **extra):
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    document = {'matrix': transform.as_matrix().tolist()}
    document.update(transform.to_dict())
    document.update(extra)
    with open(filepath, 'w') as fout:
        json.dump(document, fout, indent=2)


def read_transform_json(filepath):
    with open(filepath, 'r') as fin:
        return RigidTransform.from_dict(json.load(fin))
