"""
sensor.py
---------

Virtual sensor assembly: indentation trajectories, the electrode array and
the synthesis of electrode signals from simulated skin states.
"""

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import IndenterShape, CoreBody, frame_from_direction
from .logger import attach_to_log

logger = attach_to_log()

NUM_ELECTRODES = 19

# nearest-neighbour spacing range of the real electrode array (m)
SPACING_RANGE = (1.4e-3, 2.1e-3)


class TrajectoryKind(str, enum.Enum):
    NORMAL = 'normal'
    ANGLED = 'angled'


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    Straight indentation plan starting at first contact.

    Parameters
    ----------
    indenter: IndenterShape
        Indenter, its pose is set by the simulation
    contact_point: (3,) float
        Point on the pressurized skin aimed at (m)
    direction: (3,) float
        Unit travel direction
    depth: float
        Travel after first contact (m)
    increment: float
        Travel per load increment (m)
    kind: TrajectoryKind
        Normal or angled indentation
    seed: None or int
        Seed the trajectory was drawn with
    trajectory_id: int
        Index of the trajectory within its indenter's set
    """
    indenter: IndenterShape
    contact_point: np.ndarray
    direction: np.ndarray
    depth: float
    increment: float = 1e-4
    kind: TrajectoryKind = TrajectoryKind.NORMAL
    seed: int = None
    trajectory_id: int = 0

    def __post_init__(self):
        contact_point = np.array(self.contact_point, dtype=float).reshape(3)
        direction = np.array(self.direction, dtype=float).reshape(3)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-12:
            raise ValueError('trajectory direction must be a unit vector, norm is {}'.format(np.linalg.norm(direction)))
        if self.depth < 0 or self.increment <= 0:
            raise ValueError('trajectory needs depth >= 0 and increment > 0, got {} and {}'.format(
                self.depth, self.increment))
        contact_point.setflags(write=False)
        direction.setflags(write=False)
        object.__setattr__(self, 'contact_point', contact_point)
        object.__setattr__(self, 'direction', direction)
        object.__setattr__(self, 'kind', TrajectoryKind(self.kind))

    @property
    def num_increments(self):
        return int(round(self.depth / self.increment))

    def to_dict(self):
        return {'indenter': self.indenter.to_dict(), 'contact_point': self.contact_point.tolist(),
                'direction': self.direction.tolist(), 'depth': self.depth, 'increment': self.increment,
                'kind': self.kind.value, 'seed': self.seed, 'trajectory_id': self.trajectory_id}

    @classmethod
    def from_dict(cls, data):
        return cls(IndenterShape.from_dict(data['indenter']), data['contact_point'], data['direction'],
                   data['depth'], data.get('increment', 1e-4), data.get('kind', 'normal'), data.get('seed'),
                   data.get('trajectory_id', 0))


def trajectories_to_json(trajectories, filepath=None):
    """
    JSON document of trajectories, optionally written to `filepath`.
    """
    document = {'trajectories': [t.to_dict() for t in trajectories]}
    if filepath is not None:
        filepath = Path(filepath)
        filepath.parent.mkdir(parents=True, exist_ok=True)
        with open(filepath, 'w') as fout:
            json.dump(document, fout, indent=2)
    return document


def trajectories_from_json(source):
    """
    Trajectories from a JSON file path or an already parsed document.
    """
    if isinstance(source, (str, Path)):
        with open(source, 'r') as fin:
            source = json.load(fin)
    return [Trajectory.from_dict(t) for t in source['trajectories']]


def ventral_triangles(skin, margin=0.0):
    """
    Indices of triangles on the free ventral skin (every corner below z = 0),
    at least `margin` away from anchored nodes.
    """
    coords = skin.cur_coords
    corners = coords[skin.triangles]
    candidate = np.all(corners[:, :, 2] < 0, axis=1) & ~np.any(skin.anchored[skin.triangles], axis=1)
    if margin > 0 and skin.anchored.any():
        distance, _ = cKDTree(coords[skin.anchored]).query(corners.mean(axis=1))
        candidate &= distance >= margin
    return np.flatnonzero(candidate)


def sample_contact_points(skin, n, seed, margin=0.0, return_triangles=False):
    """
    Points sampled uniformly by area on the ventral skin.

    Parameters
    ----------
    skin: TriMesh
        Skin, sampled at its current coordinates
    n: int
        Number of points
    seed: int
        Random seed
    margin: float
        Minimum distance of the sampled triangles from anchored nodes (m)
    return_triangles: bool
        Also return the triangle of every point if set True

    Returns
    -------
    points: (n, 3) float
    triangles: (n,) int, only if return_triangles
    """
    candidates = ventral_triangles(skin, margin)
    if not len(candidates):
        raise ValueError('no ventral triangles to sample from (margin {})'.format(margin))
    rng = np.random.default_rng(seed)
    areas = skin.face_areas()[candidates]
    chosen = candidates[rng.choice(len(candidates), size=n, p=areas / areas.sum())]

    # uniform barycentric sampling
    r1, r2 = rng.random(n), rng.random(n)
    root = np.sqrt(r1)
    weights = np.stack([1.0 - root, root * (1.0 - r2), root * r2], axis=1)
    points = np.einsum('ni,nij->nj', weights, skin.cur_coords[skin.triangles[chosen]])
    if return_triangles:
        return points, chosen
    return points


def make_trajectories(skin, indenter, n_points=10, n_angled_per_point=4, seed=0, angle_deg=30.0,
                      normal_depth=3e-3, angled_depth=1.5e-3, increment=1e-4, margin=0.0):
    """
    Indentation trajectories of one indenter.

    Every sampled point gets one normal trajectory along the inward surface
    normal and `n_angled_per_point` trajectories tilted by `angle_deg` from it
    at uniformly drawn azimuths.

    Returns
    -------
    as_list: list of Trajectory
        The normal trajectories first, then the angled ones point by point
    """
    points, triangles = sample_contact_points(skin, n_points, seed, margin=margin, return_triangles=True)
    inward = -skin.face_normals()[triangles]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    azimuths = rng.uniform(0.0, 2.0 * np.pi, size=(n_points, n_angled_per_point))
    angle = np.deg2rad(angle_deg)

    trajectories = []
    for i in range(n_points):
        trajectories.append(Trajectory(indenter, points[i], inward[i], normal_depth, increment,
                                       TrajectoryKind.NORMAL, seed, len(trajectories)))
    for i in range(n_points):
        frame = frame_from_direction(inward[i])
        for azimuth in azimuths[i]:
            tangent = np.cos(azimuth) * frame[:, 0] + np.sin(azimuth) * frame[:, 1]
            direction = np.cos(angle) * frame[:, 2] + np.sin(angle) * tangent
            direction /= np.linalg.norm(direction)
            trajectories.append(Trajectory(indenter, points[i], direction, angled_depth, increment,
                                           TrajectoryKind.ANGLED, seed, len(trajectories)))
    return trajectories


@dataclass(frozen=True, eq=False)
class ElectrodeArray:
    """
    Electrodes on the core surface and the parameters of their signal model.

    Parameters
    ----------
    positions: (19, 3) float
        Electrode sites on the core (m)
    normals: (19, 3) float
        Outward unit normals of the core at the sites
    gains: (19,) float
        Positive per-electrode gains
    noise_sigma: float
        Standard deviation of additive Gaussian noise
    kernel_radius: float
        Width of the Gaussian distance kernel (m)
    pressure_coefficient: float
        Signal per Pa of fluid pressure change
    gap_coefficient: float
        Signal per m of skin-core gap closure
    """
    positions: np.ndarray
    normals: np.ndarray
    gains: np.ndarray = field(default_factory=lambda: np.ones(NUM_ELECTRODES))
    noise_sigma: float = 0.0
    kernel_radius: float = 2e-3
    pressure_coefficient: float = 1e-3
    gap_coefficient: float = 1e3

    def __post_init__(self):
        positions = np.array(self.positions, dtype=float).reshape(-1, 3)
        normals = np.array(self.normals, dtype=float).reshape(-1, 3)
        gains = np.array(self.gains, dtype=float).ravel()
        if not len(positions) == len(normals) == len(gains) == NUM_ELECTRODES:
            raise ValueError('electrode array needs exactly {} positions, normals and gains'.format(NUM_ELECTRODES))
        if np.any(gains <= 0):
            raise ValueError('electrode gains must be positive')
        if self.noise_sigma < 0 or self.kernel_radius <= 0:
            raise ValueError('noise_sigma must be >= 0 and kernel_radius > 0')
        for name, array in (('positions', positions), ('normals', normals), ('gains', gains)):
            array.setflags(write=False)
            object.__setattr__(self, name, array)

    def with_gains(self, gains):
        return replace(self, gains=gains)

    def to_dict(self):
        return {'positions': self.positions.tolist(), 'normals': self.normals.tolist(),
                'gains': self.gains.tolist(), 'noise_sigma': self.noise_sigma,
                'kernel_radius': self.kernel_radius, 'pressure_coefficient': self.pressure_coefficient,
                'gap_coefficient': self.gap_coefficient}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def _hex_patch(rings=2):
    """
    Axial coordinates of a hexagonal patch, ordered by ring and then by angle.
    """
    cells = [(q, r) for q in range(-rings, rings + 1) for r in range(-rings, rings + 1) if abs(q + r) <= rings]
    planar = np.array([(q + 0.5 * r, 0.5 * np.sqrt(3.0) * r) for q, r in cells])
    ring = np.array([max(abs(q), abs(r), abs(q + r)) for q, r in cells])
    angle = np.round(np.arctan2(planar[:, 1], planar[:, 0]), 12)
    return planar[np.lexsort((angle, ring))]


def default_electrode_layout(core, spacing=1.8e-3, **kwargs):
    """
    Hexagonal patch of 19 electrodes wrapped around the ventral core cylinder.

    The patch is centred at the middle of the cylindrical section, on the
    ventral line (phi = 0); its axial rows stay axial and its other direction
    is wrapped along the circumference.

    Parameters
    ----------
    core: CoreBody
        Rigid core
    spacing: float
        Nearest-neighbour spacing within the patch (m)
    kwargs: dict
        Signal model parameters forwarded to ElectrodeArray

    Returns
    -------
    as_array: ElectrodeArray
    """
    if not isinstance(core, CoreBody):
        raise ValueError('electrode layout needs a CoreBody, got {}'.format(type(core).__name__))
    planar = spacing * _hex_patch()
    x = 0.5 * core.cyl_length + planar[:, 0]
    phi = planar[:, 1] / core.radius
    if x.min() < 0 or x.max() > core.cyl_length or np.abs(phi).max() > 0.5 * np.pi:
        raise ValueError('core (radius {}, length {}) too small for the electrode layout at spacing {}'.format(
            core.radius, core.cyl_length, spacing))
    normals = np.stack([np.zeros_like(phi), np.sin(phi), -np.cos(phi)], axis=1)
    positions = np.stack([x, core.radius * normals[:, 1], core.radius * normals[:, 2]], axis=1)
    return ElectrodeArray(positions, normals, **kwargs)


def electrode_spacing(array):
    """
    (19,) nearest-neighbour distance of every electrode (m).
    """
    distance, _ = cKDTree(array.positions).query(array.positions, k=2)
    return distance[:, 1]


def electrode_weights(reference_coords, node_areas, array):
    """
    (19, n) weights of every skin node in every electrode signal.

    Gaussian in the distance from the electrode, restricted to nodes in front of
    it, and scaled by the nodal area over the kernel footprint 2 pi rho^2.
    """
    offset = reference_coords[None, :, :] - array.positions[:, None, :]
    distance = np.linalg.norm(offset, axis=2)
    facing = np.maximum(0.0, np.einsum('eni,ei->en', offset, array.normals) / np.maximum(distance, 1e-12))
    kernel = np.exp(-distance ** 2 / (2.0 * array.kernel_radius ** 2))
    return kernel * facing * node_areas[None, :] / (2.0 * np.pi * array.kernel_radius ** 2)


def synthesize_electrodes(record, skin, array, seed=None, core=None):
    """
    Electrode signals of one simulated increment.

    e_i = gain_i (c_p dp + c_gap sum_n w_in (-dgap_n)) + noise, where dgap_n is
    the change of the skin-core distance at node n relative to the pressurized
    reference and w_in the kernel weights of `electrode_weights`.

    Parameters
    ----------
    record: IncrementRecord
        Simulated increment; its displacements are relative to `skin`
    skin: TriMesh
        Skin at the pressurized reference (current coordinates)
    array: ElectrodeArray
        Electrodes and signal model
    seed: None or int
        Seed of the noise
    core: None or CoreBody
        Core giving exact gap changes; without it the gap change is the
        displacement along the skin normal

    Returns
    -------
    as_float: (19,) float
    """
    reference = skin.cur_coords
    displacements = record.nodal_displacements
    if core is not None:
        gap_change = core.signed_distance(reference + displacements)[0] - core.signed_distance(reference)[0]
    else:
        gap_change = np.einsum('ni,ni->n', displacements, skin.vertex_normals())
    weights = electrode_weights(reference, skin.vertex_areas(), array)
    signal = array.gains * (array.pressure_coefficient * record.pressure_change -
                            array.gap_coefficient * (weights @ gap_change))
    if array.noise_sigma > 0:
        signal = signal + np.random.default_rng(seed).normal(0.0, array.noise_sigma, NUM_ELECTRODES)
    return signal


def draw_sensor_gains(n_sensors, seed, sigma=0.1):
    """
    (n_sensors, 19) log-normal electrode gains, one row per virtual sensor.
    """
    return np.random.default_rng(seed).lognormal(0.0, sigma, size=(n_sensors, NUM_ELECTRODES))


def sample_field_nodes(skin, n=128, seed=0):
    """
    Sorted ids of `n` free ventral nodes drawn without replacement.
    """
    candidates = np.flatnonzero((skin.cur_coords[:, 2] < 0) & ~skin.anchored)
    if len(candidates) < n:
        raise ValueError('only {} free ventral nodes available, {} requested'.format(len(candidates), n))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(candidates, size=n, replace=False))


@dataclass(frozen=True, eq=False)
class VirtualSensor:
    """
    One virtual sensor: pressurized skin, core and its electrode array.
    """
    skin: object
    core: CoreBody
    electrodes: ElectrodeArray
    sensor_id: int = 0

    def synthesize(self, record, seed=None):
        return synthesize_electrodes(record, self.skin, self.electrodes, seed=seed, core=self.core)


def build_virtual_sensors(skin, core, n_sensors=1, seed=0, gain_sigma=0.1, spacing=1.8e-3, **kwargs):
    """
    Virtual sensors sharing one mechanical model and differing in electrode gains.

    The first sensor has unit gains, the others log-normal draws.
    """
    layout = default_electrode_layout(core, spacing, **kwargs)
    gains = draw_sensor_gains(n_sensors, seed, gain_sigma)
    gains[0] = 1.0
    return [VirtualSensor(skin, core, layout.with_gains(gains[i]), i) for i in range(n_sensors)]
