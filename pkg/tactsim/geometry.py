"""
geometry.py
-----------

Meshes, rigid transforms and signed distance fields of the sensor.

The skin and the core of the sensor are capsules (hemisphere-capped
cylinders along +x) built as structured triangle meshes. Indenters are
analytic solids whose signed distance is evaluated in their local frame,
where the local +z axis is the indentation direction.
"""

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import trimesh
from scipy.spatial.transform import Rotation

from .logger import attach_to_log

logger = attach_to_log()

# largest edge length accepted for the skin mesh in strict mode (m)
MAX_RESOLUTION = 5e-4

# nominal sensor radius the default indenter family is sized against (m)
NOMINAL_RADIUS = 7e-3

_ORTHONORMAL_TOL = 1e-9


def _frozen_array(array, dtype=float, shape=None):
    array = np.array(array, dtype=dtype, copy=True)
    if shape is not None:
        array = array.reshape(shape)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class TriMesh:
    """
    Oriented triangle mesh with reference and current nodal coordinates.

    Parameters
    ----------
    ref_coords: (n, 3) float
        Reference (stress-free) coordinates in metres
    cur_coords: (n, 3) float
        Current coordinates in metres
    triangles: (m, 3) int
        Node indices of the triangles, counter-clockwise seen from outside
    anchored: (n,) bool
        Nodes held fixed by boundary conditions
    """
    ref_coords: np.ndarray
    cur_coords: np.ndarray
    triangles: np.ndarray
    anchored: np.ndarray

    def __post_init__(self):
        ref = _frozen_array(self.ref_coords, shape=(-1, 3))
        cur = _frozen_array(self.cur_coords, shape=(-1, 3))
        triangles = _frozen_array(self.triangles, dtype=np.int64, shape=(-1, 3))
        anchored = _frozen_array(self.anchored, dtype=bool).ravel()

        if len(ref) != len(cur):
            raise ValueError('ref_coords and cur_coords differ in length: {} vs {}'.format(len(ref), len(cur)))
        if len(anchored) != len(ref):
            raise ValueError('anchored flags ({}) do not match the node count ({})'.format(len(anchored), len(ref)))
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(ref)):
            raise ValueError('triangle index out of range')

        object.__setattr__(self, 'ref_coords', ref)
        object.__setattr__(self, 'cur_coords', cur)
        object.__setattr__(self, 'triangles', triangles)
        object.__setattr__(self, 'anchored', anchored)

        if len(triangles) and self._edge_counts()[1].max() > 2:
            raise ValueError('non-manifold mesh: an edge is shared by more than two triangles')

    @classmethod
    def from_coords(cls, coords, triangles, anchored=None):
        """
        Mesh whose current coordinates equal its reference coordinates.
        """
        coords = np.asarray(coords, dtype=float)
        if anchored is None:
            anchored = np.zeros(len(coords), dtype=bool)
        return cls(coords, coords, triangles, anchored)

    @classmethod
    def from_trimesh(cls, mesh, anchored=None):
        """
        Convert a trimesh.Trimesh (vertices become both reference and current coordinates).
        """
        return cls.from_coords(np.asarray(mesh.vertices), np.asarray(mesh.faces), anchored)

    def to_trimesh(self, current=True):
        """
        Convert to a trimesh.Trimesh without any processing (vertex order is kept).
        """
        coords = self.cur_coords if current else self.ref_coords
        return trimesh.Trimesh(vertices=np.array(coords), faces=np.array(self.triangles), process=False)

    def with_coords(self, cur_coords):
        """
        Same mesh with other current coordinates.
        """
        return TriMesh(self.ref_coords, cur_coords, self.triangles, self.anchored)

    def with_reference(self, ref_coords):
        """
        Same mesh with other reference coordinates (current coordinates are reset to them).
        """
        return TriMesh(ref_coords, ref_coords, self.triangles, self.anchored)

    @property
    def num_nodes(self):
        return len(self.ref_coords)

    @property
    def num_triangles(self):
        return len(self.triangles)

    @property
    def displacements(self):
        return self.cur_coords - self.ref_coords

    def _edge_counts(self):
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(edges, axis=0, return_counts=True)

    @property
    def edges(self):
        """
        (k, 2) int unique undirected edges.
        """
        return self._edge_counts()[0]

    @property
    def is_closed(self):
        """
        True if every edge is shared by exactly two triangles.
        """
        return bool(len(self.triangles)) and bool(np.all(self._edge_counts()[1] == 2))

    @property
    def is_winding_consistent(self):
        """
        True if no directed edge appears twice, i.e. neighbouring triangles are oriented alike.
        """
        directed = self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        return len(np.unique(directed, axis=0)) == len(directed)

    @property
    def euler_number(self):
        return self.num_nodes - len(self.edges) + self.num_triangles

    def edge_lengths(self, current=True):
        coords = self.cur_coords if current else self.ref_coords
        edges = self.edges
        return np.linalg.norm(coords[edges[:, 1]] - coords[edges[:, 0]], axis=1)

    def face_areas(self, current=True):
        coords = self.cur_coords if current else self.ref_coords
        x1, x2, x3 = (coords[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(x2 - x1, x3 - x1), axis=1)

    def face_normals(self, current=True):
        coords = self.cur_coords if current else self.ref_coords
        x1, x2, x3 = (coords[self.triangles[:, i]] for i in range(3))
        normals = np.cross(x2 - x1, x3 - x1)
        return normals / np.linalg.norm(normals, axis=1, keepdims=True)

    def vertex_areas(self, current=True):
        """
        Lumped area per node (a third of every incident triangle).
        """
        areas = np.repeat(self.face_areas(current) / 3.0, 3)
        return np.bincount(self.triangles.ravel(), weights=areas, minlength=self.num_nodes)

    def vertex_normals(self, current=True):
        """
        Area-weighted unit normals per node.
        """
        coords = self.cur_coords if current else self.ref_coords
        x1, x2, x3 = (coords[self.triangles[:, i]] for i in range(3))
        weighted = np.cross(x2 - x1, x3 - x1)
        normals = np.zeros((self.num_nodes, 3))
        for i in range(3):
            normals += np.stack([np.bincount(self.triangles[:, i], weights=weighted[:, j],
                                             minlength=self.num_nodes) for j in range(3)], axis=1)
        return normals / np.linalg.norm(normals, axis=1, keepdims=True)

    def sha256(self):
        """
        Digest of the reference geometry and connectivity.
        """
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.ref_coords).tobytes())
        digest.update(np.ascontiguousarray(self.triangles).tobytes())
        digest.update(np.ascontiguousarray(self.anchored).tobytes())
        return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """
    Rotation followed by translation, x -> R x + t.

    Parameters
    ----------
    rotation: (3, 3) float
        Orthonormal matrix with determinant +1
    translation: (3,) float
        Translation in metres
    """
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = _frozen_array(self.rotation, shape=(3, 3))
        translation = _frozen_array(self.translation, shape=(3,))
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > _ORTHONORMAL_TOL or \
                abs(np.linalg.det(rotation) - 1.0) > _ORTHONORMAL_TOL:
            raise ValueError('rotation is not orthonormal with determinant +1')
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix):
        """
        From a (4, 4) homogeneous matrix.
        """
        matrix = np.asarray(matrix, dtype=float)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_quaternion(cls, quaternion, translation=(0.0, 0.0, 0.0)):
        """
        From a scalar-last (x, y, z, w) quaternion and a translation.
        """
        return cls(Rotation.from_quat(quaternion).as_matrix(), translation)

    def as_matrix(self):
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def as_quaternion(self):
        return Rotation.from_matrix(self.rotation).as_quat()

    def apply(self, points):
        """
        Transform (n, 3) or (3,) points.
        """
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def apply_vector(self, vectors):
        """
        Rotate (n, 3) or (3,) free vectors.
        """
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def compose(self, other):
        """
        self o other: apply `other` first, then `self`.
        """
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def translated(self, offset):
        return RigidTransform(self.rotation, self.translation + np.asarray(offset, dtype=float))

    def __matmul__(self, other):
        return self.compose(other)

    def to_dict(self):
        return {'quaternion': self.as_quaternion().tolist(), 'translation': self.translation.tolist()}

    @classmethod
    def from_dict(cls, data):
        if 'matrix' in data:
            return cls.from_matrix(data['matrix'])
        return cls.from_quaternion(data.get('quaternion', (0.0, 0.0, 0.0, 1.0)),
                                   data.get('translation', (0.0, 0.0, 0.0)))


def compose(a, b):
    """
    Composition a o b of two rigid transforms.
    """
    return a.compose(b)


def invert(a):
    """
    Inverse of a rigid transform.
    """
    return a.inverse()


def frame_from_direction(direction):
    """
    Rotation whose third column is `direction`.
    The first column is the world x axis made orthogonal to it (world y if they are parallel).
    """
    z = np.asarray(direction, dtype=float)
    z = z / np.linalg.norm(z)
    reference = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = reference - reference.dot(z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


class IndenterKind(str, enum.Enum):
    SPHERE = 'sphere'
    FLAT_CYLINDER = 'flat_cylinder'
    CUBE = 'cube'
    RING = 'ring'
    EDGE = 'edge'


DIMENSION_NAMES = {
    IndenterKind.SPHERE: ('radius',),
    IndenterKind.FLAT_CYLINDER: ('radius', 'height'),
    IndenterKind.CUBE: ('side',),
    IndenterKind.RING: ('major_radius', 'minor_radius'),
    IndenterKind.EDGE: ('length', 'side'),
}

# the edge prism is rotated about its long axis so that an edge leads along +z
_EDGE_ROTATION = Rotation.from_euler('x', 45.0, degrees=True).as_matrix()

# face distances closer than this are treated as tied
_TIE_TOLERANCE = 1e-12


def _unit_radial(q):
    rho = np.hypot(q[:, 0], q[:, 1])
    radial = np.zeros((len(q), 2))
    radial[:, 0] = 1.0
    nonzero = rho > 0
    radial[nonzero] = q[nonzero, :2] / rho[nonzero, None]
    return rho, radial


def _sign(values):
    return np.where(values < 0, -1.0, 1.0)


def _sdf_sphere(q, radius):
    norm = np.linalg.norm(q, axis=1)
    grad = np.tile([0.0, 0.0, 1.0], (len(q), 1))
    nonzero = norm > 0
    grad[nonzero] = q[nonzero] / norm[nonzero, None]
    return norm - radius, grad


def _sdf_box(q, half_extents, frame=None):
    """
    Exact box distance. Where several faces are equally close the gradient is the
    lexicographically smallest of their normals, compared after mapping by `frame`.
    """
    sign = _sign(q)
    d = np.abs(q) - half_extents
    outside = np.maximum(d, 0.0)
    out_norm = np.linalg.norm(outside, axis=1)
    distance = out_norm + np.minimum(d.max(axis=1), 0.0)

    grad = np.zeros_like(q)
    out = out_norm > 0
    grad[out] = sign[out] * outside[out] / out_norm[out, None]
    rows = np.flatnonzero(~out)
    inner = d[rows]
    axis = np.argmax(inner, axis=1)
    grad[rows, axis] = sign[rows, axis]

    tied = inner >= inner.max(axis=1, keepdims=True) - _TIE_TOLERANCE
    frame = np.eye(3) if frame is None else frame
    for i in np.flatnonzero(tied.sum(axis=1) > 1):
        row = rows[i]
        candidates = np.eye(3)[tied[i]] * sign[row, tied[i]][:, None]
        mapped = candidates @ frame.T
        # lexsort keys are read last-first
        grad[row] = candidates[np.lexsort(mapped.T[::-1])[0]]
    return distance, grad


def _sdf_flat_cylinder(q, radius, half_height):
    rho, radial = _unit_radial(q)
    sz = _sign(q[:, 2])
    d = np.stack([rho - radius, np.abs(q[:, 2]) - half_height], axis=1)
    outside = np.maximum(d, 0.0)
    out_norm = np.linalg.norm(outside, axis=1)
    distance = out_norm + np.minimum(d.max(axis=1), 0.0)

    grad = np.zeros_like(q)
    out = out_norm > 0
    grad[out, :2] = radial[out] * (outside[out, 0] / out_norm[out])[:, None]
    grad[out, 2] = sz[out] * outside[out, 1] / out_norm[out]
    side = ~out & (d[:, 0] >= d[:, 1])
    cap = ~out & ~side
    grad[side, :2] = radial[side]
    grad[cap, 2] = sz[cap]
    return distance, grad


def _sdf_torus(q, major_radius, minor_radius):
    rho, radial = _unit_radial(q)
    qx = rho - major_radius
    qz = q[:, 2]
    norm = np.hypot(qx, qz)
    grad = np.zeros_like(q)
    grad[:, :2] = radial
    nonzero = norm > 0
    grad[nonzero, :2] = radial[nonzero] * (qx[nonzero] / norm[nonzero])[:, None]
    grad[nonzero, 2] = qz[nonzero] / norm[nonzero]
    return norm - minor_radius, grad


@dataclass(frozen=True, eq=False)
class IndenterShape:
    """
    Rigid indenter with analytic signed distance.

    Parameters
    ----------
    kind: IndenterKind or str
        One of sphere, flat_cylinder, cube, ring, edge
    dimensions: tuple of float
        Kind-specific lengths in metres, see DIMENSION_NAMES
    pose: RigidTransform
        Pose of the local frame (local +z is the indentation direction)
    name: None or str
        Name of the indenter, e.g. 'sphere_medium'
    """
    kind: IndenterKind
    dimensions: tuple
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    name: str = None

    def __post_init__(self):
        kind = IndenterKind(self.kind)
        dimensions = tuple(float(d) for d in np.atleast_1d(self.dimensions))
        if len(dimensions) != len(DIMENSION_NAMES[kind]):
            raise ValueError('{} expects dimensions {}, got {}'.format(kind.value, DIMENSION_NAMES[kind], dimensions))
        if not all(d > 0 for d in dimensions):
            raise ValueError('indenter dimensions must be strictly positive: {}'.format(dimensions))
        if kind == IndenterKind.RING and dimensions[1] >= dimensions[0]:
            raise ValueError('ring minor radius must be smaller than its major radius')
        object.__setattr__(self, 'kind', kind)
        object.__setattr__(self, 'dimensions', dimensions)
        if self.name is None:
            object.__setattr__(self, 'name', kind.value)

    @property
    def tip_offset(self):
        """
        Distance from the local origin to the leading tip along local +z.
        """
        d = self.dimensions
        if self.kind == IndenterKind.SPHERE:
            return d[0]
        elif self.kind == IndenterKind.FLAT_CYLINDER:
            return 0.5 * d[1]
        elif self.kind == IndenterKind.CUBE:
            return 0.5 * d[0]
        elif self.kind == IndenterKind.RING:
            return d[1]
        # the edge rests on a ridge of its square section
        return d[1] / np.sqrt(2.0)

    @property
    def bounding_radius(self):
        """
        Radius of a ball about the local origin enclosing the indenter.
        """
        d = self.dimensions
        if self.kind == IndenterKind.SPHERE:
            return d[0]
        elif self.kind == IndenterKind.FLAT_CYLINDER:
            return np.hypot(d[0], 0.5 * d[1])
        elif self.kind == IndenterKind.CUBE:
            return 0.5 * np.sqrt(3.0) * d[0]
        elif self.kind == IndenterKind.RING:
            return d[0] + d[1]
        return np.sqrt(0.25 * d[0] ** 2 + 0.5 * d[1] ** 2)

    def with_pose(self, pose):
        return IndenterShape(self.kind, self.dimensions, pose, self.name)

    def local_signed_distance(self, q):
        """
        Signed distance and outward unit gradient of (n, 3) points given in the local frame.
        """
        q = np.atleast_2d(np.asarray(q, dtype=float))
        d = self.dimensions
        if self.kind == IndenterKind.SPHERE:
            return _sdf_sphere(q, d[0])
        if self.kind == IndenterKind.FLAT_CYLINDER:
            return _sdf_flat_cylinder(q, d[0], 0.5 * d[1])
        if self.kind == IndenterKind.CUBE:
            return _sdf_box(q, np.full(3, 0.5 * d[0]))
        if self.kind == IndenterKind.RING:
            return _sdf_torus(q, d[0], d[1])
        if self.kind == IndenterKind.EDGE:
            distance, grad = _sdf_box(q @ _EDGE_ROTATION, np.array([0.5 * d[0], 0.5 * d[1], 0.5 * d[1]]),
                                     frame=_EDGE_ROTATION)
            return distance, grad @ _EDGE_ROTATION.T
        raise NotImplementedError(self.kind)

    def signed_distance(self, points):
        """
        Signed distance (negative inside) and outward unit gradient of (n, 3) world points.

        Returns
        -------
        distance: (n,) float
        gradient: (n, 3) float
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        local = (points - self.pose.translation) @ self.pose.rotation
        distance, grad = self.local_signed_distance(local)
        return distance, grad @ self.pose.rotation.T

    def to_dict(self):
        return {'name': self.name, 'kind': self.kind.value, 'dimensions': list(self.dimensions),
                'pose': self.pose.to_dict()}

    @classmethod
    def from_dict(cls, data):
        pose = RigidTransform.from_dict(data['pose']) if 'pose' in data else RigidTransform.identity()
        return cls(data['kind'], tuple(data['dimensions']), pose, data.get('name'))


def signed_distance(shape, point):
    """
    Signed distance of a point (or (n, 3) points) to a shape, with the outward unit gradient.

    Parameters
    ----------
    shape: IndenterShape or CoreBody
        Body with a `signed_distance` method
    point: (3,) or (n, 3) float
        Query point(s) in the world frame

    Returns
    -------
    distance: float or (n,) float
    gradient: (3,) or (n, 3) float
    """
    point = np.asarray(point, dtype=float)
    distance, grad = shape.signed_distance(point)
    if point.ndim == 1:
        return float(distance[0]), grad[0]
    return distance, grad


def default_indenters(radius=NOMINAL_RADIUS):
    """
    Named indenter family sized at half, equal or double the sensor radius.

    Returns
    -------
    as_dict: dict of str -> IndenterShape
    """
    shapes = [
        IndenterShape('sphere', (0.5 * radius,), name='sphere_small'),
        IndenterShape('sphere', (radius,), name='sphere_medium'),
        IndenterShape('sphere', (2.0 * radius,), name='sphere_large'),
        IndenterShape('flat_cylinder', (0.5 * radius, 2.0 * radius), name='flat_cylinder'),
        IndenterShape('cube', (radius,), name='cube'),
        IndenterShape('ring', (0.5 * radius, 0.15 * radius), name='ring'),
        IndenterShape('edge', (2.0 * radius, 0.5 * radius), name='edge'),
    ]
    return {shape.name: shape for shape in shapes}


def shapes_from_config(config):
    """
    Indenter shapes from a JSON config (a path or an already parsed dict with `shapes`).
    """
    if isinstance(config, (str, Path)):
        with open(config, 'r') as fin:
            config = json.load(fin)
    return {shape.name: shape for shape in (IndenterShape.from_dict(s) for s in config.get('shapes', []))}


def shapes_to_config(shapes, filepath=None):
    """
    JSON config of indenter shapes, optionally written to `filepath`.
    """
    config = {'shapes': [shape.to_dict() for shape in shapes]}
    if filepath is not None:
        with open(filepath, 'w') as fout:
            json.dump(config, fout, indent=2)
    return config


def _capsule_profile(radius, cyl_length, spacing):
    """
    Meridian of a capsule sampled at uniform arc length, from the proximal to the distal pole.
    """
    quarter = 0.5 * np.pi * radius
    total = 2.0 * quarter + cyl_length
    num_segments = int(np.ceil(total / spacing - 1e-9))
    s = np.linspace(0.0, total, num_segments + 1)

    x = np.empty_like(s)
    rho = np.empty_like(s)
    proximal = s <= quarter
    cylinder = ~proximal & (s < quarter + cyl_length)
    distal = ~proximal & ~cylinder

    theta = s[proximal] / radius
    x[proximal] = -radius * np.cos(theta)
    rho[proximal] = radius * np.sin(theta)
    x[cylinder] = s[cylinder] - quarter
    rho[cylinder] = radius
    theta = (s[distal] - quarter - cyl_length) / radius
    x[distal] = cyl_length + radius * np.sin(theta)
    rho[distal] = radius * np.cos(theta)
    rho[0] = rho[-1] = 0.0
    return x, rho


def _capsule_mesh(radius, cyl_length, resolution):
    """
    Closed, outward oriented structured capsule mesh, mirror symmetric about y = 0.

    Returns
    -------
    vertices: (n, 3) float
    faces: (m, 3) int
    """
    if radius <= 0 or cyl_length < 0 or resolution <= 0:
        raise ValueError('capsule needs radius > 0, cyl_length >= 0 and resolution > 0, '
                         'got {}, {}, {}'.format(radius, cyl_length, resolution))
    # quads are split along a diagonal, so both quad sides stay below resolution / sqrt(2)
    spacing = resolution / np.sqrt(2.0)
    num_phi = int(np.ceil(2.0 * np.pi * radius / spacing - 1e-9))
    num_phi += num_phi % 2
    x, rho = _capsule_profile(radius, cyl_length, spacing)
    num_rings = len(x) - 2
    if num_phi < 6 or num_rings < 3:
        raise ValueError('resolution {} too coarse to form a closed cap on radius {}'.format(resolution, radius))

    phi = 2.0 * np.pi * np.arange(num_phi) / num_phi
    ring_x = np.repeat(x[1:-1], num_phi)
    ring_rho = np.repeat(rho[1:-1], num_phi)
    ring_phi = np.tile(phi, num_rings)
    # phi = 0 is the ventral bottom (-z)
    ring_points = np.stack([ring_x, ring_rho * np.sin(ring_phi), -ring_rho * np.cos(ring_phi)], axis=1)
    vertices = np.concatenate([[[x[0], 0.0, 0.0]], ring_points, [[x[-1], 0.0, 0.0]]])
    distal_pole = len(vertices) - 1

    k = np.arange(num_phi)
    k1 = (k + 1) % num_phi
    faces = [np.stack([1 + k1, 1 + k, np.zeros(num_phi, dtype=int)], axis=1)]
    first_half = (k < num_phi // 2)[:, None]
    for i in range(num_rings - 1):
        a = 1 + i * num_phi + k
        b = 1 + i * num_phi + k1
        c = 1 + (i + 1) * num_phi + k1
        d = 1 + (i + 1) * num_phi + k
        # the diagonal flips at the symmetry plane so the mesh mirrors onto itself
        faces.append(np.where(first_half, np.stack([a, b, c], axis=1), np.stack([a, b, d], axis=1)))
        faces.append(np.where(first_half, np.stack([a, c, d], axis=1), np.stack([b, c, d], axis=1)))
    last = 1 + (num_rings - 1) * num_phi
    faces.append(np.stack([last + k, last + k1, np.full(num_phi, distal_pole)], axis=1))
    faces = np.concatenate(faces).astype(np.int64)

    if _signed_volume(vertices, faces) < 0:
        faces = faces[:, [0, 2, 1]]
    return vertices, faces


def build_sensor_skin(radius=6.7e-3, cyl_length=8e-3, resolution=5e-4, strict=True, dorsal_fraction=0.5):
    """
    Skin of the sensor as a hemisphere-capped cylinder along +x.

    Proximal-cap nodes (x <= 0) and the dorsal strip (z >= dorsal_fraction * radius)
    are anchored to the core.

    Parameters
    ----------
    radius: float
        Mid-surface radius (m)
    cyl_length: float
        Length of the cylindrical section (m), 0 gives a sphere
    resolution: float
        Maximum edge length (m)
    strict: bool
        Enforce the 0.5 mm resolution bound if set True
    dorsal_fraction: float
        Height of the anchored dorsal strip as a fraction of the radius

    Returns
    -------
    as_mesh: TriMesh
        Closed, outward oriented skin mesh
    """
    if radius <= 0 or cyl_length < 0:
        raise ValueError('skin needs radius > 0 and cyl_length >= 0, got {} and {}'.format(radius, cyl_length))
    if strict and resolution > MAX_RESOLUTION * (1 + 1e-12):
        raise ValueError('resolution {} exceeds the {} m bound'.format(resolution, MAX_RESOLUTION))
    vertices, faces = _capsule_mesh(radius, cyl_length, resolution)
    tol = 1e-12
    anchored = (vertices[:, 0] <= tol) | (vertices[:, 2] >= dorsal_fraction * radius - tol)
    logger.debug('skin mesh: {} nodes, {} triangles, {} anchored'.format(len(vertices), len(faces), anchored.sum()))
    return TriMesh.from_coords(vertices, faces, anchored)


@dataclass(frozen=True, eq=False)
class CoreBody:
    """
    Rigid core of the sensor: a capsule with exact signed distance and a mesh for volumes.
    """
    radius: float
    cyl_length: float
    mesh: TriMesh

    def signed_distance(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        closest = np.zeros_like(points)
        closest[:, 0] = np.clip(points[:, 0], 0.0, self.cyl_length)
        offset = points - closest
        norm = np.linalg.norm(offset, axis=1)
        grad = np.tile([0.0, 0.0, -1.0], (len(points), 1))
        nonzero = norm > 0
        grad[nonzero] = offset[nonzero] / norm[nonzero, None]
        return norm - self.radius, grad

    def project(self, points):
        """
        Closest points on the core surface.
        """
        distance, grad = self.signed_distance(points)
        return np.atleast_2d(points) - distance[:, None] * grad


def build_core(radius=6.7e-3, cyl_length=8e-3, gap=1e-3, resolution=1e-3):
    """
    Core of the sensor: the skin capsule offset inward by the unpressurized fluid gap.
    """
    if gap <= 0 or gap >= radius:
        raise ValueError('fluid gap must lie in (0, radius), got {}'.format(gap))
    vertices, faces = _capsule_mesh(radius - gap, cyl_length, resolution)
    mesh = TriMesh.from_coords(vertices, faces, np.ones(len(vertices), dtype=bool))
    return CoreBody(radius - gap, cyl_length, mesh)


def _signed_volume(coords, triangles):
    # centring keeps the sum translation invariant in floating point
    coords = coords - coords.mean(axis=0)
    x1, x2, x3 = (coords[triangles[:, i]] for i in range(3))
    return float(np.einsum('ij,ij->', x1, np.cross(x2, x3)) / 6.0)


def enclosed_volume(mesh, current=True):
    """
    Volume enclosed by a closed, consistently oriented mesh (divergence theorem).

    Parameters
    ----------
    mesh: TriMesh
        Closed mesh
    current: bool
        Use the current coordinates if set True, else the reference coordinates

    Returns
    -------
    as_float: float
        Enclosed volume (m^3)
    """
    if not mesh.is_closed:
        raise ValueError('enclosed volume needs a closed mesh (boundary edges present)')
    return _signed_volume(mesh.cur_coords if current else mesh.ref_coords, mesh.triangles)


def volume_gradient(coords, triangles):
    """
    Derivative of the enclosed volume with respect to every nodal coordinate.

    Returns
    -------
    as_float: (n, 3) float
    """
    centred = coords - coords.mean(axis=0)
    x1, x2, x3 = (centred[triangles[:, i]] for i in range(3))
    contributions = np.stack([np.cross(x2, x3), np.cross(x3, x1), np.cross(x1, x2)], axis=1) / 6.0
    gradient = np.zeros((len(coords), 3))
    for i in range(3):
        gradient += np.stack([np.bincount(triangles[:, i], weights=contributions[:, i, j],
                                          minlength=len(coords)) for j in range(3)], axis=1)
    return gradient


def save_obj(mesh, filepath, current=True):
    """
    Write a mesh to a Wavefront OBJ file (vertices and triangular faces only).
    """
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    mesh.to_trimesh(current).export(str(filepath), file_type='obj', include_normals=False,
                                    include_color=False, include_texture=False)


def load_obj(filepath, anchored=None):
    """
    Read a triangle mesh from a Wavefront OBJ file.
    """
    mesh = trimesh.load(str(filepath), file_type='obj', process=False, force='mesh')
    return TriMesh.from_trimesh(mesh, anchored)
