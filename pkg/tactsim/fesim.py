"""
fesim.py
--------

Quasi-static finite element simulation of the fluid-backed membrane sensor.

The skin is discretised with constant strain membrane triangles made of an
incompressible Neo-Hookean material. The fluid between skin and core is a
single pressure unknown enforcing the cavity volume, and contact with the
core (frictionless) and the indenter (regularised Coulomb friction) is
handled by penalty forces. Every increment is solved monolithically for the
free nodal coordinates and the cavity pressure by a damped Newton iteration.
"""

import enum
import json
import warnings
from dataclasses import dataclass, field, replace, fields
from multiprocessing import Pool
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve, MatrixRankWarning
from scipy.spatial.transform import Rotation, Slerp
from tqdm import tqdm

from .geometry import RigidTransform, TriMesh, enclosed_volume, volume_gradient, frame_from_direction, \
    _signed_volume
from .logger import attach_to_log

logger = attach_to_log()

PARAM_NAMES = ('t_s', 'mu_NH', 'mu_fr', 'T_fl')

# calibration bounds of the four physical parameters, in PARAM_NAMES order
PARAM_BOUNDS = ((1e-3, 2e-3), (1e5, 1e6), (0.1, 1.0), (25.0, 35.0))

# optimum found by calibrating against measured force trajectories
CALIBRATED_VALUES = (1.57e-3, 2.80e5, 0.186, 29.19)

MIN_REFERENCE_AREA = 1e-14
MIN_STRETCH_PRODUCT = 1e-6


class SingularConfigurationError(ValueError):
    """
    Degenerate reference triangle or collapsed current triangle.
    """


class ConvergenceError(RuntimeError):
    """
    Newton iteration failed to reach the residual and volume tolerances.
    """


_SOLVE_ERRORS = (SingularConfigurationError, ConvergenceError, np.linalg.LinAlgError, RuntimeError)


@dataclass(frozen=True)
class SimParams:
    """
    Physical parameters of the sensor model.

    Parameters
    ----------
    t_s: float
        Skin thickness (m)
    mu_NH: float
        Neo-Hookean stiffness (Pa)
    mu_fr: float
        Indenter-skin friction coefficient
    T_fl: float
        Fluid temperature (degC)
    beta_T: float
        Volumetric thermal expansion coefficient (1/degC)
    T_ref: float
        Temperature of zero expansion (degC)
    target_thickness: float
        Pressurized sensor thickness to match (m)
    """
    t_s: float = CALIBRATED_VALUES[0]
    mu_NH: float = CALIBRATED_VALUES[1]
    mu_fr: float = CALIBRATED_VALUES[2]
    T_fl: float = CALIBRATED_VALUES[3]
    beta_T: float = 0.01
    T_ref: float = 25.0
    target_thickness: float = 15.1e-3

    def __post_init__(self):
        if self.t_s <= 0 or self.mu_NH <= 0:
            raise ValueError('skin thickness and stiffness must be positive, got t_s={}, mu_NH={}'.format(
                self.t_s, self.mu_NH))
        if self.mu_fr < 0:
            raise ValueError('friction coefficient must be non-negative, got {}'.format(self.mu_fr))
        if self.target_thickness <= 0:
            raise ValueError('target thickness must be positive, got {}'.format(self.target_thickness))

    def as_vector(self):
        """
        Calibratable parameters (t_s, mu_NH, mu_fr, T_fl) as an array.
        """
        return np.array([getattr(self, name) for name in PARAM_NAMES])

    def with_vector(self, vector):
        return replace(self, **{name: float(value) for name, value in zip(PARAM_NAMES, vector)})

    def within_bounds(self, bounds=PARAM_BOUNDS):
        return all(lower <= value <= upper for value, (lower, upper) in zip(self.as_vector(), bounds))

    @property
    def expansion(self):
        """
        Relative cavity volume change of the fluid at T_fl.
        """
        return self.beta_T * (self.T_fl - self.T_ref)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class SolverSettings:
    """
    Numerical settings of the Newton solver.

    Parameters
    ----------
    k_pen: float
        Indenter penalty stiffness (N/m)
    k_t: None or float
        Tangential (stick) stiffness (N/m), None for k_pen
    core_stiffness: None or float
        Skin-core penalty stiffness (N/m), None for the through-thickness
        compression stiffness 3 mu_NH a / t_s of every node of area a
    tol_rel: float
        Residual tolerance relative to max(1 N, contact force)
    tol_vol: float
        Cavity volume tolerance relative to the target volume
    max_iters: int
        Newton iterations per increment
    max_halvings: int
        Line search step halvings per iteration
    max_step: float
        Largest nodal displacement of one Newton step (m)
    max_cutbacks: int
        Times a failed increment may be split into half steps
    n_pressurize: int
        Sub-increments of the pressurization ramp
    regularization: float
        Diagonal shift of the tangent relative to its largest diagonal entry
    """
    k_pen: float = 1e6
    k_t: float = None
    core_stiffness: float = None
    tol_rel: float = 1e-6
    tol_vol: float = 1e-6
    max_iters: int = 50
    max_halvings: int = 20
    max_step: float = 5e-4
    max_cutbacks: int = 4
    n_pressurize: int = 10
    regularization: float = 1e-9

    def __post_init__(self):
        if self.k_pen <= 0:
            raise ValueError('penalty stiffness must be positive, got {}'.format(self.k_pen))
        if self.max_iters < 1 or self.n_pressurize < 1:
            raise ValueError('max_iters and n_pressurize must be at least 1')
        if self.max_step <= 0 or self.max_cutbacks < 0:
            raise ValueError('max_step must be positive and max_cutbacks non-negative, got {} and {}'.format(
                self.max_step, self.max_cutbacks))

    @property
    def tangential_stiffness(self):
        return self.k_pen if self.k_t is None else self.k_t

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


class LoadStep(str, enum.Enum):
    PRESSURIZE = 'pressurize'
    INDENT = 'indent'


@dataclass
class SimState:
    """
    Mutable state of a simulation, owned by one MembraneSolver.

    Parameters
    ----------
    skin: TriMesh
        Skin mesh with the last converged coordinates
    core: CoreBody
        Rigid core
    cavity_pressure: float
        Fluid pressure (Pa)
    indenter: None or IndenterShape
        Indenter at its last converged pose
    load_step: LoadStep
        Current load step
    increment_index: int
        Index of the last converged increment within the load step
    converged: bool
        False if the last attempted increment diverged
    target_volume: float
        Cavity volume enforced by the fluid (m^3)
    tangential_forces: (n, 3) float
        Friction forces on the skin at the last converged increment
    """
    skin: TriMesh
    core: object
    cavity_pressure: float = 0.0
    indenter: object = None
    load_step: LoadStep = LoadStep.PRESSURIZE
    increment_index: int = 0
    converged: bool = True
    target_volume: float = None
    tangential_forces: np.ndarray = None

    def copy(self):
        tangential = None if self.tangential_forces is None else self.tangential_forces.copy()
        return replace(self, tangential_forces=tangential)


@dataclass
class IncrementRecord:
    """
    Converged outputs of one load increment.

    Parameters
    ----------
    increment: int
        Increment index, 0 being the pressurized reference
    indenter_displacement: (3,) float
        Indenter travel since first contact (m)
    net_force: (3,) float
        Force exerted by the skin on the indenter (N)
    nodal_displacements: (n, 3) float
        Skin displacements relative to the pressurized reference (m)
    cavity_pressure: float
        Fluid pressure (Pa)
    sensor_thickness: float
        Overall sensor thickness (m)
    diverged: bool
        True if this increment did not converge; values are then those of the last converged one
    pressure_change: float
        Fluid pressure relative to the pressurized reference (Pa)
    iterations: int
        Newton iterations spent on this increment
    """
    increment: int
    indenter_displacement: np.ndarray
    net_force: np.ndarray
    nodal_displacements: np.ndarray
    cavity_pressure: float
    sensor_thickness: float
    diverged: bool = False
    pressure_change: float = 0.0
    iterations: int = 0

    @property
    def force_magnitude(self):
        return float(np.linalg.norm(self.net_force))

    def to_json_dict(self):
        return {'step': int(self.increment),
                'indenter_disp': [float(v) for v in self.indenter_displacement],
                'net_force': [float(v) for v in self.net_force],
                'pressure': float(self.cavity_pressure),
                'pressure_change': float(self.pressure_change),
                'thickness': float(self.sensor_thickness),
                'diverged': bool(self.diverged),
                'iterations': int(self.iterations)}


class MembraneElements:
    """
    Reference geometry of constant strain membrane triangles.

    Every triangle gets an in-plane orthonormal basis in which the reference
    edge matrix is inverted once, so that F = sum_n x_n (x) g_n maps the 2D
    reference plane to the current 3D configuration.
    """

    def __init__(self, ref_coords, triangles):
        ref_coords = np.asarray(ref_coords, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self.num_nodes = len(ref_coords)
        x1, x2, x3 = (ref_coords[self.triangles[:, i]] for i in range(3))
        d21 = x2 - x1
        d31 = x3 - x1
        normal = np.cross(d21, d31)
        double_area = np.linalg.norm(normal, axis=1)
        self.areas = 0.5 * double_area
        degenerate = self.areas <= MIN_REFERENCE_AREA
        if degenerate.any():
            raise SingularConfigurationError('{} degenerate reference triangle(s), first is {}'.format(
                degenerate.sum(), np.flatnonzero(degenerate)[0]))

        e1 = d21 / np.linalg.norm(d21, axis=1, keepdims=True)
        e2 = np.cross(normal / double_area[:, None], e1)
        dm = np.empty((len(self.triangles), 2, 2))
        dm[:, 0, 0] = np.einsum('ij,ij->i', d21, e1)
        dm[:, 0, 1] = np.einsum('ij,ij->i', d31, e1)
        dm[:, 1, 0] = np.einsum('ij,ij->i', d21, e2)
        dm[:, 1, 1] = np.einsum('ij,ij->i', d31, e2)
        dm_inv = np.linalg.inv(dm)

        self.shape_gradients = np.empty((len(self.triangles), 3, 2))
        self.shape_gradients[:, 1] = dm_inv[:, 0]
        self.shape_gradients[:, 2] = dm_inv[:, 1]
        self.shape_gradients[:, 0] = -(dm_inv[:, 0] + dm_inv[:, 1])

        dofs = (3 * self.triangles[:, :, None] + np.arange(3)).reshape(-1, 9)
        self.rows = np.repeat(dofs, 9, axis=1).ravel()
        self.cols = np.tile(dofs, (1, 9)).ravel()

    def deformation_gradients(self, coords):
        """
        (m, 3, 2) deformation gradients at current coordinates.
        """
        return np.einsum('eni,enj->eij', coords[self.triangles], self.shape_gradients)

    @staticmethod
    def _metrics(deformation):
        c = np.einsum('eki,ekj->eij', deformation, deformation)
        det_c = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] * c[:, 1, 0]
        if np.any(~np.isfinite(det_c)) or np.any(det_c < MIN_STRETCH_PRODUCT ** 2):
            raise SingularConfigurationError('collapsed current triangle (stretch product below {})'.format(
                MIN_STRETCH_PRODUCT))
        c_inv = np.empty_like(c)
        c_inv[:, 0, 0] = c[:, 1, 1]
        c_inv[:, 1, 1] = c[:, 0, 0]
        c_inv[:, 0, 1] = -c[:, 0, 1]
        c_inv[:, 1, 0] = -c[:, 1, 0]
        c_inv /= det_c[:, None, None]
        return c, c_inv, det_c

    def energies(self, coords, t_s, mu_NH):
        """
        (m,) strain energies of the triangles.
        """
        c, _, det_c = self._metrics(self.deformation_gradients(coords))
        invariant = c[:, 0, 0] + c[:, 1, 1] + 1.0 / det_c
        return 0.5 * mu_NH * (invariant - 3.0) * self.areas * t_s

    def gradient(self, coords, t_s, mu_NH):
        """
        (n, 3) derivative of the total strain energy with respect to the nodal coordinates.
        """
        deformation = self.deformation_gradients(coords)
        _, c_inv, det_c = self._metrics(deformation)
        stress = mu_NH * (deformation - deformation @ c_inv / det_c[:, None, None])
        local = np.einsum('eij,enj->eni', stress, self.shape_gradients) * (self.areas * t_s)[:, None, None]
        return _scatter_nodal(self.triangles, local, self.num_nodes)

    def stiffness(self, coords, t_s, mu_NH):
        """
        Sparse (3n, 3n) Hessian of the total strain energy.
        """
        deformation = self.deformation_gradients(coords)
        c, c_inv, det_c = self._metrics(deformation)
        f_c_inv = deformation @ c_inv
        d_stress = np.empty((len(deformation), 3, 2, 3, 2))
        for k in range(3):
            for l in range(2):
                d_def = np.zeros_like(deformation)
                d_def[:, k, l] = 1.0
                d_c = np.transpose(d_def, (0, 2, 1)) @ deformation + np.transpose(deformation, (0, 2, 1)) @ d_def
                c_inv_d_c = c_inv @ d_c
                trace = c_inv_d_c[:, 0, 0] + c_inv_d_c[:, 1, 1]
                d_q = (d_def @ c_inv - f_c_inv @ d_c @ c_inv - f_c_inv * trace[:, None, None]) / det_c[:, None, None]
                d_stress[:, k, l] = mu_NH * (d_def - d_q)
        g = self.shape_gradients
        local = np.einsum('eklij,enj,eml->enimk', d_stress, g, g) * (self.areas * t_s)[:, None, None, None, None]
        size = 3 * self.num_nodes
        return sparse.coo_matrix((local.ravel(), (self.rows, self.cols)), shape=(size, size)).tocsr()


def _scatter_nodal(triangles, local, num_nodes):
    """
    Sum (m, 3, 3) per-triangle nodal vectors into (n, 3), in a fixed order.
    """
    total = np.zeros((num_nodes, 3))
    for n in range(3):
        for i in range(3):
            total[:, i] += np.bincount(triangles[:, n], weights=local[:, n, i], minlength=num_nodes)
    return total


def _skew(vectors):
    skew = np.zeros(vectors.shape[:-1] + (3, 3))
    skew[..., 0, 1] = -vectors[..., 2]
    skew[..., 0, 2] = vectors[..., 1]
    skew[..., 1, 0] = vectors[..., 2]
    skew[..., 1, 2] = -vectors[..., 0]
    skew[..., 2, 0] = -vectors[..., 1]
    skew[..., 2, 1] = vectors[..., 0]
    return skew


def volume_hessian(coords, triangles):
    """
    Sparse (3n, 3n) second derivative of the enclosed volume of a closed mesh.
    """
    coords = coords - coords.mean(axis=0)
    triangles = np.asarray(triangles, dtype=np.int64)
    rows, cols, data = [], [], []
    block_rows = np.repeat(np.arange(3), 3)
    block_cols = np.tile(np.arange(3), 3)
    for a, b, c in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        block = -_skew(coords[triangles[:, c]]) / 6.0
        for (p, q, values) in ((a, b, block), (b, a, np.transpose(block, (0, 2, 1)))):
            rows.append((3 * triangles[:, p, None] + block_rows).ravel())
            cols.append((3 * triangles[:, q, None] + block_cols).ravel())
            data.append(values.reshape(-1, 9).ravel())
    size = 3 * len(coords)
    return sparse.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(size, size)).tocsr()


def membrane_energy(triangle_ref, triangle_cur, t_s, mu_NH):
    """
    Strain energy of one incompressible Neo-Hookean membrane triangle.

    W = (mu_NH / 2) (l1^2 + l2^2 + 1 / (l1^2 l2^2) - 3) A_ref t_s, where l1, l2 are
    the in-plane principal stretches.

    Parameters
    ----------
    triangle_ref: (3, 3) float
        Reference corner coordinates (m)
    triangle_cur: (3, 3) float
        Current corner coordinates (m)
    t_s: float
        Skin thickness (m)
    mu_NH: float
        Neo-Hookean stiffness (Pa)

    Returns
    -------
    as_float: float
        Strain energy (J)
    """
    elements = MembraneElements(np.asarray(triangle_ref, dtype=float), [[0, 1, 2]])
    return float(elements.energies(np.asarray(triangle_cur, dtype=float), t_s, mu_NH)[0])


def total_energy(mesh, params):
    """
    Strain energy of the whole skin at its current coordinates.
    """
    elements = MembraneElements(mesh.ref_coords, mesh.triangles)
    return float(elements.energies(mesh.cur_coords, params.t_s, params.mu_NH).sum())


def internal_forces(mesh, params):
    """
    Elastic nodal forces, the negative gradient of the total membrane energy.

    Returns
    -------
    as_float: (n, 3) float
        Forces (N)
    """
    elements = MembraneElements(mesh.ref_coords, mesh.triangles)
    return -elements.gradient(mesh.cur_coords, params.t_s, params.mu_NH)


def _core_volume(core):
    return enclosed_volume(core.mesh if hasattr(core, 'mesh') else core)


def cavity_constraint(mesh, core, params):
    """
    Residual and gradient of the fluid volume constraint.

    The cavity is the volume enclosed by the skin minus the volume of the core;
    its target is the reference cavity volume scaled by the thermal expansion
    of the fluid.

    Parameters
    ----------
    mesh: TriMesh
        Closed skin mesh
    core: CoreBody or TriMesh
        Closed core
    params: SimParams
        Physical parameters

    Returns
    -------
    residual: float
        V_cavity(current) - V_target (m^3)
    gradient: (n, 3) float
        Derivative of the cavity volume with respect to the skin nodes
    """
    core_volume = _core_volume(core)
    reference = enclosed_volume(mesh, current=False) - core_volume
    target = reference * (1.0 + params.expansion)
    current = enclosed_volume(mesh) - core_volume
    return current - target, volume_gradient(mesh.cur_coords, mesh.triangles)


@dataclass
class ContactResult:
    """
    Penalty contact forces on the skin nodes and their linearisation.

    forces, tangential: (n, 3) forces on the skin (N); gaps: (n,) signed distances;
    normals: (n, 3) unit contact normals; active: (n,) penetrating nodes;
    normal_forces: (n,) normal force magnitudes; stiffness: (n, 3, 3) -df/dx per node.
    """
    forces: np.ndarray
    gaps: np.ndarray
    normals: np.ndarray
    active: np.ndarray
    normal_forces: np.ndarray
    tangential: np.ndarray
    stiffness: np.ndarray
    slipping: np.ndarray

    @property
    def net_force(self):
        """
        Force transmitted to the contacting body (N).
        """
        return -self.forces.sum(axis=0)


def contact_forces(mesh, body, mu_fr=0.0, k_pen=1e6, k_t=None, slip=None, previous_tangential=None):
    """
    Penalty contact forces of a rigid body on the skin nodes.

    Penetrating nodes (signed distance g < 0) receive f_n = -k_pen g n. With
    mu_fr > 0 and a slip history, a tangential spring opposes the slip of the
    node relative to the body since the last converged increment; its force is
    clamped to mu_fr |f_n| (regularised Coulomb friction).

    Parameters
    ----------
    mesh: TriMesh or (n, 3) float
        Skin (current coordinates are used) or the coordinates themselves
    body: IndenterShape or CoreBody
        Rigid body with a signed distance
    mu_fr: float
        Friction coefficient, 0 for frictionless contact
    k_pen: float or (n,) float
        Normal penalty stiffness (N/m)
    k_t: None or float or (n,) float
        Tangential stiffness (N/m), None for k_pen
    slip: None or (n, 3) float
        Node motion relative to the body since the last converged increment (m)
    previous_tangential: None or (n, 3) float
        Tangential forces at the last converged increment (N)

    Returns
    -------
    as_result: ContactResult
    """
    coords = mesh.cur_coords if isinstance(mesh, TriMesh) else np.asarray(mesh, dtype=float)
    if np.any(np.asarray(k_pen) <= 0):
        raise ValueError('penalty stiffness must be positive')
    num_nodes = len(coords)
    gaps, normals = body.signed_distance(coords)
    active = gaps < 0
    k_normal = np.broadcast_to(np.asarray(k_pen, dtype=float), (num_nodes,))
    normal_forces = np.where(active, -k_normal * gaps, 0.0)

    forces = normal_forces[:, None] * normals
    outer = np.einsum('ni,nj->nij', normals, normals)
    stiffness = np.where(active[:, None, None], k_normal[:, None, None] * outer, 0.0)
    tangential = np.zeros((num_nodes, 3))
    slipping = np.zeros(num_nodes, dtype=bool)

    if mu_fr > 0 and slip is not None:
        k_tan = np.broadcast_to(np.asarray(k_normal if k_t is None else k_t, dtype=float), (num_nodes,))
        projector = np.eye(3) - outer
        previous = np.zeros((num_nodes, 3)) if previous_tangential is None else previous_tangential
        trial = np.einsum('nij,nj->ni', projector, previous - k_tan[:, None] * np.asarray(slip))
        magnitude = np.linalg.norm(trial, axis=1)
        limit = mu_fr * normal_forces
        slipping = active & (magnitude > limit)
        scale = np.ones(num_nodes)
        scale[slipping] = limit[slipping] / magnitude[slipping]
        tangential = np.where(active[:, None], trial * scale[:, None], 0.0)
        forces = forces + tangential

        # return map linearisation, the variation of the normal is neglected
        direction = np.zeros((num_nodes, 3))
        direction[slipping] = trial[slipping] / magnitude[slipping, None]
        stick_tangent = k_tan[:, None, None] * projector
        slip_tangent = (scale * k_tan)[:, None, None] * (projector - np.einsum('ni,nj->nij', direction, direction)) \
            + mu_fr * k_normal[:, None, None] * np.einsum('ni,nj->nij', direction, normals)
        friction_tangent = np.where(slipping[:, None, None], slip_tangent, stick_tangent)
        stiffness = stiffness + np.where(active[:, None, None], friction_tangent, 0.0)

    return ContactResult(forces, gaps, normals, active, normal_forces, tangential, stiffness, slipping & active)


def _block_diagonal(blocks):
    num_nodes = len(blocks)
    base = 3 * np.repeat(np.arange(num_nodes), 9)
    rows = base + np.tile(np.repeat(np.arange(3), 3), num_nodes)
    cols = base + np.tile(np.tile(np.arange(3), 3), num_nodes)
    return sparse.coo_matrix((blocks.ravel(), (rows, cols)), shape=(3 * num_nodes, 3 * num_nodes)).tocsr()


def sensor_thickness(coords, t_s):
    """
    Overall thickness: z-extent of the skin mid-surface plus the skin thickness.
    """
    return float(coords[:, 2].max() - coords[:, 2].min() + t_s)


def approach_pose(coords, indenter, contact_point, direction, tol=1e-9):
    """
    Pose of an indenter travelling along `direction` towards `contact_point` at first contact.

    The local +z axis of the indenter is aligned with `direction`; the pose is
    the last one along the line at which no skin node penetrates the indenter.
    """
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    rotation = frame_from_direction(direction)
    contact_point = np.asarray(contact_point, dtype=float)

    def pose_at(travel):
        return RigidTransform(rotation, contact_point - (indenter.tip_offset - travel) * direction)

    def clearance(travel):
        return indenter.with_pose(pose_at(travel)).signed_distance(coords)[0].min()

    lower = -2.0 * indenter.bounding_radius
    for _ in range(32):
        if clearance(lower) > 0:
            break
        lower *= 2.0
    else:
        raise ValueError('indenter {} cannot be backed off the skin'.format(indenter.name))
    upper = 0.0
    for _ in range(64):
        if clearance(upper) <= 0:
            break
        upper += max(indenter.tip_offset, 1e-4)
    else:
        raise ValueError('indenter {} never reaches the skin along {}'.format(indenter.name, direction))

    while upper - lower > tol:
        middle = 0.5 * (lower + upper)
        if clearance(middle) > 0:
            lower = middle
        else:
            upper = middle
    return pose_at(lower)


@dataclass
class _Evaluation:
    residual: np.ndarray
    constraint: float
    volume_gradient: np.ndarray
    indenter_contact: ContactResult
    core_contact: ContactResult
    residual_norm: float
    force_scale: float
    volume_scale: float

    @property
    def converged(self):
        return self.residual_norm <= self.force_scale and abs(self.constraint) <= self.volume_scale

    def merit(self, force_scale, volume_scale):
        return (self.residual_norm / force_scale) ** 2 + (self.constraint / volume_scale) ** 2


class MembraneSolver:
    """
    Newton solver owning the state of one simulated sensor.

    One solver is pressurized once and then serves any number of
    trajectories, each starting from the pressurized reference.

    Parameters
    ----------
    skin: TriMesh
        Closed skin mesh; anchored nodes are held fixed
    core: CoreBody
        Rigid core
    params: SimParams
        Physical parameters
    settings: None or SolverSettings
        Numerical settings, defaults if None
    """

    def __init__(self, skin, core, params, settings=None):
        if not skin.is_closed:
            raise ValueError('skin mesh must be closed')
        self.params = params
        self.settings = settings or SolverSettings()
        self.elements = MembraneElements(skin.ref_coords, skin.triangles)
        self.free = ~skin.anchored
        self.free_dofs = np.flatnonzero(np.repeat(self.free, 3))
        self.core_volume = _core_volume(core)
        self.initial_volume = enclosed_volume(skin, current=False) - self.core_volume
        if self.initial_volume <= 0:
            raise ValueError('core does not fit inside the skin (cavity volume {})'.format(self.initial_volume))

        node_areas = skin.vertex_areas(current=False)
        if self.settings.core_stiffness is None:
            self.core_stiffness = 3.0 * params.mu_NH * node_areas / params.t_s
        else:
            self.core_stiffness = np.full(skin.num_nodes, float(self.settings.core_stiffness))
        k_pen = self.settings.k_pen
        # anchored skin is compressed against the core in series with the indenter penalty
        self.indenter_stiffness = np.where(skin.anchored, k_pen * self.core_stiffness / (k_pen + self.core_stiffness),
                                           k_pen)

        self.state = SimState(skin=skin.with_coords(skin.ref_coords), core=core,
                              target_volume=self.initial_volume, tangential_forces=np.zeros((skin.num_nodes, 3)))
        self._initial_state = self.state.copy()
        self.reference_state = None
        self._origin = None
        self._last_record = None

    # state handling

    def snapshot(self):
        """
        Copy of the current state.
        """
        return self.state.copy()

    def restore(self, state):
        self.state = state.copy()

    @property
    def coords(self):
        return np.array(self.state.skin.cur_coords)

    def _record(self, coords, pressure, contact=None, iterations=0, diverged=False):
        reference = self.reference_state.skin.cur_coords if self.reference_state is not None \
            else self.state.skin.ref_coords
        reference_pressure = self.reference_state.cavity_pressure if self.reference_state is not None else 0.0
        indenter = self.state.indenter
        displacement = np.zeros(3) if indenter is None or self._origin is None \
            else indenter.pose.translation - self._origin
        return IncrementRecord(increment=self.state.increment_index,
                               indenter_displacement=np.array(displacement),
                               net_force=np.zeros(3) if contact is None else contact.net_force,
                               nodal_displacements=coords - reference,
                               cavity_pressure=float(pressure),
                               sensor_thickness=sensor_thickness(coords, self.params.t_s),
                               diverged=diverged,
                               pressure_change=float(pressure - reference_pressure),
                               iterations=iterations)

    # residual and tangent

    def _evaluate(self, coords, pressure, target_volume, indenter, node_motion, previous_coords):
        settings = self.settings
        gradient = self.elements.gradient(coords, self.params.t_s, self.params.mu_NH)
        volume = _signed_volume(coords, self.elements.triangles) - self.core_volume
        grad_volume = volume_gradient(coords, self.elements.triangles)
        core_contact = contact_forces(coords, self.state.core, 0.0, self.core_stiffness)
        if indenter is not None:
            indenter_contact = contact_forces(coords, indenter, self.params.mu_fr, self.indenter_stiffness,
                                              k_t=settings.tangential_stiffness,
                                              slip=(coords - previous_coords) - node_motion,
                                              previous_tangential=self.state.tangential_forces)
        else:
            indenter_contact = None

        residual = gradient - core_contact.forces - pressure * grad_volume
        contact_force = 0.0
        if indenter_contact is not None:
            residual -= indenter_contact.forces
            contact_force = np.linalg.norm(indenter_contact.net_force)
        constraint = volume - target_volume

        force_scale = settings.tol_rel * max(1.0, contact_force)
        volume_scale = settings.tol_vol * abs(target_volume)
        residual_norm = float(np.linalg.norm(residual[self.free]))
        return _Evaluation(residual, constraint, grad_volume, indenter_contact, core_contact, residual_norm,
                           force_scale, volume_scale)

    def _newton_step(self, coords, pressure, evaluation):
        stiffness = self.elements.stiffness(coords, self.params.t_s, self.params.mu_NH)
        stiffness = stiffness + _block_diagonal(evaluation.core_contact.stiffness)
        if evaluation.indenter_contact is not None:
            stiffness = stiffness + _block_diagonal(evaluation.indenter_contact.stiffness)
        stiffness = stiffness - pressure * volume_hessian(coords, self.elements.triangles)
        stiffness = stiffness.tocsr()[self.free_dofs][:, self.free_dofs]

        grad_volume = evaluation.volume_gradient.ravel()[self.free_dofs]
        rhs = -np.concatenate([evaluation.residual.ravel()[self.free_dofs], [evaluation.constraint]])
        diagonal = np.abs(stiffness.diagonal()).max()
        shift = self.settings.regularization * max(diagonal, 1e-12)
        identity = sparse.identity(len(self.free_dofs), format='csr')
        for _ in range(4):
            system = sparse.bmat([[stiffness + shift * identity, sparse.csr_matrix(-grad_volume[:, None])],
                                  [sparse.csr_matrix(grad_volume[None, :]), None]], format='csc')
            with warnings.catch_warnings():
                warnings.simplefilter('ignore', MatrixRankWarning)
                solution = spsolve(system, rhs)
            if np.all(np.isfinite(solution)):
                return solution[:-1], solution[-1]
            shift *= 1e3
        raise ConvergenceError('singular tangent after regularization')

    def _newton(self, target_volume, indenter, node_motion):
        settings = self.settings
        previous_coords = self.coords
        coords = previous_coords.copy()
        pressure = self.state.cavity_pressure
        evaluation = self._evaluate(coords, pressure, target_volume, indenter, node_motion, previous_coords)
        for iteration in range(settings.max_iters + 1):
            if evaluation.converged:
                return coords, pressure, evaluation, iteration
            if iteration == settings.max_iters:
                break
            step, step_pressure = self._newton_step(coords, pressure, evaluation)
            # trial merits are measured with the scaling of the current iterate
            scales = (evaluation.force_scale, evaluation.volume_scale)
            merit = evaluation.merit(*scales)
            largest = np.linalg.norm(step.reshape(-1, 3), axis=1).max(initial=0.0)
            alpha = min(1.0, settings.max_step / largest) if largest > 0 else 1.0
            for _ in range(settings.max_halvings + 1):
                trial_coords = coords.copy()
                trial_coords.reshape(-1)[self.free_dofs] += alpha * step
                trial_pressure = pressure + alpha * step_pressure
                try:
                    trial = self._evaluate(trial_coords, trial_pressure, target_volume, indenter, node_motion,
                                           previous_coords)
                except SingularConfigurationError:
                    trial = None
                if trial is not None and trial.merit(*scales) < merit:
                    break
                alpha *= 0.5
            else:
                raise ConvergenceError('line search found no descent after {} halvings'.format(settings.max_halvings))
            coords, pressure, evaluation = trial_coords, trial_pressure, trial
            logger.debug('newton iteration {}: residual {:.3e} N, volume error {:.3e}, step {}'.format(
                iteration + 1, evaluation.residual_norm, evaluation.constraint, alpha))
        raise ConvergenceError('no convergence within {} iterations'.format(settings.max_iters))

    def _halfway(self, control):
        """
        Control halfway between the current state and `control`.
        """
        if isinstance(control, RigidTransform):
            current = self.state.indenter.pose
            rotations = Rotation.from_matrix(np.stack([current.rotation, control.rotation]))
            rotation = Slerp([0.0, 1.0], rotations)(0.5).as_matrix()
            return RigidTransform(rotation, 0.5 * (current.translation + control.translation))
        return 0.5 * (self.state.target_volume + float(control))

    def _solve_towards(self, control):
        state = self.state
        if isinstance(control, RigidTransform):
            indenter = state.indenter.with_pose(control)
            target_volume = state.target_volume
            coords = self.coords
            # motion the nodes would follow if glued to the indenter
            node_motion = control.apply(state.indenter.pose.inverse().apply(coords)) - coords
        else:
            indenter = None
            target_volume = float(control)
            node_motion = None
        coords, pressure, evaluation, iterations = self._newton(target_volume, indenter, node_motion)

        state.skin = state.skin.with_coords(coords)
        state.cavity_pressure = float(pressure)
        state.target_volume = target_volume
        if indenter is not None:
            state.indenter = indenter
        contact = evaluation.indenter_contact
        state.tangential_forces = np.zeros_like(coords) if contact is None else contact.tangential.copy()
        return evaluation, iterations

    def _advance(self, control, cutbacks):
        """
        Solve from the current state towards `control` and keep the result.

        A failed attempt is retried as two half steps, nested at most `cutbacks` deep.

        Returns
        -------
        evaluation: _Evaluation
            Converged evaluation at `control`
        iterations: int
            Newton iterations over all sub-steps
        """
        try:
            return self._solve_towards(control)
        except _SOLVE_ERRORS as error:
            if cutbacks == 0:
                raise
            logger.debug('cutting the step back ({} left): {}'.format(cutbacks - 1, error))
        _, first = self._advance(self._halfway(control), cutbacks - 1)
        evaluation, second = self._advance(control, cutbacks - 1)
        return evaluation, first + second

    # load steps

    def solve_increment(self, control):
        """
        Solve one load increment.

        Parameters
        ----------
        control: float or RigidTransform
            Target cavity volume (pressurization) or new indenter pose (indentation)

        Returns
        -------
        as_record: IncrementRecord
            Converged outputs, or the last converged outputs flagged as diverged
        """
        previous = self.snapshot()
        if isinstance(control, RigidTransform):
            if self.state.indenter is None:
                raise ValueError('an indenter must be placed before indentation increments')
            load_step = LoadStep.INDENT
        else:
            load_step = LoadStep.PRESSURIZE
        if load_step != self.state.load_step:
            self.state.load_step = load_step
            self.state.increment_index = 0

        try:
            evaluation, iterations = self._advance(control, self.settings.max_cutbacks)
        except _SOLVE_ERRORS as error:
            logger.warning('{} increment {} diverged: {}'.format(load_step.value, previous.increment_index + 1, error))
            self.restore(previous)
            self.state.converged = False
            record = self._last_record or self._record(self.coords, self.state.cavity_pressure)
            return replace(record, increment=previous.increment_index + 1, diverged=True, iterations=0)

        state = self.state
        state.increment_index += 1
        state.converged = True
        record = self._record(self.coords, state.cavity_pressure, evaluation.indenter_contact, iterations)
        self._last_record = record
        logger.debug('{} increment {} converged in {} iterations, |F| = {:.4f} N, p = {:.1f} Pa'.format(
            load_step.value, state.increment_index, iterations, record.force_magnitude, state.cavity_pressure))
        return record

    def pressurize(self):
        """
        First load step: inflate the cavity to the thermally expanded fluid volume.

        Returns
        -------
        as_record: IncrementRecord
            Pressurized reference (increment 0)

        Raises
        ------
        ConvergenceError
            If any pressurization sub-increment diverges
        """
        target = self.initial_volume * (1.0 + self.params.expansion)
        count = self.settings.n_pressurize
        self.restore(self._initial_state)
        self.reference_state = None
        self._last_record = None
        self._origin = None
        for k in range(1, count + 1):
            record = self.solve_increment(self.initial_volume + k / count * (target - self.initial_volume))
            if record.diverged:
                raise ConvergenceError('pressurization diverged at sub-increment {} of {}'.format(k, count))
        self.state.increment_index = 0
        self.reference_state = self.snapshot()
        self._last_record = self._record(self.coords, self.state.cavity_pressure)
        logger.info('pressurized: p = {:.1f} Pa, thickness = {:.3f} mm'.format(
            self.state.cavity_pressure, 1e3 * self._last_record.sensor_thickness))
        return self._last_record

    def place_indenter(self, indenter, pose):
        """
        Put the indenter at its starting pose (no load is applied).
        """
        self.state.indenter = indenter.with_pose(pose)
        self.state.load_step = LoadStep.INDENT
        self.state.increment_index = 0
        self._origin = np.array(pose.translation)
        self._last_record = self._record(self.coords, self.state.cavity_pressure)

    def run_trajectory(self, trajectory, progress=False):
        """
        Simulate one indentation trajectory from the pressurized reference.

        Parameters
        ----------
        trajectory: Trajectory
            Indentation plan (indenter, contact_point, direction, depth, increment)
        progress: bool
            Show a progress bar if set True

        Returns
        -------
        as_list: list of IncrementRecord
            Increments 1..n up to completion or the first diverged increment
            (a zero-depth trajectory yields only the increment-0 reference)
        """
        if trajectory.depth < 0 or trajectory.increment <= 0:
            raise ValueError('invalid trajectory: depth {} increment {}'.format(trajectory.depth, trajectory.increment))
        if self.reference_state is None:
            self.pressurize()
        self.restore(self.reference_state)
        direction = np.asarray(trajectory.direction, dtype=float)
        num_increments = int(round(trajectory.depth / trajectory.increment))

        start = approach_pose(self.coords, trajectory.indenter, trajectory.contact_point, direction)
        self.place_indenter(trajectory.indenter, start)
        if num_increments == 0:
            return [self._last_record]

        records = []
        for k in tqdm(range(1, num_increments + 1), desc='increments', disable=not progress, leave=False):
            record = self.solve_increment(start.translated(k * trajectory.increment * direction))
            records.append(record)
            if record.diverged:
                break
        return records


def solve_increment(state, params, control, settings=None):
    """
    Solve one increment from a given state.

    Returns
    -------
    record: IncrementRecord
    state: SimState
        Updated state (unchanged if the increment diverged)
    """
    solver = MembraneSolver(state.skin, state.core, params, settings)
    solver.restore(state)
    record = solver.solve_increment(control)
    return record, solver.state


def run_trajectory(params, trajectory, skin, core, settings=None):
    """
    Pressurize a fresh sensor and simulate one trajectory on it.
    """
    return MembraneSolver(skin, core, params, settings).run_trajectory(trajectory)


_WORKER = {}


def _worker_init(skin, core, params, settings, reference_state):
    solver = MembraneSolver(skin, core, params, settings)
    solver.reference_state = reference_state
    _WORKER['solver'] = solver


def _worker_run(trajectory):
    return _WORKER['solver'].run_trajectory(trajectory)


def simulate_many(params, trajectories, skin, core, settings=None, jobs=1, solver=None):
    """
    Simulate trajectories from one shared pressurized reference.

    Parameters
    ----------
    params: SimParams
    trajectories: list of Trajectory
    skin: TriMesh
    core: CoreBody
    settings: None or SolverSettings
    jobs: int
        Number of worker processes; results keep the trajectory order
    solver: None or MembraneSolver
        Already pressurized solver to reuse

    Returns
    -------
    as_list: list of list of IncrementRecord
    """
    if solver is None:
        solver = MembraneSolver(skin, core, params, settings)
    if solver.reference_state is None:
        solver.pressurize()
    if jobs <= 1 or len(trajectories) <= 1:
        return [solver.run_trajectory(trajectory) for trajectory in tqdm(trajectories, desc='trajectories')]
    with Pool(processes=jobs, initializer=_worker_init,
              initargs=(skin, core, params, solver.settings, solver.reference_state)) as pool:
        return list(tqdm(pool.imap(_worker_run, trajectories), total=len(trajectories), desc='trajectories'))


def write_records(records, filepath):
    """
    Write increment records as JSON lines, with nodal displacements in a `.npz` sidecar.
    """
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, 'w') as fout:
        for record in records:
            fout.write(json.dumps(record.to_json_dict()) + '\n')
    displacements = np.stack([r.nodal_displacements for r in records]) if records else np.zeros((0, 0, 3))
    np.savez_compressed(filepath.with_suffix('.npz'), displacements=displacements,
                        node_ids=np.arange(displacements.shape[1]))


def read_records(filepath):
    """
    Read increment records written by `write_records`.
    """
    filepath = Path(filepath)
    with open(filepath, 'r') as fin:
        lines = [json.loads(line) for line in fin if line.strip()]
    displacements = np.load(filepath.with_suffix('.npz'))['displacements']
    return [IncrementRecord(increment=line['step'],
                            indenter_displacement=np.array(line['indenter_disp']),
                            net_force=np.array(line['net_force']),
                            nodal_displacements=displacements[i],
                            cavity_pressure=line['pressure'],
                            sensor_thickness=line['thickness'],
                            diverged=line['diverged'],
                            pressure_change=line.get('pressure_change', 0.0),
                            iterations=line.get('iterations', 0))
            for i, line in enumerate(lines)]
