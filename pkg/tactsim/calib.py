"""
calib.py
--------

Calibration of the four physical parameters of the sensor model against
force trajectories.

The cost sums the per-axis RMS force error over all usable samples and a
weighted thickness term; it is minimized by a bounded simplex search with
the simulator in the loop.
"""

from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import minimize, brentq
from tqdm import tqdm

from .fesim import PARAM_NAMES, PARAM_BOUNDS, MembraneSolver, ConvergenceError, SingularConfigurationError
from .logger import attach_to_log

logger = attach_to_log()

# experimental samples below this force magnitude are ignored (N)
FORCE_THRESHOLD = 0.5

# cost assigned to parameters whose simulation yields no usable sample
FAILURE_COST = 1e3

THICKNESS_PENALTIES = ('signed', 'abs', 'square')

CostTerms = namedtuple('CostTerms', ['total', 'force', 'thickness'])


@dataclass
class CalibrationProblem:
    """
    Force trajectory to match and the weights of the cost.

    Parameters
    ----------
    reference_trajectory: Trajectory
        Trajectory simulated at every evaluation
    experimental_forces: (n, 3) or (s, n, 3) float
        Measured net forces per increment (N), one block per sensor
    w1: float
        Weight of the force term
    w2: float
        Weight of the thickness term
    bounds: tuple of (float, float)
        Bounds of (t_s, mu_NH, mu_fr, T_fl)
    thickness_penalty: str
        'signed', 'abs' or 'square' thickness deviation
    target_thickness: float
        Pressurized thickness to match (m)
    force_threshold: float
        Minimum experimental force magnitude of a usable sample (N)
    """
    reference_trajectory: object
    experimental_forces: np.ndarray
    w1: float = 1.0
    w2: float = 1e4
    bounds: tuple = PARAM_BOUNDS
    thickness_penalty: str = 'signed'
    target_thickness: float = 15.1e-3
    force_threshold: float = FORCE_THRESHOLD

    def __post_init__(self):
        forces = np.asarray(self.experimental_forces, dtype=float)
        if forces.ndim == 2:
            forces = forces[None]
        if forces.ndim != 3 or forces.shape[2] != 3:
            raise ValueError('experimental forces must be (n, 3) or (sensors, n, 3), got {}'.format(forces.shape))
        self.experimental_forces = forces
        if self.w1 <= 0 or self.w2 <= 0:
            raise ValueError('cost weights must be positive, got w1={}, w2={}'.format(self.w1, self.w2))
        if self.thickness_penalty not in THICKNESS_PENALTIES:
            raise ValueError('thickness_penalty must be one of {}'.format(THICKNESS_PENALTIES))
        self.bounds = tuple(tuple(float(v) for v in b) for b in self.bounds)
        if len(self.bounds) != len(PARAM_NAMES) or any(lower >= upper for lower, upper in self.bounds):
            raise ValueError('bounds must give lower < upper for each of {}'.format(PARAM_NAMES))

    @property
    def n_samples(self):
        """
        Samples above the force threshold, over all sensors.
        """
        return int((np.linalg.norm(self.experimental_forces, axis=2) > self.force_threshold).sum())


def converged_forces(records):
    """
    (m, 3) net forces of the increments before the first diverged one.
    """
    forces = []
    for record in records:
        if record.diverged:
            break
        forces.append(record.net_force)
    return np.array(forces).reshape(-1, 3)


def cost(problem, params, sim_result, thickness):
    """
    Calibration cost of one simulated trajectory.

    J_force = sum over axes of sqrt(mean over usable samples of (F_sim - F_exp)^2)
    J_thick = t_sim - target (or its absolute value or square)
    J_total = w1 J_force + w2 J_thick

    Samples are aligned by increment; usable samples exceed the force threshold
    experimentally and lie before the divergence point of the simulation.

    Parameters
    ----------
    problem: CalibrationProblem
    params: SimParams
        Simulated parameters (kept for reporting symmetry)
    sim_result: list of IncrementRecord
        Increments 1..n of the simulated trajectory
    thickness: float
        Simulated pressurized thickness (m)

    Returns
    -------
    as_terms: CostTerms
        (total, force, thickness)
    """
    simulated = converged_forces(sim_result)
    experimental = problem.experimental_forces[:, :len(simulated)]
    count = experimental.shape[1]
    usable = np.linalg.norm(experimental, axis=2) > problem.force_threshold
    if not usable.any():
        raise ValueError('no usable samples: {} converged increments, none above {} N'.format(
            count, problem.force_threshold))
    errors = (simulated[None, :count] - experimental)[usable]
    j_force = float(np.sqrt((errors ** 2).mean(axis=0)).sum())

    deviation = thickness - problem.target_thickness
    j_thick = {'signed': deviation, 'abs': abs(deviation), 'square': deviation ** 2}[problem.thickness_penalty]
    return CostTerms(problem.w1 * j_force + problem.w2 * j_thick, j_force, j_thick)


class TrajectorySimulator:
    """
    Simulator in the loop: pressurizes the sensor and runs one trajectory.

    Parameters
    ----------
    skin: TriMesh
    core: CoreBody
    settings: None or SolverSettings
    """

    def __init__(self, skin, core, settings=None):
        self.skin = skin
        self.core = core
        self.settings = settings

    def __call__(self, params, trajectory):
        """
        Returns
        -------
        records: list of IncrementRecord
        thickness: float
            Pressurized sensor thickness (m)
        """
        solver = MembraneSolver(self.skin, self.core, params, self.settings)
        reference = solver.pressurize()
        return solver.run_trajectory(trajectory), reference.sensor_thickness


@dataclass
class CalibrationReport:
    """
    Log of every cost evaluation of a calibration run.
    """
    evaluations: list = field(default_factory=list)
    best_index: int = None
    improved: bool = False
    message: str = ''

    @property
    def best_costs(self):
        """
        Best-so-far total cost after every evaluation.
        """
        return np.minimum.accumulate([e['J_total'] for e in self.evaluations])

    def to_frame(self):
        columns = ['eval_index'] + list(PARAM_NAMES) + ['J_force', 'J_thick', 'J_total']
        return pd.DataFrame(self.evaluations, columns=columns + ['failed'])[columns]

    def write_trace(self, filepath):
        """
        Write the evaluation trace as CSV.
        """
        self.to_frame().to_csv(filepath, index=False)


CalibrationResult = namedtuple('CalibrationResult', ['params', 'report'])


class _BudgetExhausted(Exception):
    pass


def calibrate(problem, initial, budget=40, simulator=None, skin=None, core=None, settings=None, progress=True):
    """
    Bounded local minimization of the calibration cost.

    The four parameters are mapped to the unit box and searched with a
    bounded Nelder-Mead simplex started at `initial`. The best evaluated point
    is returned, which is never worse than `initial`.

    Parameters
    ----------
    problem: CalibrationProblem
    initial: SimParams
        Starting parameters, within the problem bounds
    budget: int
        Maximum number of cost evaluations (simulations)
    simulator: None or callable
        (params, trajectory) -> (records, thickness); a TrajectorySimulator on
        `skin`, `core` and `settings` if None
    progress: bool
        Show a progress bar if set True

    Returns
    -------
    as_result: CalibrationResult
        (params, report)
    """
    if not initial.within_bounds(problem.bounds):
        raise ValueError('initial parameters {} violate the bounds {}'.format(
            dict(zip(PARAM_NAMES, initial.as_vector())), problem.bounds))
    if budget < 1:
        raise ValueError('budget must allow at least one evaluation')
    if simulator is None:
        if skin is None or core is None:
            raise ValueError('calibrate needs a simulator or a skin and core')
        simulator = TrajectorySimulator(skin, core, settings)

    lower, upper = np.array(problem.bounds).T
    report = CalibrationReport()
    bar = tqdm(total=budget, desc='calibration', disable=not progress)

    def to_params(x):
        return initial.with_vector(lower + np.clip(x, 0.0, 1.0) * (upper - lower))

    def objective(x):
        if len(report.evaluations) >= budget:
            raise _BudgetExhausted()
        params = to_params(x)
        failed = False
        try:
            records, thickness = simulator(params, problem.reference_trajectory)
            terms = cost(problem, params, records, thickness)
        except (ValueError, ConvergenceError, SingularConfigurationError) as error:
            logger.warning('evaluation {} failed: {}'.format(len(report.evaluations), error))
            terms = CostTerms(FAILURE_COST, np.nan, np.nan)
            failed = True
        entry = {'eval_index': len(report.evaluations), 'J_force': terms.force, 'J_thick': terms.thickness,
                 'J_total': terms.total, 'failed': failed}
        entry.update(zip(PARAM_NAMES, params.as_vector()))
        report.evaluations.append(entry)
        if report.best_index is None or terms.total < report.evaluations[report.best_index]['J_total']:
            report.best_index = entry['eval_index']
        bar.update()
        logger.debug('evaluation {}: J_total {:.5f} (force {:.5f}, thickness {:.3e})'.format(
            entry['eval_index'], terms.total, terms.force, terms.thickness))
        return terms.total

    x0 = (initial.as_vector() - lower) / (upper - lower)
    start = objective(x0)
    exact = report.evaluations[0]['J_force'] == 0 and report.evaluations[0]['J_thick'] == 0
    if budget > 1 and not exact:
        try:
            result = minimize(objective, x0, method='Nelder-Mead', bounds=[(0.0, 1.0)] * len(x0),
                              options={'maxfev': budget - 1, 'xatol': 1e-3, 'fatol': 1e-4})
            report.message = str(result.message)
        except _BudgetExhausted:
            report.message = 'evaluation budget of {} exhausted'.format(budget)
    bar.close()

    best = report.evaluations[report.best_index]
    report.improved = best['J_total'] < start
    if not report.improved:
        logger.warning('calibration budget of {} evaluations gave no improving step'.format(budget))
    logger.info('calibration: J_total {:.5f} -> {:.5f} after {} evaluations'.format(
        start, best['J_total'], len(report.evaluations)))
    return CalibrationResult(initial.with_vector([best[name] for name in PARAM_NAMES]), report)


def identifiability(problem, params, simulator, rel_step=0.05):
    """
    Finite-difference sensitivity of the total cost to every parameter.

    Steps are `rel_step` of each parameter's bound range, shortened one-sidedly
    at the bounds. Large curvature marks a well identified parameter.

    Returns
    -------
    as_frame: pandas.DataFrame
        One row per parameter with `gradient` and `curvature` in normalized units
    """
    def total(p):
        records, thickness = simulator(p, problem.reference_trajectory)
        return cost(problem, p, records, thickness).total

    center = params.as_vector()
    j0 = total(params)
    rows = []
    for i, name in enumerate(PARAM_NAMES):
        lower, upper = problem.bounds[i]
        step = rel_step * (upper - lower)
        minus, plus = max(lower, center[i] - step), min(upper, center[i] + step)
        values = []
        for value in (minus, plus):
            vector = center.copy()
            vector[i] = value
            values.append(total(params.with_vector(vector)))
        h_minus, h_plus = (center[i] - minus) / (upper - lower), (plus - center[i]) / (upper - lower)
        gradient = (values[1] - values[0]) / (h_minus + h_plus)
        curvature = 2.0 * (h_minus * values[1] + h_plus * values[0] - (h_minus + h_plus) * j0) / \
            (h_minus * h_plus * (h_minus + h_plus)) if h_minus > 0 and h_plus > 0 else np.nan
        rows.append({'parameter': name, 'value': center[i], 'cost': j0, 'gradient': gradient, 'curvature': curvature})
    return pd.DataFrame(rows)


def validate_forces(simulated, reference):
    """
    Force error of simulated against reference trajectories, per indenter.

    Parameters
    ----------
    simulated: dict of str -> list of list of IncrementRecord
        Simulated trajectories of every indenter
    reference: dict of str -> list of (n, 3) float
        Reference net forces of the same trajectories (N)

    Returns
    -------
    as_frame: pandas.DataFrame
        Per indenter: mean trajectory RMS error (N), force magnitude range (N)
        and the error normalized by that range
    """
    rows = []
    for name, trajectories in simulated.items():
        errors, magnitudes = [], []
        for records, forces in zip(trajectories, reference[name]):
            sim = converged_forces(records)
            forces = np.asarray(forces, dtype=float)[:len(sim)]
            if not len(forces):
                continue
            errors.append(np.sqrt(np.mean(np.sum((sim[:len(forces)] - forces) ** 2, axis=1))))
            magnitudes.append(np.linalg.norm(forces, axis=1))
        if not errors:
            logger.warning('no converged increments to validate for {}'.format(name))
            continue
        magnitudes = np.concatenate(magnitudes)
        force_range = float(magnitudes.max() - magnitudes.min())
        rms = float(np.mean(errors))
        rows.append({'indenter': name, 'rms_error': rms, 'force_range': force_range,
                     'normalized_error': rms / force_range if force_range > 0 else np.nan})
    return pd.DataFrame(rows, columns=['indenter', 'rms_error', 'force_range', 'normalized_error'])


def calibrate_temperature(skin, core, params, settings=None, bounds=PARAM_BOUNDS[3], xtol=1e-3):
    """
    Fluid temperature at which the pressurized thickness equals the target thickness.

    Raises
    ------
    ValueError
        If the target is not bracketed within `bounds`
    """
    def excess(temperature):
        solver = MembraneSolver(skin, core, params.with_vector(
            list(params.as_vector()[:3]) + [temperature]), settings)
        return solver.pressurize().sensor_thickness - params.target_thickness

    low, high = excess(bounds[0]), excess(bounds[1])
    if low * high > 0:
        raise ValueError('target thickness {} not reachable for T_fl in {} (excess {:.3e} .. {:.3e} m)'.format(
            params.target_thickness, bounds, low, high))
    return brentq(excess, bounds[0], bounds[1], xtol=xtol)
