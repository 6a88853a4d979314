import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from tactsim.geometry import default_indenters
from tactsim.fesim import SimParams, IncrementRecord, ConvergenceError, PARAM_BOUNDS, PARAM_NAMES
from tactsim.sensor import Trajectory
from tactsim.calib import CalibrationProblem, FAILURE_COST, cost, calibrate, identifiability, validate_forces, \
    converged_forces

TRUE_PARAMS = SimParams()


def reference_trajectory():
    return Trajectory(default_indenters()['sphere_medium'], [4e-3, 0.0, -7.8e-3], [0.0, 0.0, 1.0], depth=2e-3)


def make_records(forces, diverged_from=None):
    records = []
    for k, force in enumerate(forces, start=1):
        records.append(IncrementRecord(increment=k, indenter_displacement=np.array([0.0, 0.0, k * 1e-4]),
                                       net_force=np.asarray(force, dtype=float), nodal_displacements=np.zeros((1, 3)),
                                       cavity_pressure=0.0, sensor_thickness=0.0,
                                       diverged=diverged_from is not None and k >= diverged_from))
    return records


class FakeSimulator:
    """
    Smooth stand-in for the simulator: forces grow linearly with depth and stiffness.
    """

    def __init__(self, fail_above=None):
        self.calls = 0
        self.fail_above = fail_above

    def forces(self, params, n=20):
        k = np.arange(1, n + 1)
        stiffness = 0.15 * (params.mu_NH / TRUE_PARAMS.mu_NH) * (params.t_s / TRUE_PARAMS.t_s)
        fz = -stiffness * k
        fx = params.mu_fr * 0.5 * fz
        return np.stack([fx, np.zeros(n), fz], axis=1)

    def thickness(self, params):
        return 15.1e-3 + 0.5 * (params.t_s - TRUE_PARAMS.t_s) + 2e-5 * (params.T_fl - TRUE_PARAMS.T_fl)

    def __call__(self, params, trajectory):
        self.calls += 1
        if self.fail_above is not None and params.mu_NH > self.fail_above:
            raise ConvergenceError('stiff skin')
        return make_records(self.forces(params, trajectory.num_increments)), self.thickness(params)


def test_cost_value():
    experimental = np.array([[0.0, 0.0, -0.2], [0.0, 0.0, -1.0], [0.0, 0.0, -2.0]])
    simulated = make_records([[0.0, 0.0, -0.25], [0.3, 0.0, -1.2], [0.0, 0.0, -2.4]])
    problem = CalibrationProblem(reference_trajectory(), experimental, w1=1.0, w2=1e4)
    terms = cost(problem, TRUE_PARAMS, simulated, 15.2e-3)

    expected_force = np.sqrt(0.09 / 2) + np.sqrt((0.04 + 0.16) / 2)
    assert abs(terms.force - expected_force) < 1e-12
    assert abs(terms.thickness - 1e-4) < 1e-15
    assert terms.total == problem.w1 * terms.force + problem.w2 * terms.thickness
    assert abs(terms.total - (expected_force + 1.0)) < 1e-10


def test_cost_stops_at_divergence():
    experimental = np.array([[0.0, 0.0, -0.2], [0.0, 0.0, -1.0], [0.0, 0.0, -2.0]])
    simulated = make_records([[0.0, 0.0, -0.25], [0.3, 0.0, -1.2], [0.0, 0.0, -2.4]], diverged_from=3)
    problem = CalibrationProblem(reference_trajectory(), experimental)
    terms = cost(problem, TRUE_PARAMS, simulated, 15.1e-3)
    assert abs(terms.force - 0.5) < 1e-12
    assert terms.thickness == 0.0


def test_cost_signed_and_square_penalty():
    experimental = np.array([[0.0, 0.0, -1.0]])
    simulated = make_records([[0.0, 0.0, -1.0]])
    signed = CalibrationProblem(reference_trajectory(), experimental, thickness_penalty='signed')
    square = CalibrationProblem(reference_trajectory(), experimental, thickness_penalty='square')
    absolute = CalibrationProblem(reference_trajectory(), experimental, thickness_penalty='abs')
    thickness = 15.0e-3
    assert cost(signed, TRUE_PARAMS, simulated, thickness).total < 0
    assert abs(cost(absolute, TRUE_PARAMS, simulated, thickness).thickness - 1e-4) < 1e-15
    assert abs(cost(square, TRUE_PARAMS, simulated, thickness).thickness - 1e-8) < 1e-20


def test_cost_without_usable_samples():
    problem = CalibrationProblem(reference_trajectory(), np.array([[0.0, 0.0, -0.1], [0.0, 0.0, -0.2]]))
    try:
        cost(problem, TRUE_PARAMS, make_records([[0.0, 0.0, -0.1], [0.0, 0.0, -0.2]]), 15.1e-3)
    except ValueError:
        pass
    else:
        raise AssertionError('cost without usable samples')


def test_problem_validation():
    for kwargs in ({'w1': 0.0}, {'thickness_penalty': 'cubic'}, {'bounds': ((1.0, 0.0),) * 4},
                   {'experimental_forces': np.zeros((3, 2))}):
        arguments = {'reference_trajectory': reference_trajectory(), 'experimental_forces': np.zeros((3, 3))}
        arguments.update(kwargs)
        try:
            CalibrationProblem(**arguments)
        except ValueError:
            continue
        raise AssertionError('accepted {}'.format(kwargs))


def test_multi_sensor_forces():
    forces = np.stack([FakeSimulator().forces(TRUE_PARAMS)] * 2)
    problem = CalibrationProblem(reference_trajectory(), forces)
    assert problem.experimental_forces.shape == (2, 20, 3)
    terms = cost(problem, TRUE_PARAMS, make_records(forces[0]), 15.1e-3)
    assert terms.force < 1e-12


def test_calibration_improves_within_budget():
    simulator = FakeSimulator()
    trajectory = reference_trajectory()
    problem = CalibrationProblem(trajectory, simulator.forces(TRUE_PARAMS, trajectory.num_increments),
                                 thickness_penalty='square')
    initial = TRUE_PARAMS.with_vector(np.mean(PARAM_BOUNDS, axis=1))
    budget = 30
    params, report = calibrate(problem, initial, budget=budget, simulator=simulator, progress=False)

    assert len(report.evaluations) <= budget
    assert simulator.calls == len(report.evaluations)
    assert params.within_bounds()
    costs = [e['J_total'] for e in report.evaluations]
    assert report.evaluations[report.best_index]['J_total'] == min(costs)
    assert min(costs) <= costs[0]
    assert report.improved
    np.testing.assert_array_equal(report.best_costs, np.minimum.accumulate(costs))
    assert list(report.to_frame().columns) == ['eval_index'] + list(PARAM_NAMES) + ['J_force', 'J_thick', 'J_total']

def test_calibration_with_the_default_penalty():
    simulator = FakeSimulator()
    trajectory = reference_trajectory()
    problem = CalibrationProblem(trajectory, simulator.forces(TRUE_PARAMS, trajectory.num_increments),
                                 target_thickness=simulator.thickness(TRUE_PARAMS))
    assert problem.thickness_penalty == 'signed'
    initial = TRUE_PARAMS.with_vector(np.mean(PARAM_BOUNDS, axis=1))
    params, report = calibrate(problem, initial, budget=30, simulator=simulator, progress=False)

    assert params.within_bounds()
    assert report.improved
    for evaluation in report.evaluations:
        total = problem.w1 * evaluation['J_force'] + problem.w2 * evaluation['J_thick']
        assert abs(evaluation['J_total'] - total) < 1e-12



def test_calibration_stays_at_the_optimum():
    simulator = FakeSimulator()
    trajectory = reference_trajectory()
    problem = CalibrationProblem(trajectory, simulator.forces(TRUE_PARAMS, trajectory.num_increments),
                                 thickness_penalty='square')
    params, report = calibrate(problem, TRUE_PARAMS, budget=10, simulator=simulator, progress=False)
    assert report.evaluations[0]['J_total'] < 1e-9
    assert report.best_index == 0 or report.evaluations[report.best_index]['J_total'] < 1e-9
    np.testing.assert_allclose(params.as_vector(), TRUE_PARAMS.as_vector(), rtol=1e-6)


def test_failed_simulations_are_penalized():
    simulator = FakeSimulator(fail_above=TRUE_PARAMS.mu_NH)
    trajectory = reference_trajectory()
    problem = CalibrationProblem(trajectory, simulator.forces(TRUE_PARAMS, trajectory.num_increments))
    initial = TRUE_PARAMS.with_vector([1.6e-3, 9e5, 0.3, 30.0])
    params, report = calibrate(problem, initial, budget=5, simulator=simulator, progress=False)
    assert report.evaluations[0]['failed']
    assert report.evaluations[0]['J_total'] == FAILURE_COST
    assert len(report.evaluations) <= 5


def test_initial_outside_bounds():
    trajectory = reference_trajectory()
    problem = CalibrationProblem(trajectory, FakeSimulator().forces(TRUE_PARAMS))
    try:
        calibrate(problem, TRUE_PARAMS.with_vector([5e-3, 2.8e5, 0.2, 30.0]), simulator=FakeSimulator(),
                  progress=False)
    except ValueError:
        pass
    else:
        raise AssertionError('initial parameters outside the bounds accepted')


def test_trace_csv():
    simulator = FakeSimulator()
    trajectory = reference_trajectory()
    problem = CalibrationProblem(trajectory, simulator.forces(TRUE_PARAMS, trajectory.num_increments))
    _, report = calibrate(problem, TRUE_PARAMS.with_vector([1.2e-3, 4e5, 0.5, 28.0]), budget=6,
                          simulator=simulator, progress=False)
    with tempfile.TemporaryDirectory() as tmp:
        filepath = Path(tmp) / 'trace.csv'
        report.write_trace(filepath)
        trace = pd.read_csv(filepath)
    assert len(trace) == len(report.evaluations)
    np.testing.assert_array_equal(trace['eval_index'], np.arange(len(trace)))


def test_identifiability():
    simulator = FakeSimulator()
    trajectory = reference_trajectory()
    problem = CalibrationProblem(trajectory, simulator.forces(TRUE_PARAMS, trajectory.num_increments),
                                 thickness_penalty='square')
    frame = identifiability(problem, TRUE_PARAMS, simulator)
    assert list(frame['parameter']) == list(PARAM_NAMES)
    curvature = dict(zip(frame['parameter'], frame['curvature']))
    assert curvature['mu_NH'] > 0
    assert curvature['mu_NH'] > curvature['T_fl']


def test_validate_forces():
    simulator = FakeSimulator()
    forces = [simulator.forces(TRUE_PARAMS, 10), 2.0 * simulator.forces(TRUE_PARAMS, 10)]
    simulated = {'sphere_medium': [make_records(f) for f in forces]}
    frame = validate_forces(simulated, {'sphere_medium': forces})
    assert list(frame['indenter']) == ['sphere_medium']
    assert frame['rms_error'].iloc[0] == 0.0
    assert frame['normalized_error'].iloc[0] == 0.0
    assert frame['force_range'].iloc[0] > 0


def test_converged_forces():
    records = make_records([[0.0, 0.0, -1.0], [0.0, 0.0, -2.0], [0.0, 0.0, -3.0]], diverged_from=2)
    np.testing.assert_array_equal(converged_forces(records), [[0.0, 0.0, -1.0]])
    assert converged_forces([]).shape == (0, 3)


if __name__ == '__main__':
    for name, function in list(globals().items()):
        if name.startswith('test_') and callable(function):
            function()
