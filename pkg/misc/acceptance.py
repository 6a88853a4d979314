"""
Long-running acceptance checks of the simulation, calibration, registration and learning stages.

Every check logs PASS or FAIL with the measured quantities. Run all of them
or pick some by name:

    python misc/acceptance.py pressurization registration

"""

import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import trimesh
from scipy import signal as sps
from scipy.spatial.transform import Rotation

from tactsim import attach_to_log
from tactsim.geometry import TriMesh, RigidTransform, build_sensor_skin, build_core, default_indenters, enclosed_volume
from tactsim.fesim import SimParams, SolverSettings, MembraneSolver, PARAM_BOUNDS, internal_forces, total_energy
from tactsim.sensor import Trajectory, default_electrode_layout
from tactsim.calib import CalibrationProblem, TrajectorySimulator, calibrate, converged_forces
from tactsim.register import RegistrationObservation, register, workspace_grid, workspace_rms_error
from tactsim.pipeline import TactileDataset, dataset_columns, lowpass_zero_phase, split
from tactsim.regress import NetworkSpec, PointSetRegressor, train, gradient_check
from tactsim.cli import main

logger = attach_to_log(filepath='acceptance.log')


def report(name, passed, **measured):
    logger.info('{} {}: {}'.format('PASS' if passed else 'FAIL', name,
                                   ', '.join('{}={:.4g}'.format(k, v) for k, v in measured.items())))
    return passed


def ventral_contact(skin, x):
    coords = skin.cur_coords
    candidates = np.flatnonzero((np.abs(coords[:, 1]) < 1e-9) & (coords[:, 2] < 0) & ~skin.anchored)
    return coords[candidates[np.argmin(np.abs(coords[candidates, 0] - x))]]


def check_gradients(n_meshes=10):
    """
    Internal forces against central differences of the membrane energy on perturbed spheres.
    """
    params = SimParams()
    worst = 0.0
    for seed in range(n_meshes):
        rng = np.random.default_rng(seed)
        skin = build_sensor_skin(radius=5e-3, cyl_length=0.0, resolution=1.5e-3, strict=False)
        mesh = skin.with_coords(skin.ref_coords * rng.uniform(1.0, 1.1) + rng.normal(0.0, 5e-5, skin.ref_coords.shape))
        forces = internal_forces(mesh, params)
        coords = np.array(mesh.cur_coords)
        for dof in rng.choice(coords.size, size=20, replace=False):
            plus, minus = coords.copy(), coords.copy()
            plus.reshape(-1)[dof] += 1e-8
            minus.reshape(-1)[dof] -= 1e-8
            numeric = -(total_energy(mesh.with_coords(plus), params) -
                        total_energy(mesh.with_coords(minus), params)) / 2e-8
            worst = max(worst, abs(numeric - forces.reshape(-1)[dof]) / np.abs(forces).max())
    return report('internal force gradients', worst <= 1e-5, worst_relative_error=worst)


def check_pressurization(resolution=5e-4):
    skin = build_sensor_skin(resolution=resolution)
    solver = MembraneSolver(skin, build_core(resolution=resolution), SimParams(), SolverSettings())
    record = solver.pressurize()
    error = abs(record.sensor_thickness - 15.1e-3) / 15.1e-3
    return report('pressurization thickness', error <= 5e-3, thickness_mm=1e3 * record.sensor_thickness,
                  relative_error=error)


def check_conservation(resolution=1e-3):
    """
    Volume and anchor conservation plus force sanity over a 30-increment sphere indentation.
    """
    skin = build_sensor_skin(resolution=resolution, strict=False)
    core = build_core(resolution=resolution)
    solver = MembraneSolver(skin, core, SimParams(), SolverSettings())
    solver.pressurize()
    reference = solver.reference_state.skin
    trajectory = Trajectory(default_indenters()['sphere_medium'], ventral_contact(reference, 4e-3),
                            [0.0, 0.0, 1.0], depth=3e-3)
    records = solver.run_trajectory(trajectory)
    target = solver.initial_volume * (1.0 + solver.params.expansion)
    volume_error, anchored, lateral, axial, monotone = 0.0, 0.0, 0.0, 0.0, True
    previous = 0.0
    for record in records:
        if record.diverged:
            break
        current = reference.with_coords(reference.cur_coords + record.nodal_displacements)
        volume_error = max(volume_error, abs(enclosed_volume(current) - enclosed_volume(core.mesh) - target) / target)
        anchored = max(anchored, np.abs(record.nodal_displacements[skin.anchored]).max())
        if record.force_magnitude > 0.5:
            lateral = max(lateral, abs(record.net_force[1]) / abs(record.net_force[2]))
            axial = max(axial, abs(record.net_force[0]) / abs(record.net_force[2]))
            monotone &= record.force_magnitude >= previous
            previous = record.force_magnitude
    converged = sum(not r.diverged for r in records)
    passed = report('conservation', converged == len(records) == 30 and volume_error <= 1e-6 and anchored == 0.0,
                    increments=converged, volume_error=volume_error, anchored_displacement=anchored)
    # the proximal anchor and the distal cap make the sensor asymmetric along its axis
    return report('force sanity', lateral <= 0.01 and monotone, lateral_shear_ratio=lateral,
                  axial_shear_ratio=axial) and passed


def check_symmetric_shear(resolution=1e-3):
    """
    Full shear vector of a normal sphere indentation on a sensor symmetric about the indentation axis.
    """
    radius = 6.7e-3
    sphere = trimesh.creation.icosphere(subdivisions=4 if resolution < 1e-3 else 3, radius=radius)
    skin = TriMesh.from_trimesh(sphere, np.asarray(sphere.vertices)[:, 2] >= 0.5 * radius - 1e-12)
    solver = MembraneSolver(skin, build_core(radius=radius, cyl_length=0.0, resolution=resolution), SimParams(),
                            SolverSettings())
    solver.pressurize()
    bottom = [0.0, 0.0, solver.reference_state.skin.cur_coords[:, 2].min()]
    records = solver.run_trajectory(Trajectory(default_indenters()['sphere_medium'], bottom, [0.0, 0.0, 1.0],
                                               depth=3e-3))
    shear = max([np.linalg.norm(r.net_force[:2]) / abs(r.net_force[2])
                 for r in records if not r.diverged and r.force_magnitude > 0.5], default=np.inf)
    converged = sum(not r.diverged for r in records)
    return report('symmetric shear', converged == 30 and shear <= 0.01, increments=converged, shear_ratio=shear)


def check_calibration_recovery(resolution=2e-3, budget=60):
    skin = build_sensor_skin(resolution=resolution, strict=False)
    core = build_core(resolution=resolution)
    simulator = TrajectorySimulator(skin, core)
    planted = SimParams()
    solver = MembraneSolver(skin, core, planted)
    solver.pressurize()
    trajectory = Trajectory(default_indenters()['sphere_medium'],
                            ventral_contact(solver.reference_state.skin, 4e-3), [0.0, 0.0, 1.0], depth=2e-3)
    records, thickness = simulator(planted, trajectory)
    # default signed thickness term, zero at the planted optimum
    problem = CalibrationProblem(trajectory, converged_forces(records), target_thickness=thickness)
    initial = planted.with_vector(np.mean(PARAM_BOUNDS, axis=1))
    result = calibrate(problem, initial, budget, simulator=simulator)
    params = result.params
    mu_error = abs(params.mu_NH - planted.mu_NH) / planted.mu_NH
    t_error = abs(params.t_s - planted.t_s) / planted.t_s
    best = result.report.evaluations[result.report.best_index]['J_total']
    return report('calibration recovery', mu_error <= 0.1 and t_error <= 0.1 and best <= 0.05,
                  mu_NH_error=mu_error, t_s_error=t_error, J_total=best)


def check_registration(trials=1000, noise=0.3e-3):
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(trials):
        truth = RigidTransform(Rotation.random(random_state=trial).as_matrix(), rng.uniform(-0.5, 0.5, 3))
        points = rng.uniform(-0.05, 0.05, size=(4, 3)) + [0.4, 0.0, 0.2]
        measured = truth.apply(points) + rng.normal(0.0, noise, (4, 3))
        estimate = register(RegistrationObservation(points, measured))
        worst = max(worst, workspace_rms_error(estimate, truth, workspace_grid([0.4, 0.0, 0.2], 0.05)))
    exact = RigidTransform(Rotation.random(random_state=trials).as_matrix(), [0.1, 0.2, 0.3])
    points = rng.uniform(-0.05, 0.05, size=(4, 3))
    recovered = register(RegistrationObservation(points, exact.apply(points)))
    exact_error = np.abs(recovered.as_matrix() - exact.as_matrix()).max()
    return report('registration', worst <= 1.5e-3 and exact_error <= 1e-10, worst_rms_mm=1e3 * worst,
                  exact_error=exact_error)


def check_filter(rate=1000.0, cutoff=5.0):
    t = np.arange(int(20 * rate)) / rate
    window = (t >= 5.0) & (t < 15.0)
    worst_gain, worst_phase = 0.0, 0.0
    for frequency in (1.0, 2.0, 5.0, 10.0, 50.0):
        filtered = lowpass_zero_phase(np.sin(2 * np.pi * frequency * t), rate, cutoff)
        in_phase = 2.0 * np.mean(filtered[window] * np.sin(2 * np.pi * frequency * t[window]))
        quadrature = 2.0 * np.mean(filtered[window] * np.cos(2 * np.pi * frequency * t[window]))
        expected = 1.0 / (1.0 + (frequency / cutoff) ** 2)
        worst_gain = max(worst_gain, abs(np.hypot(in_phase, quadrature) - expected) / expected)
        worst_phase = max(worst_phase, abs(np.degrees(np.arctan2(quadrature, in_phase))))
    b, a = sps.butter(1, cutoff, fs=rate)
    logger.debug('filter coefficients b={} a={}'.format(b, a))
    return report('zero-phase filter', worst_gain <= 0.02 and worst_phase <= 1.0, gain_error=worst_gain,
                  phase_deg=worst_phase)


def _realizable_dataset(network, n_rows=600, seed=0):
    rng = np.random.default_rng(seed)
    positions = default_electrode_layout(build_core()).positions
    values = rng.normal(0.0, 1.0, (n_rows, positions.shape[0]))
    with torch.no_grad():
        targets = network(torch.as_tensor(np.broadcast_to(positions, (n_rows,) + positions.shape).copy(),
                                        dtype=torch.float32),
                        torch.as_tensor(values, dtype=torch.float32)).numpy()
    columns = dataset_columns(1)
    table = pd.DataFrame(0.0, index=np.arange(n_rows), columns=columns)
    table['sensor_id'] = 0
    table['indenter_kind'] = 'sphere_medium'
    table['trajectory_id'] = np.arange(n_rows)
    table['increment'] = 1
    table[['e{}'.format(i + 1) for i in range(positions.shape[0])]] = values
    table[['{}{}'.format(axis, i + 1) for i in range(positions.shape[0]) for axis in ('ex', 'ey', 'ez')]] = \
        np.tile(positions.ravel(), (n_rows, 1))
    table[['cx', 'cy', 'cz']] = targets
    return TactileDataset(table, np.arange(1), seed)


def check_network(scale=8):
    """
    Gradient check, permutation invariance and realizability of a random network.
    """
    spec = NetworkSpec.default(3, scale=scale)
    torch.manual_seed(0)
    reference = PointSetRegressor(spec).double().eval()
    dataset = _realizable_dataset(reference.float())
    train_set, test_set = split(dataset, 'random', seed=0)
    errors = gradient_check(reference, train_set.electrode_coords[:8], train_set.electrode_values[:8],
                            train_set.targets('location', normalized=True)[:8], step=1e-6)
    worst_gradient = max(errors.values())

    reference = reference.double()
    coords = torch.as_tensor(test_set.electrode_coords[:16], dtype=torch.float64)
    values = torch.as_tensor(test_set.electrode_values[:16], dtype=torch.float64)
    permutation = torch.as_tensor(np.random.default_rng(1).permutation(coords.shape[1]))
    with torch.no_grad():
        invariance = float((reference(coords, values) -
                            reference(coords[:, permutation], values[:, permutation])).abs().max())

    student = train(spec, train_set, 'location', epochs=200, batch_size=32, learning_rate=1e-3, optimizer='adam',
                    progress=False)
    predicted = student.predict(test_set.electrode_coords, test_set.electrode_values, normalized=True)
    mse = float(np.mean((predicted - test_set.targets('location', normalized=True)) ** 2))
    return report('network', worst_gradient <= 1e-4 and invariance <= 1e-9 and mse <= 1e-3,
                  gradient_error=worst_gradient, permutation_error=invariance, realizability_mse=mse)


def check_studies(config='configs/default.json'):
    """
    End-to-end synthetic study: contiguity effect and leave-one-indenter-out ordering.
    """
    with tempfile.TemporaryDirectory() as tmp:
        code = main(['--config', config, '--out-dir', tmp, 'all'])
        if code:
            return report('studies', False, exit_code=code)
        with open(Path(tmp) / 'metrics.json', 'r') as fin:
            metrics = json.load(fin)
    contiguous = metrics['contiguous']['location']['location_mean']
    random = metrics['random']['location']['location_mean']
    ring = metrics['leave_one_out_ring']['location']['location_mean']
    sphere = metrics['leave_one_out_sphere_small']['location']['location_mean']
    return report('studies', contiguous <= 2.1e-3 and random <= 0.5 * contiguous and ring > sphere,
                  contiguous_mm=1e3 * contiguous, random_mm=1e3 * random, ring_mm=1e3 * ring,
                  sphere_small_mm=1e3 * sphere)


def check_determinism(config='configs/smoke.json'):
    digests = []
    with tempfile.TemporaryDirectory() as tmp:
        for attempt in ('first', 'second'):
            out_dir = Path(tmp) / attempt
            if main(['--config', config, '--out-dir', str(out_dir), 'all']):
                return report('determinism', False)
            with open(out_dir / 'metrics.json', 'r') as fin:
                metrics = json.load(fin)
            with open(out_dir / 'manifest.json', 'r') as fin:
                dataset_hash = json.load(fin)['output_hashes']['dataset/dataset.csv']
            digests.append((metrics, dataset_hash))
    return report('determinism', digests[0] == digests[1])


CHECKS = {
    'gradients': check_gradients,
    'pressurization': check_pressurization,
    'conservation': check_conservation,
    'symmetric_shear': check_symmetric_shear,
    'calibration': check_calibration_recovery,
    'registration': check_registration,
    'filter': check_filter,
    'network': check_network,
    'studies': check_studies,
    'determinism': check_determinism,
}


def run_acceptance(names=None):
    logger.info('---------- start acceptance ----------')
    results = {}
    for name in names or CHECKS:
        tik = time.time()
        results[name] = CHECKS[name]()
        logger.info('runtime {}: {:.1f} s\n'.format(name, time.time() - tik))
    logger.info('{} of {} checks passed'.format(sum(results.values()), len(results)))
    return all(results.values())


if __name__ == '__main__':
    sys.exit(0 if run_acceptance(sys.argv[1:]) else 1)
