"""
cli.py
------

Command-line entry point running the pipeline stage by stage.

Every stage writes into the output directory; a failing stage leaves its
partial artifacts, a `FAILED` marker and a stage-specific exit code.
"""

import argparse
import hashlib
import json
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import calib, fesim, pipeline, regress, register, sensor
from .config import load_config, save_config, derive_seed
from .geometry import TriMesh, save_obj, default_indenters, shapes_from_config
from .version import __version__
from .logger import attach_to_log

logger = attach_to_log()

STAGE_CODES = {
    'mesh': 10,
    'pressurize': 20,
    'trajectories': 30,
    'simulate': 40,
    'synth': 50,
    'assemble': 60,
    'split': 70,
    'train': 80,
    'eval': 90,
    'calibrate': 100,
    'register': 110,
    'process': 120,
    'validate': 130,
}

USAGE_ERROR = 2

STUDY_POLICIES = {'contiguous': 'contiguous', 'random': 'random', 'leave_one_out': 'leave_one_indenter_out',
                  'cross_sensor': 'cross_sensor'}


class StageFailure(Exception):
    """
    A pipeline stage failed; carries the stage name and its exit code.
    """

    def __init__(self, stage, error):
        super().__init__('stage {} failed: {}'.format(stage, error))
        self.stage = stage
        self.code = STAGE_CODES[stage]


def file_sha256(filepath):
    digest = hashlib.sha256()
    with open(filepath, 'rb') as fin:
        for chunk in iter(lambda: fin.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """
    Provenance of one command run in an output directory.
    """
    command: str
    config_path: str
    seed: int
    input_hashes: dict = field(default_factory=dict)
    output_paths: list = field(default_factory=list)
    output_hashes: dict = field(default_factory=dict)
    tool_version: str = __version__
    wall_time_s: float = 0.0
    status: str = 'running'

    def write(self, out_dir):
        out_dir = Path(out_dir)
        self.output_hashes = {path: file_sha256(out_dir / path) for path in self.output_paths
                              if (out_dir / path).is_file()}
        with open(out_dir / 'manifest.json', 'w') as fout:
            json.dump(asdict(self), fout, indent=2)


class Run:
    """
    State of one command run: configuration, output directory and manifest.
    """

    def __init__(self, args):
        self.args = args
        self.config = load_config(args.config)
        if args.seed is not None:
            self.config.seed = args.seed
        self.seed = self.config.seed
        self.jobs = args.jobs
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        attach_to_log(filepath=self.out_dir / 'tactsim.log')
        self.manifest = RunManifest(args.command, str(args.config) if args.config else '', self.seed,
                                    input_hashes={'config': self.config.sha256()})
        self._mesh = None
        (self.out_dir / 'FAILED').unlink(missing_ok=True)
        save_config(self.config, self.out_dir / 'config.json')

    def path(self, *parts):
        filepath = self.out_dir.joinpath(*parts)
        filepath.parent.mkdir(parents=True, exist_ok=True)
        return filepath

    def output(self, filepath):
        relative = str(Path(filepath).relative_to(self.out_dir))
        if relative not in self.manifest.output_paths:
            self.manifest.output_paths.append(relative)
        return filepath

    def input(self, name, filepath):
        self.manifest.input_hashes[name] = file_sha256(filepath)
        return filepath

    @contextmanager
    def stage(self, name):
        """
        Run a stage; any error is turned into a StageFailure after writing the `FAILED` marker.
        """
        logger.info('stage {}'.format(name))
        tik = time.time()
        try:
            yield
        except StageFailure:
            raise
        except Exception as error:
            logger.exception('stage {} failed'.format(name))
            with open(self.out_dir / 'FAILED', 'w') as fout:
                fout.write('stage: {}\nerror: {}: {}\n'.format(name, type(error).__name__, error))
            raise StageFailure(name, error) from error
        logger.info('stage {} done in {:.1f} s'.format(name, time.time() - tik))

    # artifacts shared between commands

    def mesh(self):
        if self._mesh is None:
            with self.stage('mesh'):
                skin, core = self.config.mesh.build()
                save_obj(skin, self.output(self.path('mesh', 'skin.obj')))
                save_obj(core.mesh, self.output(self.path('mesh', 'core.obj')))
                info = {'nodes': skin.num_nodes, 'triangles': skin.num_triangles,
                        'anchored': int(skin.anchored.sum()), 'sha256': skin.sha256()}
                with open(self.output(self.path('mesh', 'mesh.json')), 'w') as fout:
                    json.dump(info, fout, indent=2)
                logger.info('skin mesh: {} nodes, {} triangles'.format(skin.num_nodes, skin.num_triangles))
            self._mesh = skin, core
        return self._mesh

    def solver(self):
        skin, core = self.mesh()
        solver = fesim.MembraneSolver(skin, core, self.config.params, self.config.solver)
        with self.stage('pressurize'):
            reference = solver.pressurize()
            pressurized = solver.reference_state.skin
            np.savez(self.output(self.path('simulation', 'reference.npz')), ref_coords=pressurized.ref_coords,
                     cur_coords=pressurized.cur_coords, triangles=pressurized.triangles,
                     anchored=pressurized.anchored, pressure=reference.cavity_pressure,
                     thickness=reference.sensor_thickness)
        return solver

    def reference_skin(self):
        """
        Pressurized skin, from a previous run if available.
        """
        filepath = self.out_dir / 'simulation' / 'reference.npz'
        if not filepath.is_file():
            return self.solver().reference_state.skin
        data = np.load(self.input('reference', filepath))
        return TriMesh(data['ref_coords'], data['cur_coords'], data['triangles'], data['anchored'])

    def trajectories(self, skin=None, regenerate=False):
        """
        Trajectories of every configured indenter with global ids, read back unless `regenerate`.
        """
        filepath = self.out_dir / 'trajectories.json'
        if filepath.is_file() and not regenerate:
            return sensor.trajectories_from_json(self.input('trajectories', filepath))
        skin = skin if skin is not None else self.reference_skin()
        cfg = self.config.sensor
        with self.stage('trajectories'):
            trajectories = []
            for name, indenter in self.config.indenters().items():
                if cfg.n_points < 1:
                    continue
                for trajectory in sensor.make_trajectories(
                        skin, indenter, cfg.n_points, cfg.n_angled_per_point,
                        seed=derive_seed(self.seed, 'trajectories:{}'.format(name)), angle_deg=cfg.angle_deg,
                        normal_depth=cfg.normal_depth, angled_depth=cfg.angled_depth, increment=cfg.increment,
                        margin=cfg.contact_margin):
                    trajectories.append(replace(trajectory, trajectory_id=len(trajectories)))
            sensor.trajectories_to_json(trajectories, self.output(filepath))
            logger.info('{} trajectories'.format(len(trajectories)))
        return trajectories

    def records(self, trajectories):
        runs = []
        for trajectory in trajectories:
            filepath = self.out_dir / 'simulation' / 'traj_{:04d}.jsonl'.format(trajectory.trajectory_id)
            runs.append((trajectory.trajectory_id, trajectory, fesim.read_records(filepath)))
        return runs

    def sensors(self, skin=None):
        _, core = self.mesh()
        skin = skin if skin is not None else self.reference_skin()
        filepath = self.out_dir / 'synth' / 'sensors.json'
        if filepath.is_file():
            with open(self.input('sensors', filepath), 'r') as fin:
                document = json.load(fin)
        else:
            document = cmd_synth(self, skin)
        sensors = [sensor.VirtualSensor(skin, core, sensor.ElectrodeArray.from_dict(s['electrodes']), s['sensor_id'])
                   for s in document['sensors']]
        return sensors, np.array(document['field_node_ids'], dtype=int)

    def dataset(self):
        filepath = self.out_dir / 'dataset' / 'dataset.csv'
        if filepath.is_file():
            return pipeline.TactileDataset.read(self.input('dataset', filepath))
        return cmd_assemble(self)

    def network_spec(self, target, dataset):
        return regress.NetworkSpec.default(regress.output_dim(target, dataset.n_field_nodes),
                                           self.config.network.scale)

    def train(self, train_set, target, seed_stage):
        cfg = self.config.training
        return regress.train(self.network_spec(target, train_set), train_set, target, cfg.valid_fraction,
                             cfg.epochs, derive_seed(self.seed, seed_stage), cfg.batch_size, cfg.learning_rate,
                             cfg.momentum, cfg.optimizer)


# commands


def cmd_mesh(run):
    run.mesh()


def cmd_trajectories(run):
    run.trajectories(regenerate=True)


def cmd_simulate(run, solver=None):
    solver = solver or run.solver()
    trajectories = run.trajectories(skin=solver.reference_state.skin)
    skin, core = run.mesh()
    with run.stage('simulate'):
        results = fesim.simulate_many(run.config.params, trajectories, skin, core, run.config.solver,
                                      jobs=run.jobs, solver=solver)
        diverged = 0
        for trajectory, records in zip(trajectories, results):
            fesim.write_records(records, run.output(run.path(
                'simulation', 'traj_{:04d}.jsonl'.format(trajectory.trajectory_id))))
            diverged += any(r.diverged for r in records)
        if diverged:
            logger.warning('{} of {} trajectories diverged before completion'.format(diverged, len(trajectories)))
    return results


def cmd_synth(run, skin=None):
    skin = skin if skin is not None else run.reference_skin()
    _, core = run.mesh()
    cfg = run.config.sensor
    with run.stage('synth'):
        sensors = sensor.build_virtual_sensors(skin, core, cfg.n_sensors, derive_seed(run.seed, 'sensors'),
                                               cfg.gain_sigma, cfg.electrode_spacing,
                                               noise_sigma=cfg.noise_sigma, kernel_radius=cfg.kernel_radius,
                                               pressure_coefficient=cfg.pressure_coefficient,
                                               gap_coefficient=cfg.gap_coefficient)
        field_nodes = sensor.sample_field_nodes(skin, run.config.dataset.n_field_nodes,
                                                derive_seed(run.seed, 'field_nodes'))
        document = {'sensors': [{'sensor_id': s.sensor_id, 'electrodes': s.electrodes.to_dict()} for s in sensors],
                    'field_node_ids': field_nodes.tolist()}
        with open(run.output(run.path('synth', 'sensors.json')), 'w') as fout:
            json.dump(document, fout, indent=2)
    return document


def cmd_assemble(run):
    skin, _ = run.mesh()
    reference = run.reference_skin()
    trajectories = run.trajectories()
    sensors, field_nodes = run.sensors(reference)
    with run.stage('assemble'):
        runs = run.records(trajectories)
        dataset = pipeline.assemble(runs, sensors, field_nodes, derive_seed(run.seed, 'synth'), skin.sha256())
        dataset.write(run.output(run.path('dataset', 'dataset.csv')))
    return dataset


def study_splits(run, dataset):
    """
    (name, train, test) of every configured study.
    """
    cfg = run.config.dataset
    splits = []
    for study in cfg.studies:
        if study not in STUDY_POLICIES:
            raise ValueError('unknown study {}, expected one of {}'.format(study, sorted(STUDY_POLICIES)))
        policy = STUDY_POLICIES[study]
        seed = derive_seed(run.seed, 'split:{}'.format(study))
        if study == 'leave_one_out':
            present = set(dataset.table['indenter_kind'])
            for name in cfg.leave_out:
                if name not in present:
                    logger.warning('leave-one-out indenter {} is not in the dataset'.format(name))
                    continue
                splits.append(('leave_one_out_{}'.format(name),) +
                              pipeline.split(dataset, policy, seed, indenter=name))
        elif study == 'cross_sensor':
            if dataset.table['sensor_id'].nunique() < 2:
                logger.warning('cross-sensor study needs at least two virtual sensors')
                continue
            splits.append((study,) + pipeline.split(dataset, policy, seed, train_sensor=0, test_sensor=1))
        else:
            splits.append((study,) + pipeline.split(dataset, policy, seed, test_fraction=cfg.test_fraction))
    return splits


def cmd_split(run):
    dataset = run.dataset()
    args = run.args
    with run.stage('split'):
        if args.policy is None:
            splits = study_splits(run, dataset)
        else:
            name = args.name or args.policy
            splits = [(name,) + pipeline.split(dataset, args.policy, derive_seed(run.seed, 'split:{}'.format(name)),
                                               test_fraction=run.config.dataset.test_fraction,
                                               indenter=args.indenter, train_sensor=args.train_sensor,
                                               test_sensor=args.test_sensor)]
        for name, train_set, test_set in splits:
            train_set.write(run.output(run.path('splits', name, 'train.csv')))
            test_set.write(run.output(run.path('splits', name, 'test.csv')))
            logger.info('{}: {} train / {} test rows'.format(name, len(train_set), len(test_set)))
    return splits


def _read_split(run, name, part):
    filepath = run.out_dir / 'splits' / name / '{}.csv'.format(part)
    if not filepath.is_file():
        raise ValueError('split {} has no {} rows at {}; run `split` first'.format(name, part, filepath))
    return pipeline.TactileDataset.read(run.input('{}:{}'.format(name, part), filepath))


def cmd_train(run):
    args = run.args
    with run.stage('train'):
        train_set = _read_split(run, args.split, 'train')
        model = run.train(train_set, args.target, 'train:{}:{}'.format(args.split, args.target))
        regress.save_checkpoint(model, run.output(run.path('models', '{}_{}.pt'.format(args.split, args.target))))
    return model


def _evaluate(run, model, test_set, name):
    if model.target == 'field':
        metrics = regress.evaluate_field(model, test_set)
    else:
        metrics = regress.evaluate_features(model, test_set)
    errors = regress.per_sample_errors(model, test_set)
    errors.to_csv(run.output(run.path('eval', '{}_{}_errors.csv'.format(name, model.target))), index=False)
    with open(run.output(run.path('eval', '{}_{}_metrics.json'.format(name, model.target))), 'w') as fout:
        json.dump(metrics, fout, indent=2)
    logger.info('{} {}: {}'.format(name, model.target, metrics))
    return metrics, errors


def cmd_eval(run):
    args = run.args
    with run.stage('eval'):
        model = regress.load_checkpoint(run.input('checkpoint', args.checkpoint))
        if args.test is not None:
            test_set = pipeline.TactileDataset.read(run.input('test', args.test))
        else:
            test_set = _read_split(run, args.split, 'test')
        name = args.name or Path(args.checkpoint).stem.rsplit('_', 1)[0]
        return _evaluate(run, model, test_set, name)[0]


def _assert_contiguous(name, train_set, test_set):
    shared = set(train_set.trajectory_ids) & set(test_set.trajectory_ids)
    if shared and name == 'contiguous':
        raise ValueError('{} split shares trajectories {} between train and test'.format(name, sorted(shared)[:5]))


def cmd_studies(run, dataset):
    """
    Train and evaluate every target on every study split, with the figure tables.
    """
    with run.stage('split'):
        splits = study_splits(run, dataset)
    metrics, tables = {}, {target: [] for target in pipeline.TARGETS}
    for name, train_set, test_set in splits:
        _assert_contiguous(name, train_set, test_set)
        metrics[name] = {}
        for target in run.config.training.targets:
            with run.stage('train'):
                model = run.train(train_set, target, 'train:{}:{}'.format(name, target))
                regress.save_checkpoint(model, run.output(run.path('models', '{}_{}.pt'.format(name, target))))
            with run.stage('eval'):
                metrics[name][target], errors = _evaluate(run, model, test_set, name)
                errors.insert(0, 'study', name)
                tables[target].append(errors)
            if name == 'cross_sensor':
                metrics['cross_sensor_fine_tuned'] = metrics.get('cross_sensor_fine_tuned', {})
                with run.stage('train'):
                    tune_set, held_set = pipeline.split(test_set, 'contiguous',
                                                        derive_seed(run.seed, 'split:fine_tune'), test_fraction=0.5)
                    tuned = regress.fine_tune(model, tune_set, epochs=max(1, run.config.training.epochs // 4),
                                              seed=derive_seed(run.seed, 'fine_tune:{}'.format(target)),
                                              batch_size=run.config.training.batch_size)
                with run.stage('eval'):
                    metrics['cross_sensor_fine_tuned'][target], _ = _evaluate(run, tuned, held_set,
                                                                              'cross_sensor_fine_tuned')

    with run.stage('eval'):
        figures = {'location': 'figure_location.csv', 'force': 'figure_force.csv', 'field': 'figure_field.csv'}
        for target, frames in tables.items():
            if frames:
                pd.concat(frames, ignore_index=True).to_csv(run.output(run.path(figures[target])), index=False)
        rows = [{'held_out': name[len('leave_one_out_'):], 'target': target, 'metric': key, 'value': value}
                for name, per_target in metrics.items() if name.startswith('leave_one_out_')
                for target, values in per_target.items() for key, value in values.items()]
        if rows:
            pd.DataFrame(rows).to_csv(run.output(run.path('figure_leave_one_out.csv')), index=False)
        with open(run.output(run.path('metrics.json')), 'w') as fout:
            json.dump(metrics, fout, indent=2, sort_keys=True)
    return metrics


def _shape_library(config):
    return shapes_from_config({'shapes': config.shapes}) if config.shapes else default_indenters()


def _read_forces(filepath):
    """
    (s, n, 3) forces from a CSV with fx, fy, fz and an optional sensor_id column.
    """
    table = pd.read_csv(filepath)
    missing = [c for c in ('fx', 'fy', 'fz') if c not in table.columns]
    if missing:
        raise ValueError('force CSV {} lacks columns {}'.format(filepath, missing))
    if 'sensor_id' not in table.columns:
        return table[['fx', 'fy', 'fz']].to_numpy()[None]
    blocks = [group[['fx', 'fy', 'fz']].to_numpy() for _, group in table.groupby('sensor_id', sort=True)]
    if len({len(b) for b in blocks}) != 1:
        raise ValueError('every sensor needs the same number of force samples')
    return np.stack(blocks)


def cmd_calibrate(run):
    cfg = run.config.calibration
    reference = run.reference_skin()
    skin, core = run.mesh()
    with run.stage('calibrate'):
        shapes = _shape_library(run.config)
        if cfg.indenter not in shapes:
            raise ValueError('calibration indenter {} is unknown'.format(cfg.indenter))
        scfg = run.config.sensor
        trajectories = sensor.make_trajectories(reference, shapes[cfg.indenter], scfg.n_points,
                                                scfg.n_angled_per_point, derive_seed(run.seed, 'calibration'),
                                                scfg.angle_deg, scfg.normal_depth, scfg.angled_depth,
                                                scfg.increment, scfg.contact_margin)
        trajectory = trajectories[cfg.trajectory_index % len(trajectories)]
        simulator = calib.TrajectorySimulator(skin, core, run.config.solver)

        forces_path = getattr(run.args, 'forces', None)
        if forces_path:
            forces = _read_forces(run.input('forces', forces_path))
        else:
            logger.warning('no reference forces given; calibrating against forces simulated at the default parameters')
            records, _ = simulator(fesim.SimParams(), trajectory)
            forces = calib.converged_forces(records)
        problem = calib.CalibrationProblem(trajectory, forces, cfg.w1, cfg.w2,
                                           thickness_penalty=cfg.thickness_penalty,
                                           target_thickness=run.config.params.target_thickness)
        initial = run.config.params.with_vector(np.mean(fesim.PARAM_BOUNDS, axis=1))
        result = calib.calibrate(problem, initial, cfg.budget, simulator=simulator)
        result.report.write_trace(run.output(run.path('calibration', 'trace.csv')))
        result.report.write_trace(run.output(run.path('figure_calibration.csv')))
        with open(run.output(run.path('calibration', 'params.json')), 'w') as fout:
            json.dump({'params': result.params.to_dict(), 'improved': result.report.improved,
                       'best_index': result.report.best_index, 'message': result.report.message}, fout, indent=2)
    return result


def cmd_register(run):
    args = run.args
    with run.stage('register'):
        observation = register.read_points_csv(run.input('points', args.points))
        transform = register.register(observation)
        residual = transform.apply(observation.points_R) - observation.points_B
        rms = float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))
        least_squares = register.fit_rigid_transform(observation)
        grid = register.workspace_grid(observation.points_R.mean(axis=0), args.workspace)
        spread = register.workspace_rms_error(transform, least_squares, grid)
        register.write_transform_json(transform, run.output(run.path('register', 'transform.json')),
                                      residual_rms=rms, least_squares_workspace_rms=spread)
        logger.info('registration residual RMS {:.3f} mm'.format(1e3 * rms))
    return transform


def cmd_process(run):
    args = run.args
    with run.stage('process'):
        streams = pipeline.import_streams(run.input('streams', args.streams), run.input('mapping', args.mapping))
        frames = []
        for stream in streams:
            processed = pipeline.process_stream(stream, cutoff=args.cutoff, increment=run.config.sensor.increment)
            frame = pd.DataFrame(processed.electrodes, columns=['e{}'.format(i + 1) for i in
                                                                range(processed.electrodes.shape[1])])
            frame[['fx', 'fy', 'fz']] = processed.forces
            frame[['tipx', 'tipy', 'tipz']] = processed.indenter_tip
            frame.insert(0, 'time', processed.timestamps)
            frame.insert(0, 'increment', np.arange(1, len(processed) + 1))
            frame.insert(0, 'trajectory_id', processed.trajectory_id)
            frame.insert(0, 'indenter_kind', processed.indenter_kind)
            frame.insert(0, 'sensor_id', processed.sensor_id)
            frames.append(frame)
        if not frames:
            raise ValueError('no streams in {}'.format(args.streams))
        table = pd.concat(frames, ignore_index=True)
        table.to_csv(run.output(run.path('processed', 'streams.csv')), index=False)
    return table


def cmd_validate(run):
    args = run.args
    trajectories = run.trajectories()
    with run.stage('validate'):
        table = pd.read_csv(run.input('reference_forces', args.reference))
        simulated, reference = {}, {}
        for trajectory_id, trajectory, records in run.records(trajectories):
            rows = table[table['trajectory_id'] == trajectory_id]
            if not len(rows):
                continue
            name = trajectory.indenter.name
            simulated.setdefault(name, []).append(records)
            reference.setdefault(name, []).append(rows[['fx', 'fy', 'fz']].to_numpy())
        if not simulated:
            raise ValueError('no reference forces match the simulated trajectories')
        frame = calib.validate_forces(simulated, reference)
        frame.to_csv(run.output(run.path('validation.csv')), index=False)
    return frame


def cmd_all(run):
    solver = run.solver()
    reference = solver.reference_state.skin
    run.trajectories(skin=reference, regenerate=True)
    cmd_simulate(run, solver)
    cmd_synth(run, reference)
    dataset = cmd_assemble(run)
    metrics = cmd_studies(run, dataset)
    if run.config.calibration.enabled:
        cmd_calibrate(run)
    return metrics


COMMANDS = {
    'mesh': cmd_mesh,
    'trajectories': cmd_trajectories,
    'simulate': cmd_simulate,
    'synth': cmd_synth,
    'assemble': cmd_assemble,
    'split': cmd_split,
    'train': cmd_train,
    'eval': cmd_eval,
    'calibrate': cmd_calibrate,
    'register': cmd_register,
    'process': cmd_process,
    'validate': cmd_validate,
    'all': cmd_all,
}


def build_parser():
    parser = argparse.ArgumentParser(prog='tactsim', description='Simulated tactile sensing pipeline.')
    parser.add_argument('--version', action='version', version='%(prog)s {}'.format(__version__))
    parser.add_argument('--config', default=None, help='JSON configuration, defaults if omitted')
    parser.add_argument('--seed', type=int, default=None, help='override the configured seed')
    parser.add_argument('--jobs', type=int, default=1, help='worker processes for simulation')
    parser.add_argument('--out-dir', default='tactsim_run', help='output directory')
    sub = parser.add_subparsers(dest='command', required=True)

    for name in ('mesh', 'trajectories', 'simulate', 'synth', 'assemble', 'all'):
        sub.add_parser(name)

    split = sub.add_parser('split', help='split the dataset (every configured study if no policy)')
    split.add_argument('--policy', choices=pipeline.SPLIT_POLICIES, default=None)
    split.add_argument('--name', default=None, help='name of the split directory')
    split.add_argument('--indenter', default=None)
    split.add_argument('--train-sensor', type=int, default=None)
    split.add_argument('--test-sensor', type=int, default=None)

    train = sub.add_parser('train')
    train.add_argument('--target', choices=pipeline.TARGETS, required=True)
    train.add_argument('--split', default='contiguous', help='name of the split to train on')

    evaluate = sub.add_parser('eval')
    evaluate.add_argument('--checkpoint', required=True)
    evaluate.add_argument('--split', default='contiguous')
    evaluate.add_argument('--test', default=None, help='dataset CSV to evaluate on instead of the split')
    evaluate.add_argument('--name', default=None)

    calibrate = sub.add_parser('calibrate')
    calibrate.add_argument('--forces', default=None, help='CSV of reference forces (fx, fy, fz[, sensor_id])')

    reg = sub.add_parser('register')
    reg.add_argument('--points', required=True, help='CSV with label, xR, yR, zR, xB, yB, zB')
    reg.add_argument('--workspace', type=float, default=0.05, help='half extent of the check grid (m)')

    process = sub.add_parser('process')
    process.add_argument('--streams', required=True)
    process.add_argument('--mapping', required=True)
    process.add_argument('--cutoff', type=float, default=5.0)

    validate = sub.add_parser('validate')
    validate.add_argument('--reference', required=True, help='CSV of trajectory_id, fx, fy, fz')
    return parser


def main(argv=None):
    """
    Run one command; returns the exit code.
    """
    args = build_parser().parse_args(argv)
    tik = time.time()
    try:
        run = Run(args)
    except (ValueError, OSError) as error:
        logger.error('invalid configuration: {}'.format(error))
        return USAGE_ERROR
    code = 0
    try:
        COMMANDS[args.command](run)
        run.manifest.status = 'ok'
    except StageFailure as failure:
        logger.error(str(failure))
        run.manifest.status = 'failed: {}'.format(failure.stage)
        code = failure.code
    finally:
        run.manifest.wall_time_s = time.time() - tik
        run.manifest.write(run.out_dir)
    return code


if __name__ == '__main__':
    sys.exit(main())
