"""
regress.py
----------

Point-set regression from the electrode array to tactile features and fields.

The electrodes form a point cloud of 19 points carrying one value each. A
hierarchy of set-abstraction stages (centroid sampling, radius grouping,
shared per-point layers and max pooling) encodes the cloud, and fully
connected heads regress the contact location, the force vector or the
displacement sub-field.
"""

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
from sklearn.model_selection import GroupShuffleSplit
from tqdm import tqdm

from .calib import FORCE_THRESHOLD
from .pipeline import TargetNormalization, TARGETS
from .sensor import NUM_ELECTRODES
from .logger import attach_to_log

logger = attach_to_log()

BASE_SA_LAYERS = ((32, 2.5e-3, (64, 64, 128)),
                  (8, 7e-3, (128, 128, 256)),
                  (1, None, (256, 256, 512)))

BASE_HEAD_WIDTHS = (1024, 1024)


@dataclass(frozen=True)
class SetAbstractionSpec:
    """
    One set-abstraction stage: `npoint` centroids, grouping `radius` (m, None for all points), layer widths.
    """
    npoint: int
    radius: float
    widths: tuple

    def __post_init__(self):
        if self.npoint < 1 or not self.widths or min(self.widths) < 1:
            raise ValueError('invalid set abstraction stage {}'.format(self))
        if self.radius is not None and self.radius <= 0:
            raise ValueError('grouping radius must be positive, got {}'.format(self.radius))
        object.__setattr__(self, 'widths', tuple(int(w) for w in self.widths))


@dataclass(frozen=True)
class NetworkSpec:
    """
    Architecture of a point-set regressor.

    Parameters
    ----------
    sa_layers: tuple of SetAbstractionSpec
        Set-abstraction stages
    head_widths: tuple of int
        Widths of the fully connected layers before the output layer
    output_dim: int
        3 for location or force, 3 x field nodes for the displacement field
    scale: int
        Divisor the widths were derived with
    n_points: int
        Number of input points
    max_neighbors: int
        Cap of the points grouped per centroid
    length_scale: float
        Length (m) relative coordinates are divided by
    """
    sa_layers: tuple
    head_widths: tuple
    output_dim: int
    scale: int = 1
    n_points: int = NUM_ELECTRODES
    max_neighbors: int = 16
    length_scale: float = 0.01

    @classmethod
    def default(cls, output_dim, scale=4, **kwargs):
        """
        Three stages downsampling to 32, 8 and 1 points with two fully connected heads, widths divided by `scale`.
        """
        if scale < 1:
            raise ValueError('width divisor must be >= 1, got {}'.format(scale))
        layers = tuple(SetAbstractionSpec(npoint, radius, tuple(max(1, w // scale) for w in widths))
                       for npoint, radius, widths in BASE_SA_LAYERS)
        heads = tuple(max(1, w // scale) for w in BASE_HEAD_WIDTHS)
        return cls(layers, heads, int(output_dim), scale, **kwargs)

    def to_dict(self):
        return {'sa_layers': [{'npoint': s.npoint, 'radius': s.radius, 'widths': list(s.widths)}
                              for s in self.sa_layers],
                'head_widths': list(self.head_widths), 'output_dim': self.output_dim, 'scale': self.scale,
                'n_points': self.n_points, 'max_neighbors': self.max_neighbors,
                'length_scale': self.length_scale}

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['sa_layers'] = tuple(SetAbstractionSpec(**s) for s in data['sa_layers'])
        data['head_widths'] = tuple(data['head_widths'])
        return cls(**data)


def output_dim(target, n_field_nodes=128):
    if target not in TARGETS:
        raise ValueError('unknown target {}, expected one of {}'.format(target, TARGETS))
    return 3 * n_field_nodes if target == 'field' else 3


def canonical_order(xyz):
    """
    [B, N] indices sorting every cloud lexicographically by (x, y, z).
    """
    batch, num, _ = xyz.shape
    order = torch.arange(num, device=xyz.device).expand(batch, num)
    for axis in (2, 1, 0):
        keys = torch.gather(xyz[..., axis], 1, order)
        _, idx = torch.sort(keys, dim=1, stable=True)
        order = torch.gather(order, 1, idx)
    return order


def index_points(points, idx):
    """
    Input:
        points: [B, N, C]
        idx: [B, S] or [B, S, K]
    Return:
        [B, S, C] or [B, S, K, C]
    """
    view_shape = [points.shape[0]] + [1] * (idx.dim() - 1)
    batch_indices = torch.arange(points.shape[0], device=points.device).view(view_shape).expand_as(idx)
    return points[batch_indices, idx, :]


def square_distance(src, dst):
    """
    [B, S, N] squared distances between [B, S, 3] and [B, N, 3].
    """
    return torch.sum((src[:, :, None, :] - dst[:, None, :, :]) ** 2, dim=-1)


def farthest_point_sample(xyz, npoint):
    """
    [B, npoint] farthest point sampling started at the point farthest from the cloud mean.

    With fewer points than `npoint`, every point is sampled and the sequence
    repeats cyclically.
    """
    batch, num, _ = xyz.shape
    m = min(npoint, num)
    batch_indices = torch.arange(batch, device=xyz.device)
    centroids = torch.zeros(batch, m, dtype=torch.long, device=xyz.device)
    distance = torch.full((batch, num), float('inf'), dtype=xyz.dtype, device=xyz.device)
    farthest = torch.argmax(torch.sum((xyz - xyz.mean(dim=1, keepdim=True)) ** 2, dim=-1), dim=-1)
    for i in range(m):
        centroids[:, i] = farthest
        dist = torch.sum((xyz - xyz[batch_indices, farthest, :][:, None, :]) ** 2, dim=-1)
        distance = torch.minimum(distance, dist)
        farthest = torch.argmax(distance, dim=-1)
    if npoint > m:
        centroids = centroids[:, torch.arange(npoint, device=xyz.device) % m]
    return centroids


def query_ball_point(radius, nsample, xyz, new_xyz):
    """
    [B, S, K] nearest-first neighbors of every centroid within `radius`.

    Slots beyond the points in range repeat the nearest neighbor; K is
    min(nsample, N).
    """
    dists, idx = torch.sort(square_distance(new_xyz, xyz), dim=-1, stable=True)
    k = min(nsample, xyz.shape[1])
    dists, idx = dists[..., :k], idx[..., :k]
    if radius is not None:
        idx = torch.where(dists > radius ** 2, idx[..., :1].expand_as(idx), idx)
    return idx


class SetAbstraction(nn.Module):
    def __init__(self, spec, in_channels, max_neighbors, length_scale):
        super().__init__()
        self.npoint = spec.npoint
        self.radius = spec.radius
        self.max_neighbors = max_neighbors
        self.length_scale = length_scale
        layers = []
        last = in_channels + 3
        for width in spec.widths:
            layers += [nn.Linear(last, width), nn.ReLU()]
            last = width
        self.mlp = nn.Sequential(*layers)
        self.out_channels = last

    def forward(self, xyz, features):
        with torch.no_grad():
            new_idx = farthest_point_sample(xyz, self.npoint)
            new_xyz = index_points(xyz, new_idx)
            group_idx = query_ball_point(self.radius, self.max_neighbors, xyz, new_xyz)
        grouped_xyz = (index_points(xyz, group_idx) - new_xyz[:, :, None, :]) / self.length_scale
        grouped = torch.cat([grouped_xyz, index_points(features, group_idx)], dim=-1)
        return new_xyz, torch.max(self.mlp(grouped), dim=2)[0]


class PointSetRegressor(nn.Module):
    """
    Set-abstraction encoder with fully connected heads.

    Input points are put in canonical order first, so the output does not
    depend on the order the electrodes are listed in.
    """

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.register_buffer('value_scale', torch.ones(()))
        stages = []
        channels = 1
        for stage in spec.sa_layers:
            stages.append(SetAbstraction(stage, channels, spec.max_neighbors, spec.length_scale))
            channels = stages[-1].out_channels
        self.sa = nn.ModuleList(stages)
        layers = []
        last = channels * spec.sa_layers[-1].npoint
        for width in spec.head_widths:
            layers += [nn.Linear(last, width), nn.ReLU()]
            last = width
        self.head = nn.Sequential(*layers)
        self.output = nn.Linear(last, spec.output_dim)

    def forward(self, xyz, values):
        """
        Input:
            xyz: [B, N, 3] electrode coordinates (m)
            values: [B, N] electrode values
        Return:
            [B, output_dim] normalized prediction
        """
        if xyz.dim() != 3 or xyz.shape[1:] != (self.spec.n_points, 3) or values.shape != xyz.shape[:2]:
            raise ValueError('expected [B, {}, 3] points and [B, {}] values, got {} and {}'.format(
                self.spec.n_points, self.spec.n_points, tuple(xyz.shape), tuple(values.shape)))
        if not (torch.isfinite(xyz).all() and torch.isfinite(values).all()):
            raise ValueError('non-finite network input')
        order = canonical_order(xyz)
        xyz = index_points(xyz, order)
        features = torch.gather(values, 1, order)[..., None] / self.value_scale
        for stage in self.sa:
            xyz, features = stage(xyz, features)
        return self.output(self.head(features.reshape(features.shape[0], -1)))

    def layer_groups(self):
        """
        Parameters by layer group: one per set-abstraction stage, the heads and the output layer.
        """
        groups = {'sa{}'.format(i + 1): list(stage.parameters()) for i, stage in enumerate(self.sa)}
        groups['head'] = list(self.head.parameters())
        groups['output'] = list(self.output.parameters())
        return groups


@dataclass
class TrainedModel:
    """
    Regressor with the normalization of its training data.

    Parameters
    ----------
    spec: NetworkSpec
    network: PointSetRegressor
    target: str
        'location', 'force' or 'field'
    normalization: TargetNormalization
        Target normalization of the training rows
    training_log: list of dict
        Per-epoch `train_loss`, `valid_loss` and `best_valid_loss`
    seed: int
    dataset_manifest_hash: str
    """
    spec: NetworkSpec
    network: PointSetRegressor
    target: str
    normalization: TargetNormalization
    training_log: list = field(default_factory=list)
    seed: int = 0
    dataset_manifest_hash: str = ''

    @property
    def weights(self):
        """
        Flat parameter vector.
        """
        return nn.utils.parameters_to_vector(self.network.parameters()).detach().cpu().numpy()

    def predict(self, electrode_coords, electrode_values, normalized=False, batch_size=1024):
        """
        (n, output_dim) predictions, in physical units unless `normalized`.
        """
        coords = np.asarray(electrode_coords, dtype=float).reshape(-1, self.spec.n_points, 3)
        values = np.asarray(electrode_values, dtype=float).reshape(-1, self.spec.n_points)
        dtype = self.network.output.weight.dtype
        self.network.eval()
        outputs = []
        with torch.no_grad():
            for start in range(0, len(coords), batch_size):
                outputs.append(self.network(torch.as_tensor(coords[start:start + batch_size], dtype=dtype),
                                            torch.as_tensor(values[start:start + batch_size], dtype=dtype)).numpy())
        prediction = np.concatenate(outputs).astype(float) if outputs else np.zeros((0, self.spec.output_dim))
        return prediction if normalized else self.normalization.inverse(self.target, prediction)

    def predict_dataset(self, dataset):
        return self.predict(dataset.electrode_coords, dataset.electrode_values)


def forward(model, electrode_coords, electrode_values):
    """
    Prediction in physical units for a single electrode reading.

    Parameters
    ----------
    model: TrainedModel
    electrode_coords: (19, 3) float
        Electrode positions in the sensor frame (m)
    electrode_values: (19,) float

    Returns
    -------
    as_array: (output_dim,) float
    """
    coords = np.asarray(electrode_coords, dtype=float)
    values = np.asarray(electrode_values, dtype=float).ravel()
    if coords.shape != (model.spec.n_points, 3) or values.shape != (model.spec.n_points,):
        raise ValueError('expected {} points, got coordinates {} and values {}'.format(
            model.spec.n_points, coords.shape, values.shape))
    return model.predict(coords[None], values[None])[0]


def _validation_rows(groups, valid_fraction, seed):
    rows = np.arange(len(groups))
    if valid_fraction <= 0 or len(np.unique(groups)) < 2:
        return rows, rows
    splitter = GroupShuffleSplit(n_splits=1, test_size=valid_fraction, random_state=seed)
    return next(splitter.split(rows, groups=groups))


def _fit(network, coords, values, targets, groups, valid_fraction, epochs, seed, batch_size,
         learning_rate, momentum, optimizer, progress, log_offset=0):
    """
    Minimize the mean squared error of `network` and load its best validation weights.
    """
    dtype = network.output.weight.dtype
    coords = torch.as_tensor(coords, dtype=dtype)
    values = torch.as_tensor(values, dtype=dtype)
    targets = torch.as_tensor(targets, dtype=dtype)
    train_rows, valid_rows = _validation_rows(groups, valid_fraction, seed)
    train_rows = torch.as_tensor(train_rows)
    valid_rows = torch.as_tensor(valid_rows)

    if optimizer == 'sgd':
        solver = torch.optim.SGD(network.parameters(), lr=learning_rate, momentum=momentum)
    elif optimizer == 'adam':
        solver = torch.optim.Adam(network.parameters(), lr=learning_rate)
    else:
        raise ValueError('unknown optimizer {}, expected sgd or adam'.format(optimizer))
    loss_fn = nn.MSELoss()
    generator = torch.Generator().manual_seed(seed)

    best_loss = float('inf')
    best_state = copy.deepcopy(network.state_dict())
    log = []
    for epoch in tqdm(range(epochs), desc='training', disable=not progress):
        network.train()
        permutation = train_rows[torch.randperm(len(train_rows), generator=generator)]
        losses = []
        for b, start in enumerate(range(0, len(permutation), batch_size)):
            batch = permutation[start:start + batch_size]
            solver.zero_grad()
            loss = loss_fn(network(coords[batch], values[batch]), targets[batch])
            if not torch.isfinite(loss):
                raise FloatingPointError('non-finite training loss at epoch {} batch {}'.format(
                    epoch + log_offset, b))
            loss.backward()
            solver.step()
            losses.append(float(loss) * len(batch))

        network.eval()
        with torch.no_grad():
            valid_loss = float(loss_fn(network(coords[valid_rows], values[valid_rows]), targets[valid_rows]))
        if not np.isfinite(valid_loss):
            raise FloatingPointError('non-finite validation loss at epoch {}'.format(epoch + log_offset))
        if valid_loss < best_loss:
            best_loss = valid_loss
            best_state = copy.deepcopy(network.state_dict())
        log.append({'epoch': epoch + log_offset, 'train_loss': sum(losses) / len(train_rows),
                    'valid_loss': valid_loss, 'best_valid_loss': best_loss})
        logger.debug('epoch {}: train {:.4e}, valid {:.4e}'.format(epoch + log_offset, log[-1]['train_loss'],
                                                                   valid_loss))
    network.load_state_dict(best_state)
    return log


def train(spec, train_set, target, valid_fraction=0.1, epochs=60, seed=0, batch_size=64, learning_rate=0.05,
          momentum=0.9, optimizer='sgd', progress=True):
    """
    Train a regressor on normalized targets.

    Parameters
    ----------
    spec: NetworkSpec
    train_set: TactileDataset
        Training rows carrying a fitted normalization
    target: str
        'location', 'force' or 'field'
    valid_fraction: float
        Share of trajectories held out for model selection
    epochs: int
    seed: int
        Seed of the weight initialization, validation split and batch order

    Returns
    -------
    as_model: TrainedModel
        Weights of the epoch with the lowest validation loss
    """
    if not len(train_set):
        raise ValueError('cannot train on an empty dataset')
    if train_set.normalization is None:
        raise ValueError('training rows carry no target normalization')
    targets = train_set.targets(target, normalized=True)
    if targets.shape[1] != spec.output_dim:
        raise ValueError('network outputs {} values but target {} has {}'.format(
            spec.output_dim, target, targets.shape[1]))

    torch.manual_seed(seed)
    network = PointSetRegressor(spec)
    values = train_set.electrode_values
    scale = float(np.std(values))
    network.value_scale.fill_(scale if scale > 0 else 1.0)

    log = _fit(network, train_set.electrode_coords, values, targets, train_set.trajectory_ids, valid_fraction,
               epochs, seed, batch_size, learning_rate, momentum, optimizer, progress)
    logger.info('trained {} regressor: best validation loss {:.4e} after {} epochs'.format(
        target, log[-1]['best_valid_loss'] if log else float('nan'), epochs))
    return TrainedModel(spec, network, target, train_set.normalization, log, seed,
                        train_set.table_sha256())


def fine_tune(model, train_set, epochs=10, seed=0, valid_fraction=0.1, batch_size=64, learning_rate=0.01,
              momentum=0.9, optimizer='sgd', progress=True):
    """
    Continue training a model on the rows of another sensor.

    The targets are normalized with the model's own normalization.
    """
    if not len(train_set):
        raise ValueError('cannot fine-tune on an empty dataset')
    network = copy.deepcopy(model.network)
    targets = model.normalization.transform(model.target, train_set.targets(model.target, normalized=False))
    log = _fit(network, train_set.electrode_coords, train_set.electrode_values, targets, train_set.trajectory_ids,
               valid_fraction, epochs, seed, batch_size, learning_rate, momentum, optimizer, progress,
               log_offset=len(model.training_log))
    return TrainedModel(model.spec, network, model.target, model.normalization, model.training_log + log, seed,
                        model.dataset_manifest_hash)


def gradient_check(network, electrode_coords, electrode_values, targets, n_params=20, step=1e-5, seed=0, atol=1e-6):
    """
    Compare backpropagated gradients of the mean squared error to central finite differences.

    The check runs on a double precision copy of the network.

    Parameters
    ----------
    network: PointSetRegressor
    electrode_coords: (n, 19, 3) float
    electrode_values: (n, 19) float
    targets: (n, output_dim) float
    n_params: int
        Parameters drawn per layer group
    step: float
        Finite difference step
    atol: float
        Floor of the relative error denominator

    Returns
    -------
    as_dict: dict
        Largest relative error per layer group
    """
    network = copy.deepcopy(network).double()
    coords = torch.as_tensor(np.asarray(electrode_coords), dtype=torch.float64)
    values = torch.as_tensor(np.asarray(electrode_values), dtype=torch.float64)
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.float64)
    loss_fn = nn.MSELoss()

    def loss():
        return loss_fn(network(coords, values), targets)

    network.zero_grad()
    loss().backward()
    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        for group, params in network.layer_groups().items():
            sizes = np.array([p.numel() for p in params])
            picks = rng.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
            worst = 0.0
            for pick in picks:
                which = int(np.searchsorted(np.cumsum(sizes), pick, side='right'))
                param = params[which].view(-1)
                index = int(pick - (sizes[:which].sum() if which else 0))
                analytic = float(params[which].grad.view(-1)[index])
                original = float(param[index])
                param[index] = original + step
                upper = float(loss())
                param[index] = original - step
                lower = float(loss())
                param[index] = original
                numeric = (upper - lower) / (2 * step)
                worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol))
            errors[group] = worst
    logger.debug('gradient check: {}'.format(errors))
    return errors


def location_errors(predicted, true):
    """
    (n,) Euclidean distances between predicted and true contact locations.
    """
    return np.linalg.norm(np.asarray(predicted, dtype=float) - np.asarray(true, dtype=float), axis=1)


def force_errors(predicted, true, threshold=FORCE_THRESHOLD):
    """
    Force magnitude errors and angular errors.

    Returns
    -------
    magnitude: (n,) float
        | |F_pred| - |F| |
    angle: (m,) float
        Angle (rad) between predicted and true force, for the m samples with |F| >= threshold
    """
    predicted = np.asarray(predicted, dtype=float)
    true = np.asarray(true, dtype=float)
    norm_pred = np.linalg.norm(predicted, axis=1)
    norm_true = np.linalg.norm(true, axis=1)
    magnitude = np.abs(norm_pred - norm_true)
    valid = (norm_true >= threshold) & (norm_pred > 0)
    cosine = np.einsum('ij,ij->i', predicted[valid], true[valid]) / (norm_pred[valid] * norm_true[valid])
    return magnitude, np.arccos(np.clip(cosine, -1.0, 1.0))


def field_errors(predicted, true):
    """
    (n,) mean per-node Euclidean displacement error of every sample.
    """
    predicted = np.asarray(predicted, dtype=float).reshape(len(predicted), -1, 3)
    true = np.asarray(true, dtype=float).reshape(len(true), -1, 3)
    return np.linalg.norm(predicted - true, axis=2).mean(axis=1)


def feature_metrics(target, predicted, true):
    """
    Mean and median errors of location or force predictions in physical units.
    """
    if not len(true):
        raise ValueError('no samples to evaluate')
    if target == 'location':
        errors = location_errors(predicted, true)
        return {'location_mean': float(errors.mean()), 'location_median': float(np.median(errors))}
    if target == 'force':
        magnitude, angle = force_errors(predicted, true)
        nan = float('nan')
        return {'force_mag_mean': float(magnitude.mean()), 'force_mag_median': float(np.median(magnitude)),
                'angle_mean': float(angle.mean()) if len(angle) else nan,
                'angle_median': float(np.median(angle)) if len(angle) else nan,
                'angle_samples': int(len(angle))}
    raise ValueError('feature metrics need a location or force target, got {}'.format(target))


def evaluate_features(model, test_set):
    """
    Location or force error statistics of a model on a test set.
    """
    if not len(test_set):
        raise ValueError('cannot evaluate on an empty dataset')
    return feature_metrics(model.target, model.predict_dataset(test_set), test_set.targets(model.target))


def evaluate_field(model, test_set):
    """
    Mean nodal displacement error (m) of a field model.
    """
    if model.target != 'field':
        raise ValueError('field evaluation needs a field model, got a {} model'.format(model.target))
    if not len(test_set):
        raise ValueError('cannot evaluate on an empty dataset')
    errors = field_errors(model.predict_dataset(test_set), test_set.targets('field'))
    return {'mean_nodal_displacement_error': float(errors.mean())}


def per_sample_errors(model, dataset):
    """
    Table of the error of every row, with its provenance.
    """
    predicted = model.predict_dataset(dataset)
    true = dataset.targets(model.target)
    table = dataset.table[['sensor_id', 'indenter_kind', 'trajectory_id', 'increment']].copy()
    if model.target == 'location':
        table['location_error'] = location_errors(predicted, true)
    elif model.target == 'force':
        table['force_magnitude'] = np.linalg.norm(true, axis=1)
        table['force_mag_error'] = force_errors(predicted, true)[0]
        norms = np.linalg.norm(predicted, axis=1) * table['force_magnitude'].to_numpy()
        cosine = np.einsum('ij,ij->i', predicted, true) / np.where(norms > 0, norms, 1.0)
        angle = np.arccos(np.clip(cosine, -1.0, 1.0))
        table['angle_error'] = np.where(table['force_magnitude'] >= FORCE_THRESHOLD, angle, np.nan)
    else:
        table['field_error'] = field_errors(predicted, true)
    return table.reset_index(drop=True)


def save_checkpoint(model, filepath):
    torch.save({'spec': model.spec.to_dict(), 'state_dict': model.network.state_dict(), 'target': model.target,
                'normalization': model.normalization.to_dict(), 'training_log': model.training_log,
                'seed': model.seed, 'dataset_manifest_hash': model.dataset_manifest_hash}, filepath)


def load_checkpoint(filepath):
    checkpoint = torch.load(filepath, map_location='cpu')
    spec = NetworkSpec.from_dict(checkpoint['spec'])
    network = PointSetRegressor(spec)
    network.load_state_dict(checkpoint['state_dict'])
    network.eval()
    return TrainedModel(spec, network, checkpoint['target'],
                        TargetNormalization.from_dict(checkpoint['normalization']),
                        list(checkpoint.get('training_log', [])), checkpoint.get('seed', 0),
                        checkpoint.get('dataset_manifest_hash', ''))
