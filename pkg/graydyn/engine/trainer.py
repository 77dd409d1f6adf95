import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional

import numpy as np
import torch
from torch.utils.data import BatchSampler, DataLoader, RandomSampler

from engine.diffcore import AdamState, ParamVector, adam_step, value_and_grad
from engine.dynamics import GeneralizedState, rk4_step
from engine.errors import ConfigError, InputShapeError, NumericError
from engine.models import build, whitebox_mask
from misc.utils import derive_seed, progress
from systems.double_pendulum import DoublePendulumParams, true_system
from systems.sampling import SamplingSpec, sample_transitions

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ('model', 'seed', 'size', 'train_loss', 'val_loss', 'passed')
VALIDATION_SIZE = 2048
FIRST_SIZE = 8


@dataclass
class TrainConfig:
    """
    :param lam: Weight of the velocity term of the prediction loss
    :param lr: Adam learning rate of network weights
    :param whitebox_lr: Adam learning rate of physical parameters
    :param batch_size: Datasets up to this size are trained full-batch
    :param threshold: Validation loss a model must reach to pass in the data-efficiency sweep
    """
    lam: float = 0.1
    lr: float = 1e-3
    whitebox_lr: float = 1e-2
    batch_size: int = 1024
    epochs: int = 5000
    seed: int = 0
    threshold: float = 10 ** -2.5

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f'Velocity loss weight must be non-negative, got {self.lam}')
        if self.epochs < 0:
            raise ConfigError(f'Epoch count must be non-negative, got {self.epochs}')
        if not (self.lr > 0 and self.whitebox_lr > 0):
            raise ConfigError('Learning rates must be positive')
        if self.batch_size < 1:
            raise ConfigError(f'Batch size must be positive, got {self.batch_size}')
        if not self.threshold > 0:
            raise ConfigError(f'Validation threshold must be positive, got {self.threshold}')


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: List[dict] = field(default_factory=list)
    adam: Optional[AdamState] = None

    @property
    def train_losses(self):
        return [h['train_loss'] for h in self.history]


def prediction_loss(model, batch, lam, dt):
    """
    Mean over the batch of |q' - q'_pred|^2 + lam |qdot' - qdot'_pred|^2, the predictions
    coming from one RK4 step of the model.
    """
    if batch['q'].shape[0] == 0:
        raise InputShapeError('Prediction loss of an empty batch')
    pred = rk4_step(model, GeneralizedState(batch['q'], batch['qdot']), batch['u'], dt)
    err_q = ((batch['q_next'] - pred.q) ** 2).sum(-1)
    err_qdot = ((batch['qdot_next'] - pred.qdot) ** 2).sum(-1)
    return (err_q + lam * err_qdot).mean()


def validate(model, val_set, lam, dt=None, chunk=4096):
    """ Prediction loss over the whole set, without gradients """
    dt = val_set.dt if dt is None else dt
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(val_set), chunk):
            idx = list(range(start, min(start + chunk, len(val_set))))
            total += prediction_loss(model, val_set[idx], lam, dt).item() * len(idx)
    return total / len(val_set)


def learning_rates(model, config):
    """ Per-element learning rates: `whitebox_lr` for physical scalars, `lr` for network weights """
    mask = whitebox_mask(model)
    lr = torch.full(mask.shape, config.lr, dtype=torch.float64)
    lr[mask] = config.whitebox_lr
    return lr


def _batches(dataset, config, generator):
    if len(dataset) <= config.batch_size:
        return [dataset.batch()]
    sampler = BatchSampler(RandomSampler(dataset, generator=generator), config.batch_size, drop_last=False)
    return DataLoader(dataset, sampler=sampler, batch_size=None)


def train(model, train_set, config, val_set=None, writer=None, adam=None, history=None, show_progress=True):
    """
    Adam on the prediction loss for `config.epochs` epochs. Passing the `adam` state and
    `history` of a previous run continues it.

    :param writer: Optional tensorboardX SummaryWriter
    :return: TrainResult
    """
    if len(train_set) == 0:
        raise InputShapeError('Training set is empty')
    if train_set.n != model.n or train_set.m != model.m:
        raise InputShapeError(f'Dataset has N={train_set.n}, M={train_set.m}, model has N={model.n}, M={model.m}')
    history = list(history or [])
    params = ParamVector.from_module(model)
    if adam is None:
        adam = AdamState.zeros(params, lr=learning_rates(model, config))
    generator = torch.Generator().manual_seed(derive_seed(config.seed, 'batches') + len(history))

    epochs = range(len(history), len(history) + config.epochs)
    if show_progress:
        epochs = progress(epochs, desc='train', leave=False)

    for epoch in epochs:
        losses, weights = [], []
        for batch in _batches(train_set, config, generator):
            try:
                loss, grad = value_and_grad(lambda: prediction_loss(model, batch, config.lam, train_set.dt), model)
            except NumericError as err:
                raise NumericError(f'Training failed at epoch {epoch}: {err}') from err
            adam, params = adam_step(adam, params, grad)
            params.assign_to(model)
            losses.append(loss)
            weights.append(batch['q'].shape[0])

        record = {'epoch': epoch, 'train_loss': float(np.average(losses, weights=weights))}
        if val_set is not None:
            record['val_loss'] = validate(model, val_set, config.lam)
        history.append(record)
        logger.debug('Epoch %d: %s', epoch, record)
        if writer is not None:
            for k, v in record.items():
                if k != 'epoch':
                    writer.add_scalar(k.replace('_loss', '/loss'), v, epoch)

    return TrainResult(model, history, adam)


class Bracket(NamedTuple):
    """ Largest failing and smallest passing training-set size; `passing` is None when none passed """
    failing: Optional[int]
    passing: Optional[int]

    def __str__(self):
        if self.passing is None:
            return 'exceeds max_size'
        return f'({self.failing or "-"}, {self.passing}]'


@dataclass
class SweepResult:
    model: str
    cells: List[dict]
    brackets: dict


def sweep_sizes(max_size):
    if max_size < FIRST_SIZE or max_size & (max_size - 1):
        raise ConfigError(f'max_size must be {FIRST_SIZE} times a power of 2, got {max_size}')
    return [FIRST_SIZE * 2 ** k for k in range(int(math.log2(max_size // FIRST_SIZE)) + 1)]


def _sweep_seed(spec, threshold, sizes, seed, config, sampling, val_size, params):
    """ Doubles the training set of one seed until the validation threshold is met """
    system = true_system(params)
    val_set = sample_transitions(system, replace(sampling, count=val_size, seed=derive_seed(seed, 'val')))
    cells, failing = [], None
    for size in sizes:
        train_set = sample_transitions(system, replace(sampling, count=size, seed=derive_seed(seed, f'train-{size}')))
        model = build(replace(spec, seed=derive_seed(seed, 'init')))
        try:
            result = train(model, train_set, replace(config, seed=seed), show_progress=False)
            train_loss = result.history[-1]['train_loss'] if result.history else float('nan')
            val_loss = validate(model, val_set, config.lam)
        except NumericError as err:
            logger.warning('%s seed %d size %d failed: %s', spec.name, seed, size, err)
            train_loss = val_loss = float('nan')
        passed = bool(val_loss <= threshold)
        cells.append({'model': spec.name, 'seed': seed, 'size': size, 'train_loss': train_loss,
                      'val_loss': val_loss, 'passed': passed})
        logger.info('%s seed %d size %d: val loss %.3g (%s)', spec.name, seed, size, val_loss,
                    'pass' if passed else 'fail')
        if passed:
            return cells, Bracket(failing, size)
        failing = size
    return cells, Bracket(failing, None)


def data_efficiency_sweep(spec, threshold, max_size, seeds, config=None, sampling=None,
                          val_size=VALIDATION_SIZE, params=None, workers=None):
    """
    Smallest i.i.d. training set (8, 16, 32, ... up to `max_size`) for which the trained model
    reaches `threshold` validation loss, per seed. Every size gets a fresh training set, the
    validation set is shared within a seed. Seeds run in parallel processes when `workers` > 1.

    :return: SweepResult
    """
    if not threshold > 0:
        raise ConfigError(f'Validation threshold must be positive, got {threshold}')
    sizes = sweep_sizes(max_size)
    config = TrainConfig() if config is None else config
    sampling = SamplingSpec() if sampling is None else sampling
    params = DoublePendulumParams.nominal() if params is None else params
    jobs = [(spec, threshold, sizes, seed, config, sampling, val_size, params) for seed in seeds]

    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_sweep_seed, *zip(*jobs)))
    else:
        outputs = [_sweep_seed(*job) for job in progress(jobs, desc=spec.name)]

    cells = [cell for seed_cells, _ in outputs for cell in seed_cells]
    brackets = {seed: bracket for seed, (_, bracket) in zip(seeds, outputs)}
    return SweepResult(spec.name, cells, brackets)
