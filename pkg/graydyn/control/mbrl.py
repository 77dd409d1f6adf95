import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import torch

from control.dircol import CostWeights, DircolConfig, dircol_plan, perturb_nominal
from control.policy import OpenLoopPolicy, rollout_policy
from control.tvlqr import tvlqr
from engine.datasets import TransitionDataset
from engine.diffcore import DTYPE
from engine.dynamics import GeneralizedState
from engine.errors import ConfigError, NumericError
from engine.models import build
from engine.trainer import TrainConfig, train
from misc.utils import derive_seed, progress
from systems.double_pendulum import end_effector, true_system
from systems.sampling import random_actuation_rollout

logger = logging.getLogger(__name__)

EPISODE_COLUMNS = ('episode', 'performance_m', 'hold_m', 'success', 'plan_feasible', 'max_defect', 'diverged',
                   'dataset_size', 'train_loss')


@dataclass
class MbrlConfig:
    """
    Swing-up task: reach the goal in `reach_time` seconds and hold it for `hold_time` more.

    :param u_std: Input std of the random first episode
    :param noise_std: Std of the perturbations added to planned trajectories while exploring
    :param success_threshold: Hold-phase end-effector distance (m) counting as solving the task
    :param substeps: RK4 steps per knot when integrating the true system and linearizing for TVLQR
    """
    reach_time: float = 2.06
    hold_time: float = 0.5
    dt: float = 0.1
    clip: float = 120.0
    noise_std: float = 0.25
    u_std: float = 120.0
    init_epochs: int = 5000
    episode_epochs: int = 1000
    lr: float = 3e-4
    whitebox_lr: float = 1e-2
    lam: float = 0.1
    substeps: int = 10
    x0: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    goal: Tuple[float, ...] = (math.pi, 0.0, 0.0, 0.0)
    max_episodes: int = 15
    success_threshold: float = 0.3
    stop_on_success: bool = False
    seed: int = 0
    weights: CostWeights = field(default_factory=CostWeights.for_pendulum)
    dircol: Optional[DircolConfig] = None

    def __post_init__(self):
        if not (self.reach_time > 0 and self.hold_time >= 0 and self.dt > 0):
            raise ConfigError('Horizon times must be positive')
        if not self.clip > 0:
            raise ConfigError(f'Input clip must be positive, got {self.clip}')
        if self.substeps < 1:
            raise ConfigError(f'Need at least one RK4 substep, got {self.substeps}')
        if self.max_episodes < 1:
            raise ConfigError(f'Need at least one episode, got {self.max_episodes}')
        if self.dircol is None:
            self.dircol = DircolConfig(clip=self.clip, reach_index=self.reach_index)

    @property
    def reach_index(self):
        return math.ceil(self.reach_time / self.dt - 1e-9)

    @property
    def horizon(self):
        """ Knot points: the reach phase plus the hold phase """
        return self.reach_index + round(self.hold_time / self.dt)

    def train_config(self, epochs):
        return TrainConfig(lam=self.lam, lr=self.lr, whitebox_lr=self.whitebox_lr, epochs=epochs, seed=self.seed)


@dataclass
class EpisodeRecord:
    episode: int
    performance_m: float
    hold_m: float
    success: bool
    plan_feasible: bool
    max_defect: float
    diverged: bool
    dataset_size: int
    train_loss: float

    def as_row(self):
        return {k: getattr(self, k) for k in EPISODE_COLUMNS}


def _coordinates(trajectory):
    if isinstance(trajectory, GeneralizedState):
        return trajectory.q
    return torch.as_tensor(np.asarray(trajectory)[..., :2], dtype=DTYPE)


def performance_metric(params, trajectory, goal):
    """
    Mean distance (m) between the end effector and its position at the goal over the trajectory.

    :param trajectory: GeneralizedState or state vectors (T, 2N); velocities are ignored
    :param goal: Goal state vector or goal coordinates
    """
    q = _coordinates(trajectory)
    if len(q) == 0:
        raise ValueError('Performance of an empty trajectory')
    target = end_effector(params, torch.as_tensor(np.asarray(goal, dtype=np.float64)[:2]))
    return torch.linalg.norm(end_effector(params, q) - target, dim=-1).mean().item()


def hold_distance(params, trajectory, goal, reach_index):
    """ `performance_metric` over the knots from `reach_index` on """
    return performance_metric(params, _coordinates(trajectory)[reach_index:], goal)


class _Learner:
    """ Learned model with its optimizer state, trained on the growing dataset """

    def __init__(self, spec, config):
        self.model = build(spec)
        self.config = config
        self.adam = None
        self.history = []

    def fit(self, dataset, epochs):
        result = train(self.model, dataset, self.config.train_config(epochs), adam=self.adam, history=self.history,
                       show_progress=False)
        self.adam, self.history = result.adam, result.history
        return self.history[-1]['train_loss'] if self.history else float('nan')


def _track(model, system, nominal, config):
    """ TVLQR about `nominal` on the true system, replaying the nominal inputs if synthesis fails """
    weights = config.weights
    try:
        policy = tvlqr(model, nominal, weights.Q, weights.R, weights.Qf, config.substeps)
    except NumericError as err:
        logger.warning('TVLQR synthesis failed, replaying the planned inputs: %s', err)
        policy = OpenLoopPolicy(nominal.inputs)
    return rollout_policy(system, policy, config.x0, config.dt, config.clip, config.substeps, truncate=True)


def _score(params, states, config):
    """ Performance and hold distance of a possibly truncated rollout """
    hold = float('inf')
    if len(states) > config.reach_index:
        hold = hold_distance(params, states, config.goal, config.reach_index)
    return performance_metric(params, states, config.goal), hold


def run_episode(model, system, config, episode, warm_start=None):
    """
    Plans on `model`, evaluates the TVLQR tracking controller on `system` without noise and
    collects an exploration rollout about a perturbed plan. Rollouts that diverge are cut at
    their last finite state.

    :return: plan, evaluation states, exploration TransitionDataset, whether the evaluation diverged
    """
    plan = dircol_plan(model, np.asarray(config.x0, dtype=np.float64), config.goal, config.horizon, config.dt,
                       config.weights, config.dircol, warm_start)

    evaluation, controls = _track(model, system, plan, config)
    diverged = len(controls) < config.horizon

    perturbed = perturb_nominal(plan, config.noise_std, derive_seed(config.seed, f'noise-{episode}'))
    states, controls = _track(model, system, perturbed, config)
    return plan, evaluation, TransitionDataset.from_rollout(states, controls, config.dt), diverged


def mbrl_loop(spec, params, config, model=None):
    """
    Model-based RL on the swing-up task. Episode 0 actuates the true system randomly; every
    further episode trains the model on all data so far, plans and tracks with it, and appends
    the exploration rollout to the data.

    :param spec: ModelSpec of the learned model
    :param params: DoublePendulumParams of the true system
    :param model: Fixed model to plan with instead of learning one (no training happens)
    :return: List of EpisodeRecord, all transitions collected (TransitionDataset)
    """
    system = true_system(params)
    x0 = GeneralizedState.from_vector(torch.as_tensor(config.x0, dtype=DTYPE))
    learner = _Learner(spec, config) if model is None else None

    states, controls = random_actuation_rollout(system, x0, config.horizon, config.dt, config.u_std, config.clip,
                                                derive_seed(config.seed, 'explore-0'), config.substeps)
    dataset = TransitionDataset.from_rollout(states, controls, config.dt)
    performance, hold = _score(params, states, config)
    records = [EpisodeRecord(0, performance, hold, hold <= config.success_threshold, False, float('nan'), False,
                             len(dataset), float('nan'))]

    plan = None
    for episode in progress(range(1, config.max_episodes), desc=spec.name, leave=False):
        train_loss = float('nan')
        if learner is not None:
            epochs = config.init_epochs if episode == 1 else config.episode_epochs
            train_loss = learner.fit(dataset, epochs)
        planner = learner.model if learner is not None else model

        plan, evaluation, explored, diverged = run_episode(planner, system, config, episode,
                                                           warm_start=plan if plan is not None and plan.feasible
                                                           else None)
        dataset = dataset.concat(explored)

        performance, hold = _score(params, evaluation, config)
        success = not diverged and hold <= config.success_threshold
        records.append(EpisodeRecord(episode, performance, hold, success, plan.feasible, plan.max_defect, diverged,
                                     len(dataset), train_loss))
        logger.info('%s episode %d: distance %.3f m, hold %.3f m, plan %s%s', spec.name, episode, performance, hold,
                    'feasible' if plan.feasible else 'infeasible', ', rollout diverged' if diverged else '')
        if config.stop_on_success and success:
            break

    return records, dataset
