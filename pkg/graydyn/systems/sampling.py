import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch

from engine.datasets import TransitionDataset
from engine.diffcore import DTYPE
from engine.dynamics import GeneralizedState, rk4_step, rollout
from engine.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplingSpec:
    """ q ~ U(q_range), qdot ~ U(qdot_range), u ~ N(0, u_std^2), next state after one RK4 step of `dt` """
    count: int = 8
    seed: int = 0
    dt: float = 0.01
    q_range: Tuple[float, float] = (-math.pi, math.pi)
    qdot_range: Tuple[float, float] = (-10.0, 10.0)
    u_std: float = 120.0

    def __post_init__(self):
        if len(self.q_range) != 2 or len(self.qdot_range) != 2:
            raise ConfigError(f'Sampling ranges need a lower and an upper bound, got q_range={self.q_range}, '
                              f'qdot_range={self.qdot_range}')
        if not self.dt > 0:
            raise ConfigError(f'Sampling time step must be positive, got {self.dt}')
        if self.count < 1:
            raise ConfigError(f'Sample count must be at least 1, got {self.count}')
        if self.q_range[0] >= self.q_range[1] or self.qdot_range[0] >= self.qdot_range[1]:
            raise ConfigError('Sampling ranges must be non-empty intervals')
        if self.u_std < 0:
            raise ConfigError(f'Input std must be non-negative, got {self.u_std}')


def sample_transitions(system, spec):
    """
    I.i.d. transitions of `system`; the next states come from one RK4 step, so a model identical
    to `system` reproduces the targets up to rounding.
    """
    rng = np.random.default_rng(spec.seed)
    n, m = system.n, system.m
    q = rng.uniform(*spec.q_range, size=(spec.count, n))
    qdot = rng.uniform(*spec.qdot_range, size=(spec.count, n))
    u = rng.normal(0.0, spec.u_std, size=(spec.count, m))

    state = GeneralizedState(torch.as_tensor(q, dtype=DTYPE), torch.as_tensor(qdot, dtype=DTYPE))
    u = torch.as_tensor(u, dtype=DTYPE)
    with torch.no_grad():
        nxt = rk4_step(system, state, u, spec.dt)
    logger.debug('Sampled %d transitions (seed %d)', spec.count, spec.seed)
    return TransitionDataset(state.q, state.qdot, u, nxt.q, nxt.qdot, spec.dt, 'iid')


def random_actuation_rollout(system, x0, horizon, dt, u_std, clip, seed, substeps=1):
    """
    Rolls out `system` from `x0` under i.i.d. N(0, u_std^2) inputs clipped to +-clip, each held
    for `dt` and integrated with `substeps` RK4 steps.

    :return: states (GeneralizedState, horizon + 1 steps), controls (horizon, M)
    """
    rng = np.random.default_rng(seed)
    controls = torch.as_tensor(np.clip(rng.normal(0.0, u_std, size=(horizon, system.m)), -clip, clip), dtype=DTYPE)
    with torch.no_grad():
        states = rollout(system, x0, controls, dt, substeps=substeps)
    return states, controls
