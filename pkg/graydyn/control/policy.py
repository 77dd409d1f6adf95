import logging
from abc import abstractmethod

import numpy as np
import torch

from engine.diffcore import DTYPE
from engine.dynamics import GeneralizedState, rk4_step
from engine.errors import NumericError, PolicyError

logger = logging.getLogger(__name__)


class TrackingPolicy(object):
    """
    Base class for time-indexed policies u_t = pi(x_t, t) over a finite horizon
    """

    @property
    @abstractmethod
    def horizon(self):
        """ Number of time steps the policy is defined for """
        raise NotImplementedError

    @abstractmethod
    def action(self, x, t):
        """
        :param x: State vector [q, qdot] as np.array of shape (2N,)
        :param t: Time index in [0, horizon)
        :return: np.array, input of shape (M,)
        """
        raise NotImplementedError

    def check_time(self, t):
        if not 0 <= t < self.horizon:
            raise PolicyError(f'Time index {t} outside the policy horizon [0, {self.horizon})')


class OpenLoopPolicy(TrackingPolicy):
    """ Replays a fixed input sequence """

    def __init__(self, controls):
        self.controls = np.asarray(controls, dtype=np.float64)

    @property
    def horizon(self):
        return len(self.controls)

    def action(self, x, t):
        self.check_time(t)
        return self.controls[t]


def rollout_policy(system, policy, x0, dt, clip=np.inf, substeps=1, truncate=False):
    """
    Closes the loop between `policy` and `system` for the whole policy horizon, inputs clipped to
    +-clip and held over each step of `dt` (integrated with `substeps` RK4 steps).

    :param x0: Initial state vector (2N,)
    :param truncate: On divergence return the finite prefix instead of raising NumericError
    :return: states (GeneralizedState, horizon + 1 steps), controls (horizon, M) tensor; a
        truncated rollout has fewer steps
    """
    x = torch.as_tensor(np.asarray(x0, dtype=np.float64), dtype=DTYPE)
    states, controls = [x], []
    with torch.no_grad():
        for t in range(policy.horizon):
            u = torch.as_tensor(np.clip(policy.action(x.numpy(), t), -clip, clip), dtype=DTYPE)
            try:
                x = rk4_step(system, GeneralizedState.from_vector(x), u, dt, substeps).as_vector()
                if not torch.isfinite(x).all():
                    raise NumericError('non-finite state')
            except NumericError as err:
                if not truncate:
                    raise NumericError(f'Policy rollout diverged at step {t}: {err}') from err
                logger.warning('Policy rollout diverged at step %d of %d: %s', t, policy.horizon, err)
                break
            states.append(x)
            controls.append(u)
    controls = torch.stack(controls) if controls else torch.zeros(0, system.m, dtype=DTYPE)
    return GeneralizedState.from_vector(torch.stack(states)), controls
