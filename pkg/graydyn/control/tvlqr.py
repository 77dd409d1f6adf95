import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch.autograd.functional import jacobian

from engine.diffcore import DTYPE
from engine.dynamics import GeneralizedState, rk4_step
from engine.errors import NumericError
from control.policy import TrackingPolicy

logger = logging.getLogger(__name__)


def linearize(model, x, u, dt, substeps=1):
    """
    Jacobians of the discrete map x' = rk4_step(x, u) (input held over `dt`, `substeps` RK4 steps).

    :param x: State vector [q, qdot] (2N,)
    :param u: Input (M,)
    :return: A (2N, 2N), B (2N, M) as np.arrays
    """
    x = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)
    u = torch.as_tensor(np.asarray(u, dtype=np.float64), dtype=DTYPE)

    def step(xx, uu):
        return rk4_step(model, GeneralizedState.from_vector(xx), uu, dt, substeps).as_vector()

    A, B = jacobian(step, (x, u))
    return A.detach().numpy(), B.detach().numpy()


def riccati_gains(As, Bs, Q, R, Qf):
    """
    Backward Riccati recursion of the finite-horizon LQR problem
    min sum_t x_t'Q x_t + u_t'R u_t + x_H'Qf x_H  s.t. x_{t+1} = A_t x_t + B_t u_t.

    :return: gains K_t of shape (H, M, 2N), optimal inputs are u_t = -K_t x_t
    """
    P = np.asarray(Qf, dtype=np.float64)
    gains = []
    for t in reversed(range(len(As))):
        A, B = As[t], Bs[t]
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P = Q + A.T @ P @ A - A.T @ P @ B @ K
        P = 0.5 * (P + P.T)
        if not (np.isfinite(K).all() and np.isfinite(P).all()):
            raise NumericError(f'Non-finite Riccati iterate at step {t}')
        gains.append(K)
    return np.stack(gains[::-1])


@dataclass
class TvlqrPolicy(TrackingPolicy):
    """ u_t = u_bar_t - K_t (x - x_bar_t) about a nominal Trajectory """
    nominal: object
    gains: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray

    @property
    def horizon(self):
        return len(self.gains)

    def action(self, x, t):
        return apply_policy(self, x, t)


def tvlqr(model, nominal, Q, R, Qf, substeps=1):
    """ Time-varying LQR gains from linearizations of `model` at every knot of `nominal` """
    dt = nominal.dt
    linear = [linearize(model, x, u, dt, substeps) for x, u in zip(nominal.states, nominal.inputs)]
    gains = riccati_gains([a for a, _ in linear], [b for _, b in linear], Q, R, Qf)
    logger.debug('TVLQR over %d knots, max gain %.3g', len(gains), np.abs(gains).max())
    return TvlqrPolicy(nominal, gains, Q, R, Qf)


def apply_policy(policy, x, t, clip=np.inf):
    """ Feedback law at time index `t`, clipped elementwise to +-clip """
    policy.check_time(t)
    nominal = policy.nominal
    u = nominal.inputs[t] - policy.gains[t] @ (np.asarray(x, dtype=np.float64) - nominal.states[t])
    return np.clip(u, -clip, clip)
