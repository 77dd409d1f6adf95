import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch
from scipy.optimize import minimize

from engine.diffcore import DTYPE
from engine.dynamics import GeneralizedState
from engine.errors import ConfigError, InputShapeError, NumericError

logger = logging.getLogger(__name__)


@dataclass
class Trajectory:
    """
    Knot-point states (H, 2N) and inputs (H, M) spaced `dt` apart. Planned trajectories
    carry their largest collocation defect and whether all constraints were met.
    """
    states: np.ndarray
    inputs: np.ndarray
    dt: float
    feasible: bool = True
    max_defect: float = 0.0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.states.ndim != 2 or self.inputs.ndim != 2 or len(self.states) != len(self.inputs):
            raise InputShapeError(f'Trajectory needs (H, 2N) states and (H, M) inputs, got '
                                  f'{self.states.shape} and {self.inputs.shape}')
        if len(self.states) < 2:
            raise InputShapeError('Trajectory needs at least 2 knot points')

    @property
    def horizon(self):
        return len(self.states)

    def generalized(self):
        return GeneralizedState.from_vector(torch.as_tensor(self.states, dtype=DTYPE))


@dataclass
class CostWeights:
    """ Quadratic tracking (Q), effort (R) and terminal (Qf) weights """
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray

    @classmethod
    def for_pendulum(cls):
        return cls(Q=np.diag([10.0, 10.0, 1.0, 1.0]), R=1e-3 * np.eye(2), Qf=100.0 * np.eye(4))


@dataclass
class DircolConfig:
    """
    :param defect_tol: Max-norm tolerance on collocation defects and terminal error
    :param max_iter: SLSQP iterations per solve
    :param restarts: Further solves from the last iterate while the plan is infeasible
    :param ftol: SLSQP convergence tolerance
    :param clip: Input bound; inputs are optimized in units of `clip`
    :param reach_index: First knot whose distance to the goal is penalized (0 tracks all knots)
    """
    defect_tol: float = 1e-3
    max_iter: int = 500
    restarts: int = 2
    ftol: float = 1e-9
    clip: float = 120.0
    reach_index: int = 0

    def __post_init__(self):
        if not (self.defect_tol > 0 and self.ftol > 0):
            raise ConfigError('Collocation tolerances must be positive')
        if self.max_iter < 1 or self.restarts < 0:
            raise ConfigError(f'Invalid collocation budget: max_iter={self.max_iter}, restarts={self.restarts}')
        if not self.clip > 0:
            raise ConfigError(f'Input clip must be positive, got {self.clip}')


def continuous_dynamics(model, states, inputs):
    """ xdot = [qdot, qddot] for state vectors (..., 2N) """
    n = states.shape[-1] // 2
    q, qdot = states[..., :n], states[..., n:]
    return torch.cat([qdot, model(q, qdot, inputs)], dim=-1)


def dynamics_jacobians(model, states, inputs):
    """
    Per-knot Jacobians of `continuous_dynamics` for knots stacked along the first axis.

    :return: f (H, 2N), df/dx (H, 2N, 2N), df/du (H, 2N, M) as np.arrays
    """
    X = torch.as_tensor(states, dtype=DTYPE).detach().requires_grad_(True)
    U = torch.as_tensor(inputs, dtype=DTYPE).detach().requires_grad_(True)
    f = continuous_dynamics(model, X, U)
    dx, du = [], []
    for i in range(f.shape[-1]):
        gx, gu = torch.autograd.grad(f[:, i].sum(), (X, U), retain_graph=True, allow_unused=True)
        dx.append(torch.zeros_like(X) if gx is None else gx)
        du.append(torch.zeros_like(U) if gu is None else gu)
    return f.detach().numpy(), torch.stack(dx, dim=1).numpy(), torch.stack(du, dim=1).numpy()


def collocation_defects(model, states, inputs, dt):
    """ Trapezoidal defects x_{t+1} - x_t - dt/2 (f_t + f_{t+1}), shape (H-1, 2N) """
    f = continuous_dynamics(model, states, inputs)
    return states[1:] - states[:-1] - 0.5 * dt * (f[:-1] + f[1:])


def linear_warm_start(x0, goal, horizon, dt, m, reach_index=None):
    """ States interpolated from x0 to the goal until the reach knot and held there, zero inputs """
    reach = horizon - 1 if not reach_index else min(reach_index, horizon - 1)
    alpha = np.clip(np.arange(horizon) / reach, 0.0, 1.0)[:, None]
    states = (1 - alpha) * np.asarray(x0)[None] + alpha * np.asarray(goal)[None]
    return Trajectory(states, np.zeros((horizon, m)), dt)


class _Collocation(object):
    """
    Transcription of the planning problem. The decision vector holds the knot states
    x_1..x_{H-1} (x_0 is fixed) followed by the inputs u_0..u_{H-1} divided by `scale`.
    """

    def __init__(self, model, x0, goal, horizon, dt, weights, reach, scale):
        self.model, self.x0, self.goal = model, x0, goal
        self.horizon, self.dt, self.reach, self.scale = horizon, dt, reach, scale
        self.n2, self.m = x0.size, model.m
        self.num_x = (horizon - 1) * self.n2
        self.Q, self.R, self.Qf = (np.asarray(w, dtype=np.float64) for w in (weights.Q, weights.R, weights.Qf))
        self._key, self._cache = None, None
        self.best = (np.inf, None)

    def pack(self, states, inputs):
        return np.concatenate([states[1:].ravel(), (inputs / self.scale).ravel()])

    def unpack(self, z):
        X = np.vstack([self.x0[None], z[:self.num_x].reshape(self.horizon - 1, self.n2)])
        return X, z[self.num_x:].reshape(self.horizon, self.m) * self.scale

    def cost(self, z):
        X, U = self.unpack(z)
        err = X - self.goal
        return (self.dt * np.einsum('ti,ij,tj->', err[self.reach:], self.Q, err[self.reach:])
                + self.dt * np.einsum('ti,ij,tj->', U, self.R, U) + err[-1] @ self.Qf @ err[-1])

    def cost_grad(self, z):
        X, U = self.unpack(z)
        err = X - self.goal
        gX = np.zeros_like(X)
        gX[self.reach:] = self.dt * err[self.reach:] @ (self.Q + self.Q.T)
        gX[-1] += (self.Qf + self.Qf.T) @ err[-1]
        gU = self.dt * U @ (self.R + self.R.T) * self.scale
        return np.concatenate([gX[1:].ravel(), gU.ravel()])

    def _evaluate(self, z):
        key = z.tobytes()
        if key != self._key:
            X, U = self.unpack(z)
            self._cache = (X, U) + dynamics_jacobians(self.model, X, U)
            self._key = key
        return self._cache

    def constraints(self, z):
        X, _, f, _, _ = self._evaluate(z)
        defects = X[1:] - X[:-1] - 0.5 * self.dt * (f[:-1] + f[1:])
        c = np.concatenate([defects.ravel(), X[-1] - self.goal])
        violation = np.abs(c).max()
        if violation < self.best[0]:
            self.best = (violation, z.copy())
        return c

    def constraint_jacobian(self, z):
        _, _, _, fx, fu = self._evaluate(z)
        n2, m, dt, H = self.n2, self.m, self.dt, self.horizon
        eye = np.eye(n2)
        J = np.zeros((H * n2, self.num_x + H * m))

        def xcol(t):
            return slice((t - 1) * n2, t * n2)

        def ucol(t):
            return slice(self.num_x + t * m, self.num_x + (t + 1) * m)

        for t in range(H - 1):
            rows = slice(t * n2, (t + 1) * n2)
            if t > 0:
                J[rows, xcol(t)] = -eye - 0.5 * dt * fx[t]
            J[rows, xcol(t + 1)] = eye - 0.5 * dt * fx[t + 1]
            J[rows, ucol(t)] = -0.5 * dt * fu[t] * self.scale
            J[rows, ucol(t + 1)] = -0.5 * dt * fu[t + 1] * self.scale
        J[(H - 1) * n2:, xcol(H - 1)] = eye
        return J

    def violation(self, z):
        """ Largest constraint violation and largest defect at `z`, inf where the model fails """
        try:
            c = self.constraints(z)
        except NumericError:
            return np.inf, np.inf
        if not np.isfinite(c).all():
            return np.inf, np.inf
        return np.abs(c).max(), np.abs(c[:-self.n2]).max()


def dircol_plan(model, x0, goal, horizon, dt, weights, config=None, warm_start=None):
    """
    Direct collocation: finds knot states and inputs from x0 to the goal that satisfy the
    trapezoidal collocation constraints of `model` and minimize the quadratic cost
    sum_{t >= reach} (x_t - g)'Q(x_t - g) dt + sum_t u_t'R u_t dt + (x_H - g)'Qf(x_H - g).

    The transcribed problem is solved by SLSQP with the terminal state and the defects as
    equality constraints and inputs bounded to +-clip. When the budget runs out the
    least-violating iterate is returned with `feasible=False`.

    :return: Trajectory
    """
    config = DircolConfig() if config is None else config
    if horizon < 2:
        raise InputShapeError(f'Planning horizon must be at least 2 knots, got {horizon}')
    x0 = np.asarray(x0, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    if warm_start is None:
        warm_start = linear_warm_start(x0, goal, horizon, dt, model.m, config.reach_index)
    if warm_start.horizon != horizon:
        raise InputShapeError(f'Warm start has {warm_start.horizon} knots, expected {horizon}')

    scale = config.clip if np.isfinite(config.clip) else 1.0
    problem = _Collocation(model, x0, goal, horizon, dt, weights, config.reach_index, scale)
    z = problem.pack(warm_start.states, np.clip(warm_start.inputs, -config.clip, config.clip))
    bound = config.clip / scale
    bounds = [(None, None)] * problem.num_x + [(-bound, bound)] * (horizon * model.m)
    constraints = [{'type': 'eq', 'fun': problem.constraints, 'jac': problem.constraint_jacobian}]

    violation = np.inf
    for attempt in range(1 + config.restarts):
        try:
            res = minimize(problem.cost, z, jac=problem.cost_grad, method='SLSQP', bounds=bounds,
                           constraints=constraints, options={'maxiter': config.max_iter, 'ftol': config.ftol})
        except NumericError as err:
            logger.warning('Collocation stopped in solve %d: %s', attempt, err)
            break
        violation, _ = problem.violation(res.x)
        logger.debug('Solve %d: %s, cost %.4g, max violation %.3g', attempt, res.message, res.fun, violation)
        if not np.isfinite(violation):
            break
        z = res.x
        if violation <= config.defect_tol:
            break

    if not violation <= config.defect_tol:
        if problem.best[1] is None:
            return replace(warm_start, feasible=False, max_defect=np.inf)
        z = problem.best[1]
    violation, max_defect = problem.violation(z)
    X, U = problem.unpack(z)
    feasible = bool(violation <= config.defect_tol)
    if not feasible:
        logger.info('Collocation did not converge: max constraint violation %.3g', violation)
    return Trajectory(X, np.clip(U, -config.clip, config.clip), dt, feasible=feasible, max_defect=max_defect)


def perturb_nominal(traj, std, seed):
    """ Adds i.i.d. N(0, std^2) noise to every state and input coordinate of every knot """
    if std < 0:
        raise ValueError(f'Noise std must be non-negative, got {std}')
    rng = np.random.default_rng(seed)
    return replace(traj, states=traj.states + rng.normal(0.0, std, traj.states.shape),
                   inputs=traj.inputs + rng.normal(0.0, std, traj.inputs.shape))
