import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from engine.diffcore import DTYPE, Mlp
from engine.errors import InputShapeError, NumericError, SolverError

logger = logging.getLogger(__name__)


@dataclass
class GeneralizedState:
    """
    Generalized coordinates and velocities, both of shape (..., N). A leading time axis
    makes this a trajectory (see `rollout`).
    """
    q: torch.Tensor
    qdot: torch.Tensor

    def __post_init__(self):
        if self.q.shape != self.qdot.shape:
            raise InputShapeError(f'q {tuple(self.q.shape)} and qdot {tuple(self.qdot.shape)} shapes differ')

    @property
    def n(self):
        return self.q.shape[-1]

    def validate(self):
        if self.n < 1:
            raise InputShapeError('A state needs at least one coordinate')
        if not (torch.isfinite(self.q).all() and torch.isfinite(self.qdot).all()):
            raise NumericError('State has non-finite entries')
        return self

    def as_vector(self):
        return torch.cat([self.q, self.qdot], dim=-1)

    @classmethod
    def from_vector(cls, x):
        if x.shape[-1] % 2:
            raise InputShapeError(f'State vector of odd length {x.shape[-1]}')
        n = x.shape[-1] // 2
        return cls(x[..., :n], x[..., n:])

    def __len__(self):
        return self.q.shape[0]

    def __getitem__(self, idx):
        return GeneralizedState(self.q[idx], self.qdot[idx])


def assemble_cholesky(raw, delta, n=None):
    """
    Packs a vector of length (N^2+N)/2 into a lower-triangular N x N matrix: the first N entries
    (plus `delta`) form the diagonal, the rest fill the strict lower triangle row by row.

    :param raw: Tensor of shape (..., (N^2+N)/2)
    :param delta: Constant diagonal offset
    :param n: Expected N (inferred from the length if None)
    """
    k = raw.shape[-1]
    inferred = int(round((math.sqrt(8 * k + 1) - 1) / 2))
    if inferred * (inferred + 1) // 2 != k or (n is not None and n != inferred):
        raise InputShapeError(f'Cannot assemble a Cholesky factor from {k} entries' + (f' for N={n}' if n else ''))
    n = inferred
    L = raw.new_zeros(*raw.shape[:-1], n, n)
    diag = torch.arange(n)
    L[..., diag, diag] = raw[..., :n] + delta
    rows, cols = torch.tril_indices(n, n, offset=-1)
    L[..., rows, cols] = raw[..., n:]
    return L


class PhysicalParams(nn.Module):
    """
    Shared store of the physical scalars (m1, m2, l1, l2, g) of the white-box components, so
    that a scalar used by both the mass matrix and the potential is a single parameter.
    """

    def __init__(self, values, trainable=True):
        super().__init__()
        self.values = nn.ParameterDict({
            name: nn.Parameter(torch.tensor(float(v), dtype=DTYPE), requires_grad=trainable)
            for name, v in values.items()
        })

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values


class MassMatrixModel(nn.Module):
    """ Base of mass-matrix parameterizations M(q) """

    def __init__(self, n):
        super().__init__()
        self.n = n

    def partials(self, q):
        """ dM[..., i, j, k] = dM_ij / dq_k """
        raise NotImplementedError

    def kinetic_terms(self, q, qdot):
        """
        Terms of the O(N^2) Coriolis identity.

        :return: M (..., N, N), Jacobian of M(q) qdot w.r.t. q (..., N, N),
                 gradient of 1/2 qdot^T M(q) qdot w.r.t. q (..., N)
        """
        dM = self.partials(q)
        jac = torch.einsum('...ijk,...j->...ik', dM, qdot)
        grad_kinetic = 0.5 * torch.einsum('...ijk,...i,...j->...k', dM, qdot, qdot)
        return self(q), jac, grad_kinetic


class LearnedCholesky(MassMatrixModel):
    """ M(q) = L(q) L(q)^T with the entries of L predicted by a network (plus a diagonal offset) """

    def __init__(self, n, hidden=(32, 32, 32), delta=1.0, seed=0):
        super().__init__(n)
        self.delta = float(delta)
        self.net = Mlp((n, *hidden, n * (n + 1) // 2), seed=seed)

    def factor(self, q):
        """ Returns L (..., N, N) and dL[..., i, j, k] = dL_ij / dq_k """
        raw, jac = self.net.forward_with_jacobian(q)
        L = assemble_cholesky(raw, self.delta, self.n)
        dL = assemble_cholesky(jac.transpose(-1, -2), 0.0, self.n)
        return L, dL.movedim(-3, -1)

    def forward(self, q):
        L = assemble_cholesky(self.net(q), self.delta, self.n)
        return L @ L.transpose(-1, -2)

    def partials(self, q):
        L, dL = self.factor(q)
        return torch.einsum('...ilk,...jl->...ijk', dL, L) + torch.einsum('...il,...jlk->...ijk', L, dL)

    def kinetic_terms(self, q, qdot):
        # d(L L^T qdot)/dq_k = dL_k w + L dL_k^T qdot with w = L^T qdot
        L, dL = self.factor(q)
        w = torch.einsum('...ji,...j->...i', L, qdot)
        c = torch.einsum('...lik,...l->...ik', dL, qdot)
        jac = torch.einsum('...ijk,...j->...ik', dL, w) + L @ c
        grad_kinetic = torch.einsum('...i,...ik->...k', w, c)
        return L @ L.transpose(-1, -2), jac, grad_kinetic


def _check_pendulum(q):
    if q.shape[-1] != 2:
        raise InputShapeError(f'Double pendulum coordinates must have 2 entries, got shape {tuple(q.shape)}')


class WhiteBoxDoublePendulumMass(MassMatrixModel):
    """ Analytic mass matrix of two uniform rods """

    def __init__(self, physical):
        super().__init__(2)
        self.physical = physical

    def _inertias(self):
        p = self.physical
        i1 = p['m1'] * p['l1'] ** 2 / 3
        i2 = p['m2'] * p['l2'] ** 2 / 3
        return i1, i2, p['m2'] * p['l1'] * p['l2']

    def forward(self, q):
        _check_pendulum(q)
        i1, i2, coupling = self._inertias()
        c2 = torch.cos(q[..., 1])
        i11 = i1 + i2 + self.physical['m2'] * self.physical['l1'] ** 2 + coupling * c2
        i12 = i2 + 0.5 * coupling * c2
        i22 = i2 * torch.ones_like(c2)
        return torch.stack([torch.stack([i11, i12], -1), torch.stack([i12, i22], -1)], -2)

    def partials(self, q):
        _check_pendulum(q)
        _, _, coupling = self._inertias()
        s2 = -coupling * torch.sin(q[..., 1])
        zero = torch.zeros_like(s2)
        d_q2 = torch.stack([torch.stack([s2, 0.5 * s2], -1), torch.stack([0.5 * s2, zero], -1)], -2)
        return torch.stack([torch.zeros_like(d_q2), d_q2], -1)


class PotentialModel(nn.Module):
    """ Base of potential-energy parameterizations V(q) """

    def __init__(self, n):
        super().__init__()
        self.n = n

    def gradient(self, q):
        raise NotImplementedError


class LearnedPotential(PotentialModel):

    def __init__(self, n, hidden=(32, 32, 32), seed=0):
        super().__init__(n)
        self.net = Mlp((n, *hidden, 1), seed=seed)

    def forward(self, q):
        return self.net(q)[..., 0]

    def gradient(self, q):
        return self.net.input_jacobian(q)[..., 0, :]


class WhiteBoxDoublePendulumPotential(PotentialModel):
    """ Gravitational potential of two uniform rods, zero angles hanging down """

    def __init__(self, physical):
        super().__init__(2)
        self.physical = physical

    def forward(self, q):
        _check_pendulum(q)
        p = self.physical
        q1, q12 = q[..., 0], q[..., 0] + q[..., 1]
        return (-0.5 * p['m1'] * p['g'] * p['l1'] * torch.cos(q1)
                - p['m2'] * p['g'] * (p['l1'] * torch.cos(q1) + 0.5 * p['l2'] * torch.cos(q12)))

    def gradient(self, q):
        _check_pendulum(q)
        p = self.physical
        q1, q12 = q[..., 0], q[..., 0] + q[..., 1]
        d2 = 0.5 * p['m2'] * p['g'] * p['l2'] * torch.sin(q12)
        d1 = 0.5 * p['m1'] * p['g'] * p['l1'] * torch.sin(q1) + p['m2'] * p['g'] * p['l1'] * torch.sin(q1) + d2
        return torch.stack([d1, d2], -1)


class ForceModel(nn.Module):
    """ Base of generalized-force parameterizations F(q, qdot, u) """

    def __init__(self, n, m):
        super().__init__()
        self.n = n
        self.m = m


class GenericForce(ForceModel):
    """ F(q, qdot, u) given by one network on the concatenated inputs """

    def __init__(self, n, m, hidden=(32, 32, 32), seed=0):
        super().__init__(n, m)
        self.net = Mlp((2 * n + m, *hidden, n), seed=seed)

    def forward(self, q, qdot, u):
        return self.net(torch.cat([q, qdot, u], dim=-1))


class ControlAffineForce(ForceModel):
    """ F = B(q) u + eta(q) * qdot with networks for B and eta """

    def __init__(self, n, m, hidden=(32, 32, 32), seed=0):
        super().__init__(n, m)
        self.b_net = Mlp((n, *hidden, n * m), seed=seed)
        self.eta_net = Mlp((n, *hidden, n), seed=seed + 1)

    def forward(self, q, qdot, u):
        B = self.b_net(q).reshape(*q.shape[:-1], self.n, self.m)
        return (B @ u.unsqueeze(-1)).squeeze(-1) + self.eta_net(q) * qdot


class WhiteBoxAffineForce(ForceModel):
    """ F = diag(b) u + eta * qdot; eta < 0 damps """

    def __init__(self, b, eta, trainable=True):
        b = torch.as_tensor(b, dtype=DTYPE).reshape(-1)
        eta = torch.as_tensor(eta, dtype=DTYPE).reshape(-1)
        if b.numel() != eta.numel():
            raise InputShapeError('Diagonal control matrix needs as many inputs as coordinates')
        super().__init__(eta.numel(), b.numel())
        self.b = nn.Parameter(b.clone(), requires_grad=trainable)
        self.eta = nn.Parameter(eta.clone(), requires_grad=trainable)

    def forward(self, q, qdot, u):
        return self.b * u + self.eta * qdot


class DynModel(nn.Module):
    """
    Lagrangian model: mass matrix, potential and generalized forces, each white-box or learned.
    Calling the model returns generalized accelerations.
    """

    def __init__(self, mass, potential, force, physical=None):
        super().__init__()
        if not (mass.n == potential.n == force.n):
            raise InputShapeError(f'Component dimensions disagree: M {mass.n}, V {potential.n}, F {force.n}')
        self.mass = mass
        self.potential = potential
        self.force = force
        self.physical = physical

    @property
    def n(self):
        return self.mass.n

    @property
    def m(self):
        return self.force.m

    def forward(self, q, qdot, u):
        return forward_dynamics(self, q, qdot, u)


def mass_matrix(model, q):
    return model(q)


def potential(model, q):
    return model(q)


def conservative_force(model, q):
    """ -dV/dq """
    return -model.gradient(q)


def coriolis_times_qdot(model, q, qdot):
    """ C(q, qdot) qdot = d(M qdot)/dq qdot - d(1/2 qdot^T M qdot)/dq """
    _, jac, grad_kinetic = model.kinetic_terms(q, qdot)
    return (jac @ qdot.unsqueeze(-1)).squeeze(-1) - grad_kinetic


def coriolis_matrix(model, q, qdot):
    """ Full C(q, qdot) from the Christoffel symbols of M; O(N^3), used as a reference """
    dM = model.partials(q)
    return 0.5 * (torch.einsum('...ijk,...k->...ij', dM, qdot)
                  + torch.einsum('...ikj,...k->...ij', dM, qdot)
                  - torch.einsum('...jki,...k->...ij', dM, qdot))


def mass_matrix_partials(model, q):
    return model.partials(q)


def spd_solve(M, rhs):
    """ Solves M x = rhs by Cholesky, retrying once with 1e-9 I added to M """
    if not torch.isfinite(M).all():
        raise SolverError('Mass matrix has non-finite entries')
    L, info = torch.linalg.cholesky_ex(M)
    if (info != 0).any():
        logger.debug('Cholesky failed for %d matrices, retrying with jitter', int((info != 0).sum()))
        eye = torch.eye(M.shape[-1], dtype=M.dtype)
        L, info = torch.linalg.cholesky_ex(M + 1e-9 * eye)
        if (info != 0).any():
            failing = M.detach().reshape(-1, *M.shape[-2:])[info.reshape(-1) != 0]
            cond = torch.linalg.cond(failing).max().item()
            raise SolverError(f'Mass matrix not positive definite for {failing.shape[0]} of {info.numel()} states '
                              f'(condition number up to {cond:.3g})')
    return torch.cholesky_solve(rhs.unsqueeze(-1), L).squeeze(-1)


def _check_inputs(model, q, qdot, u):
    if q.shape[-1] != model.n or qdot.shape[-1] != model.n or u.shape[-1] != model.m:
        raise InputShapeError(f'Model expects N={model.n}, M={model.m}, got q {tuple(q.shape)}, '
                              f'qdot {tuple(qdot.shape)}, u {tuple(u.shape)}')


def forward_dynamics(model, q, qdot, u):
    """ qddot = M^-1 (F - C qdot - dV/dq) """
    _check_inputs(model, q, qdot, u)
    M, jac, grad_kinetic = model.mass.kinetic_terms(q, qdot)
    coriolis = (jac @ qdot.unsqueeze(-1)).squeeze(-1) - grad_kinetic
    rhs = model.force(q, qdot, u) - coriolis - model.potential.gradient(q)
    return spd_solve(M, rhs)


def rk4_step(model, state, u, dt, substeps=1):
    """
    Classic RK4 on x = [q, qdot] with the input held constant over the step, taken as
    `substeps` RK4 steps of dt / substeps. `model(q, qdot, u)` must return accelerations
    (DynModel or NaiveModel).
    """
    if dt <= 0:
        raise ValueError(f'Time step must be positive, got {dt}')
    if substeps < 1:
        raise ValueError(f'Need at least one RK4 substep, got {substeps}')
    h = dt / substeps
    q, qdot = state.q, state.qdot
    for _ in range(substeps):
        k1q, k1v = h * qdot, h * model(q, qdot, u)
        k2q, k2v = h * (qdot + k1v / 2), h * model(q + k1q / 2, qdot + k1v / 2, u)
        k3q, k3v = h * (qdot + k2v / 2), h * model(q + k2q / 2, qdot + k2v / 2, u)
        k4q, k4v = h * (qdot + k3v), h * model(q + k3q, qdot + k3v, u)
        q, qdot = q + (k1q + 2 * k2q + 2 * k3q + k4q) / 6, qdot + (k1v + 2 * k2v + 2 * k3v + k4v) / 6
    return GeneralizedState(q, qdot)


def rollout(model, x0, controls, dt, check_finite=True, substeps=1):
    """
    Iterates `rk4_step` over a control sequence.

    :param x0: Initial GeneralizedState
    :param controls: Tensor of shape (T, ..., M)
    :return: GeneralizedState with a leading time axis of length T + 1
    """
    if len(controls) == 0:
        raise ValueError('Rollout needs at least one control')
    states = [x0.validate()]
    for t, u in enumerate(controls):
        try:
            nxt = rk4_step(model, states[-1], u, dt, substeps)
        except NumericError as err:
            raise type(err)(f'Rollout failed at step {t}: {err}') from err
        if check_finite and not (torch.isfinite(nxt.q).all() and torch.isfinite(nxt.qdot).all()):
            raise NumericError(f'Rollout diverged at step {t}')
        states.append(nxt)
    return GeneralizedState(torch.stack([s.q for s in states]), torch.stack([s.qdot for s in states]))


def kinetic_energy(model, q, qdot):
    M = model.mass(q)
    return 0.5 * torch.einsum('...i,...ij,...j->...', qdot, M, qdot)


def total_energy(model, q, qdot):
    return kinetic_energy(model, q, qdot) + model.potential(q)


def finite_difference_accelerations(qdot, qdot_next, dt):
    return (qdot_next - qdot) / dt


def accel_loss(model, q, qdot, u, qddot_target):
    """ Mean squared acceleration error; a diagnostic, training uses the prediction loss """
    err = model(q, qdot, u) - qddot_target
    return (err ** 2).sum(-1).mean()
