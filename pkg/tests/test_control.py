import math
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn as nn
from scipy.linalg import solve_discrete_are

from control import (CostWeights, DircolConfig, MbrlConfig, OpenLoopPolicy, Trajectory, TvlqrPolicy, apply_policy,
                     dircol_plan, hold_distance, linearize, mbrl_loop, perturb_nominal, performance_metric,
                     riccati_gains, rollout_policy, tvlqr)
from control.dircol import collocation_defects, continuous_dynamics, dynamics_jacobians
from control.mbrl import run_episode
from engine.diffcore import DTYPE
from engine.dynamics import DynModel, GeneralizedState, LearnedCholesky, LearnedPotential, WhiteBoxAffineForce, \
    rk4_step
from engine.errors import ConfigError, InputShapeError, NumericError, PolicyError
from engine.models import ModelSpec
from misc.utils import derive_seed
from systems import end_effector

UPRIGHT = np.array([math.pi, 0.0, 0.0, 0.0])


class ZeroDynamics(nn.Module):
    n, m = 2, 2

    def forward(self, q, qdot, u):
        return torch.zeros_like(q)


def double_integrator():
    """ qddot = u with unit mass """
    mass = LearnedCholesky(1, hidden=(4,))
    mass.net.reset_parameters(zero=True)
    pot = LearnedPotential(1, hidden=(4,))
    pot.net.reset_parameters(zero=True)
    return DynModel(mass, pot, WhiteBoxAffineForce([1.0], [0.0], trainable=False))


def tiny_mbrl_config(**kwargs):
    config = dict(init_epochs=2, episode_epochs=1, max_episodes=2,
                  dircol=DircolConfig(max_iter=5, restarts=0, reach_index=21))
    config.update(kwargs)
    return MbrlConfig(**config)


def test_linearize_zero_dynamics():
    A, B = linearize(ZeroDynamics(), np.ones(4), np.ones(2), 0.1)
    expected = np.block([[np.eye(2), 0.1 * np.eye(2)], [np.zeros((2, 2)), np.eye(2)]])
    assert np.allclose(A, expected, atol=1e-14)
    assert np.array_equal(B, np.zeros((4, 2)))


def test_linearize_matches_finite_differences(system, rng):
    x, u, dt, h = rng.normal(size=4), 10 * rng.normal(size=2), 0.05, 1e-6
    A, B = linearize(system, x, u, dt)

    def step(xx, uu):
        state = GeneralizedState.from_vector(torch.as_tensor(xx, dtype=DTYPE))
        with torch.no_grad():
            return rk4_step(system, state, torch.as_tensor(uu, dtype=DTYPE), dt).as_vector().numpy()

    A_fd = np.stack([(step(x + h * e, u) - step(x - h * e, u)) / (2 * h) for e in np.eye(4)], axis=1)
    B_fd = np.stack([(step(x, u + h * e) - step(x, u - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
    assert np.linalg.norm(A - A_fd) <= 1e-5 * np.linalg.norm(A)
    assert np.linalg.norm(B - B_fd) <= 1e-5 * np.linalg.norm(B)


def test_linearization_at_stable_equilibrium(system):
    A, _ = linearize(system, np.zeros(4), np.zeros(2), 0.01)
    assert (np.abs(np.linalg.eigvals(A)) <= 1 + 1e-9).all()
    A_up, _ = linearize(system, UPRIGHT, np.zeros(2), 0.01)
    assert np.abs(np.linalg.eigvals(A_up)).max() > 1


def test_riccati_scalar_step():
    K = riccati_gains([np.eye(1)], [np.eye(1)], np.eye(1), np.eye(1), np.eye(1))
    assert K.shape == (1, 1, 1)
    assert K[0, 0, 0] == pytest.approx(0.5)


def test_riccati_without_actuation_gives_zero_gains(rng):
    As = [rng.normal(size=(4, 4)) * 0.3 for _ in range(6)]
    Bs = [np.zeros((4, 2))] * 6
    K = riccati_gains(As, Bs, np.eye(4), np.eye(2), np.eye(4))
    assert np.array_equal(K, np.zeros((6, 2, 4)))


@pytest.mark.parametrize('seed', range(5))
def test_riccati_matches_brute_force_optimum(seed):
    rng = np.random.default_rng(seed)
    H, n, m = 5, 2, 1
    As = [rng.normal(size=(n, n)) for _ in range(H)]
    Bs = [rng.normal(size=(n, m)) for _ in range(H)]
    L = rng.normal(size=(n, n))
    Q, R, Qf = L @ L.T, np.array([[0.5 + rng.uniform()]]), np.eye(n) * 2.0
    K = riccati_gains(As, Bs, Q, R, Qf)

    # states x_0..x_H as an affine map of x_0 and the stacked inputs
    Sx = np.zeros(((H + 1) * n, n))
    Su = np.zeros(((H + 1) * n, H * m))
    Sx[:n] = np.eye(n)
    for t in range(H):
        rows, prev = slice((t + 1) * n, (t + 2) * n), slice(t * n, (t + 1) * n)
        Sx[rows] = As[t] @ Sx[prev]
        Su[rows] = As[t] @ Su[prev]
        Su[rows, t * m:(t + 1) * m] = Bs[t]
    Qbar = np.kron(np.eye(H + 1), Q)
    Qbar[-n:, -n:] = Qf
    Rbar = np.kron(np.eye(H), R)
    x0 = rng.normal(size=n)
    U = -np.linalg.solve(Su.T @ Qbar @ Su + Rbar, Su.T @ Qbar @ Sx @ x0)
    X = (Sx @ x0 + Su @ U).reshape(H + 1, n)

    for t in range(H):
        assert np.allclose(U[t * m:(t + 1) * m], -K[t] @ X[t], atol=1e-8)


def test_riccati_converges_to_infinite_horizon_gain():
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.005], [0.1]])
    Q, R = np.diag([1.0, 0.1]), np.array([[0.01]])
    K = riccati_gains([A] * 300, [B] * 300, Q, R, np.eye(2))
    P = solve_discrete_are(A, B, Q, R)
    K_inf = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    assert np.allclose(K[0], K_inf, atol=1e-8)


def make_policy(rng, horizon=3, scale=1.0):
    nominal = Trajectory(rng.normal(size=(horizon, 4)), rng.normal(size=(horizon, 2)), 0.1)
    gains = scale * rng.normal(size=(horizon, 2, 4))
    return TvlqrPolicy(nominal, gains, np.eye(4), np.eye(2), np.eye(4))


def test_apply_policy_on_nominal(rng):
    policy = make_policy(rng)
    for t in range(3):
        assert np.allclose(apply_policy(policy, policy.nominal.states[t], t), policy.nominal.inputs[t])
    assert np.array_equal(policy.action(np.ones(4), 1), apply_policy(policy, np.ones(4), 1))


def test_zero_gains_replay_nominal(rng):
    policy = make_policy(rng, scale=0.0)
    assert np.array_equal(apply_policy(policy, rng.normal(size=4), 2), policy.nominal.inputs[2])


def test_apply_policy_clips(rng):
    policy = make_policy(rng, scale=1e4)
    for _ in range(20):
        u = apply_policy(policy, 10 * rng.normal(size=4), 1, clip=120.0)
        assert np.abs(u).max() <= 120.0
        assert np.array_equal(np.clip(u, -120.0, 120.0), u)


def test_apply_policy_outside_horizon(rng):
    policy = make_policy(rng)
    for t in (-1, 3):
        with pytest.raises(PolicyError):
            apply_policy(policy, np.zeros(4), t)


def test_open_loop_policy_rollout(system):
    controls = np.zeros((5, 2))
    states, used = rollout_policy(system, OpenLoopPolicy(controls), np.zeros(4), 0.1)
    assert len(states) == 6 and used.shape == (5, 2)
    assert torch.allclose(states.q, torch.zeros(6, 2, dtype=DTYPE), atol=1e-12)
    with pytest.raises(PolicyError):
        OpenLoopPolicy(controls).action(np.zeros(4), 5)


def test_trajectory_validation():
    with pytest.raises(InputShapeError):
        Trajectory(np.zeros((1, 4)), np.zeros((1, 2)), 0.1)
    with pytest.raises(InputShapeError):
        Trajectory(np.zeros((3, 4)), np.zeros((2, 2)), 0.1)
    traj = Trajectory(np.arange(12.0).reshape(3, 4), np.zeros((3, 2)), 0.1)
    assert traj.horizon == 3
    assert torch.equal(traj.generalized().qdot[1], torch.tensor([6.0, 7.0], dtype=DTYPE))


def test_perturb_nominal():
    traj = Trajectory(np.zeros((10000, 4)), np.zeros((10000, 2)), 0.1)
    same = perturb_nominal(traj, 0.0, 1)
    assert np.array_equal(same.states, traj.states) and np.array_equal(same.inputs, traj.inputs)
    noisy = perturb_nominal(traj, 0.25, 1)
    assert np.allclose(noisy.states.std(axis=0), 0.25, rtol=0.05)
    assert np.allclose(noisy.inputs.std(axis=0), 0.25, rtol=0.05)
    assert np.array_equal(noisy.states, perturb_nominal(traj, 0.25, 1).states)
    assert not np.array_equal(noisy.states, perturb_nominal(traj, 0.25, 2).states)
    with pytest.raises(ValueError):
        perturb_nominal(traj, -1.0, 1)


def test_dircol_trivial_plan(system):
    plan = dircol_plan(system, np.zeros(4), np.zeros(4), 6, 0.1, CostWeights.for_pendulum())
    assert plan.feasible and plan.horizon == 6
    assert np.allclose(plan.states, 0.0, atol=1e-9)
    assert np.allclose(plan.inputs, 0.0, atol=1e-9)
    assert plan.max_defect <= 1e-9


def double_integrator_qp(H, dt, goal):
    """ Equality-constrained QP of the rest-to-rest problem, solved through its KKT system """
    nx, nu = 2 * H, H
    cost = np.zeros((nx + nu, nx + nu))
    cost[nx:, nx:] = 2 * dt * np.eye(nu)
    rows, rhs = [], []

    def constraint(coeffs, value):
        row = np.zeros(nx + nu)
        for idx, c in coeffs:
            row[idx] += c
        rows.append(row)
        rhs.append(value)

    q, v, u = (lambda t: 2 * t), (lambda t: 2 * t + 1), (lambda t: nx + t)
    constraint([(q(0), 1.0)], 0.0)
    constraint([(v(0), 1.0)], 0.0)
    for t in range(H - 1):
        constraint([(q(t + 1), 1.0), (q(t), -1.0), (v(t), -dt / 2), (v(t + 1), -dt / 2)], 0.0)
        constraint([(v(t + 1), 1.0), (v(t), -1.0), (u(t), -dt / 2), (u(t + 1), -dt / 2)], 0.0)
    constraint([(q(H - 1), 1.0)], goal[0])
    constraint([(v(H - 1), 1.0)], goal[1])

    C = np.array(rows)
    kkt = np.block([[cost, C.T], [C, np.zeros((len(C), len(C)))]])
    z = np.linalg.solve(kkt, np.concatenate([np.zeros(nx + nu), rhs]))[:nx + nu]
    return z[:nx].reshape(H, 2), z[nx:].reshape(H, 1)


def test_dircol_double_integrator_matches_qp():
    H, dt, goal = 21, 0.1, np.array([1.0, 0.0])
    model = double_integrator()
    weights = CostWeights(Q=np.zeros((2, 2)), R=np.eye(1), Qf=np.eye(2))
    config = DircolConfig(defect_tol=1e-7, clip=10.0)
    plan = dircol_plan(model, np.zeros(2), goal, H, dt, weights, config)

    assert plan.feasible and plan.max_defect <= 1e-6
    assert np.abs(plan.states[-1] - goal).max() <= 1e-4
    with torch.no_grad():
        defects = collocation_defects(model, torch.as_tensor(plan.states), torch.as_tensor(plan.inputs), dt)
    assert defects.abs().max().item() <= 1e-6

    X, U = double_integrator_qp(H, dt, goal)
    assert np.allclose(plan.states, X, atol=1e-3)
    assert np.allclose(plan.inputs, U, atol=1e-2)
    assert (plan.inputs ** 2).sum() * dt == pytest.approx((U ** 2).sum() * dt, rel=1e-3)


def test_dircol_rejects_short_horizon(system):
    with pytest.raises(InputShapeError):
        dircol_plan(system, np.zeros(4), UPRIGHT, 1, 0.1, CostWeights.for_pendulum())


def test_tvlqr_stabilizes_upright_equilibrium(system):
    H, dt = 150, 0.01
    nominal = Trajectory(np.tile(UPRIGHT, (H, 1)), np.zeros((H, 2)), dt)
    policy = tvlqr(system, nominal, np.diag([10.0, 10.0, 1.0, 1.0]), 1e-3 * np.eye(2), 100 * np.eye(4))
    x0 = UPRIGHT + np.array([0.05, -0.05, 0.0, 0.0])

    closed, _ = rollout_policy(system, policy, x0, dt, clip=120.0)
    open_loop, _ = rollout_policy(system, OpenLoopPolicy(np.zeros((H, 2))), x0, dt)
    closed_err = np.abs(closed.as_vector()[-1].numpy() - UPRIGHT).max()
    open_err = np.abs(open_loop.as_vector()[-1].numpy() - UPRIGHT).max()
    assert closed_err < 0.01 < open_err


def test_performance_metric(params):
    upright = np.tile(UPRIGHT, (10, 1))
    assert performance_metric(params, upright, UPRIGHT) == pytest.approx(0.0, abs=1e-12)
    hanging = np.zeros((10, 4))
    assert performance_metric(params, hanging, UPRIGHT) == pytest.approx(4.0)
    moving = hanging.copy()
    moving[:, 2:] = np.random.default_rng(0).normal(size=(10, 2))
    assert performance_metric(params, moving, UPRIGHT) == performance_metric(params, hanging, UPRIGHT)
    with pytest.raises(ValueError):
        performance_metric(params, np.zeros((0, 4)), UPRIGHT)


def test_hold_distance_uses_hold_phase(params):
    states = np.zeros((26, 4))
    states[21:] = UPRIGHT
    assert hold_distance(params, states, UPRIGHT, 21) == pytest.approx(0.0, abs=1e-12)
    assert performance_metric(params, states, UPRIGHT) == pytest.approx(4.0 * 21 / 26)


def test_mbrl_config_horizon():
    config = MbrlConfig()
    assert config.reach_index == 21
    assert config.horizon == 26
    assert config.dircol.reach_index == 21 and config.dircol.clip == 120.0
    assert config.train_config(7).epochs == 7 and config.train_config(7).lr == 3e-4


def test_mbrl_first_episode_is_random_actuation(params):
    records, dataset = mbrl_loop(ModelSpec('MVB', hidden=(8,)), params, tiny_mbrl_config(max_episodes=1))
    assert len(records) == 1 and records[0].episode == 0
    assert len(dataset) == 26 and dataset.provenance == 'trajectory'
    assert torch.equal(dataset.q[0], torch.zeros(2, dtype=DTYPE))
    # consecutive transitions of one trajectory
    assert torch.equal(dataset.q[1:], dataset.q_next[:-1])
    assert (dataset.u.abs() <= 120.0).all()


def test_mbrl_loop_is_reproducible(params):
    spec = ModelSpec('MVB', hidden=(8,))
    runs = [mbrl_loop(spec, params, tiny_mbrl_config(seed=4)) for _ in range(2)]
    rows = [[r.as_row() for r in records] for records, _ in runs]
    assert [r['episode'] for r in rows[0]] == [0, 1]
    assert [r['dataset_size'] for r in rows[0]] == [26, 52]
    np.testing.assert_equal(rows[0], rows[1])
    assert torch.equal(runs[0][1].q, runs[1][1].q)


class NanDynamics(nn.Module):
    n, m = 2, 2

    def forward(self, q, qdot, u):
        return torch.full_like(q, float('nan'))


def test_linearize_with_substeps_matches_composed_steps(system, rng):
    x, u = rng.normal(size=4), 10 * rng.normal(size=2)
    A, B = linearize(system, x, u, 0.1, substeps=2)
    A1, B1 = linearize(system, x, u, 0.05)
    with torch.no_grad():
        mid = rk4_step(system, GeneralizedState.from_vector(torch.as_tensor(x, dtype=DTYPE)),
                       torch.as_tensor(u, dtype=DTYPE), 0.05).as_vector().numpy()
    A2, B2 = linearize(system, mid, u, 0.05)
    assert np.allclose(A, A2 @ A1, atol=1e-10)
    assert np.allclose(B, A2 @ B1 + B2, atol=1e-10)


def test_rollout_policy_substeps(system):
    controls = 30.0 * np.ones((4, 2))
    fine, _ = rollout_policy(system, OpenLoopPolicy(controls), np.zeros(4), 0.1, substeps=10)
    with torch.no_grad():
        x = GeneralizedState.from_vector(torch.zeros(4, dtype=DTYPE))
        for _ in range(40):
            x = rk4_step(system, x, torch.full((2,), 30.0, dtype=DTYPE), 0.01)
    assert len(fine) == 5
    assert torch.allclose(fine[-1].as_vector(), x.as_vector(), atol=1e-12)


def test_rollout_policy_divergence():
    policy = OpenLoopPolicy(np.zeros((5, 2)))
    with pytest.raises(NumericError, match='step 0'):
        rollout_policy(NanDynamics(), policy, np.zeros(4), 0.1)
    states, controls = rollout_policy(NanDynamics(), policy, np.zeros(4), 0.1, truncate=True)
    assert len(states) == 1 and controls.shape == (0, 2)
    assert torch.equal(states[0].q, torch.zeros(2, dtype=DTYPE))


def test_diverging_episode_is_flagged(system):
    config = tiny_mbrl_config(max_episodes=2)
    plan, evaluation, explored, diverged = run_episode(system, NanDynamics(), config, 1)
    assert diverged
    assert plan.horizon == config.horizon
    assert len(evaluation) == 1 and len(explored) == 0


def test_dircol_config_validation():
    with pytest.raises(ConfigError):
        DircolConfig(max_iter=0)
    with pytest.raises(ConfigError):
        DircolConfig(defect_tol=0.0)
    with pytest.raises(ConfigError):
        MbrlConfig(substeps=0)


def test_dynamics_jacobians_match_finite_differences(system, rng):
    X, U, h = rng.normal(size=(3, 4)), 10 * rng.normal(size=(3, 2)), 1e-6
    f, fx, fu = dynamics_jacobians(system, X, U)
    assert f.shape == (3, 4) and fx.shape == (3, 4, 4) and fu.shape == (3, 4, 2)

    def dyn(xx, uu):
        with torch.no_grad():
            return continuous_dynamics(system, torch.as_tensor(xx), torch.as_tensor(uu)).numpy()

    for t in range(3):
        for i, e in enumerate(np.eye(4)):
            fd = (dyn(X[t] + h * e, U[t]) - dyn(X[t] - h * e, U[t])) / (2 * h)
            assert np.allclose(fx[t][:, i], fd, rtol=1e-5, atol=1e-6)
        for i, e in enumerate(np.eye(2)):
            fd = (dyn(X[t], U[t] + h * e) - dyn(X[t], U[t] - h * e)) / (2 * h)
            assert np.allclose(fu[t][:, i], fd, rtol=1e-5, atol=1e-6)


def test_infeasible_plan_is_flagged(system):
    config = DircolConfig(max_iter=1, restarts=0, reach_index=21)
    plan = dircol_plan(system, np.zeros(4), UPRIGHT, 26, 0.1, CostWeights.for_pendulum(), config)
    assert not plan.feasible and plan.max_defect > config.defect_tol
    assert np.abs(plan.inputs).max() <= config.clip
    assert np.array_equal(plan.states[0], np.zeros(4))


def swing_up_plan(system):
    config = MbrlConfig()
    plan = dircol_plan(system, np.zeros(4), config.goal, config.horizon, config.dt, config.weights, config.dircol)
    return config, plan


@pytest.mark.slow
def test_swing_up_plan_reaches_upright_open_loop(params, system):
    config, plan = swing_up_plan(system)
    assert plan.feasible and plan.max_defect <= config.dircol.defect_tol
    assert end_effector(params, plan.generalized().q[config.reach_index])[1].item() > 1.5
    states, _ = rollout_policy(system, OpenLoopPolicy(plan.inputs), np.zeros(4), config.dt, config.clip,
                               config.substeps)
    assert end_effector(params, states.q[config.reach_index])[1].item() > 1.5


@pytest.mark.slow
def test_swing_up_with_true_model(params, system):
    config, plan = swing_up_plan(system)
    policy = tvlqr(system, plan, config.weights.Q, config.weights.R, config.weights.Qf, config.substeps)
    states, _ = rollout_policy(system, policy, np.zeros(4), config.dt, config.clip, config.substeps)
    assert end_effector(params, states.q[config.reach_index])[1].item() > 1.5

    records, _ = mbrl_loop(ModelSpec('W-B'), params, replace(config, max_episodes=2), model=system)
    assert records[1].plan_feasible and not records[1].diverged
    assert records[1].hold_m <= 0.5


@pytest.mark.slow
def test_structured_models_solve_swing_up_sooner(params):
    config = MbrlConfig(max_episodes=15, stop_on_success=True)
    first = {}
    for name in ('MVB', 'MVF', 'Naive'):
        records, _ = mbrl_loop(ModelSpec(name, seed=derive_seed(0, 'init')), params, config)
        first[name] = next((r.episode for r in records if r.success), math.inf)
    assert first['MVB'] <= first['MVF']
    assert first['Naive'] == math.inf
