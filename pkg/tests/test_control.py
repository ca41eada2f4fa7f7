import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfdelay.backward import BackwardConfig
from mfdelay.benchmarks import (delayed_lq_continuous_value, delayed_lq_value, lq_coefficients,
                                lq_value)
from mfdelay.coefficients import CoefficientSet, Theta
from mfdelay.control import (Box, ControlProcess, OptimizerConfig, control_grid,
                             control_features, convexity_probe, cost_functional,
                             gateaux_consistency_check, hamiltonian, optimize_control,
                             perturb_control, perturbation_convergence_check, random_probes,
                             smp_residual, solve_adjoint, solve_variational)
from mfdelay.core import BoundaryData, RandomSource, sample_brownian
from mfdelay.errors import ConfigurationError, DomainError
from mfdelay.forward import ForwardConfig, simulate_gmfdsde
from mfdelay.measure import EmpiricalLaw
from mfdelay.regression import Projector, polynomial_design

PARTIALS = ("b_x", "b_xd", "b_v", "b_vd", "b_mu", "b_mud", "sigma_x", "sigma_xd", "sigma_v",
            "sigma_vd", "sigma_mu", "sigma_mud", "h_x", "h_v", "h_vd", "h_mu",
            "Phi_x", "Phi_xx", "Phi_mu", "Phi_mu_y")


def system(**kw):
    """A one-dimensional controlled system whose unspecified pieces vanish."""
    base = dict(b=0.0, sigma=0.0, m=1, d=1, k=1, h=0.0, Phi=0.0)
    base.update({p: 0.0 for p in PARTIALS})
    base.update(kw)
    return CoefficientSet(**base)


def run(coeffs, g, n, u=None, x0=1.0, seed=0):
    u = u or ControlProcess.constant(g, 0.0)
    sol = simulate_gmfdsde(coeffs, BoundaryData.constant(g, x0), g, ForwardConfig(n_particles=n),
                           RandomSource(seed), u)
    return sol, u


# ---------------------------------------------------------------------------
# controls

def test_constant_control_layout():
    g = control_grid(1.0, 0.25, 0.05)
    u = ControlProcess.constant(g, 2.0, gamma=-1.0)
    assert u.values.shape == (1, g.idx_T + 1, 1)
    assert np.all(u.gamma == -1.0) and np.all(u.free == 2.0)


def test_perturb_examples():
    g = control_grid(1.0, 0.0, 0.1)
    u, v = ControlProcess.constant(g, 0.0), ControlProcess.constant(g, 2.0)
    assert np.array_equal(perturb_control(u, v, 0.0).values, u.values)
    assert np.array_equal(perturb_control(u, v, 1.0).values, v.values)
    assert np.all(perturb_control(u, v, 0.5).values == 1.0)
    with pytest.raises(DomainError):
        perturb_control(u, v, 1.5)


def test_perturb_keeps_admissibility():
    g = control_grid(1.0, 0.0, 0.1)
    box = Box(-1.0, 1.0)
    u = ControlProcess.constant(g, -1.0, admissible=box)
    v = ControlProcess.constant(g, 1.0, admissible=box)
    for th in (0.1, 0.5, 0.9):
        assert perturb_control(u, v, th).is_admissible()


def test_with_free_projects_and_keeps_gamma():
    g = control_grid(1.0, 0.2, 0.1)
    u = ControlProcess.constant(g, 0.0, gamma=0.7, admissible=Box(-1, 1))
    w = u.with_free(np.full((3, g.idx_T + 1 - g.delay_steps, 1), 5.0))
    assert np.all(w.free == 1.0)
    assert np.all(w.gamma == 0.7)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20),
       st.floats(-5, 0), st.floats(0, 5))
@settings(max_examples=100, deadline=None)
def test_projection_idempotent(xs, lo, hi):
    box = Box(lo, hi)
    x = np.array(xs)
    once = box.project(x)
    assert np.array_equal(box.project(once), once)
    assert box.contains(once)


def test_box_validation():
    with pytest.raises(ConfigurationError):
        Box(1.0, 0.0)


def test_control_shape_checked():
    g = control_grid(1.0, 0.0, 0.1)
    with pytest.raises(ConfigurationError):
        ControlProcess(np.zeros((1, 3, 1)), g)
    with pytest.raises(ConfigurationError):
        ControlProcess(np.full((1, g.idx_T + 1, 1), np.nan), g)


# ---------------------------------------------------------------------------
# cost

def test_cost_terminal_only():
    g = control_grid(1.0, 0.0, 0.1)
    sol, u = run(system(Phi=lambda x, mu: x[..., 0] ** 2), g, 20, x0=1.5)
    J = cost_functional(system(Phi=lambda x, mu: x[..., 0] ** 2), sol, u)
    assert J.value == pytest.approx(2.25, abs=1e-14)
    assert J.standard_error == 0.0


def test_cost_running_only():
    g = control_grid(1.0, 0.0, 0.01)
    c = system(sigma=1.0, h=lambda t, x, mu, v, vd: v[..., 0] ** 2)
    sol, u = run(c, g, 20, ControlProcess.constant(g, 1.0))
    assert abs(cost_functional(c, sol, u).value - 1.0) <= 1e-12


def test_cost_grid_mismatch():
    g, g2 = control_grid(1.0, 0.0, 0.1), control_grid(1.0, 0.0, 0.05)
    sol, _ = run(system(), g, 5)
    with pytest.raises(ConfigurationError):
        cost_functional(system(), sol, ControlProcess.constant(g2, 0.0))


# ---------------------------------------------------------------------------
# perturbation and variational processes

def test_perturbation_zero_direction():
    g = control_grid(1.0, 0.0, 0.05)
    u = ControlProcess.constant(g, 0.3)
    rep = perturbation_convergence_check(lq_coefficients(), BoundaryData.constant(g, 1.0), u, u,
                                         [0.1, 0.05], g, ForwardConfig(n_particles=50))
    assert rep.values == [0.0, 0.0]


def test_perturbation_linear_slope():
    g = control_grid(1.0, 0.0, 0.01)
    c = system(b=lambda t, x, xd, mu, mud, v, vd: -x + v, sigma=0.5, b_x=-1.0, b_v=1.0)
    u, v = ControlProcess.constant(g, 0.0), ControlProcess.constant(g, 1.0)
    rep = perturbation_convergence_check(c, BoundaryData.constant(g, 1.0), u, v,
                                         [0.1, 0.05, 0.025], g, ForwardConfig(n_particles=200),
                                         RandomSource(1))
    assert rep.decreasing
    assert abs(rep.slope - 2.0) <= 0.3


def test_variational_pure_integrator():
    g = control_grid(1.0, 0.2, 0.05)
    c = system(sigma=1.0, b_v=1.0)
    vals = np.linspace(0, 1, g.idx_T + 1)[None, :, None] ** 2
    v = ControlProcess.constant(g, 0.0).with_free(vals[:, g.delay_steps:])
    sol, u = run(c, g, 4)
    K = solve_variational(c, sol, u, v).K[0, :, 0]
    dv, D = v.values[0, :, 0], g.delay_steps
    expect = np.zeros_like(dv)
    expect[D + 1:] = np.cumsum(dv[D:-1] * g.dt)
    np.testing.assert_allclose(K, expect, atol=1e-13)


def test_variational_linear_ode():
    a = 0.7
    g = control_grid(1.0, 0.0, 1e-3)
    c = system(b=lambda t, x, xd, mu, mud, v, vd: a * x + v, b_x=a, b_v=1.0)
    sol, u = run(c, g, 3)
    K = solve_variational(c, sol, u, ControlProcess.constant(g, 1.0)).K
    assert K[0, -1, 0] == pytest.approx((np.exp(a) - 1) / a, rel=0.005)


def test_variational_mean_field_ode():
    g = control_grid(1.0, 0.0, 1e-3)
    c = system(b=lambda t, x, xd, mu, mud, v, vd: np.broadcast_to(mu.mean, x.shape) + v,
               sigma=0.3, b_mu=1.0, b_v=1.0)
    sol, u = run(c, g, 100)
    K = solve_variational(c, sol, u, ControlProcess.constant(g, 1.0)).K
    # m' = m + 1, m(0) = 0
    assert K[:, -1, 0].mean() == pytest.approx(np.e - 1, rel=0.01)


def test_variational_requires_partials():
    g = control_grid(1.0, 0.0, 0.1)
    c = CoefficientSet(b=0.0, sigma=0.0, k=1)
    sol, u = run(c, g, 3)
    with pytest.raises(ConfigurationError, match="missing"):
        solve_variational(c, sol, u, u)


# ---------------------------------------------------------------------------
# adjoint

def test_adjoint_zero():
    g = control_grid(1.0, 0.25, 0.05)
    sol, u = run(system(sigma=1.0), g, 200)
    adj = solve_adjoint(system(sigma=1.0), sol, u)
    assert np.all(adj.p == 0.0) and np.all(adj.q == 0.0)


def test_adjoint_linear_ode():
    a = 0.5
    g = control_grid(1.0, 0.0, 1e-3)
    c = system(b=lambda t, x, xd, mu, mud, v, vd: a * x, b_x=a,
               Phi=lambda x, mu: x[..., 0], Phi_x=1.0)
    sol, u = run(c, g, 50)
    adj = solve_adjoint(c, sol, u)
    t = adj.backward.times[:g.idx_T + 1]
    exact = np.exp(a * (1.0 - t))
    rel = np.abs(adj.p[:, :g.idx_T + 1, 0] - exact) / exact
    assert rel.max() <= 0.01
    assert np.max(np.abs(adj.q)) <= 1e-8


def test_adjoint_quadratic_terminal():
    g = control_grid(1.0, 0.0, 0.02)
    c = system(sigma=1.0, Phi=lambda x, mu: x[..., 0] ** 2, Phi_x=lambda x, mu: 2 * x, Phi_xx=2.0)
    sol, u = run(c, g, 100_000, x0=0.0, seed=3)
    adj = solve_adjoint(c, sol, u, BackwardConfig(beta=1.0, basis_degree=2))
    err = np.sqrt(np.mean((adj.p[:, :g.idx_T + 1, 0] - 2 * sol.paths[:, :, 0]) ** 2, axis=0))
    assert err.max() <= 0.03
    np.testing.assert_allclose(adj.p_T[:, 0], 2 * sol.terminal[:, 0], atol=1e-12)


def test_adjoint_zero_after_horizon():
    g = control_grid(1.0, 0.25, 0.05)
    c = lq_coefficients(delayed=True)
    sol, u = run(c, g, 500)
    adj = solve_adjoint(c, sol, u)
    jT = g.idx_T - g.idx0
    assert np.all(adj.p[:, jT + 1:] == 0.0) and np.all(adj.q[:, jT + 1:] == 0.0)


def test_adjoint_needs_matching_tail():
    from mfdelay.core import build_grid
    g = build_grid(1.0, 0.0, 0.25, 0.05)
    sol, u = run(lq_coefficients(delayed=True), g, 20)
    with pytest.raises(ConfigurationError, match="K = delta"):
        solve_adjoint(lq_coefficients(delayed=True), sol, u)


# ---------------------------------------------------------------------------
# Hamiltonian

def _theta(v, n=3):
    law = EmpiricalLaw(np.zeros((4, 1)))
    x = np.zeros((n, 1))
    v = np.full((n, 1), v)
    return Theta(0.0, x, x, law, law, v, v)


def test_hamiltonian_running_only():
    c = system(h=lambda t, x, mu, v, vd: v[..., 0] ** 2, h_v=lambda t, x, mu, v, vd: 2 * v)
    H = hamiltonian(c, _theta(1.5), np.ones((3, 1)), np.ones((3, 1, 1)))
    np.testing.assert_allclose(H.value, 2.25)
    np.testing.assert_allclose(H.H_v, 3.0)


def test_hamiltonian_control_drift():
    c = system(b=lambda t, x, xd, mu, mud, v, vd: v, b_v=1.0)
    H = hamiltonian(c, _theta(2.0), np.full((3, 1), 3.0), np.zeros((3, 1, 1)))
    np.testing.assert_allclose(H.value, 6.0)
    np.testing.assert_allclose(H.H_v, 3.0)


def test_hamiltonian_lq_minimiser():
    c = lq_coefficients()
    p = np.array([[0.4], [-1.0], [2.0]])
    th = _theta(0.0)._replace(v=-p / 2, vd=-p / 2)
    H = hamiltonian(c, th, p, np.zeros((3, 1, 1)))
    np.testing.assert_allclose(H.H_v, 0.0, atol=1e-15)
    np.testing.assert_allclose(H.value, -p[:, 0] ** 2 / 4)


def test_hamiltonian_missing_partial_is_none():
    c = CoefficientSet(b=0.0, sigma=0.0, k=1, h=0.0)
    H = hamiltonian(c, _theta(0.0), np.zeros((3, 1)), np.zeros((3, 1, 1)))
    assert H.H_v is None


def test_convexity_probe():
    assert convexity_probe(lq_coefficients()).convex
    bad = lq_coefficients()
    bad.h = lambda t, x, mu, v, vd: -np.sum(v ** 2, axis=-1)
    assert not convexity_probe(bad).convex


# ---------------------------------------------------------------------------
# SMP residual and Gateaux check

def test_smp_residual_vanishes_for_same_control():
    g = control_grid(1.0, 0.0, 0.05)
    c = lq_coefficients()
    sol, u = run(c, g, 500)
    adj = solve_adjoint(c, sol, u)
    r = smp_residual(c, sol, u, adj, u)
    assert r.integral == 0.0 and np.all(r.field == 0.0)


def test_gateaux_same_control():
    g = control_grid(1.0, 0.0, 0.05)
    u = ControlProcess.constant(g, 0.2)
    rep = gateaux_consistency_check(lq_coefficients(), BoundaryData.constant(g, 1.0), u, u, g,
                                    ForwardConfig(n_particles=200))
    assert rep.finite_difference == 0.0 and rep.duality == 0.0 and rep.rel_error == 0.0


def test_gateaux_lq_small():
    g = control_grid(1.0, 0.0, 0.01)
    u, v = ControlProcess.constant(g, 0.2), ControlProcess.constant(g, -0.5)
    rep = gateaux_consistency_check(lq_coefficients(), BoundaryData.constant(g, 1.0), u, v, g,
                                    ForwardConfig(n_particles=5000), rng=RandomSource(2))
    assert rep.passed(0.05)


def _feedback_optimum(g, n, seed):
    """Closed-loop Riccati feedback, then replayed as an open-loop control."""
    T = g.T
    fb = CoefficientSet(b=lambda t, x, xd, mu, mud, v, vd: -x / (1 + T - t), sigma=1.0)
    ens = sample_brownian(g, n, 1, RandomSource(seed))
    closed = simulate_gmfdsde(fb, BoundaryData.constant(g, 1.0), g, ensemble=ens)
    t = g.times[:g.idx_T + 1]
    vals = -closed.paths / (1 + T - t)[None, :, None]
    u = ControlProcess(vals, g)
    c = lq_coefficients()
    sol = simulate_gmfdsde(c, BoundaryData.constant(g, 1.0), g, control=u, ensemble=ens)
    return c, sol, u


def test_first_order_inequality_at_riccati_optimum():
    g = control_grid(1.0, 0.0, 0.01)
    c, sol, u = _feedback_optimum(g, 20_000, 4)
    w = np.full(g.idx_T + 1, g.dt)
    w[0] = w[-1] = g.dt / 2
    for v in random_probes(u, sol, 8, RandomSource(5)):
        K = solve_variational(c, sol, u, v).K
        dv = v.broadcast(sol.n) - u.broadcast(sol.n)
        per = 2 * sol.terminal[:, 0] * K[:, -1, 0] + np.einsum("nk,k->n",
                                                                2 * u.values[:, :, 0] * dv[:, :, 0], w)
        se = per.std() / np.sqrt(per.size)
        assert per.mean() >= -3 * se


def test_riccati_feedback_cost():
    g = control_grid(1.0, 0.0, 0.01)
    c, sol, u = _feedback_optimum(g, 20_000, 6)
    J = cost_functional(c, sol, u)
    assert abs(J.value - lq_value(1.0)) <= 0.02 * lq_value(1.0)


def test_delay_shift_identity():
    g = control_grid(1.0, 0.25, 0.025)
    c = lq_coefficients(delayed=True)
    u = ControlProcess.constant(g, 0.0)
    v = ControlProcess.constant(g, 1.0)
    sol, _ = run(c, g, 20_000, u, seed=7)
    # K driven through the delayed control channel, then paired with p on both sides
    K = solve_variational(c, sol, u, v).K[:, :, 0]
    adj = solve_adjoint(c, sol, u)
    D, i0 = g.delay_steps, g.idx0
    p = adj.p[:, :, 0]
    nodes = range(i0, g.idx_T + 1)
    lhs = sum(np.mean(K[:, k - D] * p[:, k - i0]) for k in nodes) * g.dt
    raw = sum(np.mean(K[:, k] * p[:, k - i0 + D]) for k in nodes) * g.dt
    feats = control_features(sol, u, ("state", "control_window"))
    reg = 0.0
    for k in nodes:
        target = np.ascontiguousarray(p[:, k - i0 + D][:, None])
        reg += np.mean(K[:, k] * Projector(polynomial_design(feats(k), 2)).fit(target)[:, 0])
    reg *= g.dt
    assert raw == pytest.approx(lhs, rel=1e-12)
    assert reg == pytest.approx(lhs, rel=0.02)


# ---------------------------------------------------------------------------
# optimizer

def test_optimizer_quadratic_running_cost():
    g = control_grid(1.0, 0.0, 0.05)
    c = system(b=1.0, sigma=0.5, h=lambda t, x, mu, v, vd: v[..., 0] ** 2,
               h_v=lambda t, x, mu, v, vd: 2 * v)
    res = optimize_control(c, BoundaryData.constant(g, 0.0), ControlProcess.constant(g, 1.0), g,
                           OptimizerConfig(step=0.3, iters=30, tol=0.0),
                           ForwardConfig(n_particles=200))
    # each step multiplies u by 1 - 2 * step
    assert np.max(np.abs(res.control.free)) <= 1e-9


def test_optimizer_descent_monotone():
    g = control_grid(1.0, 0.0, 0.02)
    res = optimize_control(lq_coefficients(), BoundaryData.constant(g, 1.0),
                           ControlProcess.constant(g, 0.0), g, OptimizerConfig(step=0.1, iters=8),
                           ForwardConfig(n_particles=2000), rng=RandomSource(8))
    J, se = res.J_history, res.se_history
    assert all(b <= a + 3 * s for a, b, s in zip(J[:-1], J[1:], se[:-1]))
    assert J[-1] < J[0]


# ---------------------------------------------------------------------------
# delayed LQ oracle

def _weights(n, dt):
    w = np.full(n + 1, dt)
    w[0] = w[-1] = dt / 2
    return w


def _receding_horizon_cost(T, delta, dt, x0, gamma, n_paths, seed):
    """Monte Carlo cost of the certainty-equivalent receding-horizon policy.

    At step k the remaining deterministic problem min sum_j w_j u_j^2 + (S + dt sum_j u_j)^2
    over the controls that still reach X_T has the solution
    u_k = -dt S / (w_k (1 + dt^2 sum_j 1/w_j)); for additive noise this policy is optimal.
    """
    n, D = int(round(T / dt)), int(round(delta / dt))
    w = _weights(n, dt)
    last = n - 1 - D
    inv_tail = np.cumsum((1.0 / w[:last + 1])[::-1])[::-1]
    rng = np.random.default_rng(seed)
    X = np.full(n_paths, float(x0))
    U = np.zeros((n_paths, n + 1))
    hist = np.full((n_paths, D), float(gamma))
    cost = np.zeros(n_paths)
    for k in range(n):
        if k <= last:
            pending = hist.sum(axis=1) if D else 0.0
            S = X + dt * pending
            U[:, k] = -dt * S / (w[k] * (1.0 + dt ** 2 * inv_tail[k]))
        cost += w[k] * U[:, k] ** 2
        delayed = hist[:, 0] if D else U[:, k]
        X = X + delayed * dt + np.sqrt(dt) * rng.standard_normal(n_paths)
        if D:
            hist = np.concatenate([hist[:, 1:], U[:, k:k + 1]], axis=1)
    return cost + X ** 2


@pytest.mark.parametrize("delta,gamma", [(0.25, 0.0), (0.25, 0.4), (0.0, 0.0)])
def test_delayed_lq_value_matches_receding_horizon(delta, gamma):
    T, dt = 1.0, 0.05
    per = _receding_horizon_cost(T, delta, dt, 1.0, gamma, 400_000, 11)
    se = per.std() / np.sqrt(per.size)
    assert abs(per.mean() - delayed_lq_value(T, delta, dt, 1.0, gamma)) <= 3 * se


@pytest.mark.parametrize("delta,gamma", [(0.25, 0.0), (0.5, -0.3), (0.1, 1.0)])
def test_delayed_lq_deterministic_part(delta, gamma):
    T, dt, x0 = 1.0, 0.05, 1.3
    n, D = int(round(T / dt)), int(round(delta / dt))
    w = _weights(n, dt)[:n - D]
    S = x0 + gamma * D * dt
    oracle = S ** 2 / (1.0 + dt ** 2 * np.sum(1.0 / w))
    got = delayed_lq_value(T, delta, dt, x0, gamma) - delayed_lq_value(T, delta, dt, 0.0, 0.0)
    assert got == pytest.approx(oracle, rel=1e-12)


def test_delayed_lq_continuum_limit():
    assert delayed_lq_value(1.0, 0.25, 1e-3) == pytest.approx(
        delayed_lq_continuous_value(1.0, 0.25), rel=0.01)
    assert delayed_lq_value(1.0, 0.0, 1e-3) == pytest.approx(lq_value(1.0), rel=0.01)
