"""Optimal control of mean-field delay systems by the stochastic maximum principle.

Controls are per-particle arrays on the grid nodes of [-delta, T].  The
nodes of [-delta, 0) hold the prescribed initial segment; node t = 0 is the
first free node.  Every descent step is regressed onto node features, so a
control value at node k is a function of what is known at node k.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from collections.abc import Sequence
from typing import Callable

import numpy as np

from .backward import BackwardConfig, BackwardSolution, DriverArgs, solve_mfabsde
from .coefficients import CoefficientSet, Theta
from .core import BoundaryData, ParticleEnsemble, RandomSource, TimeGrid, sample_brownian
from .errors import ConfigurationError, DomainError, NonConvergenceError, StepSizeError
from .forward import ForwardConfig, ForwardSolution, simulate_gmfdsde
from .measure import EmpiricalLaw, prime_expectation
from .regression import FeatureFn, Projector, polynomial_design

_VARIATIONAL_PARTIALS = ("b_x", "b_xd", "b_v", "b_vd", "b_mu", "b_mud",
                         "sigma_x", "sigma_xd", "sigma_v", "sigma_vd", "sigma_mu", "sigma_mud")
_MEAN_FIELD_PARTIALS = ("b_mu", "b_mud", "sigma_mu", "sigma_mud", "h_mu")


# ---------------------------------------------------------------------------
# admissible sets and control processes

@dataclass(frozen=True)
class Box:
    """Closed box ``[low, high]`` (componentwise, bounds may be infinite)."""

    low: float | np.ndarray = -np.inf
    high: float | np.ndarray = np.inf

    def __post_init__(self):
        if np.any(np.asarray(self.low) > np.asarray(self.high)):
            raise ConfigurationError("box has low > high")

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.low, self.high)

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(x >= np.asarray(self.low) - tol) and np.all(x <= np.asarray(self.high) + tol))


class ControlProcess:
    """Per-particle control values of shape ``(N | 1, nodes on [-delta, T], k)``.

    ``admissible`` is a :class:`Box` or a projection callable onto a convex
    set.  The first ``delay_steps`` nodes hold the initial segment and are
    never changed by projection or descent.
    """

    def __init__(self, values, grid: TimeGrid, admissible: Box | Callable | None = None):
        vals = np.asarray(values, dtype=float)
        if vals.ndim != 3 or vals.shape[1] != grid.idx_T + 1:
            raise ConfigurationError(
                f"control values must have shape (N, {grid.idx_T + 1}, k); got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ConfigurationError("control values are not finite")
        self.values = vals
        self.grid = grid
        self.admissible = admissible if admissible is not None else Box()

    @classmethod
    def constant(cls, grid: TimeGrid, value=0.0, gamma=0.0, admissible=None) -> "ControlProcess":
        """Constant ``value`` on [0, T] after the initial segment ``gamma``."""
        v = np.atleast_1d(np.asarray(value, dtype=float))
        vals = np.broadcast_to(v, (1, grid.idx_T + 1, v.size)).copy()
        vals[:, :grid.delay_steps] = np.asarray(gamma, dtype=float)
        return cls(vals, grid, admissible)

    @classmethod
    def from_boundary(cls, grid: TimeGrid, free, boundary: BoundaryData | None = None,
                      admissible=None) -> "ControlProcess":
        """Join the initial segment of ``boundary`` with values on [0, T]."""
        free = np.asarray(free, dtype=float)
        D = grid.delay_steps
        n = free.shape[0]
        gamma = np.zeros((1, D, free.shape[2]))
        if boundary is not None and boundary.control is not None:
            gamma = boundary.control
        n = max(n, gamma.shape[0])
        vals = np.empty((n, grid.idx_T + 1, free.shape[2]))
        vals[:, :D] = gamma
        vals[:, D:] = free
        return cls(vals, grid, admissible)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[2]

    @property
    def gamma(self) -> np.ndarray:
        return self.values[:, :self.grid.delay_steps]

    @property
    def free(self) -> np.ndarray:
        return self.values[:, self.grid.delay_steps:]

    def project(self, x: np.ndarray) -> np.ndarray:
        a = self.admissible
        return a.project(x) if isinstance(a, Box) else np.asarray(a(x), dtype=float)

    def is_admissible(self, tol: float = 1e-12) -> bool:
        a = self.admissible
        if isinstance(a, Box):
            return a.contains(self.free, tol)
        return bool(np.max(np.abs(self.project(self.free) - self.free), initial=0.0) <= tol)

    def with_free(self, free: np.ndarray) -> "ControlProcess":
        """Same initial segment, projected new values on [0, T]."""
        free = self.project(np.asarray(free, dtype=float))
        D = self.grid.delay_steps
        n = max(free.shape[0], self.n)
        vals = np.empty((n, self.grid.idx_T + 1, self.k))
        vals[:, :D] = self.gamma
        vals[:, D:] = free
        return ControlProcess(vals, self.grid, self.admissible)

    def broadcast(self, n: int) -> np.ndarray:
        return np.broadcast_to(self.values, (n,) + self.values.shape[1:])

    def window_sum(self, n: int) -> np.ndarray:
        """``W_k = sum over nodes [k - D, k) of u dt`` for every node k >= D."""
        D, dt = self.grid.delay_steps, self.grid.dt
        u = self.broadcast(n)
        c = np.concatenate([np.zeros((n, 1, self.k)), np.cumsum(u, axis=1)], axis=1) * dt
        W = np.zeros_like(u)
        W[:, D:] = c[:, D:-1] - c[:, :u.shape[1] - D]
        return W


def control_grid(T: float, delta: float, dt: float) -> TimeGrid:
    """Grid for control problems: the adjoint lives on [0, T + delta]."""
    from .core import build_grid
    return build_grid(T, delta, delta, dt)


def perturb_control(u: ControlProcess, v: ControlProcess, theta: float) -> ControlProcess:
    """Convex combination ``u + theta (v - u)``."""
    if not 0.0 <= theta <= 1.0:
        raise DomainError(f"theta must lie in [0, 1], got {theta}")
    if u.values.shape[1:] != v.values.shape[1:]:
        raise ConfigurationError("controls live on different grids")
    if not np.array_equal(*np.broadcast_arrays(u.gamma, v.gamma)):
        raise ConfigurationError("controls have different initial segments")
    # this form is exact at v == u; theta == 1 returns v itself
    if theta == 1.0:
        vals = np.array(np.broadcast_to(v.values, np.broadcast_shapes(u.values.shape, v.values.shape)))
    else:
        vals = u.values + theta * (v.values - u.values)
    return ControlProcess(vals, u.grid, u.admissible)


# ---------------------------------------------------------------------------
# frozen trajectories

class _Frozen:
    """Coefficient arguments along a stored trajectory, for arbitrary particle rows."""

    def __init__(self, solution: ForwardSolution, control: ControlProcess | None):
        if solution.paths is None:
            raise ConfigurationError("this operation needs a solution with stored paths")
        self.sol = solution
        self.grid = solution.grid
        self.X = solution.paths
        self.n = solution.n
        self.U = None if control is None else control.broadcast(self.n)
        self._laws: dict[int, EmpiricalLaw] = {}

    def law(self, k: int) -> EmpiricalLaw:
        mu = self._laws.get(k)
        if mu is None:
            if len(self._laws) > 8:
                self._laws.clear()
            mu = self._laws[k] = EmpiricalLaw(self.X[:, k])
        return mu

    def theta(self, k: int, rows=None, lead: tuple = ()) -> Theta:
        """Arguments at node k; ``lead`` reshapes the particle axis (e.g. (1, -1))."""
        D = self.grid.delay_steps
        sel = slice(None) if rows is None else rows

        def take(a):
            if a is None:
                return None
            r = a[sel]
            return r.reshape(lead + r.shape[-1:]) if lead else r
        v = vd = None
        if self.U is not None:
            v, vd = take(self.U[:, k]), take(self.U[:, k - D])
        return Theta(self.grid.time(k), take(self.X[:, k]), take(self.X[:, k - D]),
                     self.law(k), self.law(k - D), v, vd)


def _mv(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``A @ x`` over the last axes, A (..., i, l), x (..., l)."""
    return np.einsum("...il,...l->...i", A, x)


def _mtv(A: np.ndarray, p: np.ndarray) -> np.ndarray:
    """``A^T p``, A (..., i, l), p (..., i)."""
    return np.einsum("...il,...i->...l", A, p)


def _smv(S: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Sigma-derivative applied to a vector: S (..., i, j, l), x (..., l)."""
    return np.einsum("...ijl,...l->...ij", S, x)


def _stv(S: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Adjoint of ``_smv``: S (..., i, j, l), q (..., i, j)."""
    return np.einsum("...ijl,...ij->...l", S, q)


# ---------------------------------------------------------------------------
# cost

@dataclass
class CostEstimate:
    value: float
    standard_error: float
    per_particle: np.ndarray

    def __float__(self) -> float:
        return self.value


def cost_functional(coeffs: CoefficientSet, solution: ForwardSolution,
                    control: ControlProcess | None = None) -> CostEstimate:
    """Monte Carlo estimate of ``E[int_0^T h dt + Phi(X_T, law(X_T))]``.

    The running cost uses the trapezoid rule on the grid nodes.
    """
    grid = solution.grid
    if control is not None and control.values.shape[1] != grid.idx_T + 1:
        raise ConfigurationError("control and solution live on different grids")
    coeffs.require("Phi")
    fr = _Frozen(solution, control)
    n = solution.n
    total = np.zeros(n)
    if coeffs.has("h") and not coeffs.is_zero("h"):
        w = np.full(grid.idx_T - grid.idx0 + 1, grid.dt)
        w[0] = w[-1] = grid.dt / 2
        for j, k in enumerate(range(grid.idx0, grid.idx_T + 1)):
            h = np.broadcast_to(coeffs.running("h", fr.theta(k)), (n,))
            total += w[j] * h
    xT = solution.paths[:, grid.idx_T]
    total += np.broadcast_to(coeffs.terminal("Phi", xT, fr.law(grid.idx_T)), (n,))
    se = float(total.std() / np.sqrt(n)) if n > 1 else 0.0
    return CostEstimate(float(total.mean()), se, total)


# ---------------------------------------------------------------------------
# variational process

@dataclass
class VariationalSolution:
    grid: TimeGrid
    K: np.ndarray          # (N, nodes on [-delta, T], m)


def _partner_term(coeffs: CoefficientSet, name: str, th: Theta, atoms: np.ndarray,
                  vec: np.ndarray, contract: Callable, budget, rng):
    """``E'[name(own args; y = X') applied to vec']`` for every own particle."""
    if coeffs.is_zero(name):
        return 0.0
    f = getattr(coeffs, name)
    if not callable(f):
        c = np.broadcast_to(np.asarray(f, dtype=float), coeffs.trailing(name))
        return contract(c, vec.mean(axis=0))

    def pair(p, o):
        own = Theta(th.t, o[0], o[1], th.mu, th.mud, o[2], o[3])
        return contract(coeffs.state_y(name, own, p[0]), p[1])
    return prime_expectation(pair, (atoms, vec), (th.x, th.xd, th.v, th.vd), budget, rng)


def solve_variational(coeffs: CoefficientSet, base: ForwardSolution, u: ControlProcess,
                      v: ControlProcess, interaction_budget: int | None = None,
                      rng: RandomSource | None = None) -> VariationalSolution:
    """Euler scheme for the linearised state equation along ``base``.

    Drift ``b_x K + b_xd K_{t-delta} + E'[b_mu K'] + E'[b_mud K'_{t-delta}]
    + b_v (v - u) + b_vd (v - u)_{t-delta}``, and the same combination of
    sigma partials as diffusion.  ``K`` vanishes on [-delta, 0].
    """
    coeffs.require(*_VARIATIONAL_PARTIALS)
    grid = base.grid
    rng = rng or RandomSource(0)
    fr = _Frozen(base, u)
    n, m, D, dt = base.n, coeffs.m, grid.delay_steps, grid.dt
    dv = v.broadcast(n) - u.broadcast(n)
    K = np.zeros((n, grid.idx_T + 1, m))
    for k in range(grid.idx0, grid.idx_T):
        th = fr.theta(k)
        Kx, Kd = K[:, k], K[:, k - D]
        r = rng.child("variational", k)
        drift = (_mv(coeffs.state("b_x", th), Kx) + _mv(coeffs.state("b_xd", th), Kd)
                 + _mv(coeffs.state("b_v", th), dv[:, k]) + _mv(coeffs.state("b_vd", th), dv[:, k - D]))
        drift = drift + _partner_term(coeffs, "b_mu", th, fr.X[:, k], Kx, _mv,
                                      interaction_budget, r.child(0))
        drift = drift + _partner_term(coeffs, "b_mud", th, fr.X[:, k - D], Kd, _mv,
                                      interaction_budget, r.child(1))
        diff = (_smv(coeffs.state("sigma_x", th), Kx) + _smv(coeffs.state("sigma_xd", th), Kd)
                + _smv(coeffs.state("sigma_v", th), dv[:, k])
                + _smv(coeffs.state("sigma_vd", th), dv[:, k - D]))
        diff = diff + _partner_term(coeffs, "sigma_mu", th, fr.X[:, k], Kx, _smv,
                                    interaction_budget, r.child(2))
        diff = diff + _partner_term(coeffs, "sigma_mud", th, fr.X[:, k - D], Kd, _smv,
                                    interaction_budget, r.child(3))
        dB = base.ensemble.increment(k - grid.idx0)
        diff = np.broadcast_to(diff, (n, m, coeffs.d))
        K[:, k + 1] = Kx + drift * dt + np.einsum("nij,nj->ni", diff, dB)
    return VariationalSolution(grid, K)


# ---------------------------------------------------------------------------
# adjoint equation

@dataclass
class AdjointSolution:
    grid: TimeGrid
    p: np.ndarray          # (N, nodes on [0, T + delta], m)
    q: np.ndarray          # (N, nodes on [0, T + delta], m, d)
    backward: BackwardSolution

    @property
    def p_T(self) -> np.ndarray:
        return self.p[:, self.grid.idx_T - self.grid.idx0]


class AdjointDriver:
    """Driver of the adjoint equation, evaluated along a frozen trajectory.

    Own terms ``b_x^T p + sigma_x^T q + h_x``; partner terms
    ``E'[b_mu(Theta'; X)^T p' + sigma_mu^T q' + h_mu]``; and, while
    ``t + delta <= T``, the delayed partials taken at ``t + delta`` against
    ``p_{t+delta}, q_{t+delta}`` (own and partner).  The conditional
    expectation of the anticipated terms is supplied by the regression in
    the backward sweep.
    """

    lipschitz_C = None
    monotonicity_flags = frozenset()

    def __init__(self, coeffs: CoefficientSet, frozen: _Frozen):
        self.c = coeffs
        self.fr = frozen
        self.mean_field = any(coeffs.has(nm) and not coeffs.is_zero(nm) for nm in _MEAN_FIELD_PARTIALS)
        self.delayed = not (coeffs.is_zero("b_xd") and coeffs.is_zero("sigma_xd")
                            and coeffs.is_zero("b_mud") and coeffs.is_zero("sigma_mud"))

    def evaluate(self, k: int, t: float, own: DriverArgs, prime: DriverArgs):
        c, fr = self.c, self.fr
        grid = fr.grid
        D = grid.delay_steps
        rows = own.idx[:, 0]
        n = rows.shape[0]
        th = fr.theta(k, rows)
        p, q = own.y[:, 0], own.z[:, 0]
        out = _mtv(c.state("b_x", th), p) + _stv(c.state("sigma_x", th), q)
        if c.has("h_x"):
            out = out + c.running("h_x", th)
        ahead = k + D <= grid.idx_T
        if ahead and self.delayed:
            tha = fr.theta(k + D, rows)
            out = out + _mtv(c.state("b_xd", tha), own.y_adv[:, 0]) \
                + _stv(c.state("sigma_xd", tha), own.z_adv[:, 0])
        out = np.broadcast_to(out, (n, c.m))[:, None, :]
        if not self.mean_field:
            return out

        pr = prime.idx[0]
        y_own = fr.X[rows, k][:, None, :]
        thp = fr.theta(k, pr, lead=(1, -1))
        pp, qp = prime.y, prime.z
        extra = 0.0
        if not c.is_zero("b_mu"):
            extra = extra + _mtv(c.state_y("b_mu", thp, y_own), pp)
        if not c.is_zero("sigma_mu"):
            extra = extra + _stv(c.state_y("sigma_mu", thp, y_own), qp)
        if c.has("h_mu") and not c.is_zero("h_mu"):
            extra = extra + c.running_y("h_mu", thp, y_own)
        if ahead:
            thpa = fr.theta(k + D, pr, lead=(1, -1))
            if not c.is_zero("b_mud"):
                extra = extra + _mtv(c.state_y("b_mud", thpa, y_own), prime.y_adv)
            if not c.is_zero("sigma_mud"):
                extra = extra + _stv(c.state_y("sigma_mud", thpa, y_own), prime.z_adv)
        return out + extra


def adjoint_terminal(coeffs: CoefficientSet, base: ForwardSolution,
                     budget: int | None = None, rng: RandomSource | None = None) -> np.ndarray:
    """``Phi_x(X_T, mu_T) + E'[Phi_mu(X'_T, mu_T, X_T)]`` per particle, shape (N, m)."""
    coeffs.require("Phi_x")
    xT = base.paths[:, base.grid.idx_T]
    mu = EmpiricalLaw(xT)
    pT = np.broadcast_to(coeffs.terminal("Phi_x", xT, mu), xT.shape).copy()
    if coeffs.has("Phi_mu") and not coeffs.is_zero("Phi_mu"):
        pT += prime_expectation(lambda p, o: coeffs.terminal_y("Phi_mu", p, mu, o),
                                xT, xT, budget, rng)
    return pT


def control_features(solution: ForwardSolution, control: ControlProcess | None,
                     sources: Sequence[str] = ("state",)) -> FeatureFn:
    """Node features: ``state`` X_k, ``lagged_state`` X_{k-D}, ``control_window``
    the integral of u over [t - delta, t), ``brownian`` the driving path."""
    grid = solution.grid
    D = grid.delay_steps
    n = solution.n
    W = None
    if "control_window" in sources and control is not None and D:
        W = control.window_sum(n)

    def feat(k: int) -> np.ndarray:
        kk = min(k, grid.idx_T)
        cols = []
        for s in sources:
            if s == "state":
                cols.append(solution.paths[:, kk])
            elif s == "lagged_state":
                if D:
                    cols.append(solution.paths[:, kk - D])
            elif s == "control_window":
                if W is not None:
                    cols.append(W[:, kk])
            elif s == "brownian":
                path = solution.ensemble.brownian_path()
                cols.append(path[:, min(k - grid.idx0, path.shape[1] - 1)])
            else:
                raise ConfigurationError(f"unknown feature source {s!r}")
        return np.concatenate(cols, axis=1)
    return feat


def default_feature_sources(grid: TimeGrid) -> tuple[str, ...]:
    return ("state", "control_window") if grid.delay_steps else ("state",)


def solve_adjoint(coeffs: CoefficientSet, base: ForwardSolution, u: ControlProcess,
                  cfg: BackwardConfig | None = None, rng: RandomSource | None = None,
                  features: FeatureFn | None = None) -> AdjointSolution:
    """Adjoint pair ``(p, q)`` on [0, T + delta] along ``base`` (simulated under ``u``).

    ``p_T`` is the terminal formula above and ``p = q = 0`` on (T, T + delta].
    """
    grid = base.grid
    D = grid.delay_steps
    if grid.tail_steps != D:
        raise ConfigurationError("the adjoint equation needs a grid with K = delta")
    coeffs.require("b_x", "b_xd", "sigma_x", "sigma_xd", "Phi_x")
    rng = rng or RandomSource(0)
    cfg = cfg or BackwardConfig(beta=1.0)
    if cfg.beta is None:
        cfg = replace(cfg, beta=1.0)
    fr = _Frozen(base, u)
    n, m, d = base.n, coeffs.m, coeffs.d
    pT = adjoint_terminal(coeffs, base, cfg.interaction_budget, rng.child("terminal"))
    ty = np.zeros((n, D + 1, m))
    ty[:, 0] = pT
    term = BoundaryData(terminal_y=ty, terminal_z=np.zeros((1, D + 1, m, d)))
    feats = features or control_features(base, u, default_feature_sources(grid))
    driver = AdjointDriver(coeffs, fr)
    sol = solve_mfabsde(driver, term, grid, base.ensemble, cfg, rng.child("adjoint"), feats)
    return AdjointSolution(grid, sol.Y, sol.Z, sol)


# ---------------------------------------------------------------------------
# Hamiltonian and the maximum-principle residual

@dataclass
class HamiltonianEval:
    value: np.ndarray
    H_x: np.ndarray | None
    H_xd: np.ndarray | None
    H_v: np.ndarray | None
    H_vd: np.ndarray | None
    H_mu: Callable[[np.ndarray], np.ndarray] | None = None
    H_mud: Callable[[np.ndarray], np.ndarray] | None = None


def hamiltonian(coeffs: CoefficientSet, th: Theta, p: np.ndarray, q: np.ndarray) -> HamiltonianEval:
    """``H = b.p + sigma:q + h`` and its partials by the product rule.

    A partial is ``None`` when one of its ingredients is not provided.
    """
    c = coeffs
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    batch = th.x.shape[:-1]

    def h_term(name, y=None):
        if not c.has(name):
            return 0.0
        return c.running(name, th) if y is None else c.running_y(name, th, y)

    value = np.sum(c.state("b", th) * p, axis=-1) + np.sum(c.state("sigma", th) * q, axis=(-2, -1))
    value = np.broadcast_to(value + h_term("h"), batch)

    def part(bn, sn, hn, y=None):
        if not (c.has(bn) and c.has(sn)):
            return None
        if hn is not None and not c.has(hn) and c.has("h") and not c.is_zero("h"):
            return None
        if y is None:
            r = _mtv(c.state(bn, th), p) + _stv(c.state(sn, th), q)
        else:
            r = _mtv(c.state_y(bn, th, y), p) + _stv(c.state_y(sn, th, y), q)
        if hn is not None:
            r = r + h_term(hn, y)
        return r

    def lions(bn, sn, hn):
        if not (c.has(bn) and c.has(sn)):
            return None
        return lambda y: part(bn, sn, hn, y)

    return HamiltonianEval(value, part("b_x", "sigma_x", "h_x"), part("b_xd", "sigma_xd", None),
                           part("b_v", "sigma_v", "h_v"), part("b_vd", "sigma_vd", "h_vd"),
                           lions("b_mu", "sigma_mu", "h_mu"), lions("b_mud", "sigma_mud", None))


def _node_slice(adj: AdjointSolution, k: int):
    j = k - adj.grid.idx0
    return adj.p[:, j], adj.q[:, j]


def control_gradient(coeffs: CoefficientSet, base: ForwardSolution, u: ControlProcess,
                     adjoint: AdjointSolution, features: FeatureFn | None = None,
                     basis_degree: int = 2, with_pathwise: bool = False):
    """``H_v(t) + E^{F_t}[H_vd(t + delta)]`` on the nodes of [0, T], shape (N, nodes, k).

    The anticipated term vanishes when ``t + delta > T``; with a positive
    delay it is regressed onto the node-t features.  With ``with_pathwise``
    a second array is returned in which every conditional expectation (in
    the adjoint and in the anticipated term) is replaced by its unregressed
    pathwise value.  Both have the same mean; the second one carries the
    Monte Carlo spread.
    """
    coeffs.require("b_v", "b_vd", "sigma_v", "sigma_vd")
    grid = base.grid
    D = grid.delay_steps
    fr = _Frozen(base, u)
    feats = features or control_features(base, u, default_feature_sources(grid))
    n, kdim = base.n, u.k
    R = adjoint.backward.pathwise
    use_vd = not (coeffs.is_zero("b_vd") and coeffs.is_zero("sigma_vd")
                  and (not coeffs.has("h_vd") or coeffs.is_zero("h_vd")))
    G = np.zeros((n, grid.idx_T - grid.idx0 + 1, kdim))
    Graw = np.zeros_like(G) if with_pathwise else None
    for j, k in enumerate(range(grid.idx0, grid.idx_T + 1)):
        th = fr.theta(k)
        H = hamiltonian(coeffs, th, *_node_slice(adjoint, k))
        g = np.broadcast_to(H.H_v, (n, kdim))
        raw = None
        if with_pathwise:
            raw = g + _mtv(np.broadcast_to(coeffs.state("b_v", th), (n, coeffs.m, kdim)), R[:, j])
        if use_vd and k + D <= grid.idx_T:
            tha = fr.theta(k + D)
            Ha = hamiltonian(coeffs, tha, *_node_slice(adjoint, k + D))
            a = np.broadcast_to(Ha.H_vd, (n, kdim))
            if with_pathwise:
                b_vd = np.broadcast_to(coeffs.state("b_vd", tha), (n, coeffs.m, kdim))
                raw = raw + a + _mtv(b_vd, R[:, j + D])
            if D:
                a = Projector(polynomial_design(feats(k), basis_degree)).fit(np.ascontiguousarray(a))
            g = g + a
        G[:, j] = g
        if with_pathwise:
            Graw[:, j] = raw
    return (G, Graw) if with_pathwise else G


@dataclass
class SMPResidual:
    field: np.ndarray          # (N, nodes on [0, T])
    integral: float
    standard_error: float


def _integrate(field_: np.ndarray, dt: float) -> np.ndarray:
    w = np.full(field_.shape[1], dt)
    w[0] = w[-1] = dt / 2
    return np.einsum("nk,k->n", field_, w)


def smp_residual(coeffs: CoefficientSet, base: ForwardSolution, u: ControlProcess,
                 adjoint: AdjointSolution, v_probe: ControlProcess,
                 gradient: tuple | None = None, features: FeatureFn | None = None,
                 basis_degree: int = 2) -> SMPResidual:
    """Pairing of the control gradient with ``v_probe - u`` and its (t, omega) integral.

    The standard error comes from the pathwise version of the gradient, so
    it reflects the sampling error of the adjoint and does not shrink with
    the gradient itself.  ``gradient`` may pass a precomputed pair from
    :func:`control_gradient` with ``with_pathwise=True``.
    """
    if gradient is None:
        gradient = control_gradient(coeffs, base, u, adjoint, features, basis_degree, True)
    G, Graw = gradient
    n, i0 = base.n, base.grid.idx0
    dv = v_probe.broadcast(n)[:, i0:] - u.broadcast(n)[:, i0:]
    field_ = np.sum(G * dv, axis=-1)
    per = _integrate(field_, base.grid.dt)
    per_raw = _integrate(np.sum(Graw * dv, axis=-1), base.grid.dt)
    return SMPResidual(field_, float(per.mean()), float(per_raw.std() / np.sqrt(n)))


# ---------------------------------------------------------------------------
# perturbation, variational and Gateaux checks

def _slope(xs, ys) -> float | None:
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if np.any(ys <= 0) or len(xs) < 2:
        return None
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


@dataclass
class RateCheck:
    thetas: list
    values: list
    slope: float | None
    decreasing: bool
    target: float = 2.0
    tol: float = 0.3

    @property
    def passed(self) -> bool:
        if all(v == 0.0 for v in self.values):
            return True
        return self.decreasing and self.slope is not None and abs(self.slope - self.target) <= self.tol


def _common_ensemble(grid, coeffs, cfg, rng, ensemble):
    if ensemble is not None:
        return ensemble
    cfg = cfg or ForwardConfig()
    return sample_brownian(grid, cfg.n_particles, coeffs.d, (rng or RandomSource(0)).child("noise"))


def perturbation_convergence_check(coeffs: CoefficientSet, boundary: BoundaryData,
                                   u: ControlProcess, v: ControlProcess, thetas: Sequence[float],
                                   grid: TimeGrid, cfg: ForwardConfig | None = None,
                                   rng: RandomSource | None = None,
                                   ensemble: ParticleEnsemble | None = None) -> RateCheck:
    """``E[sup_t |X^theta - X^u|^2]`` for each theta on common noise."""
    ens = _common_ensemble(grid, coeffs, cfg, rng, ensemble)
    base = simulate_gmfdsde(coeffs, boundary, grid, cfg, rng, u, ens)
    vals = []
    for th in thetas:
        s = simulate_gmfdsde(coeffs, boundary, grid, cfg, rng, perturb_control(u, v, th), ens)
        diff = np.sum((s.paths - base.paths) ** 2, axis=2)
        vals.append(float(np.mean(diff.max(axis=1))))
    dec = all(b <= a for a, b in zip(vals[:-1], vals[1:]))
    return RateCheck(list(thetas), vals, _slope(thetas, vals), dec)


def variational_consistency_check(coeffs: CoefficientSet, boundary: BoundaryData,
                                  u: ControlProcess, v: ControlProcess, thetas: Sequence[float],
                                  grid: TimeGrid, cfg: ForwardConfig | None = None,
                                  rng: RandomSource | None = None,
                                  ensemble: ParticleEnsemble | None = None) -> RateCheck:
    """``E[sup_t |(X^theta - X^u)/theta - K|^2]`` for each theta on common noise."""
    ens = _common_ensemble(grid, coeffs, cfg, rng, ensemble)
    base = simulate_gmfdsde(coeffs, boundary, grid, cfg, rng, u, ens)
    K = solve_variational(coeffs, base, u, v, (cfg or ForwardConfig()).interaction_budget, rng).K
    vals = []
    for th in thetas:
        s = simulate_gmfdsde(coeffs, boundary, grid, cfg, rng, perturb_control(u, v, th), ens)
        diff = np.sum(((s.paths - base.paths) / th - K) ** 2, axis=2)
        vals.append(float(np.mean(diff.max(axis=1))))
    dec = all(b <= a for a, b in zip(vals[:-1], vals[1:]))
    return RateCheck(list(thetas), vals, _slope(thetas, vals), dec)


@dataclass
class GateauxReport:
    finite_difference: float
    duality: float
    rel_error: float
    standard_error: float

    def passed(self, tol: float) -> bool:
        return self.rel_error <= tol


def gateaux_consistency_check(coeffs: CoefficientSet, boundary: BoundaryData,
                              u: ControlProcess, v: ControlProcess, grid: TimeGrid,
                              forward_cfg: ForwardConfig | None = None,
                              backward_cfg: BackwardConfig | None = None,
                              rng: RandomSource | None = None, theta: float = 1e-3,
                              ensemble: ParticleEnsemble | None = None,
                              feature_sources: Sequence[str] | None = None) -> GateauxReport:
    """Finite-difference derivative of J in direction ``v - u`` against the
    adjoint pairing ``E int <H_v + E^{F_t}[H_vd|_{t+delta}], v - u> dt``."""
    rng = rng or RandomSource(0)
    ens = _common_ensemble(grid, coeffs, forward_cfg, rng, ensemble)
    base = simulate_gmfdsde(coeffs, boundary, grid, forward_cfg, rng, u, ens)
    pert = simulate_gmfdsde(coeffs, boundary, grid, forward_cfg, rng,
                            perturb_control(u, v, theta), ens)
    j0 = cost_functional(coeffs, base, u)
    j1 = cost_functional(coeffs, pert, perturb_control(u, v, theta))
    fd = (j1.value - j0.value) / theta
    sources = feature_sources or default_feature_sources(grid)
    feats = control_features(base, u, sources)
    bcfg = backward_cfg or BackwardConfig(beta=1.0)
    adj = solve_adjoint(coeffs, base, u, bcfg, rng, feats)
    res = smp_residual(coeffs, base, u, adj, v, features=feats, basis_degree=bcfg.basis_degree)
    scale = max(abs(fd), abs(res.integral))
    rel = abs(fd - res.integral) / scale if scale > 0 else 0.0
    return GateauxReport(float(fd), res.integral, float(rel), res.standard_error)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerConfig:
    step: float = 0.3
    iters: int = 30
    tol: float = 1e-5
    basis_degree: int = 2
    feature_sources: tuple | None = None
    patience: int = 5
    max_halvings: int = 1
    rise_tol: float = 1e-4


@dataclass
class OptimizeResult:
    control: ControlProcess
    J_history: list
    se_history: list
    best_iter: int
    step: float
    halvings: int
    converged: bool
    solution: ForwardSolution
    adjoint: AdjointSolution | None = None
    gradient: np.ndarray | None = None
    events: list = field(default_factory=list)

    @property
    def J(self) -> float:
        return self.J_history[self.best_iter]


def _rose(J: CostEstimate, prev: CostEstimate, rel_tol: float) -> bool:
    """J rose beyond the paired Monte Carlo noise and a relative tolerance."""
    diff = J.per_particle - prev.per_particle
    se = float(diff.std() / np.sqrt(diff.size))
    return J.value - prev.value > max(3.0 * se, rel_tol * abs(prev.value))


def _fit_nodes(values: np.ndarray, feats: FeatureFn, grid: TimeGrid, degree: int) -> np.ndarray:
    out = np.empty_like(values)
    for j, k in enumerate(range(grid.idx0, grid.idx_T + 1)):
        out[:, j] = Projector(polynomial_design(feats(k), degree)).fit(np.ascontiguousarray(values[:, j]))
    return out


def optimize_control(coeffs: CoefficientSet, boundary: BoundaryData, u0: ControlProcess,
                     grid: TimeGrid, opt_cfg: OptimizerConfig | None = None,
                     forward_cfg: ForwardConfig | None = None,
                     backward_cfg: BackwardConfig | None = None,
                     rng: RandomSource | None = None,
                     ensemble: ParticleEnsemble | None = None) -> OptimizeResult:
    """Projected gradient descent driven by the adjoint equation.

    Each iteration simulates the state under ``u``, solves the adjoint,
    forms the gradient, and sets ``u <- Proj_U(fit(u - step * g))`` with the
    fit taken node by node on the node features.  The returned iterate is
    the latest one whose J is within ``rise_tol`` (relative) of the lowest
    J seen; near the optimum this is the fixed point of the descent map
    rather than a slightly earlier iterate that wins on sampling noise.  After ``patience`` consecutive increases of J the step
    is halved and descent restarts from the best iterate; further failure
    after ``max_halvings`` halvings raises :class:`StepSizeError`.
    """
    opt = opt_cfg or OptimizerConfig()
    rng = rng or RandomSource(0)
    bcfg = backward_cfg or BackwardConfig(beta=1.0, basis_degree=opt.basis_degree)
    ens = _common_ensemble(grid, coeffs, forward_cfg, rng, ensemble)
    sources = opt.feature_sources or default_feature_sources(grid)
    n = ens.n
    u = u0.with_free(u0.broadcast(n)[:, grid.idx0:])
    step = opt.step
    J_hist: list[float] = []
    se_hist: list[float] = []
    J_min = np.inf
    best = None          # lowest J so far: (it, u, sol)
    pick = None          # latest iterate within rise_tol of the lowest J
    rises = halvings = 0
    events: list[str] = []
    converged = False
    prev = None
    for it in range(opt.iters):
        sol = simulate_gmfdsde(coeffs, boundary, grid, forward_cfg, rng, u, ens)
        J = cost_functional(coeffs, sol, u)
        J_hist.append(J.value)
        se_hist.append(J.standard_error)
        if not np.isfinite(J.value):
            raise NonConvergenceError(f"non-finite cost at iteration {it}", J_hist)
        if J.value < J_min:
            J_min, best, rises = J.value, (it, u, sol), 0
        elif prev is not None and _rose(J, prev, opt.rise_tol):
            rises += 1
        if J.value <= J_min + opt.rise_tol * abs(J_min):
            pick = (it, u, sol)
        prev = J
        if rises >= opt.patience:
            if halvings >= opt.max_halvings:
                raise StepSizeError(
                    f"J increased {opt.patience} times in a row after {halvings} step halvings "
                    f"(history {J_hist})")
            halvings += 1
            step /= 2
            events.append(f"iteration {it}: J rose {opt.patience} times; step halved to {step:g}")
            u, rises, prev = best[1], 0, None
            continue
        feats = control_features(sol, u, sources)
        adj = solve_adjoint(coeffs, sol, u, bcfg, rng.child("adjoint", it), feats)
        G = control_gradient(coeffs, sol, u, adj, feats, opt.basis_degree)
        new = u.with_free(_fit_nodes(u.broadcast(n)[:, grid.idx0:] - step * G, feats, grid,
                                     opt.basis_degree))
        change = float(np.sqrt(np.mean((new.values - u.broadcast(n)) ** 2)))
        if change < opt.tol:
            converged = True
            break
        u = new
    if pick is None or J_hist[pick[0]] > J_min + opt.rise_tol * abs(J_min):
        pick = best
    return OptimizeResult(pick[1], J_hist, se_hist, pick[0], step, halvings, converged, pick[2],
                          events=events)


# ---------------------------------------------------------------------------
# optimality diagnostics

class ProbeSet(Sequence):
    """Admissible probe controls ``Proj_U(u + a + b X_t)`` with random a, b.

    Built on access so that only one full-size probe is alive at a time.
    """

    def __init__(self, u: ControlProcess, solution: ForwardSolution, n_probes: int,
                 rng: RandomSource, scale: float = 1.0):
        self.u, self.solution, self.n_probes = u, solution, n_probes
        self.coef = [scale * rng.child("probe", r).normal_array((2, u.k)) for r in range(n_probes)]

    def __len__(self) -> int:
        return self.n_probes

    def __getitem__(self, r):
        if isinstance(r, slice):
            return [self[i] for i in range(*r.indices(self.n_probes))]
        if not -self.n_probes <= r < self.n_probes:
            raise IndexError(r)
        u, grid = self.u, self.u.grid
        X = self.solution.paths[:, grid.idx0:, :1]
        a, b = self.coef[r]
        return u.with_free(u.broadcast(self.solution.n)[:, grid.idx0:] + a + b * X)


def random_probes(u: ControlProcess, solution: ForwardSolution, n_probes: int,
                  rng: RandomSource, scale: float = 1.0) -> ProbeSet:
    return ProbeSet(u, solution, n_probes, rng, scale)


@dataclass
class ProbeReport:
    residuals: list
    standard_errors: list
    min_residual: float
    passed: bool


def smp_probe_check(coeffs: CoefficientSet, base: ForwardSolution, u: ControlProcess,
                    adjoint: AdjointSolution, probes: Sequence[ControlProcess],
                    features: FeatureFn | None = None, basis_degree: int = 2,
                    n_sigma: float = 3.0) -> ProbeReport:
    """Necessary condition: every probe residual is >= -n_sigma * standard error."""
    G = control_gradient(coeffs, base, u, adjoint, features, basis_degree, True)
    res, ses = [], []
    for v in probes:
        r = smp_residual(coeffs, base, u, adjoint, v, gradient=G)
        res.append(r.integral)
        ses.append(r.standard_error)
    ok = all(r >= -n_sigma * s for r, s in zip(res, ses))
    return ProbeReport(res, ses, float(min(res)) if res else 0.0, ok)


@dataclass
class SufficiencyReport:
    J_star: float
    J_probes: list
    margins: list              # (J(v) - J(u*)) / se of the paired difference
    convex: bool
    passed: bool


def _convex_combination(a: Theta, b: Theta, lam: float) -> Theta:
    mix = lambda x, y: None if x is None else (1 - lam) * x + lam * y
    return Theta(a.t, mix(a.x, b.x), mix(a.xd, b.xd),
                 EmpiricalLaw(mix(a.mu.atoms, b.mu.atoms)), EmpiricalLaw(mix(a.mud.atoms, b.mud.atoms)),
                 mix(a.v, b.v), mix(a.vd, b.vd))


@dataclass
class ConvexityReport:
    hamiltonian_gap: float     # most negative (midpoint chord - value); >= -tol means convex
    terminal_gap: float
    convex: bool


def convexity_probe(coeffs: CoefficientSet, rng: RandomSource | None = None, n_probes: int = 64,
                    law_size: int = 32, tol: float = 1e-9) -> ConvexityReport:
    """Probe convexity of ``H(., p, q)`` and ``Phi`` along random segments.

    Laws are mixed through their lifts (atoms combined pairwise).  ``p`` and
    ``q`` are drawn at random, so terms linear in the state must be affine.
    """
    rng = rng or RandomSource(0)
    a = coeffs._random_theta(rng.child("a"), n_probes, law_size)
    b = coeffs._random_theta(rng.child("b"), n_probes, law_size)
    p = rng.child("p").normal_array((n_probes, coeffs.m))
    q = rng.child("q").normal_array((n_probes, coeffs.m, coeffs.d))
    lam = rng.child("lam").uniform_array((1,))[0]
    mid = _convex_combination(a, b, lam)
    Ha, Hb, Hm = (hamiltonian(coeffs, t, p, q).value for t in (a, b, mid))
    hgap = float(np.min((1 - lam) * Ha + lam * Hb - Hm))
    tgap = np.inf
    if coeffs.has("Phi"):
        Pa = coeffs.terminal("Phi", a.x, a.mu)
        Pb = coeffs.terminal("Phi", b.x, b.mu)
        Pm = coeffs.terminal("Phi", mid.x, mid.mu)
        tgap = float(np.min((1 - lam) * Pa + lam * Pb - Pm))
    scale = tol * (1 + float(np.max(np.abs(np.concatenate([np.ravel(Ha), np.ravel(Hb)])))))
    return ConvexityReport(hgap, tgap, hgap >= -scale and tgap >= -scale)


def sufficiency_check(coeffs: CoefficientSet, boundary: BoundaryData, u_star: ControlProcess,
                      probes: Sequence[ControlProcess], grid: TimeGrid,
                      forward_cfg: ForwardConfig | None = None, rng: RandomSource | None = None,
                      ensemble: ParticleEnsemble | None = None, n_sigma: float = 3.0
                      ) -> SufficiencyReport:
    """Empirical optimality: ``J(u*) <= J(v) + n_sigma * se`` for every probe."""
    rng = rng or RandomSource(0)
    ens = _common_ensemble(grid, coeffs, forward_cfg, rng, ensemble)
    conv = convexity_probe(coeffs, rng.child("convexity"))
    s0 = simulate_gmfdsde(coeffs, boundary, grid, forward_cfg, rng, u_star, ens)
    j0 = cost_functional(coeffs, s0, u_star)
    Js, margins = [], []
    ok = True
    for v in probes:
        s = simulate_gmfdsde(coeffs, boundary, grid, forward_cfg, rng, v, ens)
        jv = cost_functional(coeffs, s, v)
        diff = jv.per_particle - j0.per_particle
        se = float(diff.std() / np.sqrt(diff.size))
        Js.append(jv.value)
        margins.append(float(diff.mean() / se) if se > 0 else np.inf)
        ok &= bool(jv.value + n_sigma * se >= j0.value)
    return SufficiencyReport(j0.value, Js, margins, conv.convex, ok and conv.convex)
