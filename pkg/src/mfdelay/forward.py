"""Forward mean-field delay SDEs: Euler-Maruyama, Picard iteration, Ito residuals."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .coefficients import CoefficientSet, Theta
from .core import BoundaryData, ParticleEnsemble, RandomSource, TimeGrid, sample_brownian
from .errors import ConfigurationError, DivergenceError, NonConvergenceError
from .measure import EmpiricalLaw, prime_expectation


@dataclass
class ForwardConfig:
    n_particles: int = 10_000
    beta: float | None = None          # default 1 + 4 C^2
    picard_tol: float = 1e-8
    picard_max_iter: int = 60
    interaction_budget: int | None = None
    check_coefficients: bool = False

    def beta_for(self, coeffs: CoefficientSet) -> float:
        if self.beta is not None:
            return float(self.beta)
        if coeffs.lipschitz_C is None:
            raise ConfigurationError("beta needs either an explicit value or a Lipschitz constant")
        return 1.0 + 4.0 * coeffs.lipschitz_C ** 2


def control_values(control, n: int, grid: TimeGrid) -> np.ndarray | None:
    if control is None:
        return None
    vals = np.asarray(getattr(control, "values", control), dtype=float)
    if vals.ndim != 3 or vals.shape[1] != grid.idx_T + 1 or vals.shape[0] not in (1, n):
        raise ConfigurationError(
            f"control must have shape ({n}, {grid.idx_T + 1}, k); got {vals.shape}")
    return vals


@dataclass
class ForwardSolution:
    grid: TimeGrid
    ensemble: ParticleEnsemble
    terminal: np.ndarray
    paths: np.ndarray | None = None      # (N, idx_T + 1, m) on [-delta, T]
    control: np.ndarray | None = None    # (N|1, idx_T + 1, k)

    @property
    def n(self) -> int:
        return self.terminal.shape[0]

    def state(self, k: int) -> np.ndarray:
        if self.paths is None:
            raise ConfigurationError("this solution did not keep its paths")
        return self.paths[:, k]

    def law(self, k: int) -> EmpiricalLaw:
        return EmpiricalLaw(self.state(k))

    def theta(self, k: int, laws: dict | None = None) -> Theta:
        """Arguments of the coefficients at node ``k`` (on [0, T])."""
        D = self.grid.delay_steps
        x, xd = self.state(k), self.state(k - D)
        if laws is not None:
            mu = laws.setdefault(k, EmpiricalLaw(x))
            mud = laws.setdefault(k - D, EmpiricalLaw(xd))
        else:
            mu, mud = EmpiricalLaw(x), EmpiricalLaw(xd)
        v = vd = None
        if self.control is not None:
            v = np.broadcast_to(self.control[:, k], (self.n, self.control.shape[2]))
            vd = np.broadcast_to(self.control[:, k - D], v.shape)
        return Theta(self.grid.time(k), x, xd, mu, mud, v, vd)


def _initial_states(boundary: BoundaryData, grid: TimeGrid, n: int, m: int) -> np.ndarray:
    if boundary.initial is None:
        raise ConfigurationError("boundary data has no initial segment")
    boundary.validate(grid)
    init = boundary.initial
    if init.shape[2] != m or init.shape[0] not in (1, n):
        raise ConfigurationError(f"initial segment shape {init.shape} does not match N={n}, m={m}")
    return np.broadcast_to(init, (n,) + init.shape[1:])


def _ensemble(grid, cfg, coeffs, rng, ensemble) -> ParticleEnsemble:
    if ensemble is not None:
        if ensemble.grid.dt != grid.dt or ensemble.dim != coeffs.d:
            raise ConfigurationError("ensemble grid step or noise dimension does not match")
        return ensemble
    return sample_brownian(grid, cfg.n_particles, coeffs.d, rng or RandomSource(0))


def _step(coeffs: CoefficientSet, th: Theta, dB: np.ndarray, dt: float) -> np.ndarray:
    b = coeffs.state("b", th)
    s = coeffs.state("sigma", th)
    return th.x + b * dt + np.einsum("...ij,...j->...i", s, dB)


def simulate_gmfdsde(coeffs: CoefficientSet, boundary: BoundaryData, grid: TimeGrid,
                     cfg: ForwardConfig | None = None, rng: RandomSource | None = None,
                     control=None, ensemble: ParticleEnsemble | None = None,
                     store: bool = True,
                     observer: Callable[[int, Theta, np.ndarray], None] | None = None
                     ) -> ForwardSolution:
    """Euler-Maruyama for the controlled mean-field delay SDE.

    The empirical law of the particle cloud at the current and the delayed
    node is fed back into the coefficients at every step.  The state on
    [-delta, 0] is copied from ``boundary`` unchanged.  With ``store=False``
    only a rolling window of ``delay_steps + 1`` nodes is kept, and
    ``observer(k, theta, dB)`` can consume the trajectory on the fly.
    """
    cfg = cfg or ForwardConfig()
    ens = _ensemble(grid, cfg, coeffs, rng, ensemble)
    n, m, D, dt = ens.n, coeffs.m, grid.delay_steps, grid.dt
    init = _initial_states(boundary, grid, n, m)
    if cfg.check_coefficients:
        coeffs.validate(rng)
    U = control_values(control, n, grid)
    if U is not None and U.shape[2] != coeffs.k:
        raise ConfigurationError(f"control dimension {U.shape[2]} differs from k={coeffs.k}")

    if store:
        X = np.empty((n, grid.idx_T + 1, m))
        X[:, :D + 1] = init
        slot = lambda j: j
    else:
        # rolling window: node j lives in slot j % (D + 1)
        X = np.empty((n, D + 1, m))
        for j in range(D + 1):
            X[:, j % (D + 1)] = init[:, j]
        slot = lambda j: j % (D + 1)

    laws: dict[int, EmpiricalLaw] = {}
    for k in range(grid.idx0, grid.idx_T):
        x = X[:, slot(k)]
        xd = X[:, slot(k - D)]
        mu = laws.get(k) or EmpiricalLaw(x)
        laws[k] = mu
        mud = laws.get(k - D) or EmpiricalLaw(xd)
        v = vd = None
        if U is not None:
            v = np.broadcast_to(U[:, k], (n, U.shape[2]))
            vd = np.broadcast_to(U[:, k - D], (n, U.shape[2]))
        th = Theta(grid.time(k), x, xd, mu, mud, v, vd)
        dB = ens.increment(k - grid.idx0)
        xn = _step(coeffs, th, dB, dt)
        if not np.all(np.isfinite(xn)):
            s = k - grid.idx0
            raise DivergenceError(
                f"non-finite state after step {s} (t={grid.time(k + 1):.6g})", step=s,
                time=grid.time(k + 1))
        if observer is not None:
            observer(k, th, dB)
        laws.pop(k - D, None)
        X[:, slot(k + 1)] = xn
    terminal = np.array(X[:, slot(grid.idx_T)], copy=True)
    return ForwardSolution(grid, ens, terminal, X if store else None, U)


# ---------------------------------------------------------------------------
# Picard iteration

def beta_norm(diff: np.ndarray, times: np.ndarray, beta: float, sign: float = -1.0) -> float:
    """(E int e^{sign*beta*t} |diff_t|^2 dt)^(1/2) by the trapezoid rule.

    ``diff`` has shape (N, nodes, ...) and ``times`` the matching node times.
    """
    sq = diff.reshape(diff.shape[0], diff.shape[1], -1)
    sq = np.mean(np.sum(sq ** 2, axis=2), axis=0)
    w = np.exp(sign * beta * times)
    return float(np.sqrt(max(np.trapezoid(w * sq, times), 0.0)))


@dataclass
class PicardResult:
    solution: ForwardSolution
    norms: list = field(default_factory=list)
    beta: float = 0.0
    converged: bool = True


def picard_solve_forward(coeffs: CoefficientSet, boundary: BoundaryData, grid: TimeGrid,
                         cfg: ForwardConfig | None = None, rng: RandomSource | None = None,
                         control=None, ensemble: ParticleEnsemble | None = None,
                         raise_on_failure: bool = True) -> PicardResult:
    """Fixed-point iteration of the solution map on a fixed noise sample.

    Each sweep freezes the previous path and its laws inside the coefficients
    and re-integrates.  The initial guess is the boundary segment continued
    constantly.  Iteration stops when the beta-weighted norm of successive
    differences drops below ``cfg.picard_tol``.
    """
    cfg = cfg or ForwardConfig()
    ens = _ensemble(grid, cfg, coeffs, rng, ensemble)
    n, m, D, dt = ens.n, coeffs.m, grid.delay_steps, grid.dt
    beta = cfg.beta_for(coeffs)
    init = _initial_states(boundary, grid, n, m)
    U = control_values(control, n, grid)
    times = grid.times[:grid.idx_T + 1]

    X = np.empty((n, grid.idx_T + 1, m))
    X[:, :D + 1] = init
    X[:, D + 1:] = init[:, -1:, :]
    steps = range(grid.idx0, grid.idx_T)
    cache = n * len(steps) * coeffs.d <= 20_000_000
    incs = [ens.increment(k - grid.idx0) for k in steps] if cache else None

    norms: list[float] = []
    for it in range(cfg.picard_max_iter):
        laws = {}
        Xn = np.empty_like(X)
        Xn[:, :D + 1] = init
        for k in steps:
            x, xd = X[:, k], X[:, k - D]
            mu = laws.setdefault(k, EmpiricalLaw(x))
            mud = laws.setdefault(k - D, EmpiricalLaw(xd))
            v = vd = None
            if U is not None:
                v = np.broadcast_to(U[:, k], (n, U.shape[2]))
                vd = np.broadcast_to(U[:, k - D], v.shape)
            th = Theta(grid.time(k), x, xd, mu, mud, v, vd)
            dB = incs[k - grid.idx0] if cache else ens.increment(k - grid.idx0)
            Xn[:, k + 1] = Xn[:, k] + (_step(coeffs, th, dB, dt) - x)
        if not np.all(np.isfinite(Xn)):
            raise DivergenceError(f"non-finite Picard iterate at iteration {it + 1}")
        norms.append(beta_norm(Xn - X, times, beta, sign=-1.0))
        X = Xn
        if norms[-1] < cfg.picard_tol:
            sol = ForwardSolution(grid, ens, X[:, -1].copy(), X, U)
            return PicardResult(sol, norms, beta, True)
    if raise_on_failure:
        raise NonConvergenceError(
            f"forward Picard iteration did not reach tol={cfg.picard_tol} "
            f"in {cfg.picard_max_iter} sweeps", norms)
    return PicardResult(ForwardSolution(grid, ens, X[:, -1].copy(), X, U), norms, beta, False)


# ---------------------------------------------------------------------------
# Ito formula along the flow of laws

@dataclass
class ItoReport:
    max_residual: float           # max over nodes of |mean residual|
    residuals: np.ndarray         # |mean residual| per node on (0, T]
    standard_errors: np.ndarray   # Monte Carlo standard error of the mean residual
    pathwise: np.ndarray          # mean |residual| per node
    noise_floor: float            # 3 * standard error at the worst node + T / N
    times: np.ndarray


class ItoAccumulator:
    """Accumulates both sides of the Ito formula for ``Phi(X_t, law(X_t))``.

    Fed one step at a time (it is a valid ``observer`` for
    :func:`simulate_gmfdsde`).  The own process starts at ``x_probe`` and is
    driven by the particle noise and the ensemble laws; without ``x_probe``
    the particles themselves are used.

    With ``particle_martingale`` the martingale carried by the empirical law,
    ``(1/N) sum_l Phi_mu(x, mu, X^l) sigma(X^l) dB^l``, is added to the right
    side.  It vanishes as N grows but dominates the finite-N residual of
    functionals of the law.
    """

    def __init__(self, coeffs: CoefficientSet, functional: CoefficientSet, grid: TimeGrid,
                 x_probe=None, budget: int | None = None, rng: RandomSource | None = None,
                 particle_martingale: bool = True):
        if grid.delay_steps:
            raise ConfigurationError("the Ito check is defined for delay-free systems")
        functional.require("Phi", "Phi_x", "Phi_xx", "Phi_mu", "Phi_mu_y")
        self.c, self.f, self.grid = coeffs, functional, grid
        self.x_probe = None if x_probe is None else np.atleast_1d(np.asarray(x_probe, float))
        self.budget, self.rng = budget, rng or RandomSource(0)
        self.particle_martingale = particle_martingale
        self.own = None
        self.phi0 = None
        self.rhs = None
        self.rows: list[tuple[float, float, float, float]] = []

    def _own_theta(self, th: Theta) -> Theta:
        if self.x_probe is None:
            return th
        return th._replace(x=self.own, xd=self.own)

    def _record(self, t: float, own: np.ndarray, mu: EmpiricalLaw):
        res = (self.f.terminal("Phi", own, mu) - self.phi0) - self.rhs
        n = res.shape[0]
        self.rows.append((t, abs(float(res.mean())), float(res.std() / np.sqrt(n)),
                          float(np.mean(np.abs(res)))))

    def __call__(self, k: int, th: Theta, dB: np.ndarray) -> None:
        c, f, dt = self.c, self.f, self.grid.dt
        n = th.x.shape[0]
        if self.own is None:
            self.own = th.x.copy() if self.x_probe is None else \
                np.broadcast_to(self.x_probe, th.x.shape).copy()
            self.phi0 = f.terminal("Phi", self.own, th.mu)
            self.rhs = np.zeros(n)
        else:
            if self.x_probe is None:
                self.own = th.x
            self._record(th.t, self.own, th.mu)
        ot = self._own_theta(th)
        own = ot.x
        b_own = c.state("b", ot)
        s_own = np.broadcast_to(c.state("sigma", ot), own.shape + (c.d,))
        ss_own = np.einsum("...id,...jd->...ij", s_own, s_own)
        drift = np.sum(f.terminal("Phi_x", own, th.mu) * b_own, axis=-1)
        drift = drift + 0.5 * np.einsum("...ij,...ij->...", f.terminal("Phi_xx", own, th.mu), ss_own)

        b_p = np.broadcast_to(c.state("b", th), th.x.shape)
        s_p = np.broadcast_to(c.state("sigma", th), th.x.shape + (c.d,))
        ss_p = np.einsum("...id,...jd->...ij", s_p, s_p)
        mu = th.mu
        rng = self.rng.child("ito", k)
        if not (f.is_zero("Phi_mu") and f.is_zero("Phi_mu_y")):
            def lions_terms(p, o):
                a = np.sum(f.terminal_y("Phi_mu", o, mu, p[0]) * p[1], axis=-1)
                bb = np.einsum("...ij,...ij->...", f.terminal_y("Phi_mu_y", o, mu, p[0]), p[2])
                return a + 0.5 * bb
            drift = drift + prime_expectation(lions_terms, (th.x, b_p, ss_p), own,
                                              self.budget, rng)
        mart = np.sum(f.terminal("Phi_x", own, th.mu)
                      * np.einsum("...ij,...j->...i", s_own, dB), axis=-1)
        if self.particle_martingale and not f.is_zero("Phi_mu"):
            sdB = np.einsum("...ij,...j->...i", s_p, dB)

            def emp_mart(p, o):
                return np.sum(f.terminal_y("Phi_mu", o, mu, p[0]) * p[1], axis=-1)
            mart = mart + prime_expectation(emp_mart, (th.x, sdB), own, self.budget, rng)
        self.rhs = self.rhs + drift * dt + mart
        if self.x_probe is not None:
            self.own = own + b_own * dt + np.einsum("...ij,...j->...i", s_own, dB)

    def finish(self, solution: ForwardSolution) -> ItoReport:
        own = solution.terminal if self.x_probe is None else self.own
        self._record(self.grid.T, own, EmpiricalLaw(solution.terminal))
        rows = np.array(self.rows)
        res, se, path = rows[:, 1], rows[:, 2], rows[:, 3]
        j = int(np.argmax(res))
        floor = 3.0 * float(se[j]) + self.grid.T / solution.n
        return ItoReport(float(res[j]), res, se, path, floor, rows[:, 0])


def verify_ito_formula(coeffs: CoefficientSet, functional: CoefficientSet,
                       solution: ForwardSolution, x_probe=None, budget: int | None = None,
                       rng: RandomSource | None = None, particle_martingale: bool = True
                       ) -> ItoReport:
    """Residual of the Ito formula along a stored delay-free, uncontrolled solution.

    Left side ``Phi(X_s, mu_s) - Phi(x, mu_0)``; right side the time integral
    of ``Phi_x b + 1/2 tr(Phi_xx sigma sigma^T) + E'[Phi_mu b'] +
    1/2 E'[tr(d_y Phi_mu sigma' sigma'^T)]`` plus ``sum Phi_x sigma dB``.
    """
    grid = solution.grid
    acc = ItoAccumulator(coeffs, functional, grid, x_probe, budget, rng, particle_martingale)
    laws: dict = {}
    for k in range(grid.idx0, grid.idx_T):
        th = solution.theta(k, laws)
        acc(k, th, solution.ensemble.increment(k - grid.idx0))
        laws.pop(k - 1, None)
    return acc.finish(solution)
