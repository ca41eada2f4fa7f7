"""Mean-field anticipated BSDEs: Picard iteration over backward regression sweeps.

The equation solved on [0, T] is

    Y_t = xi_T + int_t^T E'[f(s, Y'_s, Z'_s, Y'_{s+delta(s)}, Z'_{s+zeta(s)},
                             Y_s, Z_s, Y_{s+delta(s)}, Z_{s+zeta(s)})] ds - int_t^T Z_s dB_s

with ``(Y, Z) = (xi, eta)`` on (T, T + K].  Primed quantities belong to an
independent copy and are averaged over the particle cloud.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .core import BoundaryData, ParticleEnsemble, RandomSource, TimeGrid
from .errors import ConfigurationError, NonConvergenceError, PreconditionError
from .measure import prime_expectation
from .regression import BinProjector, FeatureFn, Projector, brownian_features, polynomial_design


def contraction_beta(C: float, L: float) -> float:
    """Weight making the backward solution map a 1/2-contraction."""
    return 32 * C ** 2 * L + 32 * C ** 2 + 6 * C + 2 * C * L + 1


@dataclass
class BackwardConfig:
    beta: float | None = None
    basis_degree: int = 2
    picard_tol: float = 1e-8
    picard_max_iter: int = 50
    interaction_budget: int | None = None
    basis: str = "polynomial"          # or "bins" (order-preserving local averages)
    n_bins: int = 32

    def __post_init__(self):
        if self.basis not in ("polynomial", "bins"):
            raise ConfigurationError(f"unknown regression basis {self.basis!r}")
        if self.basis_degree < 1:
            raise ConfigurationError("basis_degree must be at least 1")
        if self.beta is not None and not self.beta > 0:
            raise ConfigurationError("beta must be positive")


class DriverArgs(NamedTuple):
    """One side (own or independent copy) of the driver arguments at a node."""

    y: np.ndarray
    z: np.ndarray
    y_adv: np.ndarray
    z_adv: np.ndarray
    idx: np.ndarray


FLAGS = ("i", "ii", "iii", "iv", "v", "vi")


@dataclass
class DriverSpec:
    """Driver ``f(t, yp, zp, yp_adv, zp_adv, y, z, y_adv, z_adv)``.

    Arguments broadcast: own values arrive with shape ``(n, 1, ...)`` and the
    independent copy with ``(1, M, ...)``; ``y`` has trailing shape ``(m,)``
    and ``z`` ``(m, d)``.  ``monotonicity_flags`` lists which of the
    comparison restrictions hold:

    * ``i``   independent of Z'
    * ``ii``  nondecreasing in Y'
    * ``iii`` nondecreasing in the own anticipated Y
    * ``iv``  independent of the own anticipated Z
    * ``v``   independent of the anticipated Z'
    * ``vi``  nondecreasing in the anticipated Y'
    """

    f: Callable
    lipschitz_C: float | None = None
    monotonicity_flags: frozenset = frozenset()
    mean_field: bool | None = None

    def evaluate(self, k: int, t: float, own: DriverArgs, prime: DriverArgs):
        return self.f(t, prime.y, prime.z, prime.y_adv, prime.z_adv,
                      own.y, own.z, own.y_adv, own.z_adv)


@dataclass
class BackwardSolution:
    grid: TimeGrid
    Y: np.ndarray                 # (N, nodes on [0, T+K], m)
    Z: np.ndarray                 # (N, nodes on [0, T+K], m, d)
    norms: list = field(default_factory=list)
    beta: float = 1.0
    converged: bool = True
    ridge_nodes: list = field(default_factory=list)
    y_se: np.ndarray | None = None
    pathwise: np.ndarray | None = None   # (N, nodes, m): unregressed value minus Y

    def __post_init__(self):
        if self.pathwise is None:
            self.pathwise = np.zeros_like(self.Y)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times[self.grid.idx0:]

    @property
    def y0(self) -> np.ndarray:
        return self.Y[:, 0].mean(axis=0)


def _driver_value(driver, k, t, own: DriverArgs, prime: DriverArgs, m: int, budget, rng):
    def pair(p, o):
        r = np.asarray(driver.evaluate(k, t, o, p), dtype=float)
        if r.ndim < 3:
            r = np.broadcast_to(r, (1, 1, m)) if r.ndim <= 1 else r[..., None]
        return r
    out = prime_expectation(pair, prime, own, budget, rng)
    return np.broadcast_to(out, (own.y.shape[0], m))


def _probe_args(rng: RandomSource, n: int, m: int, d: int) -> tuple[DriverArgs, DriverArgs]:
    def side(tag):
        r = rng.child(tag)
        return DriverArgs(r.child("y").normal_array((n, m)), r.child("z").normal_array((n, m, d)),
                          r.child("ya").normal_array((n, m)), r.child("za").normal_array((n, m, d)),
                          np.arange(n))
    return side("own"), side("prime")


def depends_on_prime(driver: DriverSpec, m: int, d: int, rng: RandomSource | None = None) -> bool:
    if driver.mean_field is not None:
        return driver.mean_field
    rng = rng or RandomSource(0)
    own, p1 = _probe_args(rng.child("a"), 16, m, d)
    _, p2 = _probe_args(rng.child("b"), 16, m, d)
    f1 = np.asarray(driver.evaluate(0, 0.5, own, p1), dtype=float)
    f2 = np.asarray(driver.evaluate(0, 0.5, own, p2), dtype=float)
    return not np.array_equal(np.broadcast_to(f1, np.broadcast_shapes(f1.shape, f2.shape)),
                              np.broadcast_to(f2, np.broadcast_shapes(f1.shape, f2.shape)))


def _terminal_arrays(terminal: BoundaryData, grid: TimeGrid, n: int, d: int = 1):
    if terminal.terminal_y is None:
        raise ConfigurationError("terminal data needs terminal_y on [T, T+K]")
    terminal.validate(grid)
    ty = terminal.terminal_y
    m = ty.shape[2]
    tz = terminal.terminal_z
    if tz is None:
        tz = np.zeros((1, ty.shape[1], m, d))
    if tz.shape[2:] != (m, d):
        raise ConfigurationError(f"terminal Z has shape {tz.shape}; expected (., ., {m}, {d})")
    if ty.shape[0] not in (1, n) or tz.shape[0] not in (1, n):
        raise ConfigurationError("terminal segments must have 1 or N rows")
    return ty, tz


def _weighted_norm(sq: np.ndarray, times: np.ndarray, beta: float) -> float:
    # factor the largest weight out so large beta*T does not overflow early
    c = beta * times[-1] if beta > 0 else beta * times[0]
    with np.errstate(over="ignore"):
        return float(np.sqrt(np.trapezoid(np.exp(beta * times - c) * sq, times)) * np.exp(c / 2))


def solve_mfabsde(driver: DriverSpec, terminal: BoundaryData, grid: TimeGrid,
                  ensemble: ParticleEnsemble, cfg: BackwardConfig | None = None,
                  rng: RandomSource | None = None, features: FeatureFn | None = None,
                  anticipated_from: BackwardSolution | None = None,
                  raise_on_failure: bool = True) -> BackwardSolution:
    """Solve the mean-field anticipated BSDE on the grid.

    Outer loop: Picard iteration, where the independent-copy arguments are
    read from the previous iterate.  Inner loop: one backward sweep with

        Z_k = E_k[(Y_{k+1} - E_k Y_{k+1}) dB_k] / dt
        Y_k = E_k[Y_{k+1} + dt * E'[f(...)]]

    where ``E_k`` is least squares on polynomial features of ``features(k)``
    (the Brownian value by default).  The own anticipated values at nodes
    after ``k`` are already known in the sweep; at node ``k`` itself the
    explicit values ``E_k Y_{k+1}`` and ``Z_k`` are used.  If
    ``anticipated_from`` is given, every anticipated argument (own and copy)
    is read from that fixed solution instead.
    """
    cfg = cfg or BackwardConfig()
    rng = rng or RandomSource(0)
    n, dt = ensemble.n, grid.dt
    d = ensemble.dim
    ty, tz = _terminal_arrays(terminal, grid, n, d)
    m = ty.shape[2]
    feats = features or brownian_features(ensemble)
    i0, jT = grid.idx0, grid.idx_T - grid.idx0
    nb = grid.idx_end - i0 + 1
    times = grid.times[i0:]
    if cfg.beta is not None:
        beta = float(cfg.beta)
    elif driver.lipschitz_C is not None:
        beta = contraction_beta(driver.lipschitz_C, grid.substitution_constant())
    else:
        beta = 1.0
    mean_field = depends_on_prime(driver, m, d, rng.child("probe"))
    idx = np.arange(n)

    Y = np.zeros((n, nb, m))
    Z = np.zeros((n, nb, m, d))
    Y[:, jT:] = ty
    Z[:, jT:] = tz
    Yp, Zp = Y.copy(), Z.copy()
    src = anticipated_from
    if src is not None and src.Y.shape != Y.shape:
        raise ConfigurationError("anticipated_from must live on the same grid and ensemble")

    # node features do not change across iterations
    projectors: dict[int, Projector] = {}
    cache_ok = n * nb * (cfg.basis_degree + 1) ** 2 <= 30_000_000
    ridge_nodes: set[int] = set()
    y_se = np.zeros(nb)
    resid = np.zeros_like(Y)
    norms: list[float] = []

    def projector(j: int) -> Projector:
        P = projectors.get(j)
        if P is None:
            if cfg.basis == "bins":
                P = BinProjector(feats(i0 + j), cfg.n_bins)
            else:
                P = Projector(polynomial_design(feats(i0 + j), cfg.basis_degree))
            if P.ridged:
                ridge_nodes.add(j)
            if cache_ok:
                projectors[j] = P
        return P

    for it in range(cfg.picard_max_iter):
        Yn = np.empty_like(Y)
        Zn = np.empty_like(Z)
        Yn[:, jT:] = ty
        Zn[:, jT:] = tz
        for j in range(jT - 1, -1, -1):
            k = i0 + j
            t = grid.time(k)
            P = projector(j)
            dB = ensemble.increment(j)
            y_next = Yn[:, j + 1]
            y_hat = P.fit(y_next)
            z = P.fit((y_next - y_hat)[:, :, None] * dB[:, None, :] / dt)
            a = grid.delta_map[k] - i0
            az = grid.zeta_map[k] - i0
            if src is not None:
                ya, za = src.Y[:, a], src.Z[:, az]
                pya, pza = ya, za
            else:
                ya = Yn[:, a] if a > j else y_hat
                za = Zn[:, az] if az > j else z
                pya, pza = Yp[:, a], Zp[:, az]
            own = DriverArgs(y_hat, z, ya, za, idx)
            prime = DriverArgs(Yp[:, j], Zp[:, j], pya, pza, idx)
            fval = _driver_value(driver, k, t, own, prime, m, cfg.interaction_budget,
                                 rng.child("prime", it, j))
            target = y_next + dt * fval
            Yn[:, j] = P.fit(target)
            Zn[:, j] = z
            resid[:, j] = target - Yn[:, j]
            y_se[j] = float(np.sqrt(np.mean(np.sum(resid[:, j] ** 2, axis=1)) / n))
        if not (np.all(np.isfinite(Yn)) and np.all(np.isfinite(Zn))):
            raise NonConvergenceError(f"non-finite backward iterate at sweep {it + 1}", norms)
        dy = np.mean(np.sum((Yn - Yp) ** 2, axis=2), axis=0)
        dz = np.mean(np.sum((Zn - Zp) ** 2, axis=(2, 3)), axis=0)
        norms.append(_weighted_norm(dy + dz, times, beta))
        Yp, Zp = Yn, Zn
        if not mean_field:
            # the copy arguments are unused, so the next sweep reproduces this one
            norms.append(0.0)
        if norms[-1] < cfg.picard_tol:
            return BackwardSolution(grid, Yp, Zp, norms, beta, True, sorted(ridge_nodes), y_se,
                                    _pathwise(resid))
    if raise_on_failure:
        raise NonConvergenceError(
            f"backward Picard iteration did not reach tol={cfg.picard_tol} "
            f"in {cfg.picard_max_iter} sweeps", norms)
    return BackwardSolution(grid, Yp, Zp, norms, beta, False, sorted(ridge_nodes), y_se,
                            _pathwise(resid))


def _pathwise(resid: np.ndarray) -> np.ndarray:
    # Y_j + sum_{i >= j} resid_i = Y_T + dt * sum_{i >= j} f_i along each path
    return np.cumsum(resid[:, ::-1], axis=1)[:, ::-1]


# ---------------------------------------------------------------------------
# diagnostics

@dataclass
class RateReport:
    rate: float | None
    ratios: list
    n_used: int
    message: str = "ok"


def contraction_rate(norms, floor: float = 1e-13) -> RateReport:
    """Geometric rate of squared successive-difference norms (log-linear fit)."""
    vals = [float(v) for v in norms]
    if any(v == 0.0 for v in vals):
        return RateReport(0.0, [], len(vals), "iteration reached its fixed point exactly")
    top = max(vals) if vals else 0.0
    used = [v for v in vals if v > floor * top]
    ratios = [(b / a) ** 2 for a, b in zip(used[:-1], used[1:])]
    if len(used) < 3:
        return RateReport(None, ratios, len(used), "insufficient data: fewer than 3 iterations")
    slope = np.polyfit(np.arange(len(used)), 2.0 * np.log(used), 1)[0]
    return RateReport(float(np.exp(slope)), ratios, len(used))


@dataclass
class AprioriReport:
    lhs: float
    rhs: float
    slack: float
    standard_error: float

    def holds(self, tol: float = 0.0) -> bool:
        return self.slack >= -max(tol, 3.0 * self.standard_error)


def apriori_estimate_check(solution: BackwardSolution, g0, beta: float,
                           driver: DriverSpec | None = None) -> AprioriReport:
    """Both sides of the a priori bound for a driver that ignores the solution.

    ``|y_0|^2 + E int_0^T (beta/2 |y|^2 + |z|^2) e^{beta s} ds
        <= E|xi|^2 e^{beta T} + (2/beta) E int_0^T |g0|^2 e^{beta s} ds``

    ``g0`` is the realised driver on the nodes of [0, T] (array broadcastable
    to ``(N, nodes, m)``) or a constant.
    """
    grid = solution.grid
    if driver is not None:
        m, d = solution.Y.shape[2], solution.Z.shape[3]
        rng = RandomSource(0)
        o1, p1 = _probe_args(rng.child("a"), 16, m, d)
        o2, p2 = _probe_args(rng.child("b"), 16, m, d)
        f1 = np.asarray(driver.evaluate(0, 0.5, o1, p1), dtype=float)
        f2 = np.asarray(driver.evaluate(0, 0.5, o2, p2), dtype=float)
        if not np.allclose(f1, f2, rtol=0, atol=0):
            raise PreconditionError("the a priori check needs a driver that does not depend "
                                    "on the solution")
    jT = grid.idx_T - grid.idx0
    t = solution.times[:jT + 1]
    Y = solution.Y[:, :jT + 1]
    Z = solution.Z[:, :jT + 1]
    n = Y.shape[0]
    w = np.exp(beta * t)
    g = np.broadcast_to(np.asarray(g0, dtype=float), Y.shape[:2] + (Y.shape[2],)) \
        if np.ndim(g0) else np.full(Y.shape, float(g0))
    integrand = (beta / 2) * np.sum(Y ** 2, axis=2) + np.sum(Z ** 2, axis=(2, 3))
    lhs_i = np.sum(Y[:, 0] ** 2, axis=1) + np.trapezoid(integrand * w, t, axis=1)
    xi = solution.Y[:, jT]
    rhs_i = np.sum(xi ** 2, axis=1) * np.exp(beta * grid.T) \
        + (2.0 / beta) * np.trapezoid(np.sum(g ** 2, axis=2) * w, t, axis=1)
    diff = rhs_i - lhs_i
    return AprioriReport(float(lhs_i.mean()), float(rhs_i.mean()), float(diff.mean()),
                         float(diff.std() / np.sqrt(n)))


# ---------------------------------------------------------------------------
# comparison harness

@dataclass
class ComparisonReport:
    violation_fraction: float
    bootstrap_violation_fraction: float
    bootstrap_y0: list
    y0_1: float
    y0_2: float
    solution1: BackwardSolution
    solution2: BackwardSolution

    def passed(self, tol: float = 1e-3) -> bool:
        return self.violation_fraction <= tol and self.bootstrap_violation_fraction <= tol


def _check_flags(driver1: DriverSpec, driver2: DriverSpec, m: int, d: int,
                 rng: RandomSource, n: int = 64) -> None:
    missing = [f for f in FLAGS if f not in driver2.monotonicity_flags]
    if missing:
        raise PreconditionError(f"driver2 does not declare restrictions {missing}")
    own, prime = _probe_args(rng, n, m, d)
    bump = np.abs(rng.child("bump").normal_array((n, m))) + 0.1
    zbump = rng.child("zbump").normal_array((n, m, d))
    base = np.asarray(driver2.evaluate(0, 0.5, own, prime), dtype=float)
    scale = 1e-10 * (1.0 + np.max(np.abs(base)))

    def val(o, p):
        return np.asarray(driver2.evaluate(0, 0.5, o, p), dtype=float)
    checks = {
        "i": ("indep", val(own, prime._replace(z=prime.z + zbump))),
        "ii": ("incr", val(own, prime._replace(y=prime.y + bump))),
        "iii": ("incr", val(own._replace(y_adv=own.y_adv + bump), prime)),
        "iv": ("indep", val(own._replace(z_adv=own.z_adv + zbump), prime)),
        "v": ("indep", val(own, prime._replace(z_adv=prime.z_adv + zbump))),
        "vi": ("incr", val(own, prime._replace(y_adv=prime.y_adv + bump))),
    }
    for flag, (kind, v) in checks.items():
        if kind == "indep" and np.any(np.abs(v - base) > scale):
            raise PreconditionError(f"driver2 declares restriction ({flag}) but depends on "
                                    "the corresponding argument")
        if kind == "incr" and np.any(v < base - scale):
            raise PreconditionError(f"driver2 declares restriction ({flag}) but decreases "
                                    "in the corresponding argument")
    f1 = np.asarray(driver1.evaluate(0, 0.5, own, prime), dtype=float)
    if np.any(f1 < base - scale):
        raise PreconditionError("driver1 is not >= driver2 on the probe set")


def _violations(upper: BackwardSolution, lower: BackwardSolution) -> float:
    se_u = upper.y_se if upper.y_se is not None else 0.0
    se_l = lower.y_se if lower.y_se is not None else 0.0
    tol = 3.0 * np.sqrt(np.asarray(se_u) ** 2 + np.asarray(se_l) ** 2)
    bad = np.any(upper.Y < lower.Y - tol[None, :, None], axis=2)
    return float(bad.mean())


def comparison_run(driver1: DriverSpec, driver2: DriverSpec, terminal1: BoundaryData,
                   terminal2: BoundaryData, grid: TimeGrid, ensemble: ParticleEnsemble,
                   cfg: BackwardConfig | None = None, rng: RandomSource | None = None,
                   features: FeatureFn | None = None, n_bootstrap: int = 8,
                   bootstrap_tol: float = 1e-6) -> ComparisonReport:
    """Check Y^1 >= Y^2 on common noise and run the monotone bootstrap.

    The bootstrap solves the driver-2 equation with every anticipated
    argument frozen at the previous element, starting from Y^1; the sequence
    should decrease towards Y^2.
    """
    rng = rng or RandomSource(0)
    ty1, _ = _terminal_arrays(terminal1, grid, ensemble.n, ensemble.dim)
    ty2, _ = _terminal_arrays(terminal2, grid, ensemble.n, ensemble.dim)
    if np.any(ty1 < ty2):
        raise PreconditionError("terminal data are not ordered: xi1 >= xi2 fails")
    m = ty1.shape[2]
    _check_flags(driver1, driver2, m, ensemble.dim, rng.child("flags"))
    s1 = solve_mfabsde(driver1, terminal1, grid, ensemble, cfg, rng.child("s1"), features)
    s2 = solve_mfabsde(driver2, terminal2, grid, ensemble, cfg, rng.child("s2"), features)
    viol = _violations(s1, s2)

    prev = s1
    boot_y0 = [float(s1.y0[0])]
    worst = 0.0
    for i in range(n_bootstrap):
        cur = solve_mfabsde(driver2, terminal2, grid, ensemble, cfg, rng.child("boot", i),
                            features, anticipated_from=prev)
        worst = max(worst, _violations(prev, cur))
        boot_y0.append(float(cur.y0[0]))
        change = float(np.max(np.abs(cur.Y - prev.Y)))
        prev = cur
        if change < bootstrap_tol:
            break
    return ComparisonReport(viol, worst, boot_y0, float(s1.y0[0]), float(s2.y0[0]), s1, s2)


# ---------------------------------------------------------------------------
# the Clark-Ocone counterexample

@dataclass
class CounterexampleReport:
    y0_1: float
    y0_2: float
    mean_xi1: float
    target_y0_1: float
    violation: bool
    solution1: BackwardSolution
    solution2: BackwardSolution


def counterexample_clark_ocone(n_particles: int = 100_000, dt: float = 1e-2,
                               rng: RandomSource | None = None, zeta: float = 0.5,
                               cfg: BackwardConfig | None = None) -> CounterexampleReport:
    """Two terminal values with xi1 <= xi2 whose solutions are ordered the other way.

    Driver ``-E'[Z'_{s+zeta}]`` with ``s + zeta`` clamped at T = 1;
    ``xi1 = -(B_1^+)^3`` (so ``Z_1 = -3 (B_1^+)^2``) and ``xi2 = 0``.
    """
    from .core import build_grid, sample_brownian

    rng = rng or RandomSource(0)
    grid = build_grid(1.0, 0.0, 0.0, dt, zeta_fn=lambda t: zeta)
    ens = sample_brownian(grid, n_particles, 1, rng)
    b1 = ens.brownian_path()[:, grid.idx_T - grid.idx0, 0]
    pos = np.maximum(b1, 0.0)
    xi1 = -(pos ** 3)
    term1 = BoundaryData(terminal_y=xi1[:, None, None],
                         terminal_z=(-3.0 * pos ** 2)[:, None, None, None])
    term2 = BoundaryData(terminal_y=np.zeros((1, 1, 1)), terminal_z=np.zeros((1, 1, 1, 1)))
    driver = DriverSpec(lambda t, yp, zp, ypa, zpa, y, z, ya, za: -zpa[..., 0],
                        lipschitz_C=1.0, mean_field=True)
    cfg = cfg or BackwardConfig(beta=1.0, basis_degree=3, picard_tol=1e-6)
    s1 = solve_mfabsde(driver, term1, grid, ens, cfg, rng.child("xi1"))
    s2 = solve_mfabsde(driver, term2, grid, ens, cfg, rng.child("xi2"))
    y1, y2 = float(s1.y0[0]), float(s2.y0[0])
    return CounterexampleReport(y1, y2, float(xi1.mean()), 1.5 - 2.0 / np.sqrt(2 * np.pi),
                                bool(np.all(xi1 <= 0.0) and y1 > y2), s1, s2)
