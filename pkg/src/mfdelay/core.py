"""Time grids, counter-based random streams, particle ensembles and boundary data.

The grid covers ``[-delta, T + K]``.  Node ``0`` sits at ``t = -delta`` and
node ``grid.idx0`` at ``t = 0``.  Anticipation offsets are stored as integer
index maps, clamped to the last node.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtri

from .errors import CapacityError, ConfigurationError

MAX_NODES = 50_000_000
_REL_TOL = 1e-9


def _steps(x: float, dt: float, what: str) -> int:
    r = x / dt
    n = int(round(r))
    if x < 0 or abs(r - n) > _REL_TOL * max(1.0, abs(r)):
        raise ConfigurationError(f"{what}={x!r} is not a non-negative multiple of dt={dt!r}")
    return n


@dataclass(frozen=True)
class TimeGrid:
    T: float
    K: float
    delta: float
    dt: float
    delay_steps: int
    horizon_steps: int
    tail_steps: int
    delta_map: np.ndarray = field(repr=False, compare=False)
    zeta_map: np.ndarray = field(repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return self.delay_steps + self.horizon_steps + self.tail_steps + 1

    @property
    def idx0(self) -> int:
        """Index of t = 0."""
        return self.delay_steps

    @property
    def idx_T(self) -> int:
        return self.delay_steps + self.horizon_steps

    @property
    def idx_end(self) -> int:
        return self.n_nodes - 1

    @property
    def times(self) -> np.ndarray:
        return (np.arange(self.n_nodes) - self.delay_steps) * self.dt

    def time(self, k: int) -> float:
        return (k - self.delay_steps) * self.dt

    def index(self, t: float) -> int:
        if t < 0:
            k = _steps(t + self.delta, self.dt, "t + delta")
        else:
            k = self.delay_steps + _steps(t, self.dt, "t")
        if not 0 <= k < self.n_nodes:
            raise ConfigurationError(f"t={t!r} lies outside the grid")
        return k

    def substitution_constant(self) -> int:
        """Largest number of nodes in [0, T] sent to one node by either map.

        This is the discrete analogue of the constant L bounding
        sum_{s>=t} g(s + delta(s)) by L * sum_{r>=t} g(r).
        """
        out = 1
        for m in (self.delta_map, self.zeta_map):
            counts = np.bincount(m[self.idx0:self.idx_T + 1])
            out = max(out, int(counts.max()))
        return out


def _offset_map(n_nodes: int, idx_end: int, D: int, dt: float, const_steps: int,
                fn: Callable[[float], float] | None, name: str) -> np.ndarray:
    k = np.arange(n_nodes, dtype=np.int64)
    if fn is None:
        off = np.full(n_nodes, const_steps, dtype=np.int64)
    else:
        off = np.empty(n_nodes, dtype=np.int64)
        for i in range(n_nodes):
            off[i] = _steps(float(fn((i - D) * dt)), dt, f"{name}(t)")
    return np.minimum(k + off, idx_end)


def build_grid(T: float, K: float, delta: float, dt: float, *,
               delta_fn: Callable[[float], float] | None = None,
               zeta_fn: Callable[[float], float] | None = None) -> TimeGrid:
    """Build the uniform grid on [-delta, T + K] with step dt.

    ``delta_fn`` and ``zeta_fn`` give time-dependent anticipation offsets;
    by default both equal the constant ``delta``.  Targets beyond ``T + K``
    are clamped to the last node.
    """
    if not (dt > 0 and np.isfinite(dt)):
        raise ConfigurationError(f"dt must be positive, got {dt!r}")
    if not T > 0:
        raise ConfigurationError(f"T must be positive, got {T!r}")
    nT = _steps(T, dt, "T")
    nK = _steps(K, dt, "K")
    D = _steps(delta, dt, "delta")
    n_nodes = D + nT + nK + 1
    if n_nodes > MAX_NODES:
        raise CapacityError(f"grid would have {n_nodes} nodes (limit {MAX_NODES})")
    idx_end = n_nodes - 1
    dmap = _offset_map(n_nodes, idx_end, D, dt, D, delta_fn, "delta")
    zmap = _offset_map(n_nodes, idx_end, D, dt, D, zeta_fn, "zeta")
    return TimeGrid(float(T), float(K), float(delta), float(dt), D, nT, nK, dmap, zmap)


@dataclass(frozen=True)
class DelaySpec:
    """Delay and anticipation description with a declared substitution bound."""

    delta: float
    delta_fn: Callable[[float], float] | None = None
    zeta_fn: Callable[[float], float] | None = None
    L_bound: float | None = None

    def grid(self, T: float, K: float, dt: float) -> TimeGrid:
        g = build_grid(T, K, self.delta, dt, delta_fn=self.delta_fn, zeta_fn=self.zeta_fn)
        self.check(g)
        return g

    def check(self, grid: TimeGrid) -> int:
        L = grid.substitution_constant()
        if self.L_bound is not None and L > self.L_bound:
            raise ConfigurationError(
                f"anticipation maps need L >= {L}, declared bound is {self.L_bound}")
        return L


# ---------------------------------------------------------------------------
# counter-based random numbers

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_M1 = _U64(0xBF58476D1CE4E5B9)
_M2 = _U64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser, a bijection on 64-bit words
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> _U64(30))) * _M1
        z = (z ^ (z >> _U64(27))) * _M2
    return z ^ (z >> _U64(31))


def _tag_word(tag) -> np.uint64:
    if isinstance(tag, str):
        return _U64(zlib.crc32(tag.encode()) | (1 << 40))
    return _U64(int(tag) & 0xFFFFFFFFFFFFFFFF)


def _as_words(a) -> np.ndarray:
    return np.asarray(a).astype(np.int64).astype(np.uint64)


class RandomSource:
    """Deterministic random numbers keyed by integer counters.

    Every output is a pure function of the seed, the chain of child tags and
    the index tuple it was requested at, so results do not depend on the order
    or batching of requests.
    """

    def __init__(self, seed: int, _key: np.uint64 | None = None):
        self.seed = int(seed)
        self._key = _mix(np.array(_tag_word(seed))) if _key is None else _key

    def child(self, *tags) -> "RandomSource":
        key = self._key
        for t in tags:
            key = _mix(key ^ _tag_word(t))
        return RandomSource(self.seed, key)

    def bits(self, *indices) -> np.ndarray:
        arrs = np.broadcast_arrays(*[_as_words(a) for a in indices]) if indices else []
        h = np.array(self._key)
        for a in arrs:
            h = _mix(h ^ a)
        return h

    @staticmethod
    def _to_uniform(h: np.ndarray) -> np.ndarray:
        # 53 random bits, centred in their cell so 0 and 1 never occur
        return ((h >> _U64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)

    def uniform(self, *indices) -> np.ndarray:
        return self._to_uniform(self.bits(*indices))

    def normal(self, *indices) -> np.ndarray:
        return ndtri(self.uniform(*indices))

    def normal_array(self, shape: Sequence[int]) -> np.ndarray:
        """Standard normals of the given shape, keyed by their position."""
        idx = np.indices(tuple(shape), sparse=True)
        return self.normal(*idx) if len(shape) else self.normal()

    def uniform_array(self, shape: Sequence[int]) -> np.ndarray:
        idx = np.indices(tuple(shape), sparse=True)
        return self.uniform(*idx) if len(shape) else self.uniform()

    def subsample(self, n: int, size: int) -> np.ndarray:
        """Sorted indices of ``size`` distinct draws from ``range(n)``."""
        if size >= n:
            return np.arange(n)
        order = np.argsort(self.bits(np.arange(n)), kind="stable")
        return np.sort(order[:size])


# ---------------------------------------------------------------------------
# Brownian ensembles

class ParticleEnsemble:
    """Brownian increments for ``n`` particles on the non-negative part of a grid.

    Increments are generated on demand from the random source, one step at a
    time, and are never stored in full.  ``refine > 1`` makes each increment
    the sum of ``refine`` finer increments, so ensembles on nested grids share
    the same underlying path.  ``paths`` optionally stores state samples of
    shape ``(n, nodes, m)``.
    """

    def __init__(self, grid: TimeGrid, n_particles: int, dim: int, source: RandomSource,
                 refine: int = 1, increments: np.ndarray | None = None):
        if n_particles < 1 or dim < 1:
            raise ConfigurationError("need at least one particle and one noise dimension")
        self.grid = grid
        self.n = int(n_particles)
        self.dim = int(dim)
        self.refine = int(refine)
        self.source = source
        self._stream = source.child("brownian")
        self._explicit = None if increments is None else np.asarray(increments, dtype=float)
        self._prefix = None
        self._path = None
        self.paths: np.ndarray | None = None
        if self._explicit is not None:
            n_steps = grid.idx_end - grid.idx0
            if self._explicit.shape != (self.n, n_steps, self.dim):
                raise ConfigurationError(
                    f"increments must have shape {(self.n, n_steps, self.dim)}, "
                    f"got {self._explicit.shape}")

    @property
    def n_steps(self) -> int:
        return self.grid.idx_end - self.grid.idx0

    def _fine(self, s: int) -> np.ndarray:
        if self._prefix is None:
            self._prefix = self._stream.bits(np.arange(self.n))
        h = _mix(self._prefix ^ _U64(s))
        h = _mix(h[:, None] ^ np.arange(self.dim, dtype=np.uint64)[None, :])
        return ndtri(RandomSource._to_uniform(h))

    def increment(self, s: int) -> np.ndarray:
        """Increment over step ``s`` (node idx0+s to idx0+s+1), shape (n, dim)."""
        if self._explicit is not None:
            return self._explicit[:, s]
        fine_dt = self.grid.dt / self.refine
        if self.refine == 1:
            return self._fine(s) * np.sqrt(fine_dt)
        acc = np.zeros((self.n, self.dim))
        for r in range(self.refine):
            acc += self._fine(s * self.refine + r)
        return acc * np.sqrt(fine_dt)

    def brownian_path(self) -> np.ndarray:
        """Brownian values at nodes idx0..idx_end, shape (n, steps + 1, dim)."""
        if self._path is None:
            out = np.zeros((self.n, self.n_steps + 1, self.dim))
            for s in range(self.n_steps):
                out[:, s + 1] = out[:, s] + self.increment(s)
            self._path = out
        return self._path

    def coarsen(self, grid: TimeGrid, factor: int) -> "ParticleEnsemble":
        """Ensemble on ``grid`` (step factor * dt) sharing this ensemble's path."""
        if self._explicit is not None:
            raise ConfigurationError("coarsening explicit increments is not supported")
        if abs(grid.dt - factor * self.grid.dt) > 1e-12 * grid.dt:
            raise ConfigurationError("coarse grid step must equal factor * fine step")
        return ParticleEnsemble(grid, self.n, self.dim, self.source, self.refine * factor)

    def moment_check(self, n_sigma: float = 6.0, steps: int = 1) -> tuple[bool, str]:
        dt = self.grid.dt
        for s in range(min(steps, self.n_steps)):
            inc = self.increment(s)
            m = inc.mean(axis=0)
            v = inc.var(axis=0)
            if np.any(np.abs(m) > n_sigma * np.sqrt(dt / self.n)):
                return False, f"step {s}: mean {m} inconsistent with 0"
            if np.any(np.abs(v - dt) > n_sigma * dt * np.sqrt(2.0 / self.n)):
                return False, f"step {s}: variance {v} inconsistent with dt={dt}"
        return True, "ok"


def sample_brownian(grid: TimeGrid, n_particles: int, dim: int,
                    source: RandomSource, refine: int = 1) -> ParticleEnsemble:
    """Brownian increments for ``n_particles`` independent ``dim``-dimensional paths."""
    ens = ParticleEnsemble(grid, n_particles, dim, source, refine=refine)
    if ens.n >= 100 and ens.n_steps > 0:
        ok, msg = ens.moment_check()
        if not ok:
            raise ConfigurationError(f"random source failed its moment check: {msg}")
    return ens


# ---------------------------------------------------------------------------
# boundary data

@dataclass
class BoundaryData:
    """Initial state segment, initial control segment and terminal segments.

    Shapes (leading axis may be 1 to broadcast over particles):

    * ``initial``     state on [-delta, 0], ``(N, D + 1, m)``
    * ``control``     control on [-delta, 0), ``(N, D, k)``
    * ``terminal_y``  backward terminal values on [T, T + K], ``(N, nK + 1, m)``
    * ``terminal_z``  backward terminal Z on [T, T + K], ``(N, nK + 1, m, d)``
    """

    initial: np.ndarray | None = None
    control: np.ndarray | None = None
    terminal_y: np.ndarray | None = None
    terminal_z: np.ndarray | None = None

    @classmethod
    def constant(cls, grid: TimeGrid, x0, control0=None) -> "BoundaryData":
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        init = np.broadcast_to(x0, (1, grid.delay_steps + 1, x0.size)).copy()
        ctrl = None
        if control0 is not None:
            c = np.atleast_1d(np.asarray(control0, dtype=float))
            ctrl = np.broadcast_to(c, (1, grid.delay_steps, c.size)).copy()
        return cls(initial=init, control=ctrl)

    def validate(self, grid: TimeGrid) -> None:
        checks = [
            ("initial", self.initial, 3, grid.delay_steps + 1),
            ("control", self.control, 3, grid.delay_steps),
            ("terminal_y", self.terminal_y, 3, grid.tail_steps + 1),
            ("terminal_z", self.terminal_z, 4, grid.tail_steps + 1),
        ]
        for name, arr, ndim, nodes in checks:
            if arr is None:
                continue
            if arr.ndim != ndim or arr.shape[1] != nodes:
                raise ConfigurationError(
                    f"boundary segment {name} has shape {arr.shape}; expected "
                    f"{ndim} axes with {nodes} nodes on axis 1")
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"boundary segment {name} is not finite")
