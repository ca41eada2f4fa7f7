"""Empirical laws, Wasserstein distances and Lions-derivative checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .core import RandomSource
from .errors import DispatchError, DomainError

_CHUNK_ELEMS = 1 << 22


class EmpiricalLaw:
    """Uniformly weighted atoms, stored as an ``(N, m)`` array (not copied)."""

    def __init__(self, atoms):
        a = np.asarray(atoms, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if a.ndim != 2:
            raise DomainError(f"atoms must be (N, m), got shape {a.shape}")
        self.atoms = a

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @cached_property
    def mean(self) -> np.ndarray:
        self._require_atoms()
        return self.atoms.mean(axis=0)

    @cached_property
    def second_moment(self) -> float:
        self._require_atoms()
        return float(np.mean(np.sum(self.atoms ** 2, axis=1)))

    def _require_atoms(self):
        if self.n == 0:
            raise DomainError("empirical law has no atoms")

    def __repr__(self) -> str:
        return f"EmpiricalLaw(n={self.n}, dim={self.dim})"


def _atoms(x) -> np.ndarray:
    a = x.atoms if isinstance(x, EmpiricalLaw) else np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return a


def _w2_sorted(p: np.ndarray, q: np.ndarray) -> float:
    """W2 between uniform empirical measures on the line, via quantile functions."""
    p = np.sort(p)
    q = np.sort(q)
    if p.size == q.size:
        return float(np.sqrt(np.mean((p - q) ** 2)))
    # piecewise-constant quantile functions on the merged level set
    n, m = p.size, q.size
    levels = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    widths = np.diff(np.concatenate(([0.0], levels)))
    mid = levels - widths / 2
    ip = np.minimum((mid * n).astype(np.int64), n - 1)
    iq = np.minimum((mid * m).astype(np.int64), m - 1)
    return float(np.sqrt(np.sum(widths * (p[ip] - q[iq]) ** 2)))


def w2_distance_1d(mu, nu) -> float:
    """Exact 2-Wasserstein distance between two empirical laws on the real line."""
    a, b = _atoms(mu), _atoms(nu)
    if a.shape[1] != 1 or b.shape[1] != 1:
        raise DispatchError("w2_distance_1d needs one-dimensional laws; use w2_distance_sliced")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DomainError("empirical law has no atoms")
    return _w2_sorted(a[:, 0], b[:, 0])


def projection_directions(dim: int, n_projections: int, rng: RandomSource) -> np.ndarray:
    """Unit directions drawn as blocks of random orthonormal frames.

    Within each full frame the squared projections of any vector sum to its
    squared norm, which removes the sampling error for pure translations.
    """
    if dim == 1:
        return np.ones((1, 1))
    blocks = []
    frame = 0
    while sum(len(b) for b in blocks) < n_projections:
        g = rng.child("frame", frame).normal_array((dim, dim))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))[None, :]
        blocks.append(q.T)
        frame += 1
    return np.concatenate(blocks)[:n_projections]


def w2_distance_sliced(mu, nu, n_projections: int = 128, rng: RandomSource | None = None,
                       directions: np.ndarray | None = None) -> float:
    """Sliced 2-Wasserstein distance, scaled by sqrt(m) to match W2 on translations.

    Returns ``sqrt(m * mean_u W2(<u, mu>, <u, nu>)^2)`` over unit directions
    ``u``.  In dimension one the only direction is the identity, so the value
    equals :func:`w2_distance_1d` exactly.
    """
    a, b = _atoms(mu), _atoms(nu)
    if a.shape[1] != b.shape[1]:
        raise DomainError("laws live in different dimensions")
    m = a.shape[1]
    if directions is None:
        directions = projection_directions(m, n_projections, rng or RandomSource(0))
    total = 0.0
    for u in directions:
        total += _w2_sorted(np.einsum("nm,m->n", a, u), np.einsum("nm,m->n", b, u)) ** 2
    return float(np.sqrt(m * total / len(directions)))


def w2_distance(mu, nu, **kw) -> float:
    if _atoms(mu).shape[1] == 1:
        return w2_distance_1d(mu, nu)
    return w2_distance_sliced(mu, nu, **kw)


# ---------------------------------------------------------------------------
# averaging over an independent copy

def _mean_over_partner(val: np.ndarray, m_axis_len: int) -> np.ndarray:
    return val.mean(axis=1) if val.shape[1] == m_axis_len else val[:, 0]


def prime_expectation(f: Callable, law, own, budget: int | None = None,
                      rng: RandomSource | None = None):
    """Average ``f(partner, own)`` over the atoms of ``law`` (the independent copy).

    ``own`` is an array whose first axis runs over the particles that need the
    average (or a pytree-like tuple of such arrays).  ``f`` is called with
    partner atoms of shape ``(1, M, ...)`` and own values of shape
    ``(n, 1, ...)`` and must broadcast; the mean is taken over axis 1.  When
    the output does not depend on one side its axis stays of length one and no
    ``n * M`` array is formed.

    ``budget`` (M) selects a seeded subsample of partner atoms; ``M = N`` uses
    every atom.
    """
    partners = law.atoms if isinstance(law, EmpiricalLaw) else law
    n_atoms = _leading(partners)
    if n_atoms == 0:
        raise DomainError("prime expectation over an empty law")
    M = n_atoms if budget is None else int(budget)
    if not 2 <= M <= n_atoms and not (n_atoms == 1 and M == 1):
        raise DomainError(f"interaction budget must satisfy 2 <= M <= N={n_atoms}, got {M}")
    if M < n_atoms:
        idx = (rng or RandomSource(0)).subsample(n_atoms, M)
        partners = _take(partners, idx)
    p = _expand(partners, 0)
    n_own = _leading(own)
    if n_own == 0:
        return np.zeros((0,))

    width = max(2, _CHUNK_ELEMS // max(M, 1))
    first = f(p, _expand(_slice(own, 0, min(width, n_own)), 1))
    first = np.asarray(first, dtype=float)
    if first.ndim < 2:
        raise DomainError("prime_expectation callback must keep the two particle axes")
    if first.shape[0] == 1:
        return np.broadcast_to(_mean_over_partner(first, M), (n_own,) + first.shape[2:])
    parts = [_mean_over_partner(first, M)]
    if first.shape[1] == 1 and n_own > width:
        # no partner axis in the output, so the remaining rows fit in one call
        rest = f(p, _expand(_slice(own, width, n_own), 1))
        parts.append(_mean_over_partner(np.asarray(rest, dtype=float), M))
        return np.concatenate(parts, axis=0)
    for lo in range(width, n_own, width):
        val = np.asarray(f(p, _expand(_slice(own, lo, min(lo + width, n_own)), 1)), dtype=float)
        parts.append(_mean_over_partner(val, M))
    return np.concatenate(parts, axis=0)


def _leading(x) -> int:
    if isinstance(x, tuple):
        for v in x:
            if v is not None:
                return np.shape(v)[0]
        return 0
    return np.shape(x)[0]


def _take(x, idx):
    if isinstance(x, tuple):
        return type(x)(*[None if v is None else v[idx] for v in x]) if hasattr(x, "_fields") \
            else tuple(None if v is None else v[idx] for v in x)
    return x[idx]


def _slice(x, lo, hi):
    return _take(x, slice(lo, hi))


def _expand(x, axis):
    if isinstance(x, tuple):
        vals = [None if v is None else np.expand_dims(v, axis) for v in x]
        return type(x)(*vals) if hasattr(x, "_fields") else tuple(vals)
    return np.expand_dims(x, axis)


# ---------------------------------------------------------------------------
# lifted derivative checks

@dataclass
class LionsCheckReport:
    max_rel_error: float
    rel_errors: list = field(default_factory=list)
    finite: bool = True
    message: str = "ok"

    def passed(self, tol: float) -> bool:
        return self.finite and self.max_rel_error <= tol


def check_lions_derivative(f: Callable[[EmpiricalLaw], float],
                           df: Callable[[EmpiricalLaw, np.ndarray], np.ndarray],
                           law, n_directions: int = 8, eps: float = 1e-4,
                           rng: RandomSource | None = None,
                           directions: np.ndarray | None = None) -> LionsCheckReport:
    """Compare the lifted finite difference of ``f`` with ``E[<df(mu, X), eta>]``.

    For each direction ``eta`` (one vector per atom) the forward difference
    ``(f(law of X + eps*eta) - f(law of X)) / eps`` is compared with
    ``mean_i <df(mu, x_i), eta_i>``.  Errors are scaled by
    ``||df||_{L2} * ||eta||_{L2}``, the natural size of the directional
    derivative.
    """
    x = _atoms(law)
    n, m = x.shape
    if directions is None:
        directions = (rng or RandomSource(0)).child("lions").normal_array((n_directions, n, m))
    mu = EmpiricalLaw(x)
    try:
        with np.errstate(all="ignore"):
            f0 = float(f(mu))
            grad = np.asarray(df(mu, x), dtype=float).reshape(n, m)
    except (FloatingPointError, OverflowError, ValueError) as exc:
        return LionsCheckReport(np.inf, [], False, f"evaluation failed: {exc}")
    gnorm = float(np.sqrt(np.mean(np.sum(grad ** 2, axis=1))))
    errs = []
    for eta in directions:
        with np.errstate(all="ignore"):
            f1 = float(f(EmpiricalLaw(x + eps * eta)))
        fd = (f1 - f0) / eps
        an = float(np.mean(np.sum(grad * eta, axis=1)))
        if not (np.isfinite(fd) and np.isfinite(an)):
            return LionsCheckReport(np.inf, errs, False, "non-finite value in derivative check")
        scale = gnorm * float(np.sqrt(np.mean(np.sum(eta ** 2, axis=1))))
        err = abs(fd - an)
        errs.append(err / scale if scale > 0 else err)
    return LionsCheckReport(max(errs) if errs else 0.0, errs)
