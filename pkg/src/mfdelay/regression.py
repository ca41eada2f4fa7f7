"""Least-squares conditional expectations on polynomial features."""

from __future__ import annotations

from itertools import combinations_with_replacement
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError

COND_LIMIT = 1e10
RIDGE_SCALE = 1e-8


def polynomial_design(variables: np.ndarray, degree: int) -> np.ndarray:
    """Monomials of total degree <= ``degree`` in the standardised variables.

    Columns with (numerically) zero spread are dropped, so a deterministic
    variable contributes only through the constant column.
    """
    V = np.asarray(variables, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    n = V.shape[0]
    mean = V.mean(axis=0)
    std = V.std(axis=0)
    keep = std > 1e-12 * (1.0 + np.abs(mean))
    Z = (V[:, keep] - mean[keep]) / std[keep]
    cols = [np.ones(n)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(Z.shape[1]), deg):
            col = Z[:, combo[0]].copy()
            for j in combo[1:]:
                col *= Z[:, j]
            cols.append(col)
    return np.stack(cols, axis=1)


class Projector:
    """Orthogonal projection onto the span of a design matrix.

    Normal equations are formed with plain loops (``einsum`` without BLAS), so
    results do not depend on the thread count.  Ill-conditioned Gram matrices
    get a ridge term ``1e-8 * trace / P`` and are flagged.
    """

    def __init__(self, design: np.ndarray):
        self.F = design
        n, p = design.shape
        G = np.einsum("np,nq->pq", design, design) / n
        self.ridged = False
        if p > 1 and not np.linalg.cond(G) < COND_LIMIT:
            G = G + RIDGE_SCALE * np.trace(G) / p * np.eye(p)
            self.ridged = True
        self.G = G

    def coefficients(self, Y: np.ndarray) -> np.ndarray:
        n = self.F.shape[0]
        Y2 = Y.reshape(n, -1)
        rhs = np.einsum("np,nq->pq", self.F, Y2) / n
        return np.linalg.solve(self.G, rhs)

    def fit(self, Y: np.ndarray) -> np.ndarray:
        coef = self.coefficients(Y)
        return np.einsum("np,pq->nq", self.F, coef).reshape(Y.shape)


class BinProjector:
    """Averages over quantile bins of the features.

    A positive operator: nonnegative data have nonnegative fits, so ordered
    inputs give ordered outputs.  Several feature columns are binned jointly
    on a product grid with about ``n_bins`` cells.
    """

    ridged = False

    def __init__(self, features: np.ndarray, n_bins: int):
        V = np.asarray(features, dtype=float)
        if V.ndim == 1:
            V = V[:, None]
        n, r = V.shape
        per = max(2, int(round(n_bins ** (1.0 / r))))
        labels = np.zeros(n, dtype=np.int64)
        for c in range(r):
            edges = np.quantile(V[:, c], np.linspace(0, 1, per + 1)[1:-1])
            labels = labels * per + np.searchsorted(edges, V[:, c], side="right")
        _, self.labels = np.unique(labels, return_inverse=True)
        self.counts = np.bincount(self.labels)

    def fit(self, Y: np.ndarray) -> np.ndarray:
        n = self.labels.shape[0]
        Y2 = Y.reshape(n, -1)
        out = np.empty_like(Y2)
        for c in range(Y2.shape[1]):
            means = np.bincount(self.labels, weights=Y2[:, c]) / self.counts
            out[:, c] = means[self.labels]
        return out.reshape(Y.shape)


FeatureFn = Callable[[int], np.ndarray]


def brownian_features(ensemble) -> FeatureFn:
    """Brownian value at global node ``k`` (zero before time 0)."""
    grid = ensemble.grid

    def feat(k: int) -> np.ndarray:
        path = ensemble.brownian_path()
        j = min(max(k - grid.idx0, 0), path.shape[1] - 1)
        return path[:, j]
    return feat


def state_features(solution, lagged: bool = False) -> FeatureFn:
    """Forward state at node ``k`` (held at its terminal value after T)."""
    grid = solution.grid
    D = grid.delay_steps

    def feat(k: int) -> np.ndarray:
        kk = min(k, grid.idx_T)
        x = solution.state(kk)
        if lagged and D:
            return np.concatenate([x, solution.state(kk - D)], axis=1)
        return x
    return feat


def stack_features(*fns: FeatureFn) -> FeatureFn:
    if not fns:
        raise ConfigurationError("need at least one feature source")

    def feat(k: int) -> np.ndarray:
        arrs = [np.asarray(f(k), dtype=float) for f in fns]
        return np.concatenate([a if a.ndim == 2 else a[:, None] for a in arrs], axis=1)
    return feat


def make_features(sources: Sequence[str], ensemble=None, solution=None, extra=None) -> FeatureFn:
    fns = []
    for s in sources:
        if s == "brownian":
            fns.append(brownian_features(ensemble))
        elif s == "state":
            fns.append(state_features(solution))
        elif s == "lagged_state":
            fns.append(state_features(solution, lagged=True))
        elif extra is not None and s in extra:
            fns.append(extra[s])
        else:
            raise ConfigurationError(f"unknown feature source {s!r}")
    return fns[0] if len(fns) == 1 else stack_features(*fns)
