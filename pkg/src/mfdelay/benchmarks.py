"""Reference problems with known solutions, shared by the experiments and tests."""

from __future__ import annotations

import numpy as np

from .coefficients import CoefficientSet


def _zeros_mm(*a):
    return 0.0


def lq_coefficients(delayed: bool = False) -> CoefficientSet:
    """``dX = u dt + dB`` (or ``u_{t-delta} dt`` when delayed), ``J = E[int u^2 dt + X_T^2]``."""
    if delayed:
        b = lambda t, x, xd, mu, mud, v, vd: vd
        b_v, b_vd = 0.0, 1.0
    else:
        b = lambda t, x, xd, mu, mud, v, vd: v
        b_v, b_vd = 1.0, 0.0
    return CoefficientSet(
        b=b, sigma=1.0, m=1, d=1, k=1,
        h=lambda t, x, mu, v, vd: np.sum(v ** 2, axis=-1),
        h_x=0.0, h_v=lambda t, x, mu, v, vd: 2.0 * v, h_vd=0.0, h_mu=0.0,
        Phi=lambda x, mu: np.sum(x ** 2, axis=-1),
        Phi_x=lambda x, mu: 2.0 * x, Phi_xx=2.0, Phi_mu=0.0, Phi_mu_y=0.0,
        b_x=0.0, b_xd=0.0, b_v=b_v, b_vd=b_vd, b_mu=0.0, b_mud=0.0,
        sigma_x=0.0, sigma_xd=0.0, sigma_v=0.0, sigma_vd=0.0, sigma_mu=0.0, sigma_mud=0.0,
        lipschitz_C=1.0, name="delayed-lq" if delayed else "lq")


def lq_value(T: float, x0: float = 1.0) -> float:
    """Value of the undelayed problem: ``P_0 x0^2 + int_0^T P dt`` with ``P_t = 1/(1+T-t)``."""
    return x0 ** 2 / (1.0 + T) + np.log1p(T)


def lq_feedback(t, x, T: float):
    return -np.asarray(x) / (1.0 + T - np.asarray(t))


def delayed_lq_value(T: float, delta: float, dt: float, x0: float = 1.0, gamma: float = 0.0) -> float:
    """Optimal cost of the delayed problem discretised on the simulation grid.

    With ``Y_k = X_k + dt * sum_{j=k-D}^{k-1} u_j`` the dynamics become
    ``Y_{k+1} = Y_k + u_k dt + dB_k`` and ``X_T = Y_{n-D} + (noise of the
    last D steps)``, so ``V_{n-D}(y) = y^2 + D dt``.  Running weights follow
    the trapezoid rule (``dt/2`` at t = 0).  Value functions stay quadratic,
    ``V_k(y) = P_k y^2 + c_k``, and the backward recursion is exact.
    """
    n = int(round(T / dt))
    D = int(round(delta / dt))
    P, const = 1.0, D * dt
    for k in range(n - D - 1, -1, -1):
        c = dt / 2 if k == 0 else dt
        const += P * dt
        P = P * c / (c + P * dt ** 2)
    y0 = x0 + gamma * D * dt
    return P * y0 ** 2 + const


def delayed_lq_continuous_value(T: float, delta: float, x0: float = 1.0) -> float:
    Tp = T - delta
    return x0 ** 2 / (1.0 + Tp) + np.log1p(Tp) + delta


def nonlinear_control_coefficients() -> CoefficientSet:
    """``b = sin x + 0.5 int y dmu + v``, ``sigma = 0.5 + 0.2 cos x``; used for
    the variational and perturbation checks."""
    return CoefficientSet(
        b=lambda t, x, xd, mu, mud, v, vd: np.sin(x) + 0.5 * mu.mean + v,
        sigma=lambda t, x, xd, mu, mud, v, vd: (0.5 + 0.2 * np.cos(x))[..., None],
        m=1, d=1, k=1,
        h=lambda t, x, mu, v, vd: np.sum(v ** 2 + x ** 2, axis=-1),
        h_x=lambda t, x, mu, v, vd: 2.0 * x, h_v=lambda t, x, mu, v, vd: 2.0 * v, h_vd=0.0,
        h_mu=0.0,
        Phi=lambda x, mu: np.sum(x ** 2, axis=-1), Phi_x=lambda x, mu: 2.0 * x,
        Phi_xx=2.0, Phi_mu=0.0, Phi_mu_y=0.0,
        b_x=lambda t, x, xd, mu, mud, v, vd: np.cos(x)[..., None],
        b_xd=0.0, b_v=1.0, b_vd=0.0, b_mu=0.5, b_mud=0.0,
        sigma_x=lambda t, x, xd, mu, mud, v, vd: (-0.2 * np.sin(x))[..., None, None],
        sigma_xd=0.0, sigma_v=0.0, sigma_vd=0.0, sigma_mu=0.0, sigma_mud=0.0,
        lipschitz_C=1.5, name="nonlinear")
