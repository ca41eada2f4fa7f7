"""Coefficient bundles for controlled mean-field delay systems.

Shape conventions (``m`` state, ``d`` noise, ``k`` control dimension).  Every
evaluator receives arrays whose leading axes index particles and whose last
axis is the vector dimension; results keep the leading axes and append:

==============  ======================  =========================================
name            arguments               trailing shape
==============  ======================  =========================================
b               t,x,xd,mu,mud,v,vd      (m,)
sigma           t,x,xd,mu,mud,v,vd      (m, d)
b_x, b_xd       t,x,xd,mu,mud,v,vd      (m, m)       [i, l] = d b_i / d x_l
b_v, b_vd       t,x,xd,mu,mud,v,vd      (m, k)
sigma_x, _xd    t,x,xd,mu,mud,v,vd      (m, d, m)
sigma_v, _vd    t,x,xd,mu,mud,v,vd      (m, d, k)
b_mu, b_mud     t,x,xd,mu,mud,v,vd,y    (m, m)       measure derivative at y
sigma_mu, _mud  t,x,xd,mu,mud,v,vd,y    (m, d, m)
h               t,x,mu,v,vd             ()
h_x / h_v, h_vd t,x,mu,v,vd             (m,) / (k,)
h_mu            t,x,mu,v,vd,y           (m,)
Phi             x,mu                    ()
Phi_x, Phi_xx   x,mu                    (m,), (m, m)
Phi_mu          x,mu,y                  (m,)
Phi_mu_y        x,mu,y                  (m, m)       y-gradient of Phi_mu
==============  ======================  =========================================

``mu`` and ``mud`` are :class:`EmpiricalLaw` objects; ``v`` and ``vd`` are
``None`` for uncontrolled systems.  A field may also hold a constant (number
or array of the trailing shape); ``0.0`` marks a partial that vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any, Callable, NamedTuple

import numpy as np

from .core import RandomSource
from .errors import ConfigurationError
from .measure import EmpiricalLaw, check_lions_derivative

_STATE_ARGS = ("b", "sigma", "b_x", "b_xd", "b_v", "b_vd",
               "sigma_x", "sigma_xd", "sigma_v", "sigma_vd")
_STATE_Y = ("b_mu", "b_mud", "sigma_mu", "sigma_mud")
_RUN_ARGS = ("h", "h_x", "h_v", "h_vd")
_RUN_Y = ("h_mu",)
_TERM_ARGS = ("Phi", "Phi_x", "Phi_xx")
_TERM_Y = ("Phi_mu", "Phi_mu_y")


class Theta(NamedTuple):
    """State, delayed state, their laws and the control pair at one time."""

    t: float
    x: np.ndarray
    xd: np.ndarray
    mu: EmpiricalLaw
    mud: EmpiricalLaw
    v: np.ndarray | None
    vd: np.ndarray | None


@dataclass
class CoefficientSet:
    b: Any
    sigma: Any
    m: int = 1
    d: int = 1
    k: int = 0
    h: Any = None
    Phi: Any = None
    b_x: Any = None
    b_xd: Any = None
    b_v: Any = None
    b_vd: Any = None
    b_mu: Any = None
    b_mud: Any = None
    sigma_x: Any = None
    sigma_xd: Any = None
    sigma_v: Any = None
    sigma_vd: Any = None
    sigma_mu: Any = None
    sigma_mud: Any = None
    h_x: Any = None
    h_v: Any = None
    h_vd: Any = None
    h_mu: Any = None
    Phi_x: Any = None
    Phi_xx: Any = None
    Phi_mu: Any = None
    Phi_mu_y: Any = None
    lipschitz_C: float | None = None
    name: str = field(default="coefficients", compare=False)

    def trailing(self, name: str) -> tuple:
        m, d, k = self.m, self.d, self.k
        return {
            "b": (m,), "sigma": (m, d), "b_x": (m, m), "b_xd": (m, m),
            "b_v": (m, k), "b_vd": (m, k), "sigma_x": (m, d, m), "sigma_xd": (m, d, m),
            "sigma_v": (m, d, k), "sigma_vd": (m, d, k), "b_mu": (m, m), "b_mud": (m, m),
            "sigma_mu": (m, d, m), "sigma_mud": (m, d, m), "h": (), "h_x": (m,),
            "h_v": (k,), "h_vd": (k,), "h_mu": (m,), "Phi": (), "Phi_x": (m,),
            "Phi_xx": (m, m), "Phi_mu": (m,), "Phi_mu_y": (m, m),
        }[name]

    def has(self, name: str) -> bool:
        return getattr(self, name) is not None

    def is_zero(self, name: str) -> bool:
        f = getattr(self, name)
        return f is not None and not callable(f) and not np.any(np.asarray(f))

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ConfigurationError(f"{self.name}: missing evaluators {', '.join(missing)}")

    def _call(self, name: str, batch: tuple, *args) -> np.ndarray:
        f = getattr(self, name)
        if f is None:
            raise ConfigurationError(f"{self.name}: evaluator {name} is not provided")
        r = np.asarray(f(*args) if callable(f) else f, dtype=float)
        tr = self.trailing(name)
        nb, nt = len(batch), len(tr)
        if r.ndim == nb + nt and r.shape[nb:] == tr:
            return r
        if r.ndim == nt and r.shape == tr:
            return r
        if int(np.prod(tr)) == 1 and r.ndim <= nb:
            return r.reshape(r.shape + (1,) * nt)
        if r.ndim == 0:
            return np.broadcast_to(r, tr)
        raise ConfigurationError(
            f"{self.name}: {name} returned shape {r.shape}; expected batch {batch} + {tr}")

    # evaluation helpers --------------------------------------------------
    def state(self, name: str, th: Theta) -> np.ndarray:
        return self._call(name, th.x.shape[:-1], th.t, th.x, th.xd, th.mu, th.mud, th.v, th.vd)

    def state_y(self, name: str, th: Theta, y: np.ndarray) -> np.ndarray:
        batch = np.broadcast_shapes(th.x.shape[:-1], y.shape[:-1])
        return self._call(name, batch, th.t, th.x, th.xd, th.mu, th.mud, th.v, th.vd, y)

    def running(self, name: str, th: Theta) -> np.ndarray:
        return self._call(name, th.x.shape[:-1], th.t, th.x, th.mu, th.v, th.vd)

    def running_y(self, name: str, th: Theta, y: np.ndarray) -> np.ndarray:
        batch = np.broadcast_shapes(th.x.shape[:-1], y.shape[:-1])
        return self._call(name, batch, th.t, th.x, th.mu, th.v, th.vd, y)

    def terminal(self, name: str, x: np.ndarray, mu: EmpiricalLaw) -> np.ndarray:
        return self._call(name, x.shape[:-1], x, mu)

    def terminal_y(self, name: str, x: np.ndarray, mu: EmpiricalLaw, y: np.ndarray) -> np.ndarray:
        batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        return self._call(name, batch, x, mu, y)

    # probes --------------------------------------------------------------
    def _random_theta(self, rng: RandomSource, n: int, law_size: int) -> Theta:
        m, k = self.m, self.k
        x = rng.child("x").normal_array((n, m))
        xd = rng.child("xd").normal_array((n, m))
        mu = EmpiricalLaw(rng.child("mu").normal_array((law_size, m)))
        mud = EmpiricalLaw(0.5 + rng.child("mud").normal_array((law_size, m)))
        v = vd = None
        if k:
            v = rng.child("v").normal_array((n, k))
            vd = rng.child("vd").normal_array((n, k))
        return Theta(0.5, x, xd, mu, mud, v, vd)

    def probe_partials(self, rng: RandomSource | None = None, n_probes: int = 100,
                       h: float = 1e-5, law_size: int = 64, n_measure_probes: int = 8
                       ) -> dict[str, float]:
        """Largest scaled error between each declared partial and a finite difference.

        Pointwise partials use centred differences with step ``h``; measure
        derivatives use the lifted directional check.  Errors are
        ``|fd - analytic| / max(1, |analytic|)``.
        """
        rng = rng or RandomSource(0)
        th = self._random_theta(rng.child("probe"), n_probes, law_size)
        out: dict[str, float] = {}

        def compare(name, an, fd):
            an = np.broadcast_to(an, fd.shape)
            err = np.abs(fd - an) / np.maximum(1.0, np.abs(an))
            out[name] = max(out.get(name, 0.0), float(err.max()) if err.size else 0.0)

        def fd_state(base, slot, dim, evalf):
            cols = []
            for l in range(dim):
                e = np.zeros(dim)
                e[l] = h
                plus = th._replace(**{slot: getattr(th, slot) + e})
                minus = th._replace(**{slot: getattr(th, slot) - e})
                cols.append((evalf(base, plus) - evalf(base, minus)) / (2 * h))
            return np.stack(cols, axis=-1)

        for base, parts in (("b", ("x", "xd", "v", "vd")), ("sigma", ("x", "xd", "v", "vd"))):
            if not self.has(base):
                continue
            for slot in parts:
                pname = f"{base}_{slot}"
                if not self.has(pname) or (slot in ("v", "vd") and not self.k):
                    continue
                dim = self.m if slot in ("x", "xd") else self.k
                fd = fd_state(base, slot, dim, lambda b_, t_: self.state(b_, t_))
                compare(pname, self.state(pname, th), fd)
        if self.has("h"):
            for slot in ("x", "v", "vd"):
                pname = f"h_{slot}"
                if not self.has(pname) or (slot in ("v", "vd") and not self.k):
                    continue
                dim = self.m if slot == "x" else self.k
                fd = fd_state("h", slot, dim, lambda b_, t_: self.running(b_, t_))
                compare(pname, self.running(pname, th), fd)
        if self.has("Phi"):
            if self.has("Phi_x"):
                fd = fd_state("Phi", "x", self.m, lambda b_, t_: self.terminal(b_, t_.x, t_.mu))
                compare("Phi_x", self.terminal("Phi_x", th.x, th.mu), fd)
            if self.has("Phi_xx") and self.has("Phi_x"):
                fd = fd_state("Phi_x", "x", self.m, lambda b_, t_: self.terminal(b_, t_.x, t_.mu))
                compare("Phi_xx", self.terminal("Phi_xx", th.x, th.mu), fd)

        self._probe_measure_partials(th, rng.child("lions"), n_measure_probes, out)
        return out

    def _probe_measure_partials(self, th: Theta, rng: RandomSource, n_points: int,
                                out: dict[str, float]) -> None:
        specs = [
            ("b_mu", "b", "mu"), ("b_mud", "b", "mud"),
            ("sigma_mu", "sigma", "mu"), ("sigma_mud", "sigma", "mud"),
            ("h_mu", "h", "mu"), ("Phi_mu", "Phi", "mu"),
        ]
        for pname, base, slot in specs:
            if not (self.has(pname) and self.has(base)):
                continue
            worst = 0.0
            for i in range(min(n_points, th.x.shape[0])):
                pt = th._replace(x=th.x[i:i + 1], xd=th.xd[i:i + 1],
                                 v=None if th.v is None else th.v[i:i + 1],
                                 vd=None if th.vd is None else th.vd[i:i + 1])
                for comp in np.ndindex(self.trailing(base)):
                    def f(law, comp=comp):
                        return float(self._value(base, pt._replace(**{slot: law}))[(0,) + comp])

                    def df(law, y, comp=comp):
                        r = self._value_y(pname, pt._replace(**{slot: law}), y)
                        return r[(slice(None),) + comp]

                    rep = check_lions_derivative(f, df, getattr(pt, slot), n_directions=2,
                                                 eps=1e-6, rng=rng.child(pname, i))
                    worst = max(worst, rep.max_rel_error)
            out[pname] = worst

    def _value(self, name: str, th: Theta) -> np.ndarray:
        if name in _STATE_ARGS:
            r = self.state(name, th)
        elif name in _RUN_ARGS:
            r = self.running(name, th)
        else:
            r = self.terminal(name, th.x, th.mu)
        # constants come back without the batch axes
        return np.broadcast_to(r, th.x.shape[:-1] + self.trailing(name))

    def _value_y(self, name: str, th: Theta, y: np.ndarray) -> np.ndarray:
        if name in _STATE_Y:
            r = self.state_y(name, th, y)
        elif name in _RUN_Y:
            r = self.running_y(name, th, y)
        else:
            r = self.terminal_y(name, th.x, th.mu, y)
        return np.broadcast_to(r, (y.shape[0],) + self.trailing(name))

    def probe_lipschitz(self, rng: RandomSource | None = None, n_probes: int = 64,
                        law_size: int = 64) -> float:
        """Largest ratio |g(a) - g(b)| / (C * distance(a, b)) over random pairs, g in {b, sigma}.

        The law distance uses the index coupling, an upper bound for W2, so a
        ratio above one is a genuine violation of the declared constant.
        """
        if self.lipschitz_C is None:
            return 0.0
        rng = rng or RandomSource(0)
        worst = 0.0
        for j in range(n_probes):
            a = self._random_theta(rng.child("a", j), 1, law_size)
            s = 10.0 ** rng.child("scale", j).uniform(0) * 0.1
            pert = rng.child("p", j)
            b = a._replace(
                x=a.x + s * pert.child("x").normal_array(a.x.shape),
                xd=a.xd + s * pert.child("xd").normal_array(a.xd.shape),
                mu=EmpiricalLaw(a.mu.atoms + s * pert.child("mu").normal_array(a.mu.atoms.shape)),
                mud=EmpiricalLaw(a.mud.atoms + s * pert.child("mud").normal_array(a.mud.atoms.shape)),
            )
            dist = (np.linalg.norm(a.x - b.x) + np.linalg.norm(a.xd - b.xd)
                    + np.sqrt(np.mean(np.sum((a.mu.atoms - b.mu.atoms) ** 2, axis=1)))
                    + np.sqrt(np.mean(np.sum((a.mud.atoms - b.mud.atoms) ** 2, axis=1))))
            for g in ("b", "sigma"):
                diff = np.linalg.norm(self.state(g, a) - self.state(g, b))
                worst = max(worst, diff / (self.lipschitz_C * dist + 1e-300))
        return float(worst)

    def validate(self, rng: RandomSource | None = None, tol: float = 1e-4,
                 lipschitz: bool = True) -> dict[str, float]:
        """Run the partial-derivative and Lipschitz probes; raise on failure."""
        report = self.probe_partials(rng)
        bad = {k: v for k, v in report.items() if not v <= tol}
        if bad:
            raise ConfigurationError(f"{self.name}: partial derivative probes failed: {bad}")
        if lipschitz and self.lipschitz_C is not None:
            ratio = self.probe_lipschitz(rng)
            report["lipschitz_ratio"] = ratio
            if ratio > 1.0 + 1e-9:
                raise ConfigurationError(
                    f"{self.name}: declared Lipschitz constant violated (ratio {ratio:.3g})")
        return report


def field_names() -> list[str]:
    return [f.name for f in fields(CoefficientSet)]
