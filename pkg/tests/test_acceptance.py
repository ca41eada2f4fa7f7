"""Acceptance suite.

Each criterion runs the shipped configs through the command line in a fresh
process, then judges the emitted ``result.json`` against its own tolerances.
Targets are recomputed here from closed forms rather than read back from the
result.  One PASS/FAIL line per criterion is printed in the terminal summary.
"""

import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import solve_ivp

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
EXPERIMENTS = sorted(p.stem for p in CONFIGS.glob("*.yaml"))

pytestmark = pytest.mark.slow


class Runs:
    """Runs each config once per thread count, inside its own working directory."""

    def __init__(self, root: Path):
        self.root = root
        self.cache: dict = {}

    def __call__(self, experiment: str, threads: int = 1) -> dict:
        key = (experiment, threads)
        if key not in self.cache:
            cwd = self.root / f"{experiment}-t{threads}"
            cwd.mkdir(parents=True)
            env = dict(os.environ, OMP_NUM_THREADS=str(threads),
                       OPENBLAS_NUM_THREADS=str(threads), MKL_NUM_THREADS=str(threads))
            start = time.perf_counter()
            proc = subprocess.run([sys.executable, "-m", "mfdelay.cli", "run",
                                   "--config", str(CONFIGS / f"{experiment}.yaml"), "--out", "out"],
                                  cwd=cwd, env=env, capture_output=True, text=True)
            elapsed = time.perf_counter() - start
            out = cwd / "out"
            files = {p.name: p.read_bytes() for p in sorted(out.iterdir())} if out.exists() else {}
            result = json.loads(files["result.json"]) if "result.json" in files else None
            self.cache[key] = {"code": proc.returncode, "stderr": proc.stderr, "files": files,
                               "result": result, "seconds": elapsed}
        return self.cache[key]


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


def judge(lines: list, number: int, title: str, parts: list) -> None:
    """``parts`` holds (label, ok) pairs; one summary line, then a hard assert."""
    ok = all(p for _, p in parts)
    detail = "; ".join(f"{label}{'' if p else ' [x]'}" for label, p in parts)
    line = f"{'PASS' if ok else 'FAIL'}  [{number:2d}] {title}: {detail}"
    lines.append(line)
    print(line)
    assert ok, line


def values(run: dict) -> dict:
    assert run["code"] in (0, 1), run["stderr"]
    return run["result"]["values"]


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def test_criterion_01_counterexample(runs, acceptance_lines):
    run = runs("counterexample")
    v, checks = values(run), run["result"]["checks"]
    y1 = 1.5 - 2.0 / math.sqrt(2.0 * math.pi)
    xi1 = -2.0 / math.sqrt(2.0 * math.pi)
    judge(acceptance_lines, 1, "counterexample", [
        (f"Y1_0={v['Y1_0']:.5f} vs {y1:.5f} +-0.05", abs(v["Y1_0"] - y1) <= 0.05),
        (f"Y2_0={v['Y2_0']!r} == 0", v["Y2_0"] == 0.0),
        (f"violation={checks['violation']}", checks["violation"] is True),
        (f"E[xi1]={v['mean_xi1']:.4f} vs {xi1:.4f} +-0.01", abs(v["mean_xi1"] - xi1) <= 0.01),
        (f"runtime {run['seconds']:.0f}s <= 120s", run["seconds"] <= 120.0),
    ])


def test_criterion_02_backward_contraction(runs, acceptance_lines):
    v = values(runs("contraction-backward"))
    C, L = v["C"], v["L"]
    beta = 32 * C ** 2 * L + 32 * C ** 2 + 6 * C + 2 * C * L + 1
    judge(acceptance_lines, 2, "backward contraction", [
        (f"C={C}, L={L}, beta={v['beta']} == {beta}", (C, L) == (0.5, 1) and v["beta"] == beta),
        (f"rate={v['rate_beta']:.3g} <= 0.6", v["rate_beta"] <= 0.6),
        (f"{v['ratios_used_beta']} ratios >= 4", v["ratios_used_beta"] >= 4),
    ])


def test_criterion_03_forward_contraction(runs, acceptance_lines):
    v = values(runs("contraction-forward"))
    beta = 1 + 4 * v["C"] ** 2
    tol = v["picard_tol"]
    judge(acceptance_lines, 3, "forward contraction", [
        (f"beta={v['beta']} == 1+4C^2={beta}", v["beta"] == beta),
        (f"rate={v['rate']:.3g} <= 0.6", v["rate"] <= 0.6),
        (f"Picard-Euler gap {v['picard_euler_max_gap']:.2e} <= 10*tol={10 * tol:.0e}",
         v["picard_euler_max_gap"] <= 10 * tol),
    ])


def test_criterion_04_comparison(runs, acceptance_lines):
    v = values(runs("comparison"))
    judge(acceptance_lines, 4, "comparison", [
        (f"violation fraction {v['violation_fraction']:.2e} <= 1e-3",
         v["violation_fraction"] <= 1e-3),
        (f"bootstrap violation fraction {v['bootstrap_violation_fraction']:.2e} <= 1e-3",
         v["bootstrap_violation_fraction"] <= 1e-3),
    ])


def riccati_value(T: float, x0: float) -> float:
    # P' = P^2 backwards from P(T) = 1, integrated numerically; J = P(0) x0^2 + int P
    sol = solve_ivp(lambda t, y: [y[0] ** 2, y[0]], (T, 0.0), [1.0, 0.0],
                    rtol=1e-12, atol=1e-14)
    P0, minus_int = sol.y[:, -1]
    return P0 * x0 ** 2 - minus_int


def test_criterion_05_lq_control(runs, acceptance_lines):
    run = runs("lq-control")
    v = values(run)
    J = riccati_value(1.0, 1.0)
    rel = abs(v["J_optimizer"] - J) / J
    judge(acceptance_lines, 5, "LQ control", [
        (f"J={v['J_optimizer']:.4f} vs Riccati {J:.4f}, rel {rel:.3%} <= 2%", rel <= 0.02),
        (f"control RMS {v['control_rms_err']:.4f} <= 0.05", v["control_rms_err"] <= 0.05),
        (f"min SMP probe z={v['smp_min_z']:.2f} >= -3", v["smp_min_z"] >= -3.0),
        (f"perturbed min residual {v['perturbed_min_residual']:.3g} < 0",
         v["perturbed_min_residual"] < 0.0),
        (f"runtime {run['seconds']:.0f}s <= 300s", run["seconds"] <= 300.0),
    ])


def test_criterion_06_delayed_lq(runs, acceptance_lines):
    v = values(runs("lq-delay-control"))
    rel = abs(v["J_optimizer"] - v["J_dp"]) / v["J_dp"]
    judge(acceptance_lines, 6, "delayed LQ", [
        (f"J={v['J_optimizer']:.4f} vs DP {v['J_dp']:.4f}, rel {rel:.3%} <= 3%", rel <= 0.03),
        (f"Gateaux rel err {v['gateaux_rel_err']:.3%} <= 8%", v["gateaux_rel_err"] <= 0.08),
    ])


def test_criterion_07_strong_order(runs, acceptance_lines):
    v = values(runs("euler-order"))
    dts = np.array(v["dts"])
    slope = loglog_slope(dts, v["strong_errors"])
    judge(acceptance_lines, 7, "strong order", [
        ("dt = 2^-6..2^-10", np.array_equal(dts, 2.0 ** -np.arange(6, 11))),
        (f"slope {slope:.3f} in 0.5 +-0.15", abs(slope - 0.5) <= 0.15),
    ])


def test_criterion_08_ito_residual(runs, acceptance_lines):
    v = values(runs("ito-check"))
    parts = []
    for s in v["systems"]:
        for f in v["functionals"]:
            r = v[f"{s}_{f}"]
            parts.append((f"{s}/{f} {r['residual_dt']:.2e} <= 0.01", r["residual_dt"] <= 0.01))
            # halving dt must not increase the residual beyond the Monte Carlo floor
            parts.append((f"halved {r['residual_half_dt']:.2e}",
                          r["residual_half_dt"] <= max(r["residual_dt"],
                                                       r["noise_floor_half_dt"])))
    assert len(parts) == 12
    judge(acceptance_lines, 8, "Ito residual", parts)


def test_criterion_09_lions(runs, acceptance_lines):
    v = values(runs("lions-check"))
    parts = []
    for name in ("mean", "mean_squared", "second_moment"):
        err = v[name]["errors"][-1]
        parts.append((f"{name} err {err:.1e} <= 1e-4", err <= 1e-4))
    for name in ("mean_squared", "second_moment"):
        slope = v[name]["slope"]
        parts.append((f"{name} slope {slope:.3f} ~ 1", abs(slope - 1.0) <= 0.1))
    judge(acceptance_lines, 9, "Lions derivative", parts)


def test_criterion_10_apriori_and_variational(runs, acceptance_lines):
    ap = values(runs("contraction-backward"))["apriori"]
    gv = values(runs("gateaux-check"))
    parts = []
    for case in ("zero", "brownian_terminal", "unit_driver"):
        c = ap[case]
        parts.append((f"{case} slack {c['slack']:.3g} >= -3se",
                      c["slack"] >= -3.0 * c["standard_error"]))
    gaps = gv["variational_gaps"]
    slope = loglog_slope(gv["thetas"], gaps)
    parts.append(("theta = 0.1, 0.05, 0.025", gv["thetas"] == [0.1, 0.05, 0.025]))
    parts.append(("gaps decreasing", all(b < a for a, b in zip(gaps, gaps[1:]))))
    parts.append((f"slope {slope:.3f} in 2 +-0.3", abs(slope - 2.0) <= 0.3))
    judge(acceptance_lines, 10, "a priori + variational", parts)


def test_criterion_11_determinism(runs, acceptance_lines):
    parts = []
    for e in EXPERIMENTS:
        a, b = runs(e, 1), runs(e, 4)
        same = a["code"] == b["code"] and a["files"] == b["files"] and "result.json" in a["files"]
        parts.append((f"{e} ({len(a['files'])} files)", same))
    judge(acceptance_lines, 11, "determinism across thread counts", parts)
