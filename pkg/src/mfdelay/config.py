"""Experiment configuration: flat YAML documents with documented keys."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import yaml

EXPERIMENTS = (
    "counterexample", "comparison", "contraction-backward", "contraction-forward",
    "euler-order", "ito-check", "lions-check", "lq-control", "lq-delay-control", "gateaux-check",
)

_MULTIPLE_TOL = 1e-9
_U64_MAX = 2 ** 64 - 1


@dataclass
class ExperimentConfig:
    """Every key accepted in a config file, with its default.

    ``beta`` and ``basis_degree`` left as ``None`` take the experiment's own
    default.  ``step``, ``iters`` and ``n_probes`` drive the control
    experiments; ``n_bins`` sets the local-average basis of the comparison run.
    """

    experiment: str
    T: float = 1.0
    K: float = 0.0
    delta: float = 0.0
    dt: float = 0.01
    n_particles: int = 10_000
    seed: int = 0
    beta: float | None = None
    basis_degree: int | None = None
    picard_tol: float = 1e-8
    picard_max_iter: int = 50
    interaction_budget: int | None = None
    step: float = 0.3
    iters: int = 30
    n_probes: int = 64
    n_bins: int = 32
    output_dir: str = "results"

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_FLOATS = ("T", "K", "delta", "dt", "beta", "picard_tol", "step")
_INTS = ("n_particles", "seed", "basis_degree", "picard_max_iter", "interaction_budget",
         "iters", "n_probes", "n_bins")


def _is_multiple(x: float, dt: float) -> bool:
    r = x / dt
    return abs(r - round(r)) <= _MULTIPLE_TOL * max(1.0, abs(r))


def validate_config(raw) -> tuple[ExperimentConfig | None, list[str]]:
    """Parse and check a config (YAML text or mapping); report every problem.

    A manifest written by a previous run is accepted as well: its ``config``
    entry is used.
    """
    errors: list[str] = []
    if isinstance(raw, (str, bytes)):
        try:
            raw = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            return None, [f"config is not valid YAML: {exc}"]
    if isinstance(raw, dict) and isinstance(raw.get("config"), dict) and "version" in raw:
        raw = raw["config"]
    if not isinstance(raw, dict):
        return None, ["config must be a mapping of keys to values"]

    values: dict = {}
    for key, val in raw.items():
        if key not in _FIELDS:
            errors.append(f"unknown key {key!r}")
            continue
        values[key] = val

    exp = values.get("experiment")
    if exp is None:
        errors.append("missing required key 'experiment'")
    elif exp not in EXPERIMENTS:
        errors.append(f"unknown experiment {exp!r} (choose from {', '.join(EXPERIMENTS)})")

    for key in _FLOATS:
        v = values.get(key)
        if v is None:
            continue
        if isinstance(v, str):
            # YAML 1.1 reads exponent forms without a dot, e.g. 1e-3, as strings
            try:
                v = float(v)
            except ValueError:
                pass
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            errors.append(f"{key} must be a number, got {v!r}")
            values.pop(key)
        else:
            values[key] = float(v)
    for key in _INTS:
        v = values.get(key)
        if v is None:
            continue
        if isinstance(v, bool) or not isinstance(v, int):
            errors.append(f"{key} must be an integer, got {v!r}")
            values.pop(key)
    if "output_dir" in values and not isinstance(values["output_dir"], str):
        errors.append("output_dir must be a string")
        values.pop("output_dir")

    merged = {f: _FIELDS[f].default for f in _FIELDS if f != "experiment"}
    merged.update({k: v for k, v in values.items() if k != "experiment"})

    positive = ("T", "dt", "picard_tol", "step")
    for key in positive:
        if not merged[key] > 0:
            errors.append(f"{key} must be positive, got {merged[key]!r}")
    for key in ("K", "delta"):
        if not merged[key] >= 0:
            errors.append(f"{key} must be non-negative, got {merged[key]!r}")
    for key in ("n_particles", "basis_degree", "picard_max_iter", "iters", "n_bins"):
        if merged[key] is not None and not merged[key] >= 1:
            errors.append(f"{key} must be at least 1, got {merged[key]!r}")
    if merged["n_probes"] < 0:
        errors.append(f"n_probes must be non-negative, got {merged['n_probes']!r}")
    if not 0 <= merged["seed"] <= _U64_MAX:
        errors.append(f"seed must lie in [0, 2^64), got {merged['seed']!r}")
    if merged["beta"] is not None and not merged["beta"] > 0:
        errors.append(f"beta must be positive, got {merged['beta']!r}")
    M = merged["interaction_budget"]
    if M is not None and not 2 <= M <= merged["n_particles"]:
        errors.append(f"interaction_budget must satisfy 2 <= M <= n_particles, got {M!r}")
    if merged["dt"] > 0:
        for key in ("T", "K", "delta"):
            x = merged[key]
            if x >= 0 and not _is_multiple(x, merged["dt"]):
                errors.append(f"{key}={x!r} is not a multiple of dt={merged['dt']!r}")

    if errors:
        return None, errors
    return ExperimentConfig(experiment=exp, **merged), []
