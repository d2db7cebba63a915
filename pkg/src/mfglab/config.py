"""Experiment configuration: TOML files with one table per concern.

Every recognised key has a default; parsing materializes all of them so the
echoed configuration fully determines a run.  The hash of that echo (minus
output location and worker count) stamps every output file.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

KINDS = ("solve", "manufacture", "estimate-sweep", "inverse-source", "state-determination", "weight-check",
         "operator-identity")

_DATA = {"value_source": "0", "density_source": "0", "value_flux": "0", "density_flux": "0",
         "value_terminal": "0", "density_initial": "0"}

# section -> key -> default; ``None`` means "no default" or "derived later"
SCHEMA: dict[str, dict] = {
    "grid": {"extents": [1.0], "counts": [64], "T": 1.0, "nt": 128, "observed": ["right"]},
    "solver": {"theta": 0.5, "tol": 1e-8, "max_iter": 50, "linear_tol": 1e-10},
    "weights": {"sharpness": 1.0, "s_grid": [4.0, 8.0, 16.0, 32.0, 64.0], "powers": [-2, -1, 0, 1, 2, 3]},
    "manufactured": {"value": None, "density": "0"},
    "data": dict(_DATA),
    "refinement": {"levels": 3, "min_order": 1.8, "max_contraction": None},
    "estimate": {"which": "scalar", "field": "value", "m": 0.0, "r": 0.0, "tail_fraction": 0.5,
                 "residual_tol": 1e-2, "max_constant": None},
    "operator": {"field": "sin(pi*x) + x", "solution": "exp(-t)*sin(pi*x)", "window": None,
                 "s_values": [2.0, 8.0], "ladder": None, "min_order": 1.8, "tolerance": 1e-2},
    "source": {"value_factor": "1", "density_factor": "1", "snapshot_time": None, "window": None,
               "floor": 1e-8, "value_truth": None, "density_truth": None, "regularization": 1e-10,
               "max_error": 0.02, "direct_max_error": None, "noise_levels": [1e-4, 1e-3, 1e-2, 3e-2, 1e-1],
               "slope_range": [0.9, 1.1], "gradient_tol": 1e-6, "ensemble": 10},
    "state": {"mode": "linear", "margin": None, "compare_margin": None, "scale": 2.0, "first": None,
              "second": None, "value_cap": None, "linear_tolerance": None},
    "nonlinear": {"diffusivity": "1", "gradient_coupling": "0", "coupling": "0"},
    "output": {"dir": "out"},
}
# free-form sections validated by the modules that consume them
FREE = {"coefficients"}
TOP = {"kind", "seed", "workers"}

# per-kind sections that are used, and required dotted keys
USES = {
    "solve": {"grid", "coefficients", "solver", "data", "manufactured", "output"},
    "manufacture": {"grid", "coefficients", "solver", "manufactured", "refinement", "output"},
    "estimate-sweep": {"grid", "coefficients", "weights", "manufactured", "estimate", "output"},
    "inverse-source": {"grid", "coefficients", "solver", "source", "output"},
    "state-determination": {"grid", "coefficients", "solver", "state", "nonlinear", "output"},
    "weight-check": {"grid", "weights", "output"},
    "operator-identity": {"grid", "coefficients", "weights", "operator", "output"},
}
REQUIRED = {
    "manufacture": ["manufactured.value"],
    "estimate-sweep": ["manufactured.value"],
    "inverse-source": ["source.value_truth", "source.density_truth"],
    "state-determination": ["state.first", "state.second"],
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    workers: int
    sections: dict
    source_path: str | None = None

    def __getitem__(self, key: str) -> dict:
        return self.sections[key]

    def echo(self) -> dict:
        """Materialized configuration, output location excluded."""
        out = {"kind": self.kind, "seed": self.seed}
        for name in sorted(self.sections):
            if name == "output":
                continue
            out[name] = self.sections[name]
        return out

    @property
    def hash(self) -> str:
        text = json.dumps(self.echo(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _schema_text(kind: str) -> str:
    parts = []
    for sec in sorted(USES[kind]):
        keys = "free-form" if sec in FREE else ", ".join(sorted(SCHEMA[sec]))
        parts.append(f"[{sec}] {keys}")
    req = ", ".join(REQUIRED.get(kind, [])) or "none"
    return f"kind '{kind}' uses: " + "; ".join(parts) + f"; required: {req}"


def _data_table(value, where: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be a table with keys {sorted(_DATA)}")
    unknown = sorted(set(value) - set(_DATA))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}; allowed: {sorted(_DATA)}")
    out = dict(_DATA)
    out.update({k: str(v) for k, v in value.items()})
    return out


def from_mapping(raw: dict, *, seed: int | None = None, workers: int | None = None, out: str | None = None,
                 source_path: str | None = None) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    if "kind" not in raw:
        raise ConfigError(f"missing required key 'kind' (one of {', '.join(KINDS)})")
    kind = raw.pop("kind")
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {', '.join(KINDS)}")
    cfg_seed = raw.pop("seed", 0)
    cfg_workers = raw.pop("workers", 1)
    unknown = []
    for key, val in raw.items():
        if key in FREE:
            continue
        if key not in SCHEMA:
            unknown.append(key)
        elif not isinstance(val, dict):
            raise ConfigError(f"[{key}] must be a table")
        else:
            unknown += [f"{key}.{k}" for k in val if k not in SCHEMA[key]]
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}. {_schema_text(kind)}")
    unused = sorted(set(raw) - USES[kind])
    if unused:
        raise ConfigError(f"sections not used by '{kind}': {', '.join(unused)}. {_schema_text(kind)}")
    sections: dict = {}
    for sec in sorted(USES[kind]):
        if sec in FREE:
            sections[sec] = raw.get(sec, {})
            continue
        merged = copy.deepcopy(SCHEMA[sec])
        merged.update(raw.get(sec, {}))
        sections[sec] = merged
    for dotted in REQUIRED.get(kind, []):
        sec, key = dotted.split(".")
        if sections[sec].get(key) is None:
            raise ConfigError(f"missing required key {dotted}. {_schema_text(kind)}")
    if kind == "state-determination":
        for key in ("first", "second"):
            sections["state"][key] = _data_table(sections["state"][key], f"state.{key}")
    if "data" in sections:
        sections["data"] = _data_table(sections["data"], "[data]")
    _validate(kind, sections)
    if out is not None:
        sections["output"]["dir"] = str(out)
    return ExperimentConfig(kind, int(cfg_seed if seed is None else seed),
                            int(cfg_workers if workers is None else workers), sections, source_path)


def _validate(kind: str, s: dict) -> None:
    g = s["grid"]
    dim = len(g["counts"])
    if dim not in (1, 2) or len(g["extents"]) != dim:
        raise ConfigError("grid.counts and grid.extents must both have length 1 or 2")
    if any(int(n) < 5 for n in g["counts"]) or int(g["nt"]) < 5:
        raise ConfigError("grids need at least 5 nodes per axis and 5 time levels")
    if float(g["T"]) <= 0 or any(float(e) <= 0 for e in g["extents"]):
        raise ConfigError("grid.T and grid.extents must be positive")
    if "weights" in s:
        w = s["weights"]
        if float(w["sharpness"]) <= 0:
            raise ConfigError("weights.sharpness must be positive")
        if kind == "estimate-sweep" and len(w["s_grid"]) < 4:
            raise ConfigError("weights.s_grid needs at least 4 values")
    if "solver" in s:
        th = float(s["solver"]["theta"])
        if not 0.5 <= th <= 1.0:
            raise ConfigError("solver.theta must lie in [0.5, 1]")
    if kind == "estimate-sweep":
        e = s["estimate"]
        if e["which"] not in ("scalar", "scaled", "first-power", "system", "time-derivative", "trace",
                              "trace-gradient"):
            raise ConfigError(f"unknown estimate.which {e['which']!r}")
        if e["field"] not in ("value", "density"):
            raise ConfigError("estimate.field must be 'value' or 'density'")
    if kind == "state-determination" and s["state"]["mode"] not in ("linear", "nonlinear"):
        raise ConfigError("state.mode must be 'linear' or 'nonlinear'")


def parse_config(path, **overrides) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        raw = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {p}: {exc}") from None
    return from_mapping(raw, source_path=str(p), **overrides)
