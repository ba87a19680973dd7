"""Run configuration, result files and the run manifest.

Configs are YAML documents (plain JSON is valid YAML too).  Every key is
checked against a schema; unknown keys and out-of-range values are rejected
with a message naming the key.  Time series go to CSV with 17 significant
digits so doubles round-trip exactly; scalar reports go to JSON.  The
manifest is written last, atomically, and lists a SHA-256 per output file.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from kuralock.errors import ConfigError

COMMANDS = ("simulate", "sweep", "thresholds", "verify", "montecarlo", "suite")
CSV_FORMAT = "%.17g"
MANIFEST = "manifest.json"


def _positive(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit(x):
    return 0 < x <= 1


def _tol(x):
    return 0 < x < 1


# key: (type, default, predicate, description of admissible range)
_TOP = {
    "command": (str, None, lambda c: c in COMMANDS, f"one of {', '.join(COMMANDS)}"),
    "out": (str, "kuralock-run", None, None),
    "seed": (int, None, _nonneg, ">= 0"),
    "horizon": (float, None, _positive, "> 0"),
    "kappa": (float, None, None, None),
    "sample_dt": (float, 0.05, _positive, "> 0"),
    "lock_tol": (float, 1e-6, _positive, "> 0"),
    "signed": (bool, False, None, None),
}
_SECTIONS = {
    "scenario": {
        "name": (str, "adler2", None, None),
        "n": (int, None, lambda n: n >= 1, ">= 1"),
        "d": (float, None, _nonneg, ">= 0"),
        "d_omega": (float, None, _nonneg, ">= 0"),
        "omega": (list, None, None, None),
        "theta0": (list, None, None, None),
        "r0": (float, None, _unit, "(0, 1]"),
        "nu_a": (float, None, None, None),
        "nu_b": (float, None, None, None),
        "alpha": (float, None, None, None),
        "collision_prepared": (bool, None, None, None),
        "one_sided": (bool, None, None, None),
    },
    "integrator": {
        "method": (str, "rk45", lambda m: m in ("rk4", "rk45"), "rk4 or rk45"),
        "step": (float, 1e-2, _positive, "> 0"),
        "rel_tol": (float, 1e-9, _tol, "(0, 1)"),
        "abs_tol": (float, 1e-11, _tol, "(0, 1)"),
        "max_step": (float, 1.0, _positive, "> 0"),
    },
    "sweep": {
        "kappa_grid": (list, [0.5, 0.9, 0.99, 1.01, 1.1, 2.0], None, None),
        "trials": (int, 1, lambda t: t >= 1, ">= 1"),
    },
    "suite": {
        "r0_grid": (list, [0.1, 0.3, 0.5, 0.7, 0.9, 0.94, 0.99], None, None),
        "n_grid": (list, [5, 20, 100], None, None),
        "seeds": (int, 20, lambda s: s >= 1, ">= 1"),
        "margin": (float, 1.05, lambda m: m > 1, "> 1"),
    },
    "montecarlo": {
        "n": (int, 5, lambda n: n >= 2, ">= 2"),
        "kappa": (float, 1.0, None, None),
        "r_star": (float, 0.2, _positive, "> 0"),
        "samples": (int, 10000, lambda s: s >= 1, ">= 1"),
        "step": (float, 0.01, _positive, "> 0"),
        "omega": (list, None, None, None),
    },
    "thresholds": {
        "r0": (float, None, _unit, "(0, 1]"),
        "gamma": (float, 2.0 / 3.0, lambda g: 0.5 < g <= 1, "(1/2, 1]"),
    },
}


def _coerce(key: str, value: Any, kind: type, check: Callable | None, admissible: str | None):
    if value is None:
        return None
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
    elif kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    elif kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(f"{key}: must be finite")
    elif kind is list:
        if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key}: expected a list of numbers, got {value!r}")
        value = [float(v) if isinstance(v, float) else v for v in value]
    elif kind is str and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    if check is not None and not check(value):
        raise ConfigError(f"{key}: value {value!r} out of range; admissible: {admissible}")
    return value


def _fill(section: str, raw: dict, schema: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected a mapping")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        name = f"{section}.{unknown[0]}" if section else unknown[0]
        raise ConfigError(f"unknown key {name!r}")
    out = {}
    for key, (kind, default, check, admissible) in schema.items():
        name = f"{section}.{key}" if section else key
        value = raw.get(key, copy.deepcopy(default))
        out[key] = _coerce(name, value, kind, check, admissible)
    return out


@dataclass
class RunConfig:
    command: str
    out: str = "kuralock-run"
    seed: int | None = None
    horizon: float | None = None
    kappa: float | None = None
    sample_dt: float = 0.05
    lock_tol: float = 1e-6
    signed: bool = False
    scenario: dict = field(default_factory=dict)
    integrator: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    suite: dict = field(default_factory=dict)
    montecarlo: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in _TOP}
        for section in _SECTIONS:
            d[section] = copy.deepcopy(getattr(self, section))
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def scenario_params(self) -> dict:
        params = {k: v for k, v in self.scenario.items() if k != "name" and v is not None}
        if self.kappa is not None:
            params["kappa"] = self.kappa
        return params


def validate(raw: dict, command: str | None = None) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = dict(raw)
    if command is not None:
        raw.setdefault("command", command)
    if raw.get("command") is None:
        raise ConfigError("command: missing; admissible: one of " + ", ".join(COMMANDS))
    unknown = sorted(set(raw) - set(_TOP) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}")
    top = _fill("", {k: v for k, v in raw.items() if k in _TOP}, _TOP)
    sections = {s: _fill(s, raw.get(s) or {}, schema) for s, schema in _SECTIONS.items()}
    cfg = RunConfig(**top, **sections)
    negative = (cfg.kappa is not None and cfg.kappa < 0) or (
        cfg.command == "montecarlo" and cfg.montecarlo["kappa"] < 0)
    if negative and not cfg.signed:
        raise ConfigError("kappa: value is negative; the coupling strength must be >= 0 "
                          "(set signed: true for the repulsive divergence analysis)")
    return cfg


def parse_config(text: str, command: str | None = None) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return validate(raw, command)


def load_config(path: str | os.PathLike, command: str | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), command)


# -- output ----------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_csv(path: Path, header: list[str], columns: list[np.ndarray]) -> None:
    data = np.column_stack([np.asarray(c, dtype=np.float64) for c in columns])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, data, fmt=CSV_FORMAT, delimiter=",")


def write_json(path: Path, record) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(record), fh, indent=2, sort_keys=True)
        fh.write("\n")


def trajectory_tables(traj) -> dict:
    """CSV tables describing a trajectory: raw phases and the diagnostic channels."""
    n = traj.n
    ch = traj.channels
    return {
        "trajectory.csv": (["t"] + [f"theta_{i + 1}" for i in range(n)],
                           [traj.times] + [traj.phases[:, i] for i in range(n)]),
        "channels.csv": (["t", "R", "phi", "Delta", "D_theta", "D_theta_dot", "V"],
                         [traj.times, ch["R"], ch["phi"], ch["Delta"], ch["D_theta"], ch["D_theta_dot"], ch["V"]]),
    }


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def emit_results(outdir: str | os.PathLike, tables: dict | None = None, records: dict | None = None,
                 config: RunConfig | None = None, version: str = "", wall_time: float = 0.0) -> Path:
    """Write CSV tables and JSON records, then the manifest.

    ``tables`` maps file name to ``(header, columns)``; ``records`` maps file
    name to a JSON-serialisable object.  On any IO failure no manifest is
    written.  Returns the manifest path.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (header, columns) in (tables or {}).items():
        write_csv(outdir / name, header, columns)
        written.append(name)
    for name, record in (records or {}).items():
        write_json(outdir / name, record)
        written.append(name)
    manifest = {
        "config": config.to_dict() if config is not None else None,
        "version": version,
        "wall_time": wall_time,
        "outputs": {name: sha256_file(outdir / name) for name in sorted(written)},
    }
    fd, tmp = tempfile.mkstemp(dir=outdir, prefix=".manifest-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, outdir / MANIFEST)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return outdir / MANIFEST
