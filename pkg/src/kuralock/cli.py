"""Command-line front end: ``kuralock <command> [--config FILE] [--seed N] [--out DIR] ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 a suite or verification assertion failed.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time

import numpy as np

from kuralock import __version__
from kuralock.diagnostics import (
    detect_phase_locking,
    find_gamma_ensemble,
    gronwall_check,
    r_growth_check,
    well_prepared_time,
)
from kuralock.dynamics import IntegratorConfig, integrate
from kuralock.errors import ConfigError, KuralockError, NumericalFailure, ParameterError
from kuralock.experiments import (
    build_scenario,
    default_horizon,
    instability_montecarlo,
    sweep_coupling,
    theorem32_suite,
)
from kuralock.io import COMMANDS, RunConfig, emit_results, load_config, trajectory_tables, validate
from kuralock.phase import FrequencyVector, order_parameter
from kuralock.thresholds import (
    certificate_constants,
    check_conditions,
    critical_coupling_vm,
    crude_bounds,
    min_kappa_star,
    pathwise_bounds,
    triple_coupling_constant,
)

logger = logging.getLogger("kuralock")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_ASSERTION = 0, 1, 2, 3
RANDOM_SCENARIOS = ("triple3", "uniform_random", "target_r0")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kuralock", description="Kuramoto phase-locking toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML/JSON run configuration")
        p.add_argument("--seed", type=int, help="master seed (required for stochastic runs)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--horizon", type=float, help="integration horizon in seconds")
        p.add_argument("--kappa", type=float, help="coupling strength")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config, args.command)
        if cfg.command != args.command:
            raise ConfigError(f"config is for command {cfg.command!r}, not {args.command!r}")
        raw = cfg.to_dict()
    else:
        raw = {"command": args.command}
    for key in ("seed", "out", "horizon", "kappa"):
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    return validate(raw)


def _integrator(cfg: RunConfig) -> IntegratorConfig:
    i = cfg.integrator
    return IntegratorConfig(i["method"], i["step"], i["rel_tol"], i["abs_tol"], i["max_step"])


def _needs_seed(cfg: RunConfig) -> bool:
    if cfg.command in ("montecarlo", "suite"):
        return True
    if cfg.command in ("simulate", "sweep", "verify"):
        return cfg.scenario["name"] in RANDOM_SCENARIOS and cfg.scenario.get("theta0") is None
    return False


def _scenario(cfg: RunConfig):
    return build_scenario(cfg.scenario["name"], cfg.scenario_params(), cfg.seed or 0)


def _simulate(cfg: RunConfig):
    scenario = _scenario(cfg)
    params = scenario.params()
    horizon = cfg.horizon or default_horizon(params.kappa)
    traj = integrate(scenario.initial_state(), params, _integrator(cfg), horizon, cfg.sample_dt)
    return scenario, params, traj


def run_simulate(cfg: RunConfig):
    _, params, traj = _simulate(cfg)
    verdict = detect_phase_locking(traj, cfg.lock_tol)
    events = traj.events
    tables = trajectory_tables(traj)
    tables["events.csv"] = (["i", "j", "t", "approach_rate"],
                            [[e.i for e in events], [e.j for e in events],
                             [e.t for e in events], [e.approach_rate for e in events]])
    records = {"verdict.json": {"locked": verdict.locked, "rate": verdict.rate,
                                "final_freq_diameter": verdict.final_freq_diameter,
                                "collision_count": verdict.collision_count,
                                "asymptotic_diameter_estimate": verdict.asymptotic_diameter_estimate,
                                "window": verdict.window, "horizon": traj.horizon,
                                "conservation_drift": traj.conservation_drift()}}
    return tables, records, EXIT_OK


def run_verify(cfg: RunConfig):
    scenario, params, traj = _simulate(cfg)
    d = params.omega.diameter
    verdict = detect_phase_locking(traj, cfg.lock_tol)
    r0 = order_parameter(traj.sample(0)).r
    gamma = cfg.thresholds["gamma"]
    sel = find_gamma_ensemble(traj.sample(0), gamma, math.pi)
    checks = {"r_growth_worst": r_growth_check(traj, d, params.kappa)}
    if sel is not None:
        checks["gronwall_worst"] = gronwall_check(traj, sel, gamma, d, params.kappa)
        checks["gronwall_ensemble"] = list(sel.indices)
    checks["well_prepared_time"] = well_prepared_time(traj, r0, d, params.kappa) if r0 > 0 else None
    checks["locked"] = verdict.locked
    checks["collision_count"] = verdict.collision_count
    checks["initial_r"] = r0
    failed = any(v > 0 for k, v in checks.items() if k.endswith("_worst"))
    records = {"verify.json": checks}
    return trajectory_tables(traj), records, EXIT_ASSERTION if failed else EXIT_OK


def run_sweep(cfg: RunConfig):
    scenario = _scenario(cfg)
    grid = sorted(float(k) for k in cfg.sweep["kappa_grid"])
    result = sweep_coupling(scenario, grid, cfg.horizon, cfg.sweep["trials"], _integrator(cfg), cfg.lock_tol)
    tables = {"sweep.csv": (["kappa", "locked_fraction"], [result.kappas, result.fractions])}
    records = {"sweep.json": {"scenario": scenario.name, "kappa_hat": result.kappa_hat,
                              "kappas": result.kappas, "fractions": result.fractions}}
    return tables, records, EXIT_OK


def run_thresholds(cfg: RunConfig):
    sc = cfg.scenario
    if sc.get("omega") is not None:
        omega = FrequencyVector(sc["omega"])
    else:
        omega = _scenario(cfg).omega
    d = omega.diameter
    lo, hi = crude_bounds(omega)
    r0 = cfg.thresholds["r0"]
    bounds = pathwise_bounds(max(omega.n, 2), d, r0)
    gamma = cfg.thresholds["gamma"]
    kmin, ell = min_kappa_star(gamma, d)
    record = {
        "n": omega.n, "d_omega": d,
        "kappa_c": critical_coupling_vm(omega),
        "crude_lower": lo, "crude_upper": hi,
        "triple_coupling": triple_coupling_constant() * d,
        "min_kappa_star": kmin, "min_kappa_star_ell": ell, "gamma": gamma,
        "n_bound": bounds.n_bound, "r0_bound": bounds.r0_bound, "combined": bounds.combined,
        "gamma_n": bounds.gamma_n,
        "certificate_constants": certificate_constants(),
    }
    if r0 is not None and cfg.kappa is not None and cfg.kappa > 0:
        rep = check_conditions(r0, cfg.kappa, d)
        record["conditions"] = {"ok": rep.ok, "passed": rep.passed, "slack": rep.slack,
                                "gamma": rep.gamma, "beta": rep.beta, "d_branch": rep.d_branch}
    return {}, {"thresholds.json": record}, EXIT_OK


def run_montecarlo(cfg: RunConfig):
    mc = cfg.montecarlo
    kappa = cfg.kappa if cfg.kappa is not None else mc["kappa"]
    horizon = cfg.horizon or 50.0
    omega = mc["omega"] if mc["omega"] is not None else None
    rep = instability_montecarlo(mc["n"], omega, kappa, mc["r_star"], horizon, mc["samples"], cfg.seed,
                                 step=mc["step"])
    tables = {"survival.csv": (["t", "surviving_fraction"], [rep.times, rep.surviving_fraction])}
    records = {"montecarlo.json": {"n": rep.n, "kappa": rep.kappa, "r_star": rep.r_star,
                                   "horizon": rep.horizon, "samples": rep.samples,
                                   "final_fraction": rep.surviving_fraction[-1],
                                   "fitted_decay_rate": rep.fitted_decay_rate,
                                   "predicted_rate": rep.predicted_rate, "acceptance": rep.acceptance,
                                   "fit_window": rep.fit_window}}
    return tables, records, EXIT_OK


def run_suite(cfg: RunConfig):
    s = cfg.suite
    rep = theorem32_suite(s["r0_grid"], [int(n) for n in s["n_grid"]], s["seeds"], s["margin"], cfg.seed)
    rows = rep.rows
    tables = {"suite.csv": (["r0", "n", "seed", "kappa", "r_initial", "horizon", "locked", "ensemble_found",
                             "ensemble_arclength", "arclength_bound", "ordering_ok", "ordering_slack"],
                            [[getattr(r, f) for r in rows] for f in
                             ("r0", "n", "seed", "kappa", "r_initial", "horizon", "locked", "ensemble_found",
                              "ensemble_arclength", "arclength_bound", "ordering_ok", "ordering_slack")])}
    records = {"suite.json": {"margin": rep.margin, "rows": len(rows), "failures": rep.failures,
                              "digest": rep.digest()}}
    return tables, records, EXIT_ASSERTION if rep.failures else EXIT_OK


HANDLERS = {
    "simulate": run_simulate,
    "verify": run_verify,
    "sweep": run_sweep,
    "thresholds": run_thresholds,
    "montecarlo": run_montecarlo,
    "suite": run_suite,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"kuralock: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if _needs_seed(cfg) and cfg.seed is None:
            raise ConfigError(f"command {cfg.command!r} is stochastic; pass --seed")
        if cfg.command in ("simulate", "verify") and cfg.kappa is None:
            raise ConfigError("kappa: missing; pass --kappa or set it in the config")
        start = time.perf_counter()
        tables, records, code = HANDLERS[cfg.command](cfg)
        emit_results(cfg.out, tables, records, cfg, __version__, time.perf_counter() - start)
    except (ConfigError, ParameterError, FileNotFoundError) as exc:
        print(f"kuralock: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"kuralock: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except KuralockError as exc:
        print(f"kuralock: error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return code


if __name__ == "__main__":
    sys.exit(main())
