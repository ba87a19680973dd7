"""Scenario catalog, coupling sweeps, the pathwise-coupling suite and the volume-instability experiment.

Randomness always flows from ``numpy.random.SeedSequence`` spawned on
``(master_seed, index)`` so a job gives the same numbers whether it runs
serially or on a process pool.  Worker count defaults to the
``KURALOCK_WORKERS`` environment variable.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import i0e, i1e

from kuralock.diagnostics import (
    DEFAULT_LOCK_TOL,
    DEFAULT_ORDER_TOL,
    LockingVerdict,
    detect_phase_locking,
    find_gamma_ensemble,
    subset_diameter_series,
    verify_ordering,
)
from kuralock.dynamics import IntegratorConfig, Trajectory, field_array, integrate, rk4_step
from kuralock.errors import ParameterError
from kuralock.phase import FrequencyVector, ModelParams, PhaseState, order_r, wrapped_diameter
from kuralock.thresholds import (
    bisect,
    ensemble_arclength_bound,
    f_profile,
    gamma_beta_choice,
    gamma_n,
    ordering_constant,
)

logger = logging.getLogger(__name__)

SCENARIOS = ("adler2", "nonsync4", "triple3", "uniform_random", "target_r0")
WORKERS_ENV = "KURALOCK_WORKERS"
R0_BAND = 0.01


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


def run_parallel(func: Callable, tasks: Sequence, workers: int | None = None) -> list:
    """``[func(t) for t in tasks]``, optionally on a process pool; order is preserved."""
    workers = worker_count(workers)
    if workers == 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, tasks))


def child_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


# -- scenarios -------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """A model instance.  Random scenarios redraw their initial state per trial."""

    name: str
    n: int
    omega: FrequencyVector
    theta0: PhaseState
    kappa: float | None = None
    seed: int = 0
    settings: dict = field(default_factory=dict)

    @property
    def random_start(self) -> bool:
        return self.name in ("triple3", "uniform_random", "target_r0")

    def params(self, kappa: float | None = None) -> ModelParams:
        kappa = self.kappa if kappa is None else kappa
        if kappa is None:
            raise ParameterError(f"scenario {self.name!r} has no coupling; pass kappa")
        return ModelParams(kappa, self.omega)

    def initial_state(self, trial: int = 0) -> PhaseState:
        if trial == 0 or not self.random_start:
            return self.theta0
        return _draw_theta0(self.name, self.n, self.settings, child_rng(self.seed, trial))


def random_omega(n: int, d_omega: float, rng: np.random.Generator) -> FrequencyVector:
    """Uniform frequencies rescaled to diameter ``d_omega`` and zero mean."""
    raw = rng.uniform(0.0, 1.0, n)
    if n == 1 or d_omega == 0:
        return FrequencyVector(np.zeros(n))
    raw = (raw - raw.min()) / (raw.max() - raw.min()) * d_omega
    return FrequencyVector(raw - raw.mean())


def _mean_resultant_inverse(target: float) -> float:
    """Von Mises concentration whose mean resultant length I1/I0 equals ``target``."""
    if target <= 0:
        return 0.0
    target = min(target, 0.999)
    return bisect(lambda k: float(i1e(k) / i0e(k)) - target, 0.0, 1e4, xtol=1e-10)


def sample_target_r0(n: int, r0: float, rng: np.random.Generator, one_sided: bool = False,
                     batch: int = 256, max_batches: int = 20000) -> np.ndarray:
    """Phases with ``|R - r0| < 0.01`` (or ``r0 <= R < r0 + 0.01`` when one-sided).

    Proposals are von Mises around a random direction with concentration tuned
    to the band centre, then filtered exactly.
    """
    lo, hi = (r0, r0 + R0_BAND) if one_sided else (r0 - R0_BAND, r0 + R0_BAND)
    hi = min(hi, 1.0 + 1e-15)
    centre = 0.5 * (lo + min(hi, 1.0))
    conc = _mean_resultant_inverse(centre)
    for _ in range(max_batches):
        mu = rng.uniform(-math.pi, math.pi, (batch, 1))
        theta = mu + rng.vonmises(0.0, conc, (batch, n)) if conc > 0 else rng.uniform(-math.pi, math.pi, (batch, n))
        r = order_r(theta)
        ok = np.nonzero((r >= lo) & (r < hi) if one_sided else (np.abs(r - r0) < R0_BAND))[0]
        if ok.size:
            return theta[ok[0]]
    raise ParameterError(f"could not sample R near {r0} for n={n}")


def _draw_theta0(name: str, n: int, settings: dict, rng: np.random.Generator) -> PhaseState:
    if name == "target_r0":
        return PhaseState(sample_target_r0(n, settings["r0"], rng, settings.get("one_sided", False)))
    theta = rng.uniform(-math.pi, math.pi, n)
    if name == "triple3" and settings.get("collision_prepared", True):
        theta[1] = theta[0]
    return PhaseState(theta)


def build_scenario(name: str, params: dict | None = None, seed: int = 0) -> Scenario:
    """Construct a named scenario.

    ``params`` keys: adler2 ``d``; nonsync4 ``nu_a``, ``nu_b``, ``alpha``;
    triple3 ``omega`` or ``d_omega``, ``collision_prepared``;
    uniform_random ``n``, ``omega`` or ``d_omega``; target_r0 ``n``, ``r0``,
    ``d_omega``, ``one_sided``.  Every scenario accepts ``kappa`` and
    ``theta0``.
    """
    params = dict(params or {})
    rng = child_rng(seed, 0)
    kappa = params.pop("kappa", None)
    theta0 = params.pop("theta0", None)
    if name == "adler2":
        d = float(params.get("d", 1.0))
        omega = FrequencyVector([d / 2, -d / 2])
        state = PhaseState(theta0 if theta0 is not None else [0.0, 0.0])
        return Scenario(name, 2, omega, state, kappa, seed, params)
    if name == "nonsync4":
        nu_a, nu_b = float(params.get("nu_a", 0.5)), float(params.get("nu_b", -0.5))
        if nu_a == nu_b:
            raise ParameterError("nonsync4 needs two distinct frequencies")
        alpha = float(params.get("alpha", 0.7))
        omega = FrequencyVector([nu_a, nu_a, nu_b, nu_b])
        state = PhaseState(theta0 if theta0 is not None else [0.0, math.pi, alpha, alpha + math.pi])
        return Scenario(name, 4, omega, state, kappa, seed, params)
    if name in ("triple3", "uniform_random", "target_r0"):
        n = 3 if name == "triple3" else int(params.get("n", 10))
        if n < 1:
            raise ParameterError(f"n must be positive, got {n}")
        if "omega" in params:
            omega = FrequencyVector(params["omega"])
            if omega.n != n:
                raise ParameterError(f"omega has {omega.n} entries but n={n}")
        else:
            omega = random_omega(n, float(params.get("d_omega", 1.0)), rng)
        if name == "target_r0":
            r0 = float(params.get("r0", 0.5))
            if not 0 < r0 <= 1:
                raise ParameterError(f"r0 must lie in (0, 1], got {r0}")
            params["r0"] = r0
        state = PhaseState(theta0) if theta0 is not None else _draw_theta0(name, n, params, rng)
        return Scenario(name, n, omega, state, kappa, seed, params)
    raise ParameterError(f"unknown scenario {name!r}; expected one of {', '.join(SCENARIOS)}")


def default_horizon(kappa: float, gamma: float = 1.0) -> float:
    fmax = f_profile(gamma).f_max
    if kappa <= 0:
        return 100.0
    return 50.0 * max(1.0 / kappa, 1.0 / (kappa * fmax))


def integrate_until_quasistationary(theta0: PhaseState, params: ModelParams, horizon: float,
                                    config: IntegratorConfig | None = None, lock_tol: float = DEFAULT_LOCK_TOL,
                                    max_doublings: int = 3, sample_dt: float | None = None):
    """Integrate and judge locking, doubling the horizon while the tail is still settling.

    A tail is treated as still settling when it is not locked but shows no
    collision either.
    """
    traj, verdict = None, None
    for _ in range(max_doublings + 1):
        dt = sample_dt if sample_dt is not None else min(0.05, horizon / 2000)
        traj = integrate(theta0, params, config, horizon, dt)
        verdict = detect_phase_locking(traj, lock_tol)
        if verdict.locked or verdict.window_collisions:
            break
        horizon *= 2
    return traj, verdict


# -- sweeps ----------------------------------------------------------------------


@dataclass(frozen=True)
class SweepResult:
    kappas: tuple
    fractions: tuple
    kappa_hat: float | None
    verdicts: tuple


def _sweep_task(task):
    scenario, kappa, trial, horizon, config, lock_tol = task
    params = scenario.params(kappa)
    hz = horizon if horizon is not None else default_horizon(kappa)
    doublings = 0 if horizon is not None else 3
    _, verdict = integrate_until_quasistationary(scenario.initial_state(trial), params, hz, config,
                                                 lock_tol, doublings)
    return verdict


def sweep_coupling(scenario: Scenario, kappa_grid: Sequence[float], horizon: float | None = None,
                   trials_per_point: int = 1, config: IntegratorConfig | None = None,
                   lock_tol: float = DEFAULT_LOCK_TOL, workers: int | None = None) -> SweepResult:
    """Fraction of locked trials per coupling and the smallest coupling with fraction one."""
    grid = [float(k) for k in kappa_grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ParameterError("kappa_grid must be sorted ascending")
    tasks = [(scenario, k, t, horizon, config, lock_tol) for k in grid for t in range(trials_per_point)]
    verdicts = run_parallel(_sweep_task, tasks, workers)
    fractions, per_k = [], []
    for a in range(len(grid)):
        chunk = verdicts[a * trials_per_point:(a + 1) * trials_per_point]
        per_k.append(tuple(chunk))
        fractions.append(sum(v.locked for v in chunk) / trials_per_point)
    kappa_hat = next((k for k, f in zip(grid, fractions) if f == 1.0), None)
    return SweepResult(tuple(grid), tuple(fractions), kappa_hat, tuple(per_k))


# -- batched fixed-step integration ------------------------------------------------


def integrate_batch_rk4(theta0: np.ndarray, omega: np.ndarray, kappa: float, step: float,
                        horizon: float, sample_every: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-step RK4 on a batch ``(M, N)``; returns sample times and phases ``(K, M, N)``."""
    n_steps = int(math.ceil(horizon / step - 1e-9))
    h = horizon / n_steps
    theta = np.array(theta0, dtype=np.float64)
    times, samples = [0.0], [theta]
    for k in range(1, n_steps + 1):
        theta = rk4_step(theta, omega, kappa, h)
        if k % sample_every == 0 or k == n_steps:
            times.append(k * h)
            samples.append(theta)
    return np.array(times), np.array(samples)


def trajectory_from_samples(times: np.ndarray, phases: np.ndarray, params: ModelParams,
                            config: IntegratorConfig | None = None) -> Trajectory:
    velocities = field_array(phases, params.omega.freqs, params.kappa)
    return Trajectory(times, phases, params, times, phases, velocities, config, times.size - 1)


# -- pathwise coupling suite -------------------------------------------------------


@dataclass(frozen=True)
class SuiteRow:
    r0: float
    n: int
    seed: int
    kappa: float
    r_initial: float
    horizon: float
    locked: bool
    ensemble_found: bool
    ensemble_arclength: float
    arclength_bound: float
    ordering_ok: bool
    ordering_slack: float
    digest: str

    @property
    def passed(self) -> bool:
        return self.locked and self.ensemble_found and self.ordering_ok


@dataclass(frozen=True)
class SuiteReport:
    margin: float
    rows: tuple

    @property
    def failures(self) -> int:
        return sum(not r.passed for r in self.rows)

    def digest(self) -> str:
        h = hashlib.sha256()
        for row in self.rows:
            h.update(row.digest.encode())
        return h.hexdigest()


def _suite_cell(task) -> list:
    r0, n, seeds, margin, master, lock_tol, order_tol = task
    d_omega = 1.0
    kappa = margin * 1.6 * d_omega / r0 ** 2
    gamma, _ = gamma_beta_choice(r0)
    bound = ensemble_arclength_bound(gamma, kappa, d_omega)
    c = ordering_constant(gamma, kappa, d_omega)
    thetas, omegas = [], []
    for s in seeds:
        rng = child_rng(master, hash_index(r0, n, s))
        omegas.append(random_omega(n, d_omega, rng).freqs)
        thetas.append(sample_target_r0(n, r0, rng, one_sided=True))
    thetas, omegas = np.array(thetas), np.array(omegas)
    step = min(0.01, 0.05 / kappa)
    horizon = default_horizon(kappa, gamma)
    for attempt in range(4):
        sample_every = max(1, int(round(horizon / step / 2000)))
        times, phases = integrate_batch_rk4(thetas, omegas, kappa, step, horizon, sample_every)
        rows, settling = [], False
        for m, s in enumerate(seeds):
            params = ModelParams(kappa, omegas[m])
            traj = trajectory_from_samples(times, phases[:, m, :], params, IntegratorConfig.fixed(step))
            verdict = detect_phase_locking(traj, lock_tol)
            settling |= not verdict.locked and verdict.window_collisions == 0
            rows.append(_judge_row(traj, verdict, r0, n, s, kappa, gamma, bound, c, thetas[m], order_tol))
        if not settling or attempt == 3:
            return rows
        horizon *= 2
    return rows


def hash_index(r0: float, n: int, seed: int) -> int:
    """Stable integer key for a suite cell, independent of Python's hash randomisation."""
    key = f"{r0:.12g}|{n}|{seed}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def _judge_row(traj, verdict: LockingVerdict, r0, n, seed, kappa, gamma, bound, c, theta0, order_tol) -> SuiteRow:
    window = verdict.window
    tail = traj.window(traj.times[-1] - window)
    start = tail.start
    sel = find_gamma_ensemble(traj.sample(start), gamma, bound)
    arclength = math.inf
    ordering_ok, ordering_slack = False, -math.inf
    if sel is not None:
        diam = subset_diameter_series(traj, sel, ref=start)[start:]
        arclength = float(diam.max())
        res = verify_ordering(traj, sel, traj.params.omega, kappa, c, order_tol, window)
        ordering_ok, ordering_slack = res.ordered, res.worst
    found = sel is not None and arclength <= bound
    digest = hashlib.sha256(traj.phases[-1].tobytes()).hexdigest()
    return SuiteRow(r0, n, int(seed), kappa, float(order_r(theta0)), traj.horizon, verdict.locked,
                    found, arclength, bound, ordering_ok, ordering_slack, digest)


def theorem32_suite(r0_grid: Sequence[float], n_grid: Sequence[int], seeds: Sequence[int] | int,
                    margin: float = 1.05, master_seed: int = 0, workers: int | None = None,
                    lock_tol: float = DEFAULT_LOCK_TOL, order_tol: float = DEFAULT_ORDER_TOL) -> SuiteReport:
    """Check locking, a tight majority ensemble and the ordering bounds at ``kappa = margin 1.6 D / R0^2``.

    Each ``(r0, n)`` cell integrates all its seeds as one fixed-step RK4 batch,
    so results do not depend on how cells are spread over workers.
    """
    if margin <= 1:
        raise ParameterError(f"margin must exceed 1, got {margin}")
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    tasks = [(float(r0), int(n), tuple(seeds), margin, master_seed, lock_tol, order_tol)
             for r0 in r0_grid for n in n_grid]
    cells = run_parallel(_suite_cell, tasks, workers)
    return SuiteReport(margin, tuple(row for cell in cells for row in cell))


@dataclass(frozen=True)
class TripleCheck:
    seed: int
    kappa: float
    locked: bool
    final_arclength: float
    arclength_bound: float


def three_oscillator_check(seeds: Sequence[int], kappa_over_d: float = 4.8 * 1.05, master_seed: int = 0,
                           step: float = 0.01) -> list[TripleCheck]:
    """N = 3 with ``kappa > 4.8 D``: generic data lock and the whole triple ends up in a short arc."""
    g = gamma_n(3)
    out = []
    for s in seeds:
        rng = child_rng(master_seed, s)
        omega = random_omega(3, 1.0, rng)
        theta = rng.uniform(-math.pi, math.pi, 3)
        kappa = kappa_over_d
        horizon = default_horizon(kappa, g)
        times, phases = integrate_batch_rk4(theta[None, :], omega.freqs, kappa, step, horizon, 10)
        traj = trajectory_from_samples(times, phases[:, 0, :], ModelParams(kappa, omega))
        verdict = detect_phase_locking(traj)
        final = wrapped_diameter(phases[-1, 0])
        out.append(TripleCheck(s, kappa, verdict.locked, final, ensemble_arclength_bound(g, kappa, 1.0)))
    return out


# -- volume instability ----------------------------------------------------------


@dataclass(frozen=True)
class MonteCarloReport:
    n: int
    kappa: float
    r_star: float
    horizon: float
    samples: int
    times: np.ndarray
    surviving_fraction: np.ndarray
    fitted_decay_rate: float
    predicted_rate: float
    acceptance: float
    fit_window: tuple


def _condition(r, r_star, kappa):
    return r < r_star if kappa >= 0 else r > r_star


def _draw_conditioned(n, r_star, kappa, seed, start, count, batch=64):
    """Rejection samples with one child generator per sample index."""
    out = np.empty((count, n))
    drawn = 0
    for a in range(count):
        rng = child_rng(seed, start + a)
        while True:
            cand = rng.uniform(-math.pi, math.pi, (batch, n))
            ok = np.nonzero(_condition(order_r(cand), r_star, kappa))[0]
            if ok.size:
                drawn += int(ok[0]) + 1
                out[a] = cand[ok[0]]
                break
            drawn += batch
            if drawn > 10 ** 6 and (a + 1) / drawn < 1e-4:
                raise ParameterError("conditioning too tight: rejection acceptance below 1e-4")
    return out, drawn


def _survival_chunk(task):
    n, omega, kappa, r_star, step, n_steps, seed, start, count = task
    theta, drawn = _draw_conditioned(n, r_star, kappa, seed, start, count)
    alive = np.ones(count, dtype=bool)
    survivors = np.empty(n_steps + 1, dtype=np.int64)
    survivors[0] = count
    for k in range(1, n_steps + 1):
        theta = rk4_step(theta, omega, kappa, step)
        alive &= _condition(order_r(theta), r_star, kappa)
        survivors[k] = alive.sum()
    return survivors, drawn


def fit_survival_rate(times: np.ndarray, fraction: np.ndarray, upper: float = 0.9, lower: float = 0.1):
    """Least-squares decay rate of ``log fraction`` on the earliest stretch inside ``[lower, upper]``.

    Returns ``(rate, (t_start, t_end))``; the rate is NaN with fewer than three points.
    """
    below_upper = np.nonzero(fraction <= upper)[0]
    if below_upper.size == 0:
        return math.nan, (math.nan, math.nan)
    a = int(below_upper[0])
    below_lower = np.nonzero(fraction[a:] < lower)[0]
    b = a + int(below_lower[0]) if below_lower.size else fraction.size
    if b - a < 3 or np.any(fraction[a:b] <= 0):
        return math.nan, (float(times[a]), float(times[b - 1]))
    slope = np.polyfit(times[a:b], np.log(fraction[a:b]), 1)[0]
    return -float(slope), (float(times[a]), float(times[b - 1]))


def instability_montecarlo(n: int, omega, kappa: float, r_star: float, horizon: float, samples: int,
                           seed: int, step: float = 0.01, workers: int | None = None,
                           chunk: int = 2500) -> MonteCarloReport:
    """Survival of uniformly drawn dispersed states under the flow.

    A sample survives up to ``t`` while its order parameter stayed below
    ``r_star`` (above, for negative coupling) at every step.
    """
    omega = np.zeros(n) if omega is None else np.asarray(omega.freqs if isinstance(omega, FrequencyVector) else omega,
                                                         dtype=np.float64)
    if omega.size != n:
        raise ParameterError(f"omega has {omega.size} entries but n={n}")
    if samples < 1 or horizon <= 0 or step <= 0:
        raise ParameterError("samples, horizon and step must be positive")
    if kappa > 0 and r_star >= 1 / math.sqrt(n):
        raise ParameterError(f"r_star must be below 1/sqrt(n) = {1 / math.sqrt(n):.6g} for positive coupling")
    if kappa < 0 and r_star <= 1 / math.sqrt(n):
        raise ParameterError(f"r_star must exceed 1/sqrt(n) = {1 / math.sqrt(n):.6g} for negative coupling")
    n_steps = int(math.ceil(horizon / step - 1e-9))
    h = horizon / n_steps
    tasks = [(n, omega, kappa, r_star, h, n_steps, seed, a, min(chunk, samples - a))
             for a in range(0, samples, chunk)]
    results = run_parallel(_survival_chunk, tasks, workers)
    survivors = sum(r[0] for r in results)
    drawn = sum(r[1] for r in results)
    times = h * np.arange(n_steps + 1)
    fraction = survivors / samples
    rate, window = fit_survival_rate(times, fraction)
    return MonteCarloReport(n, kappa, r_star, horizon, samples, times, fraction, rate,
                            kappa * (1 - n * r_star ** 2), samples / drawn, window)
