"""Vector field, time integration, Jacobian and collision events of the Kuramoto flow.

Two integrators are provided.  The fixed-step classical RK4 is bitwise
reproducible and its stepper works on batches of states; the Dormand-Prince
5(4) pair adapts its step to the requested tolerances and lands exactly on
every sample time.  Both record their step nodes ``(t, theta, theta_dot)`` so
the trajectory can be evaluated between nodes by cubic Hermite interpolation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from kuralock.errors import DimensionMismatchError, ParameterError, StepSizeUnderflow
from kuralock.phase import (
    TWO_PI,
    FloatArray,
    ModelParams,
    PhaseState,
    centroid,
    diameter_array,
    potential,
)

logger = logging.getLogger(__name__)

RK4 = "rk4"
RK45 = "rk45"


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = RK45
    step: float = 1e-2
    rel_tol: float = 1e-9
    abs_tol: float = 1e-11
    max_step: float = 1.0

    def __post_init__(self):
        if self.method not in (RK4, RK45):
            raise ParameterError(f"unknown integrator {self.method!r}; expected 'rk4' or 'rk45'")
        if not (self.step > 0 and self.max_step > 0):
            raise ParameterError("step and max_step must be positive")
        if self.step > self.max_step:
            raise ParameterError(f"step {self.step} exceeds max_step {self.max_step}")
        for name in ("rel_tol", "abs_tol"):
            tol = getattr(self, name)
            if not 0 < tol < 1:
                raise ParameterError(f"{name} must lie in (0, 1), got {tol}")

    @classmethod
    def fixed(cls, step: float) -> "IntegratorConfig":
        return cls(method=RK4, step=step, max_step=max(step, 1.0))


@dataclass(frozen=True)
class CollisionEvent:
    i: int
    j: int
    t: float
    approach_rate: float


# -- vector field ----------------------------------------------------------------


def field_array(theta: FloatArray, omega: FloatArray, kappa) -> FloatArray:
    """Mean-field evaluation on arrays; ``theta`` may carry leading batch axes.

    ``kappa`` is a scalar or has the batch shape of ``theta``.  Uses
    ``kappa * Im(z e^{-i theta_i})`` with the centroid ``z``, which equals
    ``-kappa R sin(theta_i - phi)`` and stays valid when R vanishes.
    """
    c = np.cos(theta)
    s = np.sin(theta)
    zc = np.mean(c, axis=-1, keepdims=True)
    zs = np.mean(s, axis=-1, keepdims=True)
    k = np.asarray(kappa, dtype=np.float64)
    if k.ndim:
        k = k[..., None]
    return omega + k * (zs * c - zc * s)


def rhs(theta: PhaseState | FloatArray, params: ModelParams, method: str = "meanfield") -> FloatArray:
    """Right-hand side of the Kuramoto system.

    ``method="direct"`` evaluates the O(N^2) pairwise sum and serves as an
    independent check of the default O(N) mean-field path.
    """
    phases = theta.phases if isinstance(theta, PhaseState) else np.asarray(theta, dtype=np.float64)
    if phases.shape[-1] != params.n:
        raise DimensionMismatchError(f"{phases.shape[-1]} phases but {params.n} frequencies")
    if method == "direct":
        n = phases.shape[-1]
        diff = phases[..., None, :] - phases[..., :, None]
        return params.omega.freqs + params.kappa / n * np.sum(np.sin(diff), axis=-1)
    if method != "meanfield":
        raise ParameterError(f"unknown rhs method {method!r}")
    return field_array(phases, params.omega.freqs, params.kappa)


def jacobian(theta: PhaseState | FloatArray, params: ModelParams) -> FloatArray:
    phases = theta.phases if isinstance(theta, PhaseState) else np.asarray(theta, dtype=np.float64)
    n = phases.size
    cos_diff = np.cos(phases[None, :] - phases[:, None])
    jac = params.kappa / n * cos_diff
    np.fill_diagonal(jac, 0.0)
    jac[np.diag_indices(n)] = -jac.sum(axis=1)
    return jac


# -- steppers --------------------------------------------------------------------


def rk4_step(theta, omega, kappa, h, k1=None):
    if k1 is None:
        k1 = field_array(theta, omega, kappa)
    k2 = field_array(theta + 0.5 * h * k1, omega, kappa)
    k3 = field_array(theta + 0.5 * h * k2, omega, kappa)
    k4 = field_array(theta + h * k3, omega, kappa)
    return theta + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# Dormand-Prince 5(4) tableau
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_E = _DP_B - np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def _dp_step(theta, f0, omega, kappa, h):
    stages = [f0]
    for a_row in _DP_A[1:]:
        incr = sum(a * k for a, k in zip(a_row, stages) if a != 0.0)
        stages.append(field_array(theta + h * incr, omega, kappa))
    new = theta + h * sum(b * k for b, k in zip(_DP_B, stages) if b != 0.0)
    err = h * sum(e * k for e, k in zip(_DP_E, stages))
    return new, stages[-1], err


# -- trajectories ----------------------------------------------------------------


def hermite(t, t0, t1, y0, y1, f0, f1):
    h = t1 - t0
    s = (t - t0) / h
    s2, s3 = s * s, s * s * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


@dataclass
class Trajectory:
    """Sampled lifted phases of one integration, with its step nodes.

    ``node_t``, ``node_theta`` and ``node_dtheta`` hold every accepted step so
    :meth:`state_at` can evaluate the solution anywhere in the horizon.
    """

    times: FloatArray
    phases: FloatArray
    params: ModelParams
    node_t: FloatArray
    node_theta: FloatArray
    node_dtheta: FloatArray
    config: IntegratorConfig | None = None
    n_steps: int = 0
    _events: list | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.phases.shape[1]

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def sample_dt(self) -> float:
        return float(np.median(np.diff(self.times))) if self.times.size > 1 else 0.0

    def sample(self, k: int) -> PhaseState:
        return PhaseState(self.phases[k], self.times[k])

    def final_state(self) -> PhaseState:
        return self.sample(-1)

    @cached_property
    def velocities(self) -> FloatArray:
        return field_array(self.phases, self.params.omega.freqs, self.params.kappa)

    @cached_property
    def channels(self) -> dict:
        """Diagnostic time series aligned with :attr:`times`."""
        z = centroid(self.phases)
        r = np.abs(z)
        phi = unwrap_phase_channel(np.angle(z), r)
        psi = np.angle(z)
        delta = np.mean(np.sin(self.phases - psi[:, None]) ** 2, axis=1)
        return {
            "R": r,
            "phi": phi,
            "Delta": delta,
            "D_theta": diameter_array(self.phases),
            "D_theta_dot": diameter_array(self.velocities),
            "V": potential(self.phases, self.params),
        }

    @property
    def events(self) -> list:
        if self._events is None:
            self._events = detect_collisions(self)
        return self._events

    def state_at(self, t: float) -> FloatArray:
        t = float(t)
        k = int(np.searchsorted(self.node_t, t, side="right")) - 1
        k = min(max(k, 0), self.node_t.size - 2)
        t0, t1 = self.node_t[k], self.node_t[k + 1]
        if t == t0:
            return self.node_theta[k].copy()
        if t == t1:
            return self.node_theta[k + 1].copy()
        return hermite(t, t0, t1, self.node_theta[k], self.node_theta[k + 1],
                       self.node_dtheta[k], self.node_dtheta[k + 1])

    def window(self, t_start: float) -> slice:
        k = int(np.searchsorted(self.times, t_start, side="left"))
        return slice(k, None)

    def conservation_drift(self) -> float:
        """max_t |sum theta(t) - sum theta(0) - t sum nu|."""
        total = self.phases.sum(axis=1)
        expected = total[0] + (self.times - self.times[0]) * self.params.omega.freqs.sum()
        return float(np.max(np.abs(total - expected)))


def unwrap_phase_channel(psi: FloatArray, r: FloatArray, r_floor: float = 0.05) -> FloatArray:
    """Continuity-based unwrapping of the centroid angle.

    Unwrapping is suspended (NaN) wherever R < ``r_floor`` and restarts from
    the principal value once R recovers.
    """
    out = np.full_like(psi, np.nan)
    good = r >= r_floor
    k = 0
    n = psi.size
    while k < n:
        if not good[k]:
            k += 1
            continue
        start = k
        while k < n and good[k]:
            k += 1
        out[start:k] = np.unwrap(psi[start:k])
    return out


def _sample_times(t0: float, horizon: float, sample_dt: float) -> FloatArray:
    count = int(math.ceil(horizon / sample_dt - 1e-9))
    times = t0 + sample_dt * np.arange(count + 1, dtype=np.float64)
    times[-1] = t0 + horizon
    return times


def drift_tolerance(horizon: float) -> float:
    return 1e-7 * (1.0 + horizon)


def integrate(theta0: PhaseState, params: ModelParams, config: IntegratorConfig | None = None,
              horizon: float = 10.0, sample_dt: float = 0.1) -> Trajectory:
    """Integrate from ``theta0`` over ``[t0, t0 + horizon]`` and sample every ``sample_dt``."""
    if config is None:
        config = IntegratorConfig()
    if horizon <= 0 or sample_dt <= 0:
        raise ParameterError("horizon and sample_dt must be positive")
    if theta0.n != params.n:
        raise DimensionMismatchError(f"{theta0.n} phases but {params.n} frequencies")
    times = _sample_times(theta0.time, horizon, sample_dt)
    if config.method == RK4:
        traj = _integrate_rk4(theta0, params, config, times)
    else:
        traj = _integrate_dp45(theta0, params, config, times)
    drift = traj.conservation_drift()
    if drift > drift_tolerance(horizon):
        logger.warning("conservation drift %.3e exceeds tolerance %.3e", drift, drift_tolerance(horizon))
    return traj


def _integrate_rk4(theta0, params, config, times):
    omega, kappa = params.omega.freqs, params.kappa
    theta = theta0.phases.copy()
    node_t, node_y, node_f = [times[0]], [theta], [field_array(theta, omega, kappa)]
    samples = [theta]
    for a, b in zip(times[:-1], times[1:]):
        m = max(1, int(math.ceil((b - a) / config.step - 1e-9)))
        h = (b - a) / m
        for j in range(1, m + 1):
            theta = rk4_step(theta, omega, kappa, h, k1=node_f[-1])
            node_t.append(b if j == m else a + j * h)
            node_y.append(theta)
            node_f.append(field_array(theta, omega, kappa))
        samples.append(theta)
    return Trajectory(times, np.array(samples), params, np.array(node_t), np.array(node_y),
                      np.array(node_f), config, len(node_t) - 1)


def _initial_step(y, f, config):
    scale = config.abs_tol + config.rel_tol * np.abs(y)
    d0 = np.sqrt(np.mean((y / scale) ** 2))
    d1 = np.sqrt(np.mean((f / scale) ** 2))
    h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    return min(h, config.step, config.max_step)


def _integrate_dp45(theta0, params, config, times):
    """Adaptive Dormand-Prince stepping that lands exactly on every sample time."""
    omega, kappa = params.omega.freqs, params.kappa
    t = float(times[0])
    y = theta0.phases.copy()
    f = field_array(y, omega, kappa)
    node_t, node_y, node_f = [t], [y], [f]
    samples = [y]
    h = _initial_step(y, f, config)
    safety, min_factor, max_factor = 0.9, 0.2, 5.0
    for target in times[1:]:
        target = float(target)
        while t < target:
            if h < 10 * np.finfo(float).eps * max(1.0, abs(t)):
                raise StepSizeUnderflow(f"step size underflow at t={t}", PhaseState(y, t))
            clipped = t + h >= target
            h_try = target - t if clipped else h
            y_new, f_new, err = _dp_step(y, f, omega, kappa, h_try)
            scale = config.abs_tol + config.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
            err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
            if err_norm <= 1.0:
                t = target if clipped else t + h_try
                y, f = y_new, f_new
                node_t.append(t)
                node_y.append(y)
                node_f.append(f)
                factor = max_factor if err_norm == 0 else min(max_factor, safety * err_norm ** -0.2)
                # a step shortened to hit a sample should not shrink the next proposal
                h = min(max(h, h_try * factor) if clipped else h_try * factor, config.max_step)
            else:
                h = h_try * max(min_factor, safety * err_norm ** -0.2)
        samples.append(y)
    return Trajectory(times, np.array(samples), params, np.array(node_t), np.array(node_y),
                      np.array(node_f), config, len(node_t) - 1)


# -- collisions ------------------------------------------------------------------


def detect_collisions(trajectory: Trajectory, t_min: float | None = None, time_tol: float = 1e-9,
                      pair_chunk: int = 2048) -> list[CollisionEvent]:
    """Instants where two oscillators with different natural frequencies coincide mod 2pi.

    Sign changes of ``theta_i - theta_j - 2 pi m`` between consecutive samples
    are refined by bisection on the Hermite dense output down to ``time_tol``.
    Grazing approaches without a crossing are not events.
    """
    times = trajectory.times
    if times.size < 2:
        return []
    sl = trajectory.window(t_min) if t_min is not None else slice(None)
    times = times[sl]
    phases = trajectory.phases[sl]
    nu = trajectory.params.omega.freqs
    ii, jj = np.triu_indices(trajectory.n, k=1)
    keep = nu[ii] != nu[jj]
    ii, jj = ii[keep], jj[keep]
    events = []
    for start in range(0, ii.size, pair_chunk):
        ci, cj = ii[start:start + pair_chunk], jj[start:start + pair_chunk]
        winding = np.floor((phases[:, ci] - phases[:, cj]) / TWO_PI)
        ks, ps = np.nonzero(winding[1:] != winding[:-1])
        for k, p in zip(ks, ps):
            w0, w1 = winding[k, p], winding[k + 1, p]
            lo_m, hi_m = (w0 + 1, w1) if w1 > w0 else (w1 + 1, w0)
            for m in np.arange(lo_m, hi_m + 1):
                events.append(_refine(trajectory, int(ci[p]), int(cj[p]), times[k], times[k + 1],
                                      TWO_PI * m, time_tol))
    events.sort(key=lambda e: (e.t, e.i, e.j))
    merged = []
    for ev in events:
        if merged and merged[-1].i == ev.i and merged[-1].j == ev.j and abs(merged[-1].t - ev.t) < time_tol:
            continue
        merged.append(ev)
    return merged


def _refine(trajectory, i, j, a, b, level, time_tol):
    def g(t):
        y = trajectory.state_at(t)
        return y[i] - y[j] - level

    ga = g(a)
    if ga == 0.0:
        b = a
    while b - a > time_tol:
        mid = 0.5 * (a + b)
        gm = g(mid)
        if (gm < 0) == (ga < 0) and gm != 0.0:
            a, ga = mid, gm
        else:
            b = mid
    t_event = 0.5 * (a + b)
    y = trajectory.state_at(t_event)
    rate = field_array(y, trajectory.params.omega.freqs, trajectory.params.kappa)
    return CollisionEvent(i, j, t_event, float(rate[i] - rate[j]))
