"""Verdicts computed from trajectories: ensembles, locking, and numerical certificates.

Differential inequalities are certified with forward differences.  A forward
difference over ``[t_k, t_{k+1}]`` equals the average derivative there, so it
is compared with the right-hand side plus a slack equal to twice the largest
change of that right-hand side across the neighbouring samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from kuralock.dynamics import Trajectory, detect_collisions
from kuralock.errors import ParameterError
from kuralock.phase import (
    TWO_PI,
    EnsembleSelection,
    FrequencyVector,
    PhaseState,
    wrap_to_pi,
    wrapped_diameter,
)
from kuralock.thresholds import f_value, ordering_constant, phi_roots

DEFAULT_LOCK_TOL = 1e-6
DEFAULT_ORDER_TOL = 1e-3
#: absolute part of the finite-difference slack
SLACK_FLOOR = 1e-9


def trailing_window(kappa: float, horizon: float) -> float:
    """``max(20/kappa, 0.2 horizon)``, capped at a third of the horizon."""
    if kappa > 0:
        return min(max(20.0 / kappa, 0.2 * horizon), horizon / 3.0)
    return 0.2 * horizon


@dataclass(frozen=True)
class LockingVerdict:
    locked: bool
    rate: float
    final_freq_diameter: float
    collision_count: int
    asymptotic_diameter_estimate: float
    window: float = 0.0
    window_collisions: int = 0


@dataclass(frozen=True)
class EnsembleReport:
    selection: EnsembleSelection
    sup_diameter: float
    limsup_diameter: float
    phi1_bound: float
    ordered: bool


@dataclass(frozen=True)
class OrderingResult:
    ordered: bool
    slack: dict
    worst: float


# -- ensembles -------------------------------------------------------------------


def find_gamma_ensemble(theta: PhaseState, gamma: float, ell: float) -> EnsembleSelection | None:
    """Largest set of oscillators fitting in an arc of length ``ell``, if its fraction is >= gamma.

    Among maximal windows the one with the smallest achieved arclength wins,
    then the one starting at the smaller sorted position.
    """
    if not 0.5 < gamma <= 1.0:
        raise ParameterError(f"gamma must lie in (1/2, 1], got {gamma}")
    if not 0 < ell < TWO_PI:
        raise ParameterError(f"ell must lie in (0, 2pi), got {ell}")
    n = theta.n
    wrapped = np.mod(theta.phases, TWO_PI)
    order = np.argsort(wrapped, kind="stable")
    p = wrapped[order]
    ext = np.concatenate([p, p + TWO_PI])
    # two pointers: end[i] is one past the last point within ell of p[i]
    counts = np.empty(n, dtype=int)
    end = 0
    for i in range(n):
        end = max(end, i + 1)
        while end < i + n and ext[end] - p[i] <= ell:
            end += 1
        counts[i] = end - i
    m = int(counts.max())
    if m < gamma * n - 1e-9:
        return None
    spans = ext[np.arange(n) + m - 1] - p
    best = int(np.argmin(spans))
    idx = order[(best + np.arange(m)) % n]
    span = float(spans[best]) if m < n else wrapped_diameter(theta.phases)
    return EnsembleSelection(tuple(idx.tolist()), n, span)


def majority_ensemble_from_phase(theta: PhaseState, psi: float, beta: float):
    """Split indices into those within ``beta`` of ``psi`` on the circle and the rest.

    Either side is None when empty.
    """
    if not 0 < beta < math.pi / 2:
        raise ParameterError(f"beta must lie in (0, pi/2), got {beta}")
    dist = np.abs(wrap_to_pi(theta.phases - psi))
    inside = np.nonzero(dist <= beta)[0]
    outside = np.nonzero(dist > beta)[0]
    n = theta.n
    set_a = EnsembleSelection(tuple(inside.tolist()), n, wrapped_diameter(theta.phases[inside])) if inside.size else None
    set_b = EnsembleSelection(tuple(outside.tolist()), n, wrapped_diameter(theta.phases[outside])) if outside.size else None
    return set_a, set_b


def aligned_subset(phases: np.ndarray, indices, ref: int = 0) -> np.ndarray:
    """Lifted phases of ``indices`` shifted by multiples of 2pi so that at sample ``ref``
    they occupy their minimal covering arc.  ``phases`` has shape ``(K, N)``."""
    sub = phases[:, list(indices)]
    p = sub[ref]
    w = np.mod(p, TWO_PI)
    s = np.sort(w)
    if s.size > 1:
        gaps = np.append(np.diff(s), s[0] + TWO_PI - s[-1])
        start = s[(int(np.argmax(gaps)) + 1) % s.size]
    else:
        start = s[0]
    target = start + np.mod(w - start, TWO_PI)
    shift = TWO_PI * np.round((target - p) / TWO_PI)
    return sub + shift


def subset_diameter_series(traj: Trajectory, selection: EnsembleSelection, ref: int = 0) -> np.ndarray:
    aligned = aligned_subset(traj.phases, selection.indices, ref)
    return aligned.max(axis=1) - aligned.min(axis=1)


def track_ensemble(traj: Trajectory, selection: EnsembleSelection, gamma: float, d_omega_b: float,
                   window: float | None = None, tol: float = DEFAULT_ORDER_TOL) -> EnsembleReport:
    kappa = traj.params.kappa
    if window is None:
        window = trailing_window(kappa, traj.horizon)
    diam = subset_diameter_series(traj, selection)
    tail = traj.window(traj.times[-1] - window)
    phi1 = phi_roots(gamma, kappa, d_omega_b).phi1
    try:
        c = ordering_constant(gamma, kappa, d_omega_b)
        ordered = verify_ordering(traj, selection, traj.params.omega, kappa, c, tol, window).ordered
    except ParameterError:
        ordered = False
    return EnsembleReport(selection, float(diam.max()), float(diam[tail].max()), phi1, ordered)


# -- locking ---------------------------------------------------------------------


def _decay_rate(times: np.ndarray, values: np.ndarray) -> float:
    peak = float(values.max())
    if peak <= 0:
        return 0.0
    start = int(np.argmax(values < 1e-2 * peak)) if np.any(values < 1e-2 * peak) else values.size
    stop = int(np.argmax(values < 1e-11)) if np.any(values < 1e-11) else values.size
    if stop - start < 3:
        return 0.0
    slope = np.polyfit(times[start:stop], np.log(values[start:stop]), 1)[0]
    return max(0.0, -float(slope))


def detect_phase_locking(traj: Trajectory, lock_tol: float = DEFAULT_LOCK_TOL,
                         window: float | None = None) -> LockingVerdict:
    if window is None:
        window = trailing_window(traj.params.kappa, traj.horizon)
    if traj.horizon < 3 * window * (1 - 1e-12):
        raise ParameterError(f"horizon {traj.horizon} shorter than three windows of {window}")
    t_start = traj.times[-1] - window
    ch = traj.channels
    tail = traj.window(t_start)
    freq_diam = ch["D_theta_dot"]
    window_events = detect_collisions(traj, t_min=t_start)
    locked = bool(np.all(freq_diam[tail] < lock_tol)) and not window_events
    return LockingVerdict(
        locked=locked,
        rate=_decay_rate(traj.times, freq_diam),
        final_freq_diameter=float(freq_diam[-1]),
        collision_count=len(traj.events),
        asymptotic_diameter_estimate=float(ch["D_theta"][-1]),
        window=window,
        window_collisions=len(window_events),
    )


# -- differential inequalities ---------------------------------------------------


def _fd_slack(rhs: np.ndarray) -> np.ndarray:
    """Per-interval slack for comparing forward differences against ``rhs`` at the left node."""
    jump = np.abs(np.diff(rhs))
    left = np.concatenate([[0.0], jump[:-1]])
    right = np.concatenate([jump[1:], [0.0]])
    return 2.0 * np.maximum(jump, np.maximum(left, right)) + SLACK_FLOOR


def gronwall_check(traj: Trajectory, selection: EnsembleSelection, gamma: float,
                   d_omega_b: float, kappa: float) -> float:
    """Worst excess of the forward difference of D(Theta_A) over ``D(Omega_B) - kappa f(D(Theta_A))``.

    Samples where the aligned subset diameter reaches 2pi are skipped.
    Returns -inf when nothing could be checked.
    """
    diam = subset_diameter_series(traj, selection)
    rhs = d_omega_b - kappa * f_value(diam, gamma)
    fd = np.diff(diam) / np.diff(traj.times)
    excess = fd - rhs[:-1] - _fd_slack(rhs)
    ok = (diam[:-1] < TWO_PI) & (diam[1:] < TWO_PI)
    return float(excess[ok].max()) if np.any(ok) else -math.inf


def r_growth_check(traj: Trajectory, d_omega: float, kappa: float, r_floor: float = 0.05) -> float:
    """Worst excess of ``kappa sqrt(Delta)(R sqrt(Delta) - D/2kappa)`` over the forward difference of R."""
    ch = traj.channels
    r, delta = ch["R"], ch["Delta"]
    sd = np.sqrt(delta)
    rhs = kappa * r * delta - 0.5 * d_omega * sd
    fd = np.diff(r) / np.diff(traj.times)
    excess = rhs[:-1] - fd - _fd_slack(rhs)
    ok = (r[:-1] > r_floor) & (r[1:] > r_floor)
    return float(excess[ok].max()) if np.any(ok) else -math.inf


def well_prepared_time(traj: Trajectory, r0: float, d_omega: float, kappa: float) -> float | None:
    """Earliest sample with ``R >= r0`` and ``Delta <= (D / (kappa r0))^2 / 4``."""
    if r0 <= 0:
        raise ParameterError(f"r0 must be positive, got {r0}")
    if d_omega == 0:
        bound = math.inf
    elif kappa <= 0:
        bound = math.inf
    else:
        bound = 0.25 * (d_omega / (kappa * r0)) ** 2
    ch = traj.channels
    hit = np.nonzero((ch["R"] >= r0) & (ch["Delta"] <= bound))[0]
    return float(traj.times[hit[0]]) if hit.size else None


def verify_ordering(traj: Trajectory, selection: EnsembleSelection, omega: FrequencyVector, kappa: float,
                    c: float, tol: float = DEFAULT_ORDER_TOL, window: float | None = None) -> OrderingResult:
    """Check that locked phase gaps sit between ``(nu_i - nu_j)/kappa`` and ``c (nu_i - nu_j)/kappa``.

    Pairs with equal natural frequencies must have merged to within ``tol``.
    Slack is positive when a pair satisfies its bounds.
    """
    if window is None:
        window = trailing_window(kappa, traj.horizon)
    tail = traj.window(traj.times[-1] - window)
    nu = omega.freqs
    idx = selection.indices
    slack = {}
    for a, i in enumerate(idx):
        for j in idx[a + 1:]:
            if nu[i] < nu[j]:
                hi_i, lo_j = j, i
            else:
                hi_i, lo_j = i, j
            diff = wrap_to_pi(traj.phases[tail, hi_i] - traj.phases[tail, lo_j])
            gap = nu[hi_i] - nu[lo_j]
            if gap == 0:
                slack[(hi_i, lo_j)] = tol - float(np.max(np.abs(diff)))
            else:
                lower = gap / kappa - tol
                upper = c * gap / kappa + tol
                slack[(hi_i, lo_j)] = min(float(diff.min()) - lower, upper - float(diff.max()))
    worst = min(slack.values()) if slack else math.inf
    return OrderingResult(worst >= 0, slack, worst)
