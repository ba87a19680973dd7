"""Closed-form coupling thresholds and the quantities behind them.

The central object is the concave profile

    f(theta) = gamma sin(theta) - 2 (1 - gamma) sin(theta / 2),

whose level set ``f = D / kappa`` controls how tightly a majority ensemble of
fraction ``gamma`` stays together.  Everything else here (sufficient
couplings, the Verwoerd-Mason critical coupling, the ordering constant and the
parameter certificate for the ``1.6 D / R0^2`` coupling) is built on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from kuralock.errors import BracketError, NoAdmissibleRootsError, ParameterError
from kuralock.phase import FrequencyVector

#: root-bracket width at which bisection hands over to a single Newton step
ROOT_XTOL = 1e-14
#: round-off allowance for condition (d), whose first branch is an identity for R0 > 0.94
IDENTITY_ALLOWANCE = 1e-12
R0_SPLIT = 0.94


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not 0.5 < gamma <= 1.0:
        raise ParameterError(f"gamma must lie in (1/2, 1], got {gamma}")
    return gamma


def f_value(theta, gamma: float):
    return gamma * np.sin(theta) - 2.0 * (1.0 - gamma) * np.sin(0.5 * np.asarray(theta))


def f_prime(theta, gamma: float):
    return gamma * np.cos(theta) - (1.0 - gamma) * np.cos(0.5 * np.asarray(theta))


def theta_star(gamma: float) -> float:
    gamma = _check_gamma(gamma)
    c = (1.0 - gamma + math.sqrt((1.0 - gamma) ** 2 + 8.0 * gamma ** 2)) / (4.0 * gamma)
    return 2.0 * math.acos(min(c, 1.0))


def psi_zero(gamma: float) -> float:
    gamma = _check_gamma(gamma)
    return 2.0 * math.acos((1.0 - gamma) / gamma)


def f_at_half_zero(gamma: float) -> float:
    """f(arccos((1-gamma)/gamma)) by its closed form."""
    gamma = _check_gamma(gamma)
    return ((2 * gamma - 1) ** 1.5 / math.sqrt(2 * gamma)
            * (2 - gamma) / (math.sqrt(gamma / 2) + (1 - gamma)))


@dataclass(frozen=True)
class GronwallProfile:
    gamma: float
    theta_star: float
    f_max: float
    psi_zero: float
    f_half_zero: float

    def f(self, theta):
        return f_value(theta, self.gamma)


def f_profile(gamma: float) -> GronwallProfile:
    gamma = _check_gamma(gamma)
    ts = theta_star(gamma)
    return GronwallProfile(gamma, ts, float(f_value(ts, gamma)), psi_zero(gamma), f_at_half_zero(gamma))


@dataclass(frozen=True)
class RootPair:
    """The two solutions of ``f(phi) = D / kappa`` around the maximiser."""

    phi1: float
    phi2: float
    degenerate: bool = False


def bisect(func, lo: float, hi: float, xtol: float = ROOT_XTOL, max_iter: int = 400) -> float:
    """Plain bisection; ``func(lo)`` and ``func(hi)`` must differ in sign."""
    f_lo, f_hi = func(lo), func(hi)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if (f_lo > 0) == (f_hi > 0):
        raise BracketError("no sign change on bracket", lo, hi, f_lo, f_hi)
    for _ in range(max_iter):
        if hi - lo <= xtol:
            break
        mid = 0.5 * (lo + hi)
        f_mid = func(mid)
        if f_mid == 0.0:
            return mid
        if (f_mid > 0) == (f_lo > 0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _polish(x: float, level: float, gamma: float, lo: float, hi: float) -> float:
    slope = float(f_prime(x, gamma))
    if slope == 0.0:
        return x
    y = x - (float(f_value(x, gamma)) - level) / slope
    return y if lo <= y <= hi else x


def phi_roots(gamma: float, kappa: float, d_omega: float) -> RootPair:
    gamma = _check_gamma(gamma)
    if kappa <= 0:
        raise ParameterError(f"kappa must be positive, got {kappa}")
    if d_omega < 0:
        raise ParameterError(f"d_omega must be non-negative, got {d_omega}")
    prof = f_profile(gamma)
    if d_omega == 0:
        return RootPair(0.0, prof.psi_zero, degenerate=True)
    level = d_omega / kappa
    if level >= prof.f_max:
        raise NoAdmissibleRootsError(
            f"no admissible roots: D/kappa = {level:.6g} >= f_max = {prof.f_max:.6g} at gamma={gamma}")

    def g(x):
        return float(f_value(x, gamma)) - level

    lo1, hi1 = 1e-15, prof.theta_star
    lo2, hi2 = prof.theta_star, prof.psi_zero - 1e-15
    phi1 = _polish(bisect(g, lo1, hi1), level, gamma, lo1, hi1)
    phi2 = _polish(bisect(g, lo2, hi2), level, gamma, lo2, hi2)
    return RootPair(phi1, phi2)


def kappa_star(gamma: float, ell: float, d_omega: float) -> float:
    """Sufficient coupling ``D / f(ell)`` for an ensemble of arclength ``ell`` to stay bounded."""
    gamma = _check_gamma(gamma)
    if d_omega < 0:
        raise ParameterError(f"d_omega must be non-negative, got {d_omega}")
    upper = psi_zero(gamma)
    if not 0 < ell < upper:
        raise ParameterError(f"ell must lie in (0, {upper:.12g}) for gamma={gamma}, got {ell}")
    if d_omega == 0:
        return 0.0
    return d_omega / float(f_value(ell, gamma))


def min_kappa_star(gamma: float, d_omega: float) -> tuple[float, float]:
    """Minimum of :func:`kappa_star` over ``ell`` and its minimiser ``theta_star``."""
    prof = f_profile(gamma)
    return d_omega / prof.f_max, prof.theta_star


def critical_coupling_vm(omega: FrequencyVector) -> float:
    """Critical coupling for existence of a phase-locked state (Verwoerd-Mason).

    Solves ``2 sum sqrt(1 - nu^2/u^2) = sum 1/sqrt(1 - nu^2/u^2)`` for ``u`` by
    bisection on ``[|Omega|_inf, 2 |Omega|_inf]`` and returns
    ``N u / sum sqrt(1 - nu^2/u^2)``.  Frequencies are shifted to zero mean first.
    """
    if not isinstance(omega, FrequencyVector):
        omega = FrequencyVector(omega)
    nu = omega.freqs - omega.mean
    inf_norm = float(np.max(np.abs(nu)))
    if omega.diameter == 0 or inf_norm == 0:
        return 0.0
    ratio2 = nu * nu

    def g(u):
        s = np.sqrt(1.0 - ratio2 / (u * u))
        return float(2.0 * s.sum() - (1.0 / s).sum())

    nudge = 1e-12 * inf_norm
    u_star = bisect(g, inf_norm + nudge, 2.0 * inf_norm - nudge, xtol=4 * np.finfo(float).eps * inf_norm)
    s = np.sqrt(1.0 - ratio2 / (u_star * u_star))
    return float(nu.size * u_star / s.sum())


def crude_bounds(omega: FrequencyVector) -> tuple[float, float]:
    n, d = omega.n, omega.diameter
    return n / (2 * (n - 1)) * d if n > 1 else 0.0, d


@dataclass(frozen=True)
class PathwiseBounds:
    """Sufficient couplings for complete phase-locking.

    ``r0_bound`` is None when no positive initial order parameter is known.
    """

    r0_bound: float | None
    n_bound: float
    combined: float
    gamma_n: float


def gamma_n(n: int) -> float:
    return 0.5 + 0.35 / (R0_SPLIT * math.sqrt(n))


def pathwise_bounds(n: int, d_omega: float, r0: float | None = None) -> PathwiseBounds:
    if n < 2:
        raise ParameterError(f"need at least two oscillators, got n={n}")
    if d_omega < 0:
        raise ParameterError(f"d_omega must be non-negative, got {d_omega}")
    n_bound = 1.6 * n * d_omega
    if r0 is None or r0 <= 0:
        return PathwiseBounds(None, n_bound, n_bound, gamma_n(n))
    if r0 > 1:
        raise ParameterError(f"r0 must lie in (0, 1], got {r0}")
    r0_bound = 1.6 * d_omega / r0 ** 2
    return PathwiseBounds(r0_bound, n_bound, 1.6 * min(1.0 / r0 ** 2, n) * d_omega, gamma_n(n))


def ensemble_arclength_bound(gamma: float, kappa: float, d_omega: float) -> float:
    """Upper estimate ``3 pi / (4 (2 gamma - 1)) D / kappa`` of the smaller root."""
    gamma = _check_gamma(gamma)
    return 3.0 * math.pi / (4.0 * (2.0 * gamma - 1.0)) * d_omega / kappa


def gamma_beta_choice(r0: float) -> tuple[float, float]:
    """Ensemble fraction and half-width chosen from the initial order parameter."""
    if not 0 < r0 <= 1:
        raise ParameterError(f"r0 must lie in (0, 1], got {r0}")
    if r0 <= R0_SPLIT:
        gamma = 0.5 + 0.35 / R0_SPLIT * r0
        cos_beta = 1.0 - 0.4 / R0_SPLIT * r0
    else:
        gamma = 1.0 - 2.5 * (1.0 - r0)
        cos_beta = 0.6
    return gamma, math.acos(cos_beta)


@dataclass(frozen=True)
class ConditionReport:
    gamma: float
    beta: float
    passed: dict
    slack: dict
    d_branch: int | None

    @property
    def ok(self) -> bool:
        return all(self.passed.values())


def check_conditions(r0: float, kappa: float, d_omega: float) -> ConditionReport:
    """Evaluate the five conditions (a)-(e) that make the ``gamma_beta_choice`` work."""
    if kappa <= 0:
        raise ParameterError(f"kappa must be positive, got {kappa}")
    if d_omega < 0:
        raise ParameterError(f"d_omega must be non-negative, got {d_omega}")
    gamma, beta = gamma_beta_choice(r0)
    cb, sb = math.cos(beta), math.sin(beta)
    passed, slack = {}, {}

    slack["a"] = min(gamma - 0.5, 1.0 - gamma)
    passed["a"] = 0.5 < gamma <= 1.0

    if gamma > 0.5:
        slack["b"] = math.acos(1.0 / gamma - 1.0) - beta
    else:
        slack["b"] = -math.inf
    passed["b"] = slack["b"] > 0

    denom = 2.0 * sb * (gamma * cb - (1.0 - gamma))
    slack["c"] = kappa - d_omega / denom if denom > 0 else -math.inf
    passed["c"] = slack["c"] > 0

    branch1 = r0 - (gamma + (1.0 - gamma) * cb)
    branch2 = 1.0 + r0 - 2.0 * gamma - d_omega ** 2 / (4.0 * kappa ** 2 * r0 ** 2) / (1.0 - cb)
    if branch1 >= -IDENTITY_ALLOWANCE:
        d_branch, slack["d"] = 1, branch1
    elif branch2 >= 0:
        d_branch, slack["d"] = 2, branch2
    else:
        d_branch, slack["d"] = None, max(branch1, branch2)
    passed["d"] = d_branch is not None

    slack["e"] = f_at_half_zero(gamma) - d_omega / kappa if gamma > 0.5 else -math.inf
    passed["e"] = slack["e"] > 0
    return ConditionReport(gamma, beta, passed, slack, d_branch)


def ordering_constant(gamma: float, kappa: float, d_omega: float) -> float:
    """``pi / (2 sqrt 2 (gamma cos phi1 - (1 - gamma)))`` bounding locked phase differences."""
    gamma = _check_gamma(gamma)
    if kappa <= 0:
        raise ParameterError(f"kappa must be positive, got {kappa}")
    if d_omega / kappa >= f_at_half_zero(gamma):
        raise ParameterError(
            f"ordering condition fails: D/kappa = {d_omega / kappa:.6g} >= {f_at_half_zero(gamma):.6g}")
    phi1 = phi_roots(gamma, kappa, d_omega).phi1
    denom = gamma * math.cos(phi1) - (1.0 - gamma)
    if denom <= 0:
        raise ParameterError("ordering condition fails: non-positive denominator")
    return math.pi / (2.0 * math.sqrt(2.0) * denom)


# -- certificate curves of the 1.6 D / R0^2 coupling ---------------------------------


def step3_lhs(r0: float) -> float:
    """Left side of the reduced form of condition (c) at ``kappa = 1.6 D / R0^2``; >= 1 certifies."""
    if r0 <= R0_SPLIT:
        a = 0.4 / R0_SPLIT
        return (3.2 * math.sqrt(a) * math.sqrt(2 - a * r0)
                * (0.5 / (R0_SPLIT * math.sqrt(r0)) - 0.14 / R0_SPLIT ** 2 * math.sqrt(r0)))
    return 2.56 * (4 * r0 - 3.4) / r0 ** 2


def step5_lhs(r0: float) -> float:
    """Left side of the reduced form of condition (e) at ``kappa = 1.6 D / R0^2``; <= 1 certifies."""
    if r0 <= R0_SPLIT:
        k = 0.35 / R0_SPLIT
        return ((R0_SPLIT / 0.7) ** 1.5 / 1.6 * math.sqrt(r0) * math.sqrt(1 + 2 * k * r0)
                * (math.sqrt(0.25 + 0.35 / 1.88 * r0) + 0.5 - k * r0) / (1.5 - k * r0))
    return (r0 ** 2 * math.sqrt(5 * r0 - 3) * (math.sqrt(1.25 * r0 - 0.75) + 2.5 * (1 - r0))
            / (1.6 * (5 * r0 - 4) ** 1.5 * (3.5 - 2.5 * r0)))


def certificate_constants() -> dict:
    """Numerical constants of the case-by-case certificate, evaluated at their stated arguments.

    ``case_b_step3_slope_bracket`` is the bracket ``-4/0.94^2 + 6.8``; the
    derivative bound itself carries an extra factor 2.56.
    """
    s = R0_SPLIT
    k = 0.35 / s
    return {
        "case_a_step3_at_split": step3_lhs(s),
        "case_a_step4": 0.7 / s + s / (4 * 1.6 ** 2 * 0.4),
        "case_a_step5_logderiv_bound": 1 / (2 * s) - k * (1 - 1 / (4 * math.sqrt(0.425))) / 0.65,
        "case_a_step5_at_split": step5_lhs(s),
        "case_b_step3_slope_bracket": -4 / s ** 2 + 6.8,
        "case_b_step3_at_split": 2.56 * (4 * s - 3.4) / s ** 2,
        "case_b_step5_logderiv_bound": (2 / s + 5 / 3.4
                                        - (2.5 - 1.25 / (2 * math.sqrt(0.425))) / (math.sqrt(0.5) + 0.15) - 5),
        "case_b_step5_at_split": (s ** 2 * math.sqrt(5 * s - 3) * (math.sqrt(1.25 * s - 0.75) + 2.5 * (1 - s))
                                  / (1.6 * (5 * s - 4) ** 1.5 * (3.5 - 2.5 * s))),
    }


def triple_coupling_constant() -> float:
    """``sqrt(138 + 22 sqrt 33) / 4``, the minimal ``kappa_star(2/3, ., 1)``."""
    return math.sqrt(138 + 22 * math.sqrt(33)) / 4


def n3_arclength_bound_over_pi(kappa_over_d: float = 4.8) -> float:
    g = gamma_n(3)
    return 3 * math.pi / (4 * (2 * g - 1)) / kappa_over_d / math.pi
