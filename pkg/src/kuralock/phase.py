"""Snapshot quantities of a Kuramoto configuration.

Phases are kept on the real line (the lift of the torus).  Diameters and total
phase are computed on the lifted values; reduction onto the circle only
happens in the functions that say ``wrapped`` in their name.

Array helpers (``centroid``, ``order_r``, ...) accept any array whose last axis
runs over oscillators, so a batch of states of shape ``(M, N)`` is handled in
one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from kuralock.errors import InvalidSelectionError, ParameterError, UndefinedPhaseError

FloatArray = NDArray[np.float64]

TWO_PI = 2.0 * math.pi
#: below this modulus the centroid angle carries no information
R_MIN_THRESHOLD = 1e-12
#: absolute tolerance of the algebraic identities, multiplied by N
IDENTITY_ATOL = 1e-12


def _as_vector(values: ArrayLike, name: str) -> FloatArray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ParameterError(f"{name} must contain at least one oscillator")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PhaseState:
    """Lifted phase vector at a given time."""

    phases: FloatArray
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "phases", _as_vector(self.phases, "phases"))
        object.__setattr__(self, "time", float(self.time))

    @property
    def n(self) -> int:
        return self.phases.size

    def wrapped(self) -> FloatArray:
        return wrap_to_pi(self.phases)


@dataclass(frozen=True)
class FrequencyVector:
    """Natural frequencies with cached mean and midrange."""

    freqs: FloatArray
    mean: float = field(init=False)
    midrange: float = field(init=False)

    def __post_init__(self):
        freqs = _as_vector(self.freqs, "freqs")
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "mean", float(np.mean(freqs)))
        object.__setattr__(self, "midrange", 0.5 * (float(freqs.min()) + float(freqs.max())))

    @property
    def n(self) -> int:
        return self.freqs.size

    @property
    def diameter(self) -> float:
        return float(self.freqs.max() - self.freqs.min())

    def subset_diameter(self, indices: Iterable[int]) -> float:
        sub = self.freqs[list(indices)]
        return float(sub.max() - sub.min())

    def is_normalized(self) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.freqs))))
        return abs(self.mean) <= 1e-12 * scale

    def normalized(self) -> "FrequencyVector":
        return FrequencyVector(self.freqs - self.mean)


@dataclass(frozen=True)
class OrderParameter:
    """Modulus and argument of the centroid of the unit-circle positions.

    The argument is only meaningful when ``defined`` is true; reading
    :attr:`psi` otherwise raises :class:`UndefinedPhaseError`.
    """

    r: float
    _psi: float
    defined: bool

    @property
    def psi(self) -> float:
        if not self.defined:
            raise UndefinedPhaseError(f"phase of the centroid is undefined at R={self.r:.3e}")
        return self._psi


@dataclass(frozen=True)
class EnsembleSelection:
    """A subset of oscillator indices (0-based) with its fraction and arclength."""

    indices: tuple
    n: int
    arclength: float = 0.0

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise InvalidSelectionError("selection is empty")
        if len(set(idx)) != len(idx):
            raise InvalidSelectionError(f"duplicate indices in {idx}")
        if min(idx) < 0 or max(idx) >= self.n:
            raise InvalidSelectionError(f"indices {idx} outside 0..{self.n - 1}")
        if self.arclength < 0:
            raise InvalidSelectionError("arclength must be non-negative")
        object.__setattr__(self, "indices", tuple(sorted(idx)))

    @property
    def gamma(self) -> float:
        return len(self.indices) / self.n

    @property
    def complement(self) -> tuple:
        chosen = set(self.indices)
        return tuple(i for i in range(self.n) if i not in chosen)

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class ModelParams:
    """Coupling strength and natural frequencies.

    ``signed=True`` admits a negative coupling, which only makes sense for the
    divergence/volume analysis of repulsive flows.
    """

    kappa: float
    omega: FrequencyVector
    signed: bool = False

    def __post_init__(self):
        if not isinstance(self.omega, FrequencyVector):
            object.__setattr__(self, "omega", FrequencyVector(self.omega))
        kappa = float(self.kappa)
        if not math.isfinite(kappa):
            raise ParameterError("kappa must be finite")
        if kappa < 0 and not self.signed:
            raise ParameterError(f"kappa must be non-negative (got {kappa}); pass signed=True to override")
        object.__setattr__(self, "kappa", kappa)

    @property
    def n(self) -> int:
        return self.omega.n


# -- array helpers ---------------------------------------------------------------


def wrap_to_pi(x: ArrayLike) -> FloatArray:
    """Map angles into (-pi, pi]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.mod(x + math.pi, TWO_PI) - math.pi
    return np.where(y == -math.pi, math.pi, y)


def centroid(theta: ArrayLike) -> NDArray[np.complex128]:
    theta = np.asarray(theta, dtype=np.float64)
    return np.mean(np.exp(1j * theta), axis=-1)


def order_r(theta: ArrayLike) -> FloatArray:
    return np.abs(centroid(theta))


def diameter_array(theta: ArrayLike) -> FloatArray:
    theta = np.asarray(theta, dtype=np.float64)
    return np.max(theta, axis=-1) - np.min(theta, axis=-1)


def wrapped_diameter_array(theta: ArrayLike) -> FloatArray:
    """Minimal covering-arc length along the last axis: 2*pi minus the widest gap."""
    p = np.sort(np.mod(np.asarray(theta, dtype=np.float64), TWO_PI), axis=-1)
    if p.shape[-1] == 1:
        return np.zeros(p.shape[:-1])
    gaps = np.diff(p, axis=-1)
    wrap_gap = p[..., :1] + TWO_PI - p[..., -1:]
    widest = np.maximum(np.max(gaps, axis=-1), wrap_gap[..., 0])
    return np.maximum(TWO_PI - widest, 0.0)


# -- snapshot operations ---------------------------------------------------------


def galilean_normalize(omega: FrequencyVector, theta: PhaseState):
    """Move to the frame co-rotating with the mean natural frequency.

    Returns ``(omega', theta', drift_rate)`` where ``omega'`` has zero mean and
    ``theta'_i = theta_i - t * mean``.
    """
    drift = omega.mean
    new_omega = FrequencyVector(omega.freqs - drift)
    new_theta = PhaseState(theta.phases - theta.time * drift, theta.time)
    return new_omega, new_theta, drift


def order_parameter(theta: PhaseState | ArrayLike) -> OrderParameter:
    phases = theta.phases if isinstance(theta, PhaseState) else np.asarray(theta, dtype=np.float64)
    z = complex(centroid(phases))
    r = min(abs(z), 1.0)
    psi = math.atan2(z.imag, z.real)
    if psi == -math.pi:
        psi = math.pi
    return OrderParameter(r, psi, r >= R_MIN_THRESHOLD)


def delta_functional(theta: PhaseState | ArrayLike, psi) -> float | FloatArray:
    """Mean squared sine distance of the phases from the line through ``psi``."""
    phases = theta.phases if isinstance(theta, PhaseState) else np.asarray(theta, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    return np.mean(np.sin(phases - psi[..., None]) ** 2, axis=-1)


def diameter(theta_subset: Sequence[float] | ArrayLike) -> float:
    """Lifted diameter ``max - min``."""
    arr = np.asarray(theta_subset, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise InvalidSelectionError("diameter of an empty selection")
    return float(arr.max() - arr.min())


def wrapped_diameter(theta_subset: Sequence[float] | ArrayLike) -> float:
    """Length of the shortest arc of the circle containing every phase."""
    arr = np.asarray(theta_subset, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise InvalidSelectionError("diameter of an empty selection")
    return float(wrapped_diameter_array(arr))


def potential(theta: PhaseState | ArrayLike, params: ModelParams) -> float | FloatArray:
    """Gradient-flow potential, evaluated through the order-parameter form.

    The pairwise double sum ``(kappa/2N) sum_{k,l} (1 - cos(theta_k - theta_l))``
    equals ``(kappa N / 2)(1 - R^2)``, which is what is used here (O(N)).
    """
    phases = theta.phases if isinstance(theta, PhaseState) else np.asarray(theta, dtype=np.float64)
    n = phases.shape[-1]
    r2 = np.abs(centroid(phases)) ** 2
    return -phases @ params.omega.freqs + 0.5 * params.kappa * n * (1.0 - r2)


def potential_pairwise(theta: PhaseState | ArrayLike, params: ModelParams) -> float:
    phases = theta.phases if isinstance(theta, PhaseState) else np.asarray(theta, dtype=np.float64)
    n = phases.size
    diff = phases[:, None] - phases[None, :]
    return float(-phases @ params.omega.freqs + params.kappa / (2 * n) * np.sum(1.0 - np.cos(diff)))


def divergence(theta: PhaseState | ArrayLike, params: ModelParams) -> float | FloatArray:
    """Divergence of the Kuramoto vector field, ``kappa (1 - N R^2)``.

    Does not depend on the natural frequencies.
    """
    phases = theta.phases if isinstance(theta, PhaseState) else np.asarray(theta, dtype=np.float64)
    n = phases.shape[-1]
    return params.kappa * (1.0 - n * np.abs(centroid(phases)) ** 2)
