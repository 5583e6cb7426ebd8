"""Analytic linear-polarization math over four-angle raw stacks.

A stack holds intensity images behind linear analyzers at 0, 45, 90 and
135 degrees. These four measurements determine the linear Stokes
components,

    s0 = i0 + i90,    s1 = i0 - i90,    s2 = i45 - i135,

the degree of linear polarization dolp = sqrt(s1^2 + s2^2) / s0 (clamped
to [0, 1]) and the polarization angle. Two angle conventions are
supported and must never be mixed within one pipeline:

    SWAPPED   aop = 1/2 * atan2(s1, s2)   (package default)
    STANDARD  aop = 1/2 * atan2(s2, s1)   (usual physics form)

Either result is folded into [-pi/4, pi/4] by shifting multiples of pi/2
(the angle is only defined modulo pi/2 under this parameterization).
Pixels darker than EPS_S0 get dolp = 0 and aop = 0 rather than noise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, ShapeError

EPS_S0 = 1e-8

S0_RANGE = (0.0, 2.0)
DOLP_RANGE = (0.0, 1.0)
AOP_RANGE = (-np.pi / 4, np.pi / 4)


class AopConvention(enum.Enum):
    """Argument order of the two-argument arctangent defining the angle."""

    SWAPPED = "swapped"
    STANDARD = "standard"

    @classmethod
    def coerce(cls, value) -> "AopConvention":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown aop convention {value!r} (swapped or standard)") from None


DEFAULT_CONVENTION = AopConvention.SWAPPED


class ParamKind(enum.Enum):
    S0 = "s0"
    DOLP = "dolp"
    AOP = "aop"


class InputStrategy(enum.Enum):
    """Which channels are fed to a downstream task network."""

    RAW4 = "raw4"
    S0_P_A = "s0_p_a"
    S0_P = "s0_p"
    P_ONLY = "p_only"
    S0_ONLY = "s0_only"

    @property
    def channel_count(self) -> int:
        return {"raw4": 4, "s0_p_a": 3, "s0_p": 2, "p_only": 1, "s0_only": 1}[self.value]

    @classmethod
    def coerce(cls, value) -> "InputStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(
                f"unknown input strategy {value!r} (raw4, s0_p_a, s0_p, p_only or s0_only)"
            ) from None


def _check_plane(arr, name):
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a 2-d image, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class RawStack:
    """Four analyzer-angle intensity images of one scene, equal shapes."""

    i0: np.ndarray
    i45: np.ndarray
    i90: np.ndarray
    i135: np.ndarray

    def __post_init__(self):
        planes = [self.i0, self.i45, self.i90, self.i135]
        names = ["i0", "i45", "i90", "i135"]
        shapes = set()
        for p, name in zip(planes, names):
            p = _check_plane(p, name)
            if (p < 0).any():
                raise InputError(f"{name} contains negative intensities")
            shapes.add(p.shape)
        if len(shapes) != 1:
            raise ShapeError(f"angle images disagree in shape: {sorted(shapes)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.i0.shape

    def channels(self) -> np.ndarray:
        """Stacked (4, H, W) array in analyzer-angle order 0, 45, 90, 135."""
        return np.stack([self.i0, self.i45, self.i90, self.i135])

    @classmethod
    def from_channels(cls, arr: np.ndarray) -> "RawStack":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != 4:
            raise ShapeError(f"expected a (4, H, W) stack, got shape {arr.shape}")
        return cls(arr[0], arr[1], arr[2], arr[3])


@dataclass(frozen=True)
class PolarParams:
    """Stokes components plus optionally derived dolp/aop planes."""

    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    dolp: np.ndarray | None = field(default=None)
    aop: np.ndarray | None = field(default=None)


def compute_stokes(stack: RawStack) -> PolarParams:
    """Linear Stokes components from the four analyzer intensities."""
    return PolarParams(
        s0=stack.i0 + stack.i90,
        s1=stack.i0 - stack.i90,
        s2=stack.i45 - stack.i135,
    )


def compute_dolp(params: PolarParams) -> np.ndarray:
    """Degree of linear polarization, clamped to [0, 1]; 0 where s0 < EPS_S0."""
    mag = np.sqrt(params.s1 * params.s1 + params.s2 * params.s2)
    dolp = np.divide(mag, params.s0, out=np.zeros_like(mag), where=params.s0 >= EPS_S0)
    return np.clip(dolp, 0.0, 1.0)


def fold_aop(angle: np.ndarray) -> np.ndarray:
    """Fold an angle into [-pi/4, pi/4] by +-pi/2 shifts."""
    a = np.where(angle > np.pi / 4, angle - np.pi / 2, angle)
    return np.where(a < -np.pi / 4, a + np.pi / 2, a)


def compute_aop(params: PolarParams, convention=DEFAULT_CONVENTION) -> np.ndarray:
    """Polarization angle in [-pi/4, pi/4]; 0 where s0 < EPS_S0."""
    convention = AopConvention.coerce(convention)
    if convention is AopConvention.SWAPPED:
        a = 0.5 * np.arctan2(params.s1, params.s2)
    else:
        a = 0.5 * np.arctan2(params.s2, params.s1)
    a = fold_aop(a)
    return np.where(params.s0 >= EPS_S0, a, 0.0)


def analyze(stack: RawStack, convention=DEFAULT_CONVENTION) -> PolarParams:
    """Full analytic decomposition of a raw stack."""
    p = compute_stokes(stack)
    dolp = compute_dolp(p)
    aop = compute_aop(p, convention)
    return PolarParams(s0=p.s0, s1=p.s1, s2=p.s2, dolp=dolp, aop=aop)


_RANGES = {
    ParamKind.S0: S0_RANGE,
    ParamKind.DOLP: DOLP_RANGE,
    ParamKind.AOP: AOP_RANGE,
}


def normalize_param(plane: np.ndarray, kind) -> np.ndarray:
    """Affine map of a parameter plane onto [0, 1], clamped at both ends.

    s0 maps from [0, 2], dolp is already unit range, aop maps from
    [-pi/4, pi/4]. The map is monotone and exact at the endpoints.
    """
    if not isinstance(kind, ParamKind):
        try:
            kind = ParamKind(str(kind).lower())
        except ValueError:
            raise ConfigError(f"unknown parameter kind {kind!r} (s0, dolp or aop)") from None
    lo, hi = _RANGES[kind]
    return np.clip((np.asarray(plane) - lo) / (hi - lo), 0.0, 1.0)


def strategy_channels(raws: np.ndarray, strategy, convention=DEFAULT_CONVENTION) -> np.ndarray:
    """Assemble network input channels for a batch of raw stacks.

    raws is (N, 4, H, W) in analyzer order; the result is (N, C, H, W)
    where C depends on the strategy. Raw intensities pass through
    unmodified; derived parameter channels are normalized to [0, 1].
    """
    strategy = InputStrategy.coerce(strategy)
    raws = np.asarray(raws)
    if raws.ndim != 4 or raws.shape[1] != 4:
        raise ShapeError(f"expected (N, 4, H, W) raw batch, got shape {raws.shape}")
    if strategy is InputStrategy.RAW4:
        return raws.copy()

    i0, i45, i90, i135 = raws[:, 0], raws[:, 1], raws[:, 2], raws[:, 3]
    p = PolarParams(s0=i0 + i90, s1=i0 - i90, s2=i45 - i135)
    chans = []
    if strategy in (InputStrategy.S0_P_A, InputStrategy.S0_P, InputStrategy.S0_ONLY):
        chans.append(normalize_param(p.s0, ParamKind.S0))
    if strategy in (InputStrategy.S0_P_A, InputStrategy.S0_P, InputStrategy.P_ONLY):
        chans.append(normalize_param(compute_dolp(p), ParamKind.DOLP))
    if strategy is InputStrategy.S0_P_A:
        chans.append(normalize_param(compute_aop(p, convention), ParamKind.AOP))
    return np.stack(chans, axis=1).astype(raws.dtype)


def assemble_strategy(stack: RawStack, strategy, convention=DEFAULT_CONVENTION) -> np.ndarray:
    """Single-stack variant of strategy_channels; returns (1, C, H, W)."""
    return strategy_channels(stack.channels()[None], strategy, convention)
