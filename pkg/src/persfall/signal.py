"""Signal-level helpers for tri-axial accelerometer traces.

Everything here is a pure function of its inputs. Traces are stored in
m/s^2 internally; ``convert_units`` is the single place where g-tagged
data is rescaled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

STANDARD_GRAVITY = 9.80665
HALF_WIDTH = 50
WINDOW_LEN = 2 * HALF_WIDTH + 1
FEATURE_LEN = 3 * WINDOW_LEN

UNITS_MS2 = "m/s^2"
UNITS_G = "g"
UNITS = (UNITS_MS2, UNITS_G)


class SignalError(ValueError):
    """Raised when a trace cannot support the requested operation."""


@dataclass(frozen=True)
class AccelSample:
    t: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise SignalError("non-finite acceleration component")
        if not self.t >= 0:
            raise SignalError("sample time must be >= 0")


@dataclass(frozen=True, eq=False)
class AccelTrace:
    """Uniformly sampled acceleration, one row per sample (columns x, y, z)."""

    xyz: np.ndarray
    rate_hz: float = 50.0
    units: str = UNITS_MS2

    def __post_init__(self):
        arr = np.array(self.xyz, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise SignalError(f"trace must be shaped (n, 3), got {arr.shape}")
        if arr.shape[0] < 1:
            raise SignalError("empty trace")
        if not np.all(np.isfinite(arr)):
            raise SignalError("trace contains non-finite values")
        if not self.rate_hz > 0:
            raise SignalError("rate_hz must be > 0")
        if self.units not in UNITS:
            raise SignalError(f"unknown units {self.units!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "xyz", arr)

    @classmethod
    def from_axes(cls, x: Sequence[float], y: Sequence[float], z: Sequence[float],
                  rate_hz: float = 50.0, units: str = UNITS_MS2) -> "AccelTrace":
        if not (len(x) == len(y) == len(z)):
            raise SignalError(
                f"axis lengths differ: x={len(x)}, y={len(y)}, z={len(z)}")
        return cls(np.column_stack([x, y, z]) if len(x) else np.empty((0, 3)),
                   rate_hz, units)

    @classmethod
    def from_samples(cls, samples: Sequence[AccelSample], rate_hz: float = 50.0,
                     units: str = UNITS_MS2) -> "AccelTrace":
        ts = [s.t for s in samples]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise SignalError("samples must be strictly time-ordered")
        return cls(np.array([[s.x, s.y, s.z] for s in samples]).reshape(-1, 3),
                   rate_hz, units)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, AccelTrace):
            return NotImplemented
        return (self.rate_hz == other.rate_hz and self.units == other.units
                and np.array_equal(self.xyz, other.xyz))

    @property
    def x(self) -> np.ndarray:
        return self.xyz[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.xyz[:, 1]

    @property
    def z(self) -> np.ndarray:
        return self.xyz[:, 2]

    def samples(self) -> list[AccelSample]:
        dt = 1.0 / self.rate_hz
        return [AccelSample(i * dt, *map(float, row)) for i, row in enumerate(self.xyz)]


@dataclass(frozen=True, eq=False)
class Window:
    """101 samples per axis around an SMV peak; ``start`` is the trace index of row 0."""

    xyz: np.ndarray
    peak_index: int
    start: int

    def __post_init__(self):
        if self.xyz.shape != (WINDOW_LEN, 3):
            raise SignalError(f"window must hold {WINDOW_LEN} samples per axis")

    @property
    def x(self) -> np.ndarray:
        return self.xyz[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.xyz[:, 1]

    @property
    def z(self) -> np.ndarray:
        return self.xyz[:, 2]


@dataclass(frozen=True)
class TiltConfig:
    settle_delay_s: float = 2.0
    avg_window_s: float = 1.0
    epsilon: float = 0.5
    strategy: str = "xy_atan2"

    def interval(self, peak: int, rate_hz: float) -> tuple[int, int]:
        """Half-open sample range averaged for the tilt estimate."""
        start = peak + int(round(self.settle_delay_s * rate_hz))
        n = max(1, int(round(self.avg_window_s * rate_hz)))
        return start, start + n


def smv(sample) -> float:
    """Signal magnitude vector of one sample (anything with x, y, z or a 3-sequence)."""
    if hasattr(sample, "x"):
        x, y, z = sample.x, sample.y, sample.z
    else:
        x, y, z = sample
    return math.sqrt(x * x + y * y + z * z)


def smv_series(trace: AccelTrace) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", trace.xyz, trace.xyz))


def find_peak(trace: AccelTrace) -> int:
    if len(trace) == 0:
        raise SignalError("empty trace")
    # np.argmax returns the first occurrence, which is the tie-break we want
    return int(np.argmax(smv_series(trace)))


def window_bounds(n: int, peak: int) -> tuple[int, int]:
    if n < WINDOW_LEN:
        raise SignalError(f"trace too short ({n} < {WINDOW_LEN} samples)")
    if not 0 <= peak < n:
        raise SignalError(f"peak index {peak} outside trace of length {n}")
    start = min(max(peak - HALF_WIDTH, 0), n - WINDOW_LEN)
    return start, start + WINDOW_LEN


def extract_window(trace: AccelTrace, peak: int) -> Window:
    """Cut the 101 samples centred on ``peak``, shifted inward at the trace edges."""
    start, stop = window_bounds(len(trace), peak)
    return Window(trace.xyz[start:stop].copy(), peak_index=peak, start=start)


def flatten(window: Window) -> np.ndarray:
    """Concatenate the x, y and z blocks into one 303-value feature vector."""
    return np.ascontiguousarray(window.xyz.T).reshape(FEATURE_LEN)


def trace_features(trace: AccelTrace) -> np.ndarray:
    return flatten(extract_window(trace, find_peak(trace)))


def _tilt_xy_atan2(mx: float, my: float, eps: float) -> float:
    ax, ay = abs(mx), abs(my)
    if ax < eps and ay < eps:
        return 90.0
    return math.degrees(math.atan2(ax, ay))


def _tilt_from_vertical(mx: float, my: float, eps: float) -> float:
    # alternate: angle of the x-y projection from the +y axis, sign kept
    if abs(mx) < eps and abs(my) < eps:
        return 90.0
    return abs(math.degrees(math.atan2(mx, my)))


TILT_STRATEGIES: dict[str, Callable[[float, float, float], float]] = {
    "xy_atan2": _tilt_xy_atan2,
    "from_vertical": _tilt_from_vertical,
}


def tilt_from_means(mean_x: float, mean_y: float, cfg: TiltConfig = TiltConfig()) -> float:
    try:
        fn = TILT_STRATEGIES[cfg.strategy]
    except KeyError:
        raise SignalError(f"unknown tilt strategy {cfg.strategy!r}") from None
    return fn(mean_x, mean_y, cfg.epsilon)


def tilt_angle(trace: AccelTrace, peak: int, cfg: TiltConfig = TiltConfig()) -> float:
    """Device tilt in degrees, from x/y means taken a settle delay after ``peak``."""
    start, stop = cfg.interval(peak, trace.rate_hz)
    if start < 0 or stop > len(trace):
        raise SignalError("insufficient post-peak data")
    seg = trace.xyz[start:stop]
    return tilt_from_means(float(seg[:, 0].mean()), float(seg[:, 1].mean()), cfg)


def convert_units(trace: AccelTrace) -> AccelTrace:
    if trace.units == UNITS_MS2:
        return trace
    return AccelTrace(trace.xyz * STANDARD_GRAVITY, trace.rate_hz, UNITS_MS2)
