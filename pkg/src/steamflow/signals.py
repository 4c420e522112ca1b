"""Reference signals, sensor noise and step/tracking performance metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class MetricUndefinedError(ValueError):
    """A performance metric cannot be computed from the given trace."""

    def __init__(self, metric, reason):
        super().__init__(f"{metric} undefined: {reason}")
        self.metric = metric


@dataclass(frozen=True)
class ReferenceSignal:
    kind: str = "step"
    amplitude: float = 1.0
    start_time: float = 0.0
    frequency: float = 0.2
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("step", "sine"):
            raise ValueError(f"unknown reference kind {self.kind!r}")
        if not math.isfinite(self.amplitude):
            raise ValueError("amplitude must be finite")
        if self.kind == "sine" and not self.frequency > 0:
            raise ValueError("sine frequency must be > 0")

    @classmethod
    def step(cls, amplitude=1.0, start_time=0.0):
        return cls("step", amplitude, start_time)

    @classmethod
    def sine(cls, amplitude=4.0, frequency=0.2, phase=0.0):
        return cls("sine", amplitude, 0.0, frequency, phase)

    def __call__(self, t):
        return sample_reference(self, t)


def sample_reference(sig: ReferenceSignal, t):
    """Reference value at time ``t`` (scalar or array)."""
    t = np.asarray(t, dtype=float)
    if sig.kind == "step":
        out = np.where(t >= sig.start_time, sig.amplitude, 0.0)
    else:
        out = sig.amplitude * np.sin(sig.frequency * t + sig.phase)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NoiseConfig:
    """Band-limited sensor noise.

    ``amplitude`` is the nominal peak: the stationary standard deviation is
    ``amplitude / 4``, so excursions past ``amplitude`` are rare.
    """

    enabled: bool = False
    amplitude: float = 0.05
    correlation_time: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("noise amplitude must be >= 0")
        if not self.correlation_time > 0:
            raise ValueError("correlation_time must be > 0")


PEAK_TO_STD = 4.0


class NoiseGenerator:
    """First-order low-pass filtered Gaussian white noise, seeded."""

    def __init__(self, cfg: NoiseConfig, sample_time=0.1):
        self.cfg = cfg
        self.sample_time = sample_time
        self.pole = math.exp(-sample_time / cfg.correlation_time)
        self.gain = (cfg.amplitude / PEAK_TO_STD) * math.sqrt(1.0 - self.pole ** 2)
        self.reset()

    def reset(self):
        self._rng = np.random.default_rng(self.cfg.seed)
        # start in the stationary distribution so early samples are not attenuated
        self._value = (self.cfg.amplitude / PEAK_TO_STD) * self._rng.standard_normal()
        self._index = 0

    def __next__(self):
        if not self.cfg.enabled or self.cfg.amplitude == 0:
            self._index += 1
            return 0.0
        out = self._value
        self._value = self.pole * self._value + self.gain * self._rng.standard_normal()
        self._index += 1
        return float(out)

    def __iter__(self):
        return self

    def sequence(self, n):
        self.reset()
        return np.array([next(self) for _ in range(n)])


def noise_sample(cfg: NoiseConfig, t_index: int, sample_time=0.1) -> float:
    """Noise value at sample ``t_index`` (regenerates the sequence; use NoiseGenerator in loops)."""
    gen = NoiseGenerator(cfg, sample_time)
    value = 0.0
    for _ in range(int(t_index) + 1):
        value = next(gen)
    return value


@dataclass(frozen=True)
class StepMetrics:
    rise_time: float
    overshoot_pct: float
    settling_time: float
    steady_state: float


@dataclass(frozen=True)
class TrackMetrics:
    peak_value: float


def _crossing(t, y, level, start=0):
    """Linearly interpolated first time ``y`` reaches ``level`` at or after index ``start``."""
    idx = np.flatnonzero(y[start:] >= level)
    if idx.size == 0:
        return None
    i = start + idx[0]
    if i == 0 or y[i] == level:
        return t[i]
    y0, y1 = y[i - 1], y[i]
    return t[i - 1] + (level - y0) * (t[i] - t[i - 1]) / (y1 - y0)


def step_metrics(t, y, target=1.0, t_start=None, rise_band=(0.1, 0.9), settle_band=0.02,
                 tail_fraction=0.1, tail_tolerance=None, unsettled="raise") -> StepMetrics:
    """Rise (10-90 %), overshoot, settling (2 %) and steady state of a step response.

    The steady state is the mean of the trailing ``tail_fraction`` of the
    samples.  Settling time is the last exit from the band around it,
    measured from ``t_start`` (default ``t[0]``).  With ``tail_tolerance``
    set, a tail whose spread exceeds ``tail_tolerance * |target|`` raises.
    A trace still outside the band at its last sample raises, or with
    ``unsettled="inf"`` reports an infinite settling time.
    """
    if unsettled not in ("raise", "inf"):
        raise ValueError("unsettled must be 'raise' or 'inf'")
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.shape != y.shape or t.size < 2:
        raise ValueError("t and y must be equal-length sequences with at least two samples")
    if np.any(np.diff(t) <= 0):
        raise ValueError("t must be strictly increasing")
    t0 = t[0] if t_start is None else float(t_start)
    n_tail = max(1, int(math.ceil(tail_fraction * y.size)))
    tail = y[-n_tail:]
    ss = float(np.mean(tail))
    if tail_tolerance is not None and np.ptp(tail) > tail_tolerance * abs(target):
        raise MetricUndefinedError("steady_state", f"trailing samples vary by {np.ptp(tail):.4g}")
    if ss == 0 or not math.isfinite(ss):
        raise MetricUndefinedError("steady_state", "steady-state value is zero or non-finite")

    yn = y / ss  # response normalized so it rises towards +1
    begin = int(np.searchsorted(t, t0))
    lo = _crossing(t, yn, rise_band[0], begin)
    hi = _crossing(t, yn, rise_band[1], begin)
    if lo is None or hi is None:
        raise MetricUndefinedError("rise_time", "response never crosses the rise thresholds")
    rise = hi - lo

    overshoot = max(0.0, 100.0 * (float(np.max(yn[begin:])) - 1.0))

    outside = np.flatnonzero(np.abs(yn - 1.0) > settle_band)
    outside = outside[outside >= begin]
    if outside.size == 0:
        settling = max(0.0, t[begin] - t0)
    else:
        i = outside[-1]
        if i == y.size - 1:
            if unsettled == "raise":
                raise MetricUndefinedError("settling_time", "response is outside the band at the end of the run")
            settling = math.inf
        else:
            # interpolate to where the trace enters the band boundary it last left
            bound = 1.0 + settle_band if yn[i] > 1.0 else 1.0 - settle_band
            frac = (bound - yn[i]) / (yn[i + 1] - yn[i])
            settling = t[i] + frac * (t[i + 1] - t[i]) - t0
    return StepMetrics(float(rise), float(overshoot), float(settling), ss)


def track_metrics(y) -> TrackMetrics:
    """Peak of the second half of the run (startup transient excluded)."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("empty trace")
    return TrackMetrics(float(np.max(y[y.size // 2:])))
