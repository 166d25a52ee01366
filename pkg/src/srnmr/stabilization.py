"""Two-tier bias-field stabilization.

A fast loop reads a secondary magnetometer every ``1/fast_bandwidth`` and
applies a deadbeat (gain 1) proportional correction; a slow loop re-zeroes
the fast loop's setpoint every ``slow_period`` from a primary-sensor reading
of the field at the sample. The secondary sensor sees the sample field plus
an inter-sensor offset (linear drift and random walk) that only the slow loop
can remove.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .constants import CONSTANTS
from .signal import ConfigurationError, ResidualField, make_rng

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class DriftModel:
    """Field disturbance: coil random walk (T/sqrt(s)), white noise (T) and
    inter-sensor offset drift (T/s) plus its random walk (T/sqrt(s))."""

    random_walk_sigma: float = 0.0
    white_sigma: float = 0.0
    slow_drift_rate: float = 0.0
    inter_sensor_walk: float = 0.0

    def __post_init__(self):
        for name in ("random_walk_sigma", "white_sigma", "slow_drift_rate", "inter_sensor_walk"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"drift.{name}: must be >= 0")


@dataclass(frozen=True)
class LoopConfig:
    fast_bandwidth: float = 12.5
    slow_period: float = 300.0
    sensor_noise: float = 0.0
    primary_noise: float = 0.0
    actuator_resolution: float = 0.0
    enabled: bool = True
    slow_enabled: bool = True

    def __post_init__(self):
        if not self.fast_bandwidth > 0:
            raise ConfigurationError("loop.fast_bandwidth: must be positive")
        if not self.slow_period > 1.0 / self.fast_bandwidth:
            raise ConfigurationError("loop.slow_period: must exceed the fast-loop interval")
        if min(self.sensor_noise, self.primary_noise, self.actuator_resolution) < 0:
            raise ConfigurationError("loop noise/resolution: must be >= 0")


@dataclass
class LockResult:
    times: np.ndarray
    field_trace: np.ndarray  # residual deviation at the sample
    correction: np.ndarray
    setpoint_corrections: np.ndarray
    residual_rms: float
    end_of_interval: np.ndarray  # deviation just before each slow correction

    @property
    def end_of_interval_rms(self):
        if self.end_of_interval.size == 0:
            return math.nan
        return float(np.sqrt(np.mean(self.end_of_interval**2)))

    def to_residual(self):
        return ResidualField(self.times, self.field_trace)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("time_s,field_deviation_T,correction_T\n")
            for t, b, c in zip(self.times, self.field_trace, self.correction):
                fh.write(f"{t:.9g},{b:.9e},{c:.9e}\n")


def _walk(rng, sigma, n, dt):
    if sigma == 0:
        return np.zeros(n)
    steps = rng.normal(0.0, sigma * math.sqrt(dt), n)
    steps[0] = 0.0
    return np.cumsum(steps)


def simulate_lock(drift, loop, duration, dt, seed=None):
    """Simulate the residual field deviation at the sample.

    Parameters
    ----------
    drift : DriftModel
    loop : LoopConfig
    duration, dt : float
        Trace length and step (s); ``dt`` must be at most half the fast-loop
        interval and is snapped so the interval is a whole number of steps.

    Returns
    -------
    LockResult
    """
    if dt > 1.0 / (2.0 * loop.fast_bandwidth) * (1 + 1e-12):
        raise ConfigurationError("dt: must be <= 1/(2 fast_bandwidth)")
    if duration <= 0:
        raise ConfigurationError("duration: must be positive")
    rng = make_rng(seed)
    fast_steps = max(1, int(round(1.0 / (loop.fast_bandwidth * dt))))
    dt = 1.0 / (loop.fast_bandwidth * fast_steps)
    n = int(math.ceil(duration / dt)) + 1
    t = np.arange(n) * dt

    field = _walk(rng, drift.random_walk_sigma, n, dt)
    if drift.white_sigma > 0:
        field = field + rng.normal(0.0, drift.white_sigma, n)
    offset = drift.slow_drift_rate * t + _walk(rng, drift.inter_sensor_walk, n, dt)

    if not loop.enabled:
        return LockResult(t, field, np.zeros(n), np.zeros(0), float(np.sqrt(np.mean(field**2))), np.zeros(0))

    # deadbeat: the correction applied after fast sample k cancels the
    # measured deviation, c = setpoint - (field_k + offset_k + noise_k)
    k_idx = np.arange(0, n, fast_steps)
    meas = field[k_idx] + offset[k_idx] + rng.normal(0.0, loop.sensor_noise, k_idx.size) * (loop.sensor_noise > 0)
    hold = np.repeat(meas, fast_steps)[:n]
    hold = np.concatenate(([0.0] * fast_steps, hold))[:n]  # applied one interval later
    first = np.arange(n) < fast_steps
    correction = np.where(first, 0.0, -hold)

    slow_steps = int(round(loop.slow_period / dt))
    slow_idx = np.arange(slow_steps, n, slow_steps) if loop.slow_enabled else np.zeros(0, dtype=int)
    sp = 0.0
    levels = np.empty(slow_idx.size)
    corrections = []
    before = []
    prim = rng.normal(0.0, loop.primary_noise, slow_idx.size) if loop.primary_noise > 0 else np.zeros(slow_idx.size)
    for j, i in enumerate(slow_idx):
        dev = field[i] + correction[i] + (0.0 if first[i] else sp)
        before.append(dev)
        step = -(dev + prim[j])
        sp += step
        corrections.append(step)
        levels[j] = sp
    # the new setpoint holds from its correction sample until the next one
    setpoint = np.concatenate(([0.0], levels))[np.searchsorted(slow_idx, np.arange(n), side="right")]
    correction = correction + np.where(first, 0.0, setpoint)
    if loop.actuator_resolution > 0:
        correction = np.round(correction / loop.actuator_resolution) * loop.actuator_resolution
    residual = field + correction
    return LockResult(t, residual, correction, np.asarray(corrections), float(np.sqrt(np.mean(residual**2))),
                      np.asarray(before, dtype=float))


def broadening_from_noise(sigma):
    """Gaussian FWHM (Hz) of a proton line under a Gaussian field spread ``sigma`` (T)."""
    if sigma < 0:
        raise ValueError("sigma: must be >= 0")
    return FWHM_PER_SIGMA * sigma * CONSTANTS.gamma_p_freq


def inject_residual(sample, field_trace, duration=None):
    """Return ``sample`` with its line frequencies modulated by gamma_p * trace.

    ``field_trace`` may be a :class:`LockResult`, a :class:`ResidualField`, a
    ``(times, values)`` pair or a constant offset in tesla.
    """
    if isinstance(field_trace, LockResult):
        trace = field_trace.to_residual()
    elif isinstance(field_trace, ResidualField):
        trace = field_trace
    elif np.isscalar(field_trace):
        trace = ResidualField.constant(float(field_trace))
    else:
        times, values = field_trace
        trace = ResidualField(np.asarray(times, dtype=float), np.asarray(values, dtype=float))
    if duration is not None and len(trace.times) > 1 and trace.times[-1] < duration:
        raise ConfigurationError("field_trace: shorter than the sample duration")
    if not np.any(np.asarray(trace.values) != 0):
        return sample
    if sample.residual is not None:
        raise ConfigurationError("sample: already carries a residual field")
    return replace(sample, residual=trace)
