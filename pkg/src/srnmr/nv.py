"""NV response to a field waveform over one magnetometry subsequence."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constants import CONSTANTS
from .signal import ConfigurationError, make_rng


@dataclass(frozen=True)
class PulseSequenceSpec:
    """Dynamical-decoupling subsequence with ideal, instantaneous pi pulses.

    Pulses sit at (j + 1/2) * pulse_spacing for j < n_pulses, so the toggling
    function is sign(cos(2 pi f0 t)) for pulse_spacing = 1/(2 f0).
    """

    family: str = "XY8"
    repetitions: int = 6
    pulse_spacing: float = 1.0 / (2 * 3.742e6)
    rabi_frequency: float = 16.6e6

    def __post_init__(self):
        if self.family not in ("XY8", "CPMG"):
            raise ConfigurationError(f"subsequence.family: unknown {self.family!r}")
        if self.repetitions < 1:
            raise ConfigurationError("subsequence.repetitions: must be >= 1")
        if not self.rabi_frequency > 0:
            raise ConfigurationError("subsequence.rabi_frequency: must be positive")
        if not self.pulse_spacing > self.pi_duration:
            raise ConfigurationError("subsequence.pulse_spacing: must exceed the pi-pulse duration")

    @property
    def n_pulses(self):
        return 8 * self.repetitions if self.family == "XY8" else self.repetitions

    @property
    def pi_duration(self):
        return 1.0 / (2.0 * self.rabi_frequency)

    @property
    def pi2_duration(self):
        return 1.0 / (4.0 * self.rabi_frequency)

    @property
    def duration(self):
        return self.n_pulses * self.pulse_spacing

    @property
    def center_frequency(self):
        return 1.0 / (2.0 * self.pulse_spacing)

    def pulse_times(self):
        return (np.arange(self.n_pulses) + 0.5) * self.pulse_spacing

    def segments(self):
        """(start, stop, sign) of every constant-sign toggling interval."""
        edges = np.concatenate(([0.0], self.pulse_times(), [self.duration]))
        signs = np.where(np.arange(self.n_pulses + 1) % 2 == 0, 1.0, -1.0)
        return edges[:-1], edges[1:], signs


@dataclass(frozen=True)
class SensorModel:
    contrast: float = 0.07
    photons_per_readout: float = 6.0e7
    readout_mode: str = "ensemble-gaussian"
    gyromagnetic_nv: float = CONSTANTS.gamma_nv_freq
    pair_subtraction: bool = True

    def __post_init__(self):
        if not 0 < self.contrast < 1:
            raise ConfigurationError("sensor.contrast: must lie in (0, 1)")
        if not self.photons_per_readout > 0:
            raise ConfigurationError("sensor.photons_per_readout: must be positive")
        if self.readout_mode not in ("single-shot-poisson", "ensemble-gaussian"):
            raise ConfigurationError(f"sensor.readout_mode: unknown {self.readout_mode!r}")


def toggling_phase(field, seq, t0=0.0, gamma_nv=CONSTANTS.gamma_nv_freq, nodes=32):
    """2 pi gamma_NV times the toggling-weighted integral of ``field`` over the subsequence.

    ``field`` is a callable of absolute time (vectorized). Each constant-sign
    interval is integrated with Gauss-Legendre quadrature.
    """
    a, b, s = seq.segments()
    x, w = np.polynomial.legendre.leggauss(nodes)
    half = 0.5 * (b - a)
    t = t0 + a[:, None] + half[:, None] * (x[None, :] + 1.0)
    vals = np.asarray(field(t), dtype=float)
    integral = float(np.sum(s * half * (vals @ w)))
    return 2.0 * math.pi * gamma_nv * integral


def filter_response(seq, frequency, decay_rate=0.0):
    """K = integral over the subsequence of s(u) exp((i 2 pi f - decay_rate) u) du.

    The phase from a field Re[A exp(i 2 pi f u - decay_rate u)] is
    2 pi gamma_NV Re[A K]. Vectorized over ``frequency``.
    """
    f = np.asarray(frequency, dtype=float)
    z = (2j * np.pi * f - decay_rate)[..., None]
    a, b, s = seq.segments()
    small = np.abs(z) * seq.duration < 1e-8
    zs = np.where(small, 1.0, z)
    exact = (np.exp(zs * b) - np.exp(zs * a)) / zs
    series = (b - a) + 0.5 * z * (b**2 - a**2)
    return np.sum(s * np.where(small, series, exact), axis=-1)


def two_pi_field(f, n_pulses):
    """Resonant amplitude giving 2 pi phase: 2 hbar pi^2 f / (g mu_B N)."""
    if not f > 0 or n_pulses < 1:
        raise ValueError("two_pi_field: need f > 0 and n_pulses >= 1")
    c = CONSTANTS
    return 2.0 * c.hbar * math.pi**2 * f / (c.g_nv * c.mu_b * n_pulses)


def readout_mean(phase, sensor, polarity):
    return 1.0 - 0.5 * sensor.contrast * (1.0 + polarity * np.sin(phase))


def readout(phase, sensor, polarity, seed=None):
    """Normalized fluorescence sample(s) for the given accumulated phase(s)."""
    rng = make_rng(seed)
    mean = readout_mean(np.asarray(phase, dtype=float), sensor, polarity)
    n = sensor.photons_per_readout
    if sensor.readout_mode == "single-shot-poisson":
        return rng.poisson(n * mean) / n
    return mean + rng.normal(0.0, 1.0, np.shape(mean)) / math.sqrt(n)


def readout_noise_std(sensor):
    """Standard deviation of one (possibly pair-subtracted) series sample."""
    per = 1.0 / math.sqrt(sensor.photons_per_readout)
    return per * math.sqrt(2.0) if sensor.pair_subtraction else per


def field_slope(sensor, seq):
    """d(series sample)/d(resonant field amplitude) at zero phase, in 1/T."""
    dphi_db = 2.0 * sensor.gyromagnetic_nv * seq.n_pulses / seq.center_frequency
    scale = sensor.contrast if sensor.pair_subtraction else 0.5 * sensor.contrast
    return scale * dphi_db


def sensitivity_estimate(sensor, tau_sr, seq):
    """Field amplitude matching the shot-noise spectral floor of a 1 s record (T/sqrt(Hz)).

    A tone of amplitude b gives a periodogram peak n b slope / 2 while white
    noise of per-sample std sigma gives an RMS bin of sqrt(n) sigma; equating
    them for n = 1 s / dt yields 2 sigma sqrt(dt) / slope.
    """
    if not tau_sr > 0:
        raise ValueError("tau_sr: must be positive")
    dt = 2.0 * tau_sr if sensor.pair_subtraction else tau_sr
    return 2.0 * readout_noise_std(sensor) * math.sqrt(dt) / field_slope(sensor, seq)
