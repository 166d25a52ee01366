"""Time-domain magnetic signal sources.

A :class:`SampleModel` is a sum of spectral lines, optionally dephased by a
static isochromat ensemble, refocused by ideal proton pi pulses, perturbed by
a residual field trace and overlaid with additive field noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .constants import CONSTANTS


class ConfigurationError(ValueError):
    """Invalid model or scenario configuration."""


def make_rng(seed):
    """Return a Generator from an int, SeedSequence, Generator or None."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class SpectralLine:
    """One precessing magnetization component.

    ``t_on`` and ``t_off`` gate the line (used for calibration reference
    pulses); the decay envelope is always measured from t = 0.
    """

    frequency: float
    amplitude: float
    phase0: float = 0.0
    t2: float = math.inf
    t_on: float = 0.0
    t_off: float = math.inf

    def __post_init__(self):
        if not self.frequency > 0:
            raise ConfigurationError("frequency: must be positive")
        if not self.amplitude >= 0:
            raise ConfigurationError("amplitude: must be non-negative")
        if not self.t2 > 0:
            raise ConfigurationError("t2: must be positive or infinite")
        if not 0 <= self.t_on < self.t_off:
            raise ConfigurationError("t_on/t_off: need 0 <= t_on < t_off")

    def envelope(self, t):
        t = np.asarray(t, dtype=float)
        env = np.exp(-t / self.t2) if math.isfinite(self.t2) else np.ones_like(t)
        gate = (t >= self.t_on) & (t < self.t_off)
        return self.amplitude * env * gate


@dataclass(frozen=True)
class IsochromatEnsemble:
    """Static frequency-offset distribution sampled at equal-weight quantiles."""

    n_isochromats: int = 16384
    kind: str = "lorentzian"
    width: float = 0.0  # FWHM in Hz

    def __post_init__(self):
        if self.n_isochromats < 1:
            raise ConfigurationError("n_isochromats: must be >= 1")
        if self.kind not in ("lorentzian", "gaussian"):
            raise ConfigurationError(f"offset_distribution.kind: unknown {self.kind!r}")
        if not self.width >= 0:
            raise ConfigurationError("offset_distribution.width: must be >= 0")

    @property
    def offsets(self):
        n = self.n_isochromats
        if self.width == 0:
            return np.zeros(n)
        u = (np.arange(n) + 0.5) / n
        if self.kind == "lorentzian":
            return 0.5 * self.width * np.tan(np.pi * (u - 0.5))
        sigma = self.width / (2.0 * math.sqrt(2.0 * math.log(2.0)))
        return sigma * stats.norm.ppf(u)

    @property
    def weights(self):
        return np.full(self.n_isochromats, 1.0 / self.n_isochromats)


@dataclass(frozen=True)
class PiPulseSchedule:
    times: tuple = ()

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.size and (np.any(t < 0) or np.any(np.diff(t) <= 0)):
            raise ConfigurationError("pi_schedule.times: must be non-negative and strictly increasing")

    def effective_time(self, t):
        """Offset-phase clock: negated at each pulse, then advancing at unit rate."""
        t = np.asarray(t, dtype=float)
        tau = t.copy()
        for tp in self.times:
            after = t >= tp
            # tau(tp+) = -tau(tp-); tau continues with slope 1 afterwards
            tau = np.where(after, -(tau - (t - tp)) + (t - tp), tau)
        return tau


@dataclass(frozen=True)
class FieldNoise:
    """Additive field noise; ``sigma`` is T for white and T/sqrt(s) for random walk."""

    kind: str = "white"
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("white", "random-walk"):
            raise ConfigurationError(f"field_noise.kind: unknown {self.kind!r}")
        if not self.sigma >= 0:
            raise ConfigurationError("field_noise.sigma: must be >= 0")

    def sample(self, t, rng):
        t = np.asarray(t, dtype=float)
        if self.sigma == 0:
            return np.zeros_like(t)
        if self.kind == "white":
            return rng.normal(0.0, self.sigma, t.shape)
        order = np.argsort(t, kind="stable")
        ts = t[order]
        steps = np.diff(np.concatenate(([0.0], ts)))
        walk = np.cumsum(rng.normal(0.0, 1.0, ts.shape) * self.sigma * np.sqrt(steps))
        out = np.empty_like(t)
        out[order] = walk
        return out


@dataclass(frozen=True)
class ResidualField:
    """Bias-field deviation seen by the sample, as a piecewise-linear trace."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.times) != len(self.values) or len(self.times) < 1:
            raise ConfigurationError("residual trace: times and values must match")

    @classmethod
    def constant(cls, delta_b):
        return cls(np.array([0.0]), np.array([float(delta_b)]))

    def phase(self, t, gamma=CONSTANTS.gamma_p_freq):
        """Extra precession phase 2 pi gamma integral of the trace from 0 to t."""
        t = np.asarray(t, dtype=float)
        if len(self.times) == 1:
            return 2.0 * np.pi * gamma * self.values[0] * t
        tt = np.asarray(self.times, dtype=float)
        vv = np.asarray(self.values, dtype=float)
        cum = np.concatenate(([0.0], np.cumsum(0.5 * (vv[1:] + vv[:-1]) * np.diff(tt))))
        # integral from times[0]; hold end values outside the trace
        idx = np.clip(np.searchsorted(tt, t, side="right") - 1, 0, len(tt) - 2)
        dt = t - tt[idx]
        slope = (vv[idx + 1] - vv[idx]) / (tt[idx + 1] - tt[idx])
        inside = cum[idx] + vv[idx] * dt + 0.5 * slope * dt**2
        before = vv[0] * (t - tt[0])
        after = cum[-1] + vv[-1] * (t - tt[-1])
        integral = np.where(t < tt[0], before, np.where(t > tt[-1], after, inside))
        integral = integral + vv[0] * tt[0]  # trace held at its first value before times[0]
        return 2.0 * np.pi * gamma * integral


@dataclass(frozen=True)
class SampleModel:
    lines: tuple
    ensemble: Optional[IsochromatEnsemble] = None
    pi_schedule: Optional[PiPulseSchedule] = None
    field_noise: Optional[FieldNoise] = None
    residual: Optional[ResidualField] = None

    def __post_init__(self):
        if len(self.lines) < 1:
            raise ConfigurationError("lines: at least one line is required")
        object.__setattr__(self, "lines", tuple(self.lines))

    def with_lines(self, extra: Sequence[SpectralLine]):
        return replace(self, lines=self.lines + tuple(extra))


def ensemble_factor(ensemble, tau):
    """chi(tau) = sum_i w_i exp(i 2 pi delta_i tau) for an array of effective times."""
    tau = np.asarray(tau, dtype=float)
    if ensemble is None or ensemble.width == 0:
        return np.ones(tau.shape, dtype=complex)
    # quantile offsets are symmetric about zero, so chi is real
    d = ensemble.offsets
    w = ensemble.weights
    flat = tau.ravel()
    out = np.empty(flat.shape)
    block = max(1, 2_000_000 // d.size)
    for s in range(0, flat.size, block):
        out[s:s + block] = np.cos(2.0 * np.pi * np.outer(flat[s:s + block], d)) @ w
    return out.reshape(tau.shape).astype(complex)


def evaluate_field(model, t, seed=None):
    """Magnetic field B(t) of the sample (tesla) at the times ``t``.

    Parameters
    ----------
    model : SampleModel
    t : array_like
        Non-negative sample times in seconds.
    seed : int, SeedSequence or Generator, optional
        Random stream for the additive noise term.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t: must be non-negative")
    tau = model.pi_schedule.effective_time(t) if model.pi_schedule else t
    chi = ensemble_factor(model.ensemble, tau)
    psi = model.residual.phase(t) if model.residual is not None else 0.0
    total = np.zeros_like(t)
    for line in model.lines:
        carrier = np.exp(1j * (2.0 * np.pi * line.frequency * t + line.phase0 + psi))
        total = total + line.envelope(t) * np.real(carrier * chi)
    if model.field_noise is not None:
        total = total + model.field_noise.sample(t, make_rng(seed))
    return total


NAMED_SAMPLES = ("glycerol", "water", "tmp", "xylene", "three-tone-antenna")


def build_named_sample(name, b0, line_scale, *, ensemble_width=None, ensemble_kind=None,
                       n_isochromats=16384, t2=None, tone_center=3.7325e6,
                       tone_spacing=1.0):
    """Sample presets; ``line_scale`` is the summed zero-to-peak amplitude.

    Lines sit at gamma_p * b0 (plus splittings); the three-tone antenna ignores
    ``b0`` and places undamped tones at ``tone_center`` + {-1, 0, 1} *
    ``tone_spacing``.
    """
    if not b0 > 0:
        raise ConfigurationError("b0: must be positive")
    fc = CONSTANTS.gamma_p_freq * b0

    def ens(default_width, default_kind):
        width = default_width if ensemble_width is None else ensemble_width
        if width == 0:
            return None
        return IsochromatEnsemble(n_isochromats, ensemble_kind or default_kind, width)

    if name == "water":
        lines = (SpectralLine(fc, line_scale, t2=1.59 if t2 is None else t2),)
        return SampleModel(lines, ens(9.0, "lorentzian"))
    if name == "glycerol":
        lines = (SpectralLine(fc, line_scale, t2=1.0 / (np.pi * 30.0) if t2 is None else t2),)
        return SampleModel(lines, ens(0.0, "lorentzian"))
    if name == "tmp":
        t2v = 1.59 if t2 is None else t2
        lines = (SpectralLine(fc - 6.5, 0.5 * line_scale, t2=t2v),
                 SpectralLine(fc + 6.5, 0.5 * line_scale, t2=t2v))
        return SampleModel(lines, ens(5.0, "lorentzian"))
    if name == "xylene":
        t2v = 1.59 if t2 is None else t2
        lines = (SpectralLine(fc - 10.0, 0.6 * line_scale, t2=t2v),
                 SpectralLine(fc + 10.0, 0.4 * line_scale, t2=t2v))
        return SampleModel(lines, ens(6.0, "gaussian"))
    if name == "three-tone-antenna":
        amp = line_scale / 3.0
        lines = tuple(SpectralLine(tone_center + k * tone_spacing, amp) for k in (-1, 0, 1))
        return SampleModel(lines)
    raise ConfigurationError(f"sample.name: unknown sample {name!r}; expected one of {NAMED_SAMPLES}")
