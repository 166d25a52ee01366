"""Spectral analysis of SR time series.

Spectra are amplitude spectra, |FT| of the mean-subtracted series. Fitted
lineshapes are the magnitudes of the complex spectra of one-sided decays, so
the ``fwhm`` parameter is the linewidth of the corresponding absorption line
(the magnitude curve itself is wider: sqrt(3) times for a Lorentzian).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special, stats
from scipy.signal import find_peaks

from .sr import SRTimeSeries

MODELS = ("lorentzian", "gaussian")
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


class FitError(RuntimeError):
    """Least-squares fit failed; ``best`` holds the best parameters reached."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class CalibrationError(ValueError):
    pass


@dataclass
class Spectrum:
    frequencies: np.ndarray
    magnitudes: np.ndarray
    df: float
    n: int  # length of the transformed (possibly padded) series
    t0: float = 0.0  # time of the first transformed sample

    def power_sum(self):
        """sum |X_k|^2 / n over the full two-sided DFT, rebuilt from the one-sided half."""
        m2 = self.magnitudes**2
        w = np.full(m2.shape, 2.0)
        w[0] = 1.0
        if self.n % 2 == 0:
            w[-1] = 1.0
        return float(np.sum(w * m2) / self.n)

    def window(self, lo, hi):
        sel = (self.frequencies >= lo) & (self.frequencies <= hi)
        return Spectrum(self.frequencies[sel], self.magnitudes[sel], self.df, self.n, self.t0)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("frequency_hz,magnitude\n")
            for f, m in zip(self.frequencies, self.magnitudes):
                fh.write(f"{f:.12g},{m:.17g}\n")


@dataclass(frozen=True)
class Peak:
    center: float
    fwhm: float
    amplitude: float


@dataclass
class LineshapeFit:
    model: str
    peaks: list
    baseline: float
    rss: float
    rss_by_model: dict = field(default_factory=dict)
    uncertainties: Optional[list] = None
    coherent: bool = False
    t0: float = 0.0

    def curve(self, f):
        return model_curve(self.model, np.asarray(f, dtype=float), self.peaks, self.baseline,
                           coherent=self.coherent, t0=self.t0)

    def report(self):
        lines = [f"model: {self.model}", f"baseline: {self.baseline:.6g}", f"rss: {self.rss:.6g}"]
        for name, rss in sorted(self.rss_by_model.items()):
            lines.append(f"rss_{name}: {rss:.6g}")
        for i, p in enumerate(self.peaks):
            lines.append(f"peak {i}: center_hz={p.center:.6f} fwhm_hz={p.fwhm:.6f} amplitude={p.amplitude:.6g}")
        return "\n".join(lines) + "\n"


def preprocess(series, discard=20):
    """Drop the first ``discard`` samples and subtract the mean of the rest."""
    x = series.samples
    if x.size <= discard:
        raise ValueError(f"preprocess: series of length {x.size} is not longer than discard={discard}")
    kept = x[discard:]
    return SRTimeSeries(kept - kept.mean(), series.dt, series.t0 + discard * series.dt, dict(series.metadata))


def periodogram(series, dt=None, zero_pad=1):
    """One-sided |DFT| of a series.

    Parameters
    ----------
    series : SRTimeSeries or array_like
    dt : float
        Sample interval; required for plain arrays.
    zero_pad : int
        Transform length multiplier (1 = no padding).
    """
    t0 = 0.0
    if isinstance(series, SRTimeSeries):
        x, dt, t0 = series.samples, series.dt, series.t0
    else:
        x = np.asarray(series, dtype=float)
        if dt is None:
            raise ValueError("periodogram: dt is required for arrays")
    if zero_pad < 1:
        raise ValueError("zero_pad: must be >= 1")
    n = x.size * int(zero_pad)
    mag = np.abs(np.fft.rfft(x, n))
    freqs = np.fft.rfftfreq(n, dt)
    return Spectrum(freqs, mag, 1.0 / (n * dt), n, t0)


# ---------------------------------------------------------------------------
# lineshapes


def lorentzian_magnitude(f, center, fwhm, amplitude):
    hw = 0.5 * fwhm
    return amplitude * hw / np.sqrt(hw**2 + (f - center) ** 2)


def gaussian_magnitude(f, center, fwhm, amplitude):
    sigma = fwhm / FWHM_PER_SIGMA
    return amplitude * np.abs(special.wofz((f - center) / (math.sqrt(2.0) * sigma)))


def lorentzian_complex(f, center, fwhm):
    return 1.0 / (1.0 + 1j * (f - center) / (0.5 * fwhm))


def gaussian_complex(f, center, fwhm):
    sigma = fwhm / FWHM_PER_SIGMA
    return special.wofz(-(f - center) / (math.sqrt(2.0) * sigma))


_SHAPES = {"lorentzian": lorentzian_magnitude, "gaussian": gaussian_magnitude}
_COMPLEX = {"lorentzian": lorentzian_complex, "gaussian": gaussian_complex}


def model_curve(model, f, peaks, baseline, coherent=False, t0=0.0):
    """Baseline plus peaks; ``coherent`` sums complex lines that share a phase at t = 0.

    In the coherent form each line carries the phase exp(i 2 pi center t0)
    it has accumulated by the first transformed sample.
    """
    if not coherent:
        total = np.full(np.shape(f), float(baseline))
        for p in peaks:
            total = total + _SHAPES[model](f, p.center, p.fwhm, p.amplitude)
        return total
    acc = np.zeros(np.shape(f), dtype=complex)
    for p in peaks:
        acc = acc + p.amplitude * np.exp(2j * np.pi * p.center * t0) * _COMPLEX[model](f, p.center, p.fwhm)
    return baseline + np.abs(acc)


def _initial_guesses(spec, n_peaks):
    f, m = spec.frequencies, spec.magnitudes
    idx, _ = find_peaks(m)
    if idx.size == 0:
        idx = np.array([int(np.argmax(m))])
    idx = idx[np.argsort(m[idx])[::-1]]
    base = float(np.median(m))
    top = int(idx[0])
    half = base + 0.5 * (m[top] - base)
    lo = top
    while lo > 0 and m[lo] > half:
        lo -= 1
    hi = top
    while hi < m.size - 1 and m[hi] > half:
        hi += 1
    # the magnitude curve is sqrt(3) wider than the absorption line
    width = max((f[hi] - f[lo]) / math.sqrt(3.0), 2.0 * spec.df)
    guesses = [Peak(float(f[i]), width, float(m[i] - base)) for i in idx[:n_peaks]]
    k = 1
    while len(guesses) < n_peaks:
        sign = 1 if k % 2 else -1
        c = float(f[top]) + sign * 0.5 * width * ((k + 1) // 2)
        guesses.append(Peak(c, width, 0.5 * float(m[top] - base)))
        k += 1
    return sorted(guesses, key=lambda p: p.center), base


def _fit_one(spec, model, init, base0, max_nfev, coherent):
    f, y = spec.frequencies, spec.magnitudes
    scale = float(np.max(np.abs(y))) or 1.0
    x0, lo, hi = [], [], []
    fmin, fmax = float(f[0]), float(f[-1])
    span = max(fmax - fmin, spec.df)
    for p in init:
        x0 += [min(max(p.center, fmin), fmax), max(p.fwhm, 0.05 * spec.df), max(p.amplitude, 1e-6 * scale) / scale]
        lo += [fmin, 1e-3 * spec.df, 0.0]
        hi += [fmax, 2.0 * span, np.inf]
    x0.append(base0 / scale)
    lo.append(-np.inf)
    hi.append(np.inf)
    x0 = np.clip(np.array(x0), np.array(lo) + 1e-12 * span, np.array(hi))
    n_pk = len(init)

    def resid(x):
        peaks = [Peak(*x[3 * j: 3 * j + 3]) for j in range(n_pk)]
        return model_curve(model, f, peaks, x[-1], coherent, spec.t0) - y / scale

    res = optimize.least_squares(resid, x0, bounds=(lo, hi), method="trf", ftol=1e-10,
                                 xtol=1e-10, gtol=1e-10, max_nfev=max_nfev, x_scale="jac")
    x = res.x
    peaks = sorted((Peak(float(x[3 * j]), float(x[3 * j + 1]), float(x[3 * j + 2] * scale))
                    for j in range(len(init))), key=lambda p: p.center)
    rss = float(np.sum(res.fun**2) * scale**2)
    fit = LineshapeFit(model, peaks, float(x[-1] * scale), rss, coherent=coherent, t0=spec.t0)
    if res.status == 0:
        raise FitError(f"{model} fit did not converge in {max_nfev} evaluations", best=fit)
    return fit


def fit_peaks(spec, n_peaks, init=None, models=MODELS, fit_range=None, max_nfev=2000, coherent=True):
    """Fit a sum of ``n_peaks`` lineshapes plus a constant baseline.

    Each model family in ``models`` is fitted; the one with the smaller
    residual sum of squares is returned, preferring lorentzian when the two
    differ by less than 1 %.

    Parameters
    ----------
    spec : Spectrum
    n_peaks : int
    init : sequence of Peak, optional
        Starting guesses; otherwise taken from the largest local maxima.
    fit_range : (float, float), optional
        Frequency window to fit.
    coherent : bool
        Model overlapping lines as a magnitude of summed complex lineshapes
        that start in phase (a free induction decay); otherwise sum the
        magnitudes. The two agree for a single peak.
    """
    if n_peaks < 1:
        raise ValueError("n_peaks: must be >= 1")
    if fit_range is not None:
        spec = spec.window(*fit_range)
    need = 5 * (3 * n_peaks + 1)
    if spec.frequencies.size < need:
        raise ValueError(f"fit_peaks: need at least {need} bins, got {spec.frequencies.size}")
    guesses, base = _initial_guesses(spec, n_peaks)
    if init is not None:
        guesses = list(init)
        if len(guesses) != n_peaks:
            raise ValueError("init: must hold n_peaks guesses")
    fits = {m: _fit_one(spec, m, guesses, base, max_nfev, coherent) for m in models}
    rss = {m: fr.rss for m, fr in fits.items()}
    best = min(fits, key=lambda m: rss[m])
    if "lorentzian" in fits and best != "lorentzian":
        if rss["lorentzian"] - rss[best] < 0.01 * rss[best]:
            best = "lorentzian"
    chosen = fits[best]
    chosen.rss_by_model = rss
    return chosen


def fwhm_report(fits):
    """Per-peak FWHM; with several fits (repeated seeds), mean and sample std.

    Returns a list of ``(fwhm, uncertainty)`` tuples; the uncertainty is
    ``nan`` for a single fit.
    """
    if isinstance(fits, LineshapeFit):
        fits = [fits]
    fits = list(fits)
    if not fits:
        raise ValueError("fwhm_report: no fits")
    n_pk = len(fits[0].peaks)
    out = []
    for j in range(n_pk):
        w = np.array([fr.peaks[j].fwhm for fr in fits])
        out.append((float(w.mean()), float(w.std(ddof=1)) if w.size > 1 else math.nan))
    return out


def spread(fits):
    """Repeat-and-spread uncertainties of center, fwhm and amplitude per peak."""
    fits = list(fits)
    res = []
    for j in range(len(fits[0].peaks)):
        arr = np.array([[fr.peaks[j].center, fr.peaks[j].fwhm, fr.peaks[j].amplitude] for fr in fits])
        sd = arr.std(axis=0, ddof=1) if len(fits) > 1 else np.full(3, math.nan)
        res.append({"center": float(sd[0]), "fwhm": float(sd[1]), "amplitude": float(sd[2])})
    return res


def _height(p):
    return p.amplitude if isinstance(p, Peak) else float(p)


def calibrate_amplitude(spec, signal_peak, reference_peak, reference_amplitude,
                        reference_duration, signal_t2, signal_start=0.0):
    """Signal amplitude (T) from a reference tone of known amplitude and duration.

    On an amplitude spectrum the peak height of a line is proportional to its
    amplitude times its effective duration: the pulse length for the
    reference, and the integrated envelope t2 exp(-t_start/t2) for a decay
    observed from ``signal_start`` on.
    """
    if isinstance(signal_peak, Peak) and isinstance(reference_peak, Peak):
        if abs(signal_peak.center - reference_peak.center) < signal_peak.fwhm + reference_peak.fwhm:
            raise CalibrationError("calibrate_amplitude: signal and reference peaks overlap")
    if reference_duration <= 0 or signal_t2 <= 0:
        raise CalibrationError("calibrate_amplitude: durations must be positive")
    h_ref = _height(reference_peak)
    if h_ref <= 0:
        raise CalibrationError("calibrate_amplitude: reference peak height must be positive")
    signal_duration = signal_t2 * math.exp(-signal_start / signal_t2) if math.isfinite(signal_t2) else math.inf
    return reference_amplitude * (_height(signal_peak) / h_ref) * (reference_duration / signal_duration)


@dataclass(frozen=True)
class GyroFit:
    slope: float
    intercept: float
    slope_stderr: float


def gyromagnetic_fit(points):
    """Ordinary least-squares line through (b0, center) points."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ValueError("gyromagnetic_fit: need at least two (b0, center) points")
    if np.ptp(pts[:, 0]) == 0:
        raise ValueError("gyromagnetic_fit: b0 values are degenerate")
    if pts.shape[0] == 2:
        slope = (pts[1, 1] - pts[0, 1]) / (pts[1, 0] - pts[0, 0])
        return GyroFit(float(slope), float(pts[0, 1] - slope * pts[0, 0]), 0.0)
    r = stats.linregress(pts[:, 0], pts[:, 1])
    return GyroFit(float(r.slope), float(r.intercept), float(r.stderr))


def spectrum_svg(spec, fit=None, width=640, height=400, fit_range=None):
    """Deterministic SVG line plot of a spectrum and optional fitted curve."""
    s = spec.window(*fit_range) if fit_range is not None else spec
    f, m = s.frequencies, s.magnitudes
    if f.size < 2:
        raise ValueError("spectrum_svg: need at least two points")
    ymax = float(m.max()) or 1.0
    pad = 40

    def pts(y):
        xs = pad + (f - f[0]) / (f[-1] - f[0]) * (width - 2 * pad)
        ys = height - pad - y / ymax * (height - 2 * pad)
        return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<polyline fill="none" stroke="black" stroke-width="1" points="{pts(m)}"/>',
    ]
    if fit is not None:
        parts.append(f'<polyline fill="none" stroke="red" stroke-width="1" points="{pts(fit.curve(f))}"/>')
    parts.append(f'<text x="{pad}" y="{height - 10}" font-size="12">{f[0]:.3f} Hz</text>')
    parts.append(f'<text x="{width - pad}" y="{height - 10}" font-size="12" text-anchor="end">{f[-1]:.3f} Hz</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
