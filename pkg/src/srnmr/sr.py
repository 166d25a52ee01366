"""Clock-locked synchronized-readout sequencing.

Every event time is an integer number of clock ticks. Iteration ``i`` starts
at ``start_offset_ticks + i * tau_ticks`` and runs one subsequence flush-left
in its cycle; the remainder of the cycle is readout dead time.

Because f0 * t_i is an integer for every iteration start, a line at
frequency f contributes the slowly varying phasor exp(i 2 pi (f - f0) t_i)
times the subsequence filter response, which is what :func:`run_sr`
evaluates instead of integrating the carrier numerically.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from threading import Lock

import numpy as np

from .constants import CONSTANTS
from .nv import PulseSequenceSpec, SensorModel, field_slope, filter_response, readout, readout_mean
from .signal import ConfigurationError, SampleModel, SpectralLine, make_rng

DEFAULT_CLOCK_HZ = 12e9
GRID_TOLERANCE_TICKS = 0.01


class PlanningError(ValueError):
    """A protocol violates a clock-grid or timing constraint."""


@dataclass(frozen=True)
class SRProtocol:
    clock_hz: float
    period_ticks: int
    k: int
    n_iterations: int
    subsequence: PulseSequenceSpec
    start_offset_ticks: int = 0
    jitter_sigma: float = 0.0

    def __post_init__(self):
        if self.period_ticks <= 0 or self.period_ticks % 4:
            raise PlanningError("period_ticks: must be a positive multiple of 4 so pulse times stay on the grid")
        if self.k < 1:
            raise PlanningError("k: must be >= 1")
        if self.n_iterations < 2:
            raise PlanningError("n_iterations: must be >= 2")
        if self.seq_ticks > self.tau_ticks:
            raise PlanningError("tau_sr: subsequence longer than the SR cycle")
        if self.jitter_sigma < 0:
            raise PlanningError("jitter_sigma: must be >= 0")

    @property
    def clock_period(self):
        return 1.0 / self.clock_hz

    @property
    def f0(self):
        return self.clock_hz / self.period_ticks

    @property
    def tau_ticks(self):
        return self.k * self.period_ticks

    @property
    def tau_sr(self):
        return self.tau_ticks / self.clock_hz

    @property
    def seq_ticks(self):
        return self.subsequence.n_pulses * (self.period_ticks // 2)

    @property
    def duty(self):
        return self.seq_ticks / self.tau_ticks

    def iteration_ticks(self):
        return self.start_offset_ticks + np.arange(self.n_iterations, dtype=np.int64) * self.tau_ticks

    def pulse_offsets_ticks(self):
        """Pulse times within a subsequence, in ticks: (2j + 1) * period / 4."""
        j = np.arange(self.subsequence.n_pulses, dtype=np.int64)
        return (2 * j + 1) * (self.period_ticks // 4)

    def to_dict(self):
        d = asdict(self)
        d["subsequence"] = asdict(self.subsequence)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["subsequence"] = PulseSequenceSpec(**d["subsequence"])
        return cls(**d)


def plan_protocol(f0, target_tau, clock_period=1.0 / DEFAULT_CLOCK_HZ, subsequence=None,
                  n_iterations=40000, start_offset_ticks=0, jitter_sigma=0.0):
    """Snap f0 to the clock grid and pick the integer k with k/f0 closest to ``target_tau``.

    Raises
    ------
    PlanningError
        If the period of ``f0`` is not within 0.01 tick of an integer multiple
        of four ticks, or no k satisfies T_seq <= tau_sr.
    """
    if not f0 > 0 or not clock_period > 0:
        raise PlanningError("f0/clock_period: must be positive")
    if subsequence is None:
        subsequence = PulseSequenceSpec()
    clock_hz = 1.0 / clock_period
    exact = clock_hz / f0
    period_ticks = int(round(exact))
    if period_ticks < 4 or abs(exact - period_ticks) > GRID_TOLERANCE_TICKS:
        raise PlanningError(f"f0: period {exact:.4f} ticks is not on the clock grid")
    if period_ticks % 4:
        raise PlanningError(f"f0: period of {period_ticks} ticks is not divisible by 4 (pulse times off grid)")
    f0_snapped = clock_hz / period_ticks
    seq = replace(subsequence, pulse_spacing=1.0 / (2.0 * f0_snapped))
    seq_ticks = seq.n_pulses * (period_ticks // 2)
    if target_tau * clock_hz < seq_ticks:
        raise PlanningError("target_tau: shorter than the subsequence (T_seq <= tau_sr violated)")
    k = max(1, int(round(target_tau * f0_snapped)))
    while k * period_ticks < seq_ticks:
        k += 1
    return SRProtocol(clock_hz, period_ticks, k, n_iterations, seq, start_offset_ticks, jitter_sigma)


def nyquist_band(protocol, pair_subtraction=True):
    dt = protocol.tau_sr * (2 if pair_subtraction else 1)
    return 1.0 / (2.0 * dt)


@dataclass
class SRTimeSeries:
    samples: np.ndarray
    dt: float
    t0: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.size < 1 or not self.dt > 0:
            raise ValueError("SRTimeSeries: need at least one sample and dt > 0")

    @property
    def times(self):
        return self.t0 + np.arange(self.samples.size) * self.dt

    def to_csv(self, path):
        idx = np.arange(self.samples.size)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("index,time_s,value\n")
            for i, t, v in zip(idx, self.times, self.samples):
                fh.write(f"{i},{t:.12g},{v:.17g}\n")

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[0] < 2:
            raise ValueError(f"{path}: need at least two rows")
        dt = float(data[1, 1] - data[0, 1])
        return cls(data[:, 2], dt, float(data[0, 1]), {"source": str(path)})

    def save_npz(self, path):
        meta = json.dumps(self.metadata, sort_keys=True, default=str)
        np.savez(path, samples=self.samples, dt=self.dt, t0=self.t0, metadata=np.array(meta))

    @classmethod
    def load_npz(cls, path):
        with np.load(path, allow_pickle=False) as z:
            return cls(z["samples"].copy(), float(z["dt"]), float(z["t0"]), json.loads(str(z["metadata"])))


# ---------------------------------------------------------------------------
# ensemble factor along the iteration grid

_CHI_CACHE: "OrderedDict[tuple, np.ndarray]" = OrderedDict()
_CHI_LOCK = Lock()
_CHI_CACHE_SIZE = 16


def _effective_times(t, pulses):
    tau = t.copy()
    for tp in pulses:
        after = t >= tp
        tau[after] = -(tau[after] - (t[after] - tp)) + (t[after] - tp)
    return tau


def _chi_on_grid(ensemble, pulses, t_start, dt, n, block=64):
    """chi(tau(t_i)) for t_i = t_start + i dt, using blocked matrix products."""
    key = (ensemble, tuple(pulses), t_start, dt, n)
    with _CHI_LOCK:
        if key in _CHI_CACHE:
            _CHI_CACHE.move_to_end(key)
            return _CHI_CACHE[key]
    t = t_start + np.arange(n) * dt
    tau = _effective_times(t, pulses)
    d = 2.0 * np.pi * ensemble.offsets
    w = ensemble.weights
    # segments of constant tau - t (between pulses) are split into blocks
    seg_id = np.searchsorted(np.asarray(pulses, dtype=float), t, side="right")
    starts = []
    i = 0
    while i < n:
        j = min(i + block, n)
        same = np.nonzero(seg_id[i:j] != seg_id[i])[0]
        if same.size:
            j = i + int(same[0])
        starts.append((i, j))
        i = j
    m = np.arange(block) * dt
    cm = np.cos(np.outer(d, m))
    sm = np.sin(np.outer(d, m))
    first = np.array([tau[a] for a, _ in starts])
    out = np.empty(n)
    rows = 4096
    for r0 in range(0, len(starts), rows):
        ph = np.outer(first[r0:r0 + rows], d)
        c0 = np.cos(ph) * w
        s0 = np.sin(ph) * w
        res = c0 @ cm - s0 @ sm
        for q, (a, b) in enumerate(starts[r0:r0 + rows]):
            out[a:b] = res[q, : b - a]
    with _CHI_LOCK:
        _CHI_CACHE[key] = out
        while len(_CHI_CACHE) > _CHI_CACHE_SIZE:
            _CHI_CACHE.popitem(last=False)
    return out


# ---------------------------------------------------------------------------


def sr_phases(sample, protocol, seed=None):
    """Accumulated NV phase for every iteration (radians)."""
    rng = make_rng(seed)
    n = protocol.n_iterations
    ticks = protocol.iteration_ticks()
    clock = protocol.clock_hz
    t = ticks / clock
    # fractional carrier turns f0 * t_i mod 1, exact in integer arithmetic
    frac0 = (ticks % protocol.period_ticks) / protocol.period_ticks
    seq = protocol.subsequence
    gamma = CONSTANTS.gamma_nv_freq

    if sample.ensemble is not None and sample.ensemble.width > 0:
        pulses = sample.pi_schedule.times if sample.pi_schedule else ()
        if t.size > 1 and protocol.start_offset_ticks == 0:
            chi = _chi_on_grid(sample.ensemble, pulses, 0.0, protocol.tau_sr, n)
        else:
            from .signal import ensemble_factor

            tau = _effective_times(t, pulses)
            chi = np.real(ensemble_factor(sample.ensemble, tau))
    else:
        chi = 1.0

    psi = sample.residual.phase(t) if sample.residual is not None else 0.0
    jitter = rng.normal(0.0, protocol.jitter_sigma, n) if protocol.jitter_sigma > 0 else 0.0

    phase = np.zeros(n)
    for line in sample.lines:
        if line.amplitude == 0:
            continue
        decay = 1.0 / line.t2 if math.isfinite(line.t2) else 0.0
        k_resp = complex(filter_response(seq, line.frequency, decay))
        arg = (2.0 * np.pi * (line.frequency - protocol.f0) * t + 2.0 * np.pi * frac0
               + line.phase0 + psi + 2.0 * np.pi * line.frequency * jitter)
        amp = line.envelope(t) * chi
        phase += 2.0 * np.pi * gamma * amp * np.real(np.exp(1j * arg) * k_resp)

    noise = sample.field_noise
    if noise is not None and noise.sigma > 0 and noise.kind == "white":
        # white field noise projects onto the resonant quadrature of the filter
        k0 = abs(complex(filter_response(seq, protocol.f0)))
        phase += 2.0 * np.pi * gamma * k0 * rng.normal(0.0, noise.sigma, n)
    # random-walk noise is slow on the subsequence scale; the zero-mean
    # toggling function rejects it
    return phase


def run_sr(sample, protocol, sensor, seed=None, noiseless=False):
    """Simulate one SR record.

    Readouts alternate polarity (+1 on even iterations) and, with pair
    subtraction, consecutive pairs are differenced as r(-1) - r(+1).
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    phase_seed, readout_seed = ss.spawn(2)
    phase = sr_phases(sample, protocol, phase_seed)
    n = protocol.n_iterations
    if sensor.pair_subtraction:
        if n % 2:
            raise PlanningError("n_iterations: must be even with pair subtraction")
        pol = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    else:
        pol = np.ones(n)
    if noiseless:
        r = readout_mean(phase, sensor, pol)
    else:
        r = readout(phase, sensor, pol, np.random.default_rng(readout_seed))
    if sensor.pair_subtraction:
        values = r[1::2] - r[0::2]
        dt = 2.0 * protocol.tau_sr
    else:
        values = r
        dt = protocol.tau_sr
    meta = {
        "protocol": protocol.to_dict(),
        "seed": None if seed is None else str(seed.entropy if isinstance(seed, np.random.SeedSequence) else seed),
        "n_averages": 1,
        "pair_subtraction": sensor.pair_subtraction,
    }
    return SRTimeSeries(values, dt, protocol.start_offset_ticks / protocol.clock_hz, meta)


def average_runs(runs):
    """Pointwise mean of runs sharing protocol metadata."""
    runs = list(runs)
    if not runs:
        raise ValueError("average_runs: need at least one run")
    ref = runs[0]
    for r in runs[1:]:
        if (r.metadata.get("protocol") != ref.metadata.get("protocol") or r.dt != ref.dt
                or r.samples.shape != ref.samples.shape):
            raise ValueError("average_runs: runs have mismatched protocols")
    stack = np.stack([r.samples for r in runs])
    meta = dict(ref.metadata)
    meta["n_averages"] = int(sum(r.metadata.get("n_averages", 1) for r in runs))
    return SRTimeSeries(stack.mean(axis=0), ref.dt, ref.t0, meta)


def sensitivity_monte_carlo(sensor, protocol, seed=None, test_amplitude=1e-9, test_offset=None):
    """Sensitivity from a simulated noise-only record (T/sqrt(Hz)).

    The periodogram RMS over non-DC bins of a noise-only run is converted to
    an amplitude with the slope measured from a noiseless test tone run
    through the same pipeline, and scaled to a 1 s record.
    """
    from .spectral import periodogram

    pair = sensor.pair_subtraction
    band = nyquist_band(protocol, pair)
    offset = 0.25 * band if test_offset is None else test_offset
    dt = protocol.tau_sr * (2 if pair else 1)
    n_out = protocol.n_iterations // (2 if pair else 1)
    df = 1.0 / (n_out * dt)
    offset = round(offset / df) * df  # bin-centered test tone
    tone = SampleModel((SpectralLine(protocol.f0 + offset, test_amplitude, phase0=0.0),))
    clean = run_sr(tone, protocol, sensor, seed, noiseless=True)
    spec_t = periodogram(clean.samples - clean.samples.mean(), clean.dt)
    peak = float(spec_t.magnitudes.max())
    empty = SampleModel((SpectralLine(protocol.f0, 0.0),))
    noisy = run_sr(empty, protocol, sensor, seed)
    spec_n = periodogram(noisy.samples - noisy.samples.mean(), noisy.dt)
    rms = float(np.sqrt(np.mean(spec_n.magnitudes[1:] ** 2)))
    duration = n_out * dt
    return test_amplitude * rms / peak * math.sqrt(duration)
