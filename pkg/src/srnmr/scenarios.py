"""Configuration-driven scenario runner.

A scenario YAML file describes a sample, an SR protocol, a sensor and the
analysis to run. Every physical key carries a unit suffix. Runs are seeded
from one ``numpy.random.SeedSequence`` per scenario, averaged in a fixed
order, and written under ``<out_dir>/<scenario hash>/``.
"""

from __future__ import annotations

import copy
import datetime as _dt
import hashlib
import json
import math
import platform
import re
from dataclasses import replace
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import scipy
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from . import geometry
from .constants import CONSTANTS
from .nv import PulseSequenceSpec, SensorModel, sensitivity_estimate
from .signal import (
    ConfigurationError,
    FieldNoise,
    IsochromatEnsemble,
    PiPulseSchedule,
    SpectralLine,
    build_named_sample,
)
from .spectral import (
    FWHM_PER_SIGMA,
    LineshapeFit,
    calibrate_amplitude,
    fit_peaks,
    fwhm_report,
    gyromagnetic_fit,
    periodogram,
    preprocess,
    spectrum_svg,
    spread,
)
from .sr import average_runs, nyquist_band, plan_protocol, run_sr, sensitivity_monte_carlo
from .stabilization import DriftModel, LoopConfig, broadening_from_noise, inject_residual, simulate_lock

SENSOR_PRESETS = {
    "paper-ensemble": dict(contrast=0.07, photons_per_readout=6.0e7, readout_mode="ensemble-gaussian",
                           pair_subtraction=True),
    "single-nv": dict(contrast=0.07, photons_per_readout=0.03, readout_mode="single-shot-poisson",
                      pair_subtraction=False),
}


class _Spec(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EnsembleSpec(_Spec):
    kind: Literal["lorentzian", "gaussian"] = "lorentzian"
    width_hz: float = Field(ge=0)
    n_isochromats: int = Field(16384, ge=1)


class FieldNoiseSpec(_Spec):
    kind: Literal["white", "random-walk"] = "white"
    sigma_tesla: float = Field(0.0, ge=0)


class ReferenceSpec(_Spec):
    offset_hz: float
    amplitude_tesla: float = Field(gt=0)
    duration_s: float = Field(gt=0)
    start_s: float = Field(ge=0)


class LockSpec(_Spec):
    random_walk_tesla_per_rts: float = Field(0.0, ge=0)
    white_tesla: float = Field(0.0, ge=0)
    drift_tesla_per_s: float = Field(0.0, ge=0)
    inter_sensor_walk_tesla_per_rts: float = Field(0.0, ge=0)
    fast_bandwidth_hz: float = Field(12.5, gt=0)
    slow_period_s: float = Field(300.0, gt=0)
    sensor_noise_tesla: float = Field(0.0, ge=0)
    primary_noise_tesla: float = Field(0.0, ge=0)
    dt_s: float = Field(0.04, gt=0)
    duration_s: float = Field(1800.0, gt=0)
    enabled: bool = True

    def drift(self):
        return DriftModel(self.random_walk_tesla_per_rts, self.white_tesla, self.drift_tesla_per_s,
                          self.inter_sensor_walk_tesla_per_rts)

    def loop(self):
        return LoopConfig(self.fast_bandwidth_hz, self.slow_period_s, self.sensor_noise_tesla,
                          self.primary_noise_tesla, enabled=self.enabled)


class BackActionSpec(_Spec):
    z_plane_m: float = Field(2e-6, gt=0)
    polarized_density_m3: float = Field(0.8e23, gt=0)
    grid_half_width_m: float = Field(30e-6, gt=0)
    grid_points: int = Field(64, ge=8)


class SampleSpec(_Spec):
    name: Literal["glycerol", "water", "tmp", "xylene", "three-tone-antenna"]
    b0_tesla: Optional[float] = Field(None, gt=0)
    line_offset_hz: Optional[float] = None
    line_scale_tesla: float = Field(gt=0)
    ensemble: Optional[EnsembleSpec] = None
    t2_s: Optional[float] = Field(None, gt=0)
    pi_pulse_times_s: List[float] = Field(default_factory=list)
    field_noise: Optional[FieldNoiseSpec] = None
    static_offset_sigma_tesla: float = Field(0.0, ge=0)
    lock: Optional[LockSpec] = None
    reference: Optional[ReferenceSpec] = None
    backaction: Optional[BackActionSpec] = None
    tone_center_hz: float = Field(3.7325e6, gt=0)
    tone_spacing_hz: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _one_field_spec(self):
        if self.name != "three-tone-antenna" and (self.b0_tesla is None) == (self.line_offset_hz is None):
            raise ValueError("set exactly one of b0_tesla or line_offset_hz")
        return self


class ProtocolSpec(_Spec):
    f0_hz: float = Field(gt=0)
    target_tau_s: Optional[float] = Field(None, gt=0)
    duty: Optional[float] = Field(None, gt=0, le=1)
    clock_hz: float = Field(12e9, gt=0)
    n_iterations: int = Field(40000, ge=2)
    family: Literal["XY8", "CPMG"] = "XY8"
    repetitions: int = Field(6, ge=1)
    rabi_hz: float = Field(16.6e6, gt=0)
    jitter_s: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _one_timing(self):
        if (self.target_tau_s is None) == (self.duty is None):
            raise ValueError("set exactly one of target_tau_s or duty")
        return self


class SensorSpec(_Spec):
    preset: Optional[Literal["paper-ensemble", "single-nv"]] = "paper-ensemble"
    contrast: Optional[float] = Field(None, gt=0, lt=1)
    photons_per_readout: Optional[float] = Field(None, gt=0)
    readout_mode: Optional[Literal["single-shot-poisson", "ensemble-gaussian"]] = None
    pair_subtraction: Optional[bool] = None

    def build(self):
        base = dict(SENSOR_PRESETS[self.preset]) if self.preset else {}
        for key in ("contrast", "photons_per_readout", "readout_mode", "pair_subtraction"):
            val = getattr(self, key)
            if val is not None:
                base[key] = val
        missing = {"contrast", "photons_per_readout"} - set(base)
        if missing:
            raise ConfigurationError(f"sensor: missing {sorted(missing)} without a preset")
        return SensorModel(**base)


class CheckSpec(_Spec):
    metric: Literal["splitting_hz", "fwhm_hz", "center_hz", "power_ratio", "model", "amplitude_tesla",
                    "gyromagnetic_slope_hz_per_tesla", "sensitivity_tesla_per_rthz",
                    "residual_rms_tesla", "n_resolved_peaks"]
    peak: int = 0
    target: Union[float, str]
    tolerance: float = Field(0.0, ge=0)
    label: Optional[str] = None


class AnalysisSpec(_Spec):
    n_peaks: int = Field(1, ge=1)
    discard: int = Field(20, ge=0)
    models: List[Literal["lorentzian", "gaussian"]] = Field(default_factory=lambda: ["lorentzian", "gaussian"])
    fit_halfwidth_hz: float = Field(60.0, gt=0)
    zero_pad: int = Field(1, ge=1)
    coherent: bool = True
    repeats: int = Field(1, ge=1)
    calibrate: bool = False
    checks: List[CheckSpec] = Field(default_factory=list)


class SweepSpec(_Spec):
    parameter: Optional[str] = None
    values: List[Any] = Field(default_factory=list)
    variants: Optional[Dict[str, Dict[str, Any]]] = None
    summary: Literal["table", "gyromagnetic"] = "table"
    checks: List[CheckSpec] = Field(default_factory=list)

    @model_validator(mode="after")
    def _shape(self):
        if self.variants is None and (self.parameter is None or not self.values):
            raise ValueError("sweep needs parameter and values, or variants")
        return self


class SensitivitySpec(_Spec):
    mc_duration_s: float = Field(1.0, gt=0)


class Scenario(_Spec):
    name: str
    kind: Literal["nmr", "sensitivity", "lock", "backaction"] = "nmr"
    seed: int = Field(0, ge=0)
    n_averages: int = Field(1, ge=1)
    sample: Optional[SampleSpec] = None
    protocol: Optional[ProtocolSpec] = None
    sensor: SensorSpec = Field(default_factory=SensorSpec)
    analysis: AnalysisSpec = Field(default_factory=AnalysisSpec)
    sweep: Optional[SweepSpec] = None
    lock: Optional[LockSpec] = None
    backaction: Optional[BackActionSpec] = None
    sensitivity: Optional[SensitivitySpec] = None
    paper_scale: Optional[Dict[str, Any]] = None

    @model_validator(mode="after")
    def _kind_sections(self):
        need = {"nmr": ("sample", "protocol"), "sensitivity": ("protocol",), "lock": ("lock",),
                "backaction": ("backaction",)}[self.kind]
        for sec in need:
            if getattr(self, sec) is None:
                raise ValueError(f"kind {self.kind!r} requires a {sec!r} section")
        return self


# ---------------------------------------------------------------------------
# loading


def _format_validation(err):
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def deep_merge(base, overrides):
    out = copy.deepcopy(base)
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def set_dotted(data, path, value):
    out = copy.deepcopy(data)
    node = out
    keys = path.split(".")
    for k in keys[:-1]:
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value
    if keys[0] == "protocol" and keys[-1] in ("duty", "target_tau_s"):
        node.pop("target_tau_s" if keys[-1] == "duty" else "duty", None)
    return out


def parse_scenario(data, seed=None, paper_scale=False):
    """Validate a scenario mapping, applying CLI seed and paper-scale overrides."""
    if not isinstance(data, dict):
        raise ConfigurationError("scenario: top level must be a mapping")
    data = copy.deepcopy(data)
    if paper_scale:
        block = data.get("paper_scale") or {}
        data = deep_merge(data, block)
    if seed is not None:
        data["seed"] = int(seed)
    try:
        return Scenario.model_validate(data)
    except ValidationError as err:
        raise ConfigurationError(_format_validation(err)) from None


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads floats such as ``3.7e6`` (no exponent sign)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[0-9][0-9_]*[eE][-+]?[0-9]+
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def read_yaml(path):
    with open(path, encoding="utf-8") as fh:
        return yaml.load(fh, Loader=_Loader)  # noqa: S506 - SafeLoader subclass


def load_scenario(path, seed=None, paper_scale=False):
    path = Path(path)
    if not path.exists():
        bundled = bundled_scenario_path(str(path))
        if bundled is None:
            raise ConfigurationError(f"config: {path} not found")
        path = bundled
    return parse_scenario(read_yaml(path), seed, paper_scale)


def bundled_scenarios():
    root = resources.files("srnmr") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def bundled_scenario_path(name):
    root = resources.files("srnmr") / "scenarios"
    cand = root / (name if name.endswith(".yaml") else name + ".yaml")
    return Path(str(cand)) if cand.is_file() else None


def dump_scenario(scn):
    return yaml.safe_dump(scn.model_dump(mode="json", exclude_none=True), sort_keys=True)


def scenario_hash(scn):
    payload = {"scenario": scn.model_dump(mode="json"), "version": __version__}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# building blocks


def build_protocol(spec):
    seq = PulseSequenceSpec(spec.family, spec.repetitions, 1.0 / (2.0 * spec.f0_hz), spec.rabi_hz)
    target = spec.target_tau_s
    if spec.duty is not None:
        target = seq.duration / spec.duty
    return plan_protocol(spec.f0_hz, target, 1.0 / spec.clock_hz, seq, spec.n_iterations,
                         jitter_sigma=spec.jitter_s)


def _b0_for(spec, protocol):
    if spec.b0_tesla is not None:
        return spec.b0_tesla
    if spec.line_offset_hz is not None:
        return (protocol.f0 + spec.line_offset_hz) / CONSTANTS.gamma_p_freq
    return 1.0  # unused by the antenna preset


def build_sample(spec, protocol):
    kw = {}
    if spec.ensemble is not None:
        kw.update(ensemble_width=spec.ensemble.width_hz, ensemble_kind=spec.ensemble.kind,
                  n_isochromats=spec.ensemble.n_isochromats)
    if spec.t2_s is not None:
        kw["t2"] = spec.t2_s
    sample = build_named_sample(spec.name, _b0_for(spec, protocol), spec.line_scale_tesla,
                                tone_center=spec.tone_center_hz, tone_spacing=spec.tone_spacing_hz, **kw)
    if spec.pi_pulse_times_s:
        sample = replace(sample, pi_schedule=PiPulseSchedule(tuple(spec.pi_pulse_times_s)))
    if spec.field_noise is not None:
        sample = replace(sample, field_noise=FieldNoise(spec.field_noise.kind, spec.field_noise.sigma_tesla))
    if spec.reference is not None:
        ref = spec.reference
        sample = sample.with_lines([SpectralLine(protocol.f0 + ref.offset_hz, ref.amplitude_tesla,
                                                 t_on=ref.start_s, t_off=ref.start_s + ref.duration_s)])
    return sample


def alias_frequency(delta, dt):
    """Observed baseband frequency of an offset ``delta`` sampled every ``dt``."""
    fs = 1.0 / dt
    return abs(((delta + 0.5 * fs) % fs) - 0.5 * fs)


@lru_cache(maxsize=8)
def _backaction_stats(z, density, half_width, points):
    layer = geometry.NVLayerModel(polarized_density=density)
    grid = np.linspace(-half_width, half_width, points)
    return geometry.back_action_map(layer, z, grid, grid).stats()


def backaction_linewidth(spec, duty):
    stats = _backaction_stats(spec.z_plane_m, spec.polarized_density_m3, spec.grid_half_width_m, spec.grid_points)
    return geometry.duty_cycle_broadening(stats, duty, geometry.back_action_prefactor(spec.polarized_density_m3))


def _static_sigma(scn, protocol):
    sigma = scn.sample.static_offset_sigma_tesla
    if scn.sample.backaction is not None:
        gamma_ba = backaction_linewidth(scn.sample.backaction, protocol.duty)
        sigma = math.hypot(sigma, gamma_ba / (FWHM_PER_SIGMA * CONSTANTS.gamma_p_freq))
    return sigma


def _one_run(args):
    scn, sample, protocol, sensor, seed_seq, sigma = args
    offset_seed, lock_seed, run_seed = seed_seq.spawn(3)
    static = float(np.random.default_rng(offset_seed).normal(0.0, sigma)) if sigma > 0 else 0.0
    trace = static if static else None
    if scn.sample.lock is not None:
        lk = scn.sample.lock
        duration = protocol.n_iterations * protocol.tau_sr
        res = simulate_lock(lk.drift(), lk.loop(), max(lk.duration_s, duration + lk.dt_s), lk.dt_s, lock_seed)
        trace = (res.times, res.field_trace + static)
    s = inject_residual(sample, trace) if trace is not None else sample
    return run_sr(s, protocol, sensor, run_seed)


def simulate_averaged(scn, seed_seq, workers=1):
    """Averaged SR series for one repeat of an NMR scenario."""
    protocol = build_protocol(scn.protocol)
    sample = build_sample(scn.sample, protocol)
    sensor = scn.sensor.build()
    sigma = _static_sigma(scn, protocol)
    seeds = seed_seq.spawn(scn.n_averages)
    jobs = [(scn, sample, protocol, sensor, s, sigma) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_one_run, jobs))
    else:
        runs = [_one_run(j) for j in jobs]
    series = average_runs(runs)
    series.metadata["seed"] = str(scn.seed)
    return series, protocol, sample


def expected_offset(scn, protocol):
    """Baseband frequency where the sample lines (not the reference) appear."""
    sample = build_named_sample(scn.sample.name, _b0_for(scn.sample, protocol), scn.sample.line_scale_tesla,
                                tone_center=scn.sample.tone_center_hz, tone_spacing=scn.sample.tone_spacing_hz)
    dt = protocol.tau_sr * (2 if scn.sensor.build().pair_subtraction else 1)
    centers = [alias_frequency(line.frequency - protocol.f0, dt) for line in sample.lines]
    return float(np.mean(centers)), float(np.ptp(centers))


def analyze_series(series, analysis, center=None, ref_center=None):
    """Preprocess, transform and fit one averaged series."""
    pre = preprocess(series, analysis.discard)
    spec = periodogram(pre, zero_pad=analysis.zero_pad)
    if center is None:
        center = float(spec.frequencies[np.argmax(spec.magnitudes[1:]) + 1])
    lo = max(center - analysis.fit_halfwidth_hz, spec.frequencies[1])
    hi = center + analysis.fit_halfwidth_hz
    fit = fit_peaks(spec, analysis.n_peaks, models=tuple(analysis.models), fit_range=(lo, hi),
                    coherent=analysis.coherent)
    ref_fit = None
    if ref_center is not None:
        ref_fit = fit_peaks(spec, 1, fit_range=(ref_center - 400.0, ref_center + 400.0), coherent=False)
    return pre, spec, fit, ref_fit


def fit_metrics(fit, ref_fit=None, scn=None, pre=None):
    m = {
        "model": fit.model,
        "centers_hz": [p.center for p in fit.peaks],
        "fwhms_hz": [p.fwhm for p in fit.peaks],
        "amplitudes": [p.amplitude for p in fit.peaks],
        "rss": fit.rss,
    }
    # adjacent peaks count as resolved when further apart than their mean width
    resolved = 1
    for p, q in zip(fit.peaks[:-1], fit.peaks[1:]):
        if q.center - p.center > 0.5 * (p.fwhm + q.fwhm):
            resolved += 1
    m["n_resolved_peaks"] = resolved
    if len(fit.peaks) >= 2:
        m["splitting_hz"] = fit.peaks[1].center - fit.peaks[0].center
        big = max(fit.peaks[0].amplitude, fit.peaks[1].amplitude)
        small = min(fit.peaks[0].amplitude, fit.peaks[1].amplitude)
        m["power_ratio"] = (big / small) ** 2 if small > 0 else math.inf
    if ref_fit is not None and scn is not None:
        ref = scn.sample.reference
        sig = fit.peaks[0]
        t2_eff = 1.0 / (math.pi * sig.fwhm)
        m["amplitude_tesla"] = calibrate_amplitude(None, sig, ref_fit.peaks[0], ref.amplitude_tesla,
                                                   ref.duration_s, t2_eff, signal_start=pre.t0)
        m["reference_fit"] = {"center_hz": ref_fit.peaks[0].center, "amplitude": ref_fit.peaks[0].amplitude}
    return m


def evaluate_check(check, metrics):
    key = check.metric
    if key in ("fwhm_hz", "center_hz"):
        vals = metrics.get(key.replace("_hz", "s_hz"))
        value = vals[check.peak] if vals and check.peak < len(vals) else None
    else:
        value = metrics.get(key)
    label = check.label or (f"{key}[{check.peak}]" if key in ("fwhm_hz", "center_hz") else key)
    if value is None:
        return {"label": label, "value": None, "target": check.target, "tolerance": check.tolerance, "passed": False}
    if isinstance(check.target, str):
        passed = str(value) == check.target
    else:
        passed = abs(float(value) - float(check.target)) <= check.tolerance
    return {"label": label, "value": value, "target": check.target, "tolerance": check.tolerance,
            "passed": bool(passed)}


# ---------------------------------------------------------------------------
# artifacts


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _versions():
    return {"srnmr": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _record(scn, h, run_dir, artifacts, metrics, checks, extra=None):
    rec = {
        "scenario": scn.name,
        "kind": scn.kind,
        "hash": h,
        "run_dir": str(run_dir),
        "seed": scn.seed,
        "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "metrics": metrics,
        "checks": checks,
        "versions": _versions(),
    }
    if extra:
        rec.update(extra)
    _write_json(run_dir / "record.json", rec)
    return rec


def _run_nmr(scn, run_dir, plots, workers):
    root = np.random.SeedSequence(scn.seed)
    repeat_seeds = root.spawn(scn.analysis.repeats)
    protocol = build_protocol(scn.protocol)
    center, _ = expected_offset(scn, protocol)
    sensor = scn.sensor.build()
    dt = protocol.tau_sr * (2 if sensor.pair_subtraction else 1)
    ref_center = None
    if scn.analysis.calibrate:
        if scn.sample.reference is None:
            raise ConfigurationError("analysis.calibrate: requires sample.reference")
        ref_center = alias_frequency(scn.sample.reference.offset_hz, dt)
    fits, all_metrics = [], []
    artifacts = {}
    for r, seed_seq in enumerate(repeat_seeds):
        series, protocol, _ = simulate_averaged(scn, seed_seq, workers)
        pre, spec, fit, ref_fit = analyze_series(series, scn.analysis, center, ref_center)
        fits.append(fit)
        all_metrics.append(fit_metrics(fit, ref_fit, scn, pre))
        if r == 0:
            series.to_csv(run_dir / "series.csv")
            series.save_npz(run_dir / "series.npz")
            spec.to_csv(run_dir / "spectrum.csv")
            artifacts.update(series=run_dir / "series.csv", series_npz=run_dir / "series.npz",
                             spectrum=run_dir / "spectrum.csv")
            if plots:
                lo = max(center - scn.analysis.fit_halfwidth_hz, spec.frequencies[1])
                svg = spectrum_svg(spec, fit, fit_range=(lo, center + scn.analysis.fit_halfwidth_hz))
                (run_dir / "spectrum.svg").write_text(svg, encoding="utf-8")
                artifacts["plot"] = run_dir / "spectrum.svg"
    metrics = _combine_metrics(all_metrics)
    metrics["protocol"] = {"f0_hz": protocol.f0, "tau_sr_s": protocol.tau_sr, "k": protocol.k,
                           "duty": protocol.duty, "nyquist_hz": nyquist_band(protocol, sensor.pair_subtraction),
                           "duration_s": protocol.n_iterations * protocol.tau_sr}
    metrics["expected_center_hz"] = center
    if scn.sample.backaction is not None:
        metrics["backaction_linewidth_hz"] = backaction_linewidth(scn.sample.backaction, protocol.duty)
    metrics["ac_zeeman_hz"] = geometry.ac_zeeman_broadening(scn.protocol.rabi_hz, 400e6)
    text = [fits[0].report()]
    if len(fits) > 1:
        text.append("fwhm_over_repeats: " + ", ".join(f"{m:.6f} +/- {s:.6f}" for m, s in fwhm_report(fits)))
        metrics["uncertainties"] = spread(fits)
    (run_dir / "fit.txt").write_text("\n".join(text) + "\n", encoding="utf-8")
    artifacts["fit"] = run_dir / "fit.txt"
    checks = [evaluate_check(c, metrics) for c in scn.analysis.checks]
    return artifacts, metrics, checks


def _combine_metrics(ms):
    out = dict(ms[0])
    if len(ms) == 1:
        return out
    for key in ("centers_hz", "fwhms_hz", "amplitudes"):
        arr = np.array([m[key] for m in ms])
        out[key] = arr.mean(axis=0).tolist()
        out[key.replace("_hz", "") + "_std"] = arr.std(axis=0, ddof=1).tolist()
    for key in ("splitting_hz", "power_ratio", "amplitude_tesla"):
        if key in ms[0]:
            vals = np.array([m[key] for m in ms])
            out[key] = float(vals.mean())
            out[key + "_std"] = float(vals.std(ddof=1))
    models = [m["model"] for m in ms]
    out["model"] = max(set(models), key=lambda x: (models.count(x), x == "lorentzian"))
    out["per_repeat"] = ms
    return out


def _run_sensitivity(scn, run_dir, plots, workers):
    protocol = build_protocol(scn.protocol)
    sensor = scn.sensor.build()
    closed = sensitivity_estimate(sensor, protocol.tau_sr, protocol.subsequence)
    spec = scn.sensitivity or SensitivitySpec()
    per = 2 if sensor.pair_subtraction else 1
    n = int(round(spec.mc_duration_s / (protocol.tau_sr * per))) * per
    mc_protocol = plan_protocol(protocol.f0, protocol.tau_sr, protocol.clock_period, protocol.subsequence, n)
    mc = sensitivity_monte_carlo(sensor, mc_protocol, np.random.SeedSequence(scn.seed))
    metrics = {"sensitivity_tesla_per_rthz": closed, "sensitivity_mc_tesla_per_rthz": mc,
               "mc_over_closed": mc / closed}
    (run_dir / "sensitivity.txt").write_text(
        f"closed_form_T_per_rtHz: {closed:.6e}\nmonte_carlo_T_per_rtHz: {mc:.6e}\n", encoding="utf-8")
    checks = [evaluate_check(c, metrics) for c in scn.analysis.checks]
    return {"report": run_dir / "sensitivity.txt"}, metrics, checks


def _run_lock(scn, run_dir, plots, workers):
    lk = scn.lock
    res = simulate_lock(lk.drift(), lk.loop(), lk.duration_s, lk.dt_s, np.random.SeedSequence(scn.seed))
    step = max(1, int(round(1.0 / (lk.fast_bandwidth_hz * lk.dt_s))))
    res_dec = type(res)(res.times[::step], res.field_trace[::step], res.correction[::step],
                        res.setpoint_corrections, res.residual_rms, res.end_of_interval)
    res_dec.to_csv(run_dir / "trace.csv")
    counts, edges = np.histogram(res.field_trace, bins=60)
    with open(run_dir / "histogram.csv", "w", encoding="utf-8") as fh:
        fh.write("bin_low_T,bin_high_T,count\n")
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            fh.write(f"{lo:.9e},{hi:.9e},{c}\n")
    metrics = {
        "residual_rms_tesla": res.residual_rms,
        "end_of_interval_rms_tesla": res.end_of_interval_rms,
        "broadening_hz": broadening_from_noise(res.residual_rms),
    }
    (run_dir / "lock.txt").write_text("".join(f"{k}: {v:.6e}\n" for k, v in metrics.items()), encoding="utf-8")
    checks = [evaluate_check(c, metrics) for c in scn.analysis.checks]
    return {"trace": run_dir / "trace.csv", "histogram": run_dir / "histogram.csv",
            "report": run_dir / "lock.txt"}, metrics, checks


def _run_backaction(scn, run_dir, plots, workers):
    ba = scn.backaction
    layer = geometry.NVLayerModel(polarized_density=ba.polarized_density_m3)
    grid = np.linspace(-ba.grid_half_width_m, ba.grid_half_width_m, ba.grid_points)
    bmap = geometry.back_action_map(layer, ba.z_plane_m, grid, grid)
    with open(run_dir / "map.csv", "w", encoding="utf-8") as fh:
        fh.write("x_um,y_um,factor\n")
        for i, x in enumerate(grid):
            for j, y in enumerate(grid):
                fh.write(f"{x * 1e6:.6f},{y * 1e6:.6f},{bmap.factor[i, j]:.9e}\n")
    stats = bmap.stats()
    prefactor = geometry.back_action_prefactor(ba.polarized_density_m3)
    metrics = {"map": stats, "prefactor_tesla": prefactor,
               "broadening_hz": {str(d): geometry.duty_cycle_broadening(stats, d, prefactor)
                                 for d in (0.18, 0.36, 0.53)}}
    _write_json(run_dir / "backaction.json", metrics)
    checks = [evaluate_check(c, metrics) for c in scn.analysis.checks]
    return {"map": run_dir / "map.csv", "report": run_dir / "backaction.json"}, metrics, checks


_RUNNERS = {"nmr": _run_nmr, "sensitivity": _run_sensitivity, "lock": _run_lock, "backaction": _run_backaction}


def run_scenario(config, out_dir="runs", seed=None, paper_scale=False, plots=False, workers=1):
    """Run one scenario and write its artifacts; returns the run record dict."""
    scn = config if isinstance(config, Scenario) else load_scenario(config, seed, paper_scale)
    if isinstance(config, Scenario) and seed is not None:
        scn = scn.model_copy(update={"seed": int(seed)})
    h = scenario_hash(scn)
    run_dir = Path(out_dir) / h
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "scenario.yaml").write_text(dump_scenario(scn), encoding="utf-8")
    artifacts, metrics, checks = _RUNNERS[scn.kind](scn, run_dir, plots, workers)
    artifacts["scenario"] = run_dir / "scenario.yaml"
    return _record(scn, h, run_dir, artifacts, metrics, checks)


def sweep_points(scn):
    """(label, Scenario) for every sweep value."""
    sw = scn.sweep
    base = scn.model_dump(mode="json", exclude={"sweep"})
    points = []
    if sw.variants is not None:
        for label, over in sw.variants.items():
            data = deep_merge(base, over)
            data["name"] = f"{scn.name}/{label}"
            points.append((label, parse_scenario(data)))
    else:
        for v in sw.values:
            data = set_dotted(base, sw.parameter, v)
            data["name"] = f"{scn.name}/{sw.parameter}={v}"
            points.append((f"{sw.parameter}={v}", parse_scenario(data)))
    return points


def run_sweep(config, out_dir="runs", seed=None, paper_scale=False, plots=False, workers=1):
    """Run every sweep point; individual failures are recorded and the sweep continues."""
    scn = config if isinstance(config, Scenario) else load_scenario(config, seed, paper_scale)
    if scn.sweep is None:
        raise ConfigurationError("sweep: section missing")
    h = scenario_hash(scn)
    sweep_dir = Path(out_dir) / h
    sweep_dir.mkdir(parents=True, exist_ok=True)
    records = []
    rows = []
    for label, point in sweep_points(scn):
        try:
            rec = run_scenario(point, sweep_dir, plots=plots, workers=workers)
            m = rec["metrics"]
            rows.append({"label": label, "status": "ok", "model": m.get("model"),
                         "centers_hz": m.get("centers_hz"), "fwhms_hz": m.get("fwhms_hz"),
                         "fwhm_std": m.get("fwhms_std"), "metrics": m})
            records.append(rec)
        except Exception as exc:  # noqa: BLE001 - a sweep keeps going
            rows.append({"label": label, "status": f"error: {type(exc).__name__}: {exc}"})
    summary = {"rows": rows}
    if scn.sweep.summary == "gyromagnetic":
        pts = []
        for label, point in sweep_points(scn):
            row = next(r for r in rows if r["label"] == label)
            if row["status"] != "ok":
                continue
            proto = build_protocol(point.protocol)
            pts.append((_b0_for(point.sample, proto), proto.f0 + row["centers_hz"][0]))
        g = gyromagnetic_fit(pts)
        summary["gyromagnetic_slope_hz_per_tesla"] = g.slope
        summary["gyromagnetic_intercept_hz"] = g.intercept
        summary["gyromagnetic_slope_stderr"] = g.slope_stderr
    _write_summary(sweep_dir, scn, rows, summary)
    checks = [evaluate_check(c, summary) for c in scn.sweep.checks]
    for row in rows:
        m = row.get("metrics")
        if m is None:
            continue
        for c in scn.sweep.checks:
            if c.label and c.label.startswith(row["label"] + ":"):
                checks = [x for x in checks if x["label"] != c.label]
                checks.append(evaluate_check(c, m))
    rec = _record(scn, h, sweep_dir, {"summary": sweep_dir / "summary.csv"}, summary, checks,
                  {"points": [r["hash"] for r in records]})
    return rec, records


def _write_summary(sweep_dir, scn, rows, summary):
    with open(sweep_dir / "summary.csv", "w", encoding="utf-8") as fh:
        fh.write("point,status,model,center_hz,fwhm_hz,fwhm_std_hz,extra\n")
        for r in rows:
            if r["status"] != "ok":
                fh.write(f"{r['label']},\"{r['status']}\",,,,,\n")
                continue
            m = r["metrics"]
            std = (r.get("fwhm_std") or [math.nan])[0]
            extra = []
            for key in ("backaction_linewidth_hz", "ac_zeeman_hz", "splitting_hz"):
                if key in m:
                    extra.append(f"{key}={m[key]:.6g}")
            fh.write(f"{r['label']},ok,{r['model']},{r['centers_hz'][0]:.6f},{r['fwhms_hz'][0]:.6f},"
                     f"{std:.6f},{';'.join(extra)}\n")
    lines = [f"sweep: {scn.name}"]
    for key in ("gyromagnetic_slope_hz_per_tesla", "gyromagnetic_intercept_hz", "gyromagnetic_slope_stderr"):
        if key in summary:
            lines.append(f"{key}: {summary[key]:.6f}")
    (sweep_dir / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# reports


def collect_records(paths):
    recs = []
    for p in paths:
        p = Path(p)
        files = [p] if p.is_file() else sorted(p.rglob("record.json"))
        for f in files:
            with open(f, encoding="utf-8") as fh:
                recs.append(json.load(fh))
    return recs


def report(records):
    """Consolidated text and CSV summaries of run records."""
    records = list(records)
    if not records:
        raise ValueError("report: no records")
    text = []
    rows = ["scenario,hash,check,value,target,tolerance,passed"]
    for rec in records:
        text.append(f"== {rec['scenario']} ({rec['kind']}, hash {rec['hash']}) ==")
        m = rec.get("metrics", {})
        for key in ("model", "centers_hz", "fwhms_hz", "splitting_hz", "power_ratio", "amplitude_tesla",
                    "gyromagnetic_slope_hz_per_tesla", "sensitivity_tesla_per_rthz", "residual_rms_tesla"):
            if key in m:
                text.append(f"  {key}: {_fmt(m[key])}")
        for c in rec.get("checks", []):
            status = "PASS" if c["passed"] else "FAIL"
            text.append(f"  {status} {c['label']}: value={_fmt(c['value'])} target={c['target']} "
                        f"tol={c['tolerance']}")
            rows.append(f"{rec['scenario']},{rec['hash']},{c['label']},{_fmt(c['value'])},{c['target']},"
                        f"{c['tolerance']},{c['passed']}")
    return "\n".join(text) + "\n", "\n".join(rows) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)
