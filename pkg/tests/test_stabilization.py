import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from srnmr.constants import CONSTANTS
from srnmr.nv import SensorModel
from srnmr.signal import ConfigurationError, SampleModel, SpectralLine, evaluate_field
from srnmr.spectral import fit_peaks, periodogram, preprocess
from srnmr.sr import average_runs, plan_protocol, run_sr
from srnmr.stabilization import (
    DriftModel,
    LockResult,
    LoopConfig,
    broadening_from_noise,
    inject_residual,
    simulate_lock,
)

TUNED_DRIFT = DriftModel(random_walk_sigma=20e-9, white_sigma=5e-9, inter_sensor_walk=2.5e-9)
TUNED_LOOP = LoopConfig(fast_bandwidth=12.5, slow_period=300.0, sensor_noise=5e-9)


def test_tuned_lock_residual_band():
    res = simulate_lock(TUNED_DRIFT, TUNED_LOOP, 50 * 3600.0, 0.04, seed=1)
    assert 25e-9 <= res.residual_rms <= 50e-9
    assert res.end_of_interval.size == 600


def test_zero_drift_gives_zero_residual():
    res = simulate_lock(DriftModel(), LoopConfig(), 900.0, 0.04, seed=0)
    assert res.residual_rms == 0.0


def test_open_loop_random_walk_growth():
    drift = DriftModel(random_walk_sigma=10e-9)
    loop = LoopConfig(enabled=False)
    finals = np.array([simulate_lock(drift, loop, 100.0, 0.04, seed=s).field_trace[-1] for s in range(400)])
    assert finals.std() == pytest.approx(10e-9 * math.sqrt(100.0), rel=0.1)


@given(seed=st.integers(0, 10_000), duration=st.floats(120.0, 1800.0), slow=st.sampled_from([30.0, 60.0, 300.0]))
def test_fast_loop_suppresses_drift(seed, duration, slow):
    loop = LoopConfig(fast_bandwidth=12.5, slow_period=slow, sensor_noise=5e-9)
    on = simulate_lock(TUNED_DRIFT, loop, duration, 0.04, seed=seed)
    off = simulate_lock(TUNED_DRIFT, LoopConfig(enabled=False), duration, 0.04, seed=seed)
    assert on.residual_rms <= off.residual_rms


def test_end_of_interval_deviations_are_gaussian():
    loop = LoopConfig(fast_bandwidth=12.5, slow_period=2.0, sensor_noise=5e-9)
    res = simulate_lock(TUNED_DRIFT, loop, 2.0 * 20_500, 0.04, seed=4)
    dev = res.end_of_interval
    assert dev.size >= 10_000
    assert abs(stats.skew(dev)) < 0.1
    assert abs(stats.kurtosis(dev)) < 0.2


def test_lock_validation():
    with pytest.raises(ConfigurationError):
        DriftModel(random_walk_sigma=-1.0)
    with pytest.raises(ConfigurationError):
        LoopConfig(fast_bandwidth=0.0)
    with pytest.raises(ConfigurationError):
        LoopConfig(fast_bandwidth=1.0, slow_period=0.5)
    with pytest.raises(ConfigurationError):
        simulate_lock(TUNED_DRIFT, TUNED_LOOP, 10.0, 0.1)


def test_lock_is_seed_deterministic():
    a = simulate_lock(TUNED_DRIFT, TUNED_LOOP, 600.0, 0.04, seed=3)
    b = simulate_lock(TUNED_DRIFT, TUNED_LOOP, 600.0, 0.04, seed=3)
    np.testing.assert_array_equal(a.field_trace, b.field_trace)


def test_broadening_from_noise():
    assert broadening_from_noise(25e-9) == pytest.approx(2.5, rel=0.02)
    assert broadening_from_noise(0.0) == 0.0
    assert broadening_from_noise(50e-9) == pytest.approx(2 * broadening_from_noise(25e-9), rel=1e-12)


def test_zero_trace_leaves_sample_unchanged():
    sample = SampleModel((SpectralLine(3.7e6, 1e-9),))
    assert inject_residual(sample, 0.0) is sample
    assert inject_residual(sample, (np.array([0.0, 1.0]), np.zeros(2))) is sample


def test_constant_offset_shifts_line_exactly():
    sample = SampleModel((SpectralLine(3.7e6, 1.0),))
    db = 3e-8
    moved = inject_residual(sample, db)
    target = SampleModel((SpectralLine(3.7e6 + CONSTANTS.gamma_p_freq * db, 1.0),))
    t = np.linspace(0, 0.05, 501)
    np.testing.assert_allclose(evaluate_field(moved, t), evaluate_field(target, t), atol=1e-9)


def test_inject_rejects_short_trace_and_double_residual():
    sample = SampleModel((SpectralLine(3.7e6, 1.0),))
    res = simulate_lock(TUNED_DRIFT, TUNED_LOOP, 20.0, 0.04, seed=0)
    with pytest.raises(ConfigurationError):
        inject_residual(sample, res, duration=100.0)
    with pytest.raises(ConfigurationError):
        inject_residual(inject_residual(sample, res), 1e-9)


def test_static_offsets_broaden_to_closed_form():
    sigma = 25e-9
    proto = plan_protocol(3.74065e6, 24.06e-6, n_iterations=166400)
    sensor = SensorModel()
    rng = np.random.default_rng(8)
    line = SpectralLine(proto.f0 + 300.0, 5e-9)
    runs = [run_sr(inject_residual(SampleModel((line,)), float(rng.normal(0.0, sigma))), proto, sensor, seed=s)
            for s in range(256)]
    spec = periodogram(preprocess(average_runs(runs)))
    fit = fit_peaks(spec, 1, fit_range=(285.0, 315.0))
    assert fit.model == "gaussian"
    assert fit.peaks[0].fwhm == pytest.approx(broadening_from_noise(sigma), rel=0.15)


def test_lock_result_csv(tmp_path):
    res = simulate_lock(TUNED_DRIFT, TUNED_LOOP, 10.0, 0.04, seed=0)
    res.to_csv(tmp_path / "trace.csv")
    data = np.loadtxt(tmp_path / "trace.csv", delimiter=",", skiprows=1)
    assert data.shape == (res.times.size, 3)
    assert isinstance(res, LockResult)
