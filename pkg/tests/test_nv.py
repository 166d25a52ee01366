import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from srnmr.constants import CONSTANTS
from srnmr.nv import (
    PulseSequenceSpec,
    SensorModel,
    filter_response,
    readout,
    readout_mean,
    sensitivity_estimate,
    toggling_phase,
    two_pi_field,
)
from srnmr.signal import ConfigurationError
from srnmr.sr import plan_protocol, sensitivity_monte_carlo


def xy8(f0, reps=6):
    return PulseSequenceSpec("XY8", reps, 1.0 / (2.0 * f0))


def resonant(amplitude, f, phase=0.0):
    return lambda t: amplitude * np.cos(2 * np.pi * f * t + phase)


def test_zero_field_gives_zero_phase():
    assert toggling_phase(lambda t: np.zeros_like(t), xy8(3.742e6)) == 0.0


def test_two_pi_field_value():
    assert two_pi_field(3.742e6, 48) == pytest.approx(8.75e-6, rel=0.01)


def test_resonant_phase_two_pi_and_pi():
    f0 = 3.742e6
    b = two_pi_field(f0, 48)
    assert toggling_phase(resonant(b, f0), xy8(f0)) == pytest.approx(2 * np.pi, rel=0.005)
    assert toggling_phase(resonant(b / 2, f0), xy8(f0)) == pytest.approx(np.pi, rel=0.005)


def test_two_pi_field_scalings():
    assert two_pi_field(3e6, 96) == pytest.approx(two_pi_field(3e6, 48) / 2, rel=1e-15)
    assert two_pi_field(6e6, 48) == pytest.approx(2 * two_pi_field(3e6, 48), rel=1e-15)
    with pytest.raises(ValueError):
        two_pi_field(0.0, 48)


@given(f0=st.floats(1e6, 2e7), reps=st.integers(1, 12), family=st.sampled_from(["XY8", "CPMG"]))
def test_two_derivations_agree(f0, reps, family):
    seq = PulseSequenceSpec(family, reps if family == "XY8" else 8 * reps, 1.0 / (2 * f0), rabi_frequency=1e9)
    b = two_pi_field(f0, seq.n_pulses)
    assert toggling_phase(resonant(b, f0), seq) == pytest.approx(2 * np.pi, rel=0.005)


@given(scale=st.floats(-10, 10), phase=st.floats(0, 2 * np.pi))
def test_phase_linear_in_amplitude(scale, phase):
    seq = xy8(3.742e6)
    base = toggling_phase(resonant(1e-7, 3.742e6, phase), seq)
    assert toggling_phase(resonant(scale * 1e-7, 3.742e6, phase), seq) == pytest.approx(scale * base, rel=1e-12,
                                                                                       abs=1e-18)


def test_filter_response_matches_quadrature():
    f0 = 3.742e6
    seq = xy8(f0)
    gamma = CONSTANTS.gamma_nv_freq
    for f in (f0, f0 * 1.01, 0.7 * f0):
        k = complex(filter_response(seq, f))
        b = 1e-8
        re = toggling_phase(resonant(b, f), seq, nodes=64)
        im = toggling_phase(lambda t: -b * np.sin(2 * np.pi * f * t), seq, nodes=64)
        assert re == pytest.approx(2 * np.pi * gamma * b * k.real, rel=1e-6, abs=1e-9)
        assert im == pytest.approx(-2 * np.pi * gamma * b * k.imag, rel=1e-6, abs=1e-9)


def test_detuned_rejection():
    f0 = 3.742e6
    seq = xy8(f0)
    k0 = abs(filter_response(seq, f0))
    n = seq.n_pulses
    assert abs(filter_response(seq, f0 * (1 + 1 / (2 * n)))) < k0
    # odd harmonics of the toggling function sit at 3 f0, so sample below 2 f0
    far = np.concatenate([np.linspace(0.02 * f0, f0 - 10 / seq.duration, 400),
                          np.linspace(f0 + 10 / seq.duration, 1.9 * f0, 400)])
    assert np.max(np.abs(filter_response(seq, far))) <= 0.05 * k0


def test_readout_difference_signal():
    s = SensorModel()
    diff = lambda phi: readout_mean(phi, s, -1) - readout_mean(phi, s, +1)  # noqa: E731
    assert diff(0.0) == 0.0
    assert diff(np.pi / 2) == pytest.approx(s.contrast, rel=1e-12)
    assert diff(np.pi / 2 + 0.3) < diff(np.pi / 2)
    for phi in np.linspace(-0.1, 0.1, 9):
        assert diff(phi) == pytest.approx(s.contrast * phi, rel=0.01, abs=1e-15)


def test_readout_noise_mean_zero_at_zero_phase(rng):
    s = SensorModel(photons_per_readout=1e4)
    d = readout(np.zeros(200000), s, -1, rng) - readout(np.zeros(200000), s, +1, rng)
    assert abs(d.mean()) < 5 * math.sqrt(2e-4 / 200000)


@pytest.mark.parametrize("mode", ["ensemble-gaussian", "single-shot-poisson"])
def test_shot_noise_variance_scaling(mode):
    rng = np.random.default_rng(3)
    var = {}
    for n in (1e3, 1e4, 1e5):
        s = SensorModel(photons_per_readout=n, readout_mode=mode)
        var[n] = readout(np.zeros(400000), s, +1, rng).var()
    mean = readout_mean(0.0, SensorModel(), 1)
    for n, v in var.items():
        expected = (mean if mode == "single-shot-poisson" else 1.0) / n
        assert v == pytest.approx(expected, rel=0.05)


def test_sensitivity_closed_form_and_scaling():
    proto = plan_protocol(3.74065e6, 24.06e-6)
    seq = proto.subsequence
    eta = sensitivity_estimate(SensorModel(), proto.tau_sr, seq)
    assert eta == pytest.approx(50e-12, rel=0.25)
    eta2 = sensitivity_estimate(SensorModel(photons_per_readout=1.2e8), proto.tau_sr, seq)
    assert eta / eta2 == pytest.approx(math.sqrt(2), rel=0.01)


def test_sensitivity_monte_carlo_matches_closed_form():
    proto = plan_protocol(3.74065e6, 24.06e-6, n_iterations=41570)
    eta = sensitivity_estimate(SensorModel(), proto.tau_sr, proto.subsequence)
    mc = np.mean([sensitivity_monte_carlo(SensorModel(), proto, seed=s) for s in range(4)])
    assert mc == pytest.approx(eta, rel=0.15)


def test_sensor_and_sequence_validation():
    with pytest.raises(ConfigurationError):
        SensorModel(contrast=1.5)
    with pytest.raises(ConfigurationError):
        SensorModel(photons_per_readout=0)
    with pytest.raises(ConfigurationError):
        PulseSequenceSpec(repetitions=0)
    with pytest.raises(ConfigurationError):
        PulseSequenceSpec(pulse_spacing=1e-9, rabi_frequency=1e6)
