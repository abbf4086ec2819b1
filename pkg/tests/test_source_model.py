"""Tests for emitted states, generation rates and the DWDM channel plan."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.constants import c as C_LIGHT

from entangle_sim.quantum_core import born_probability, fidelity, timebin_projector
from entangle_sim.source_model import (
    ChannelPair,
    PumpConfig,
    SfwmConfig,
    SourceConfig,
    channel_pair_for,
    dephased,
    itu_frequency,
    itu_wavelength_nm,
    noise_rate,
    pair_rate,
    polarization_state,
    pump_itu_channel,
    timebin_state,
)

PUMP = PumpConfig()  # 1550.1 nm, 27.9 MHz


def test_channel_grid_frequencies():
    # Oracle: 100 GHz ITU grid anchored at 190 THz.
    assert itu_frequency(34) == pytest.approx(193.4, abs=1e-12)
    assert itu_frequency(1) == pytest.approx(190.1, abs=1e-12)
    assert itu_frequency(72) == pytest.approx(197.2, abs=1e-12)
    for bad in (0, 73, -5):
        with pytest.raises(ValueError):
            itu_frequency(bad)


def test_channel_wavelength_against_physical_constants():
    expected_nm = C_LIGHT / 193.4e12 * 1e9
    assert itu_wavelength_nm(34) == pytest.approx(expected_nm, rel=1e-12)
    assert itu_wavelength_nm(34) == pytest.approx(1550.1, abs=0.1)


def test_pump_channel_detection():
    assert pump_itu_channel(PUMP) == 34
    assert pump_itu_channel(PumpConfig(center_wavelength_nm=itu_wavelength_nm(20))) == 20
    # A pump parked halfway between channels has no grid assignment.
    off_grid = C_LIGHT / 193.45e12 * 1e9
    with pytest.raises(ValueError):
        pump_itu_channel(PumpConfig(center_wavelength_nm=off_grid))


def test_pump_config_validation():
    with pytest.raises(ValueError):
        PumpConfig(repetition_rate_hz=-1.0)
    with pytest.raises(ValueError):
        PumpConfig(average_power_w=-1e-6)
    # Pulses longer than the repetition period cannot form a pulse train.
    with pytest.raises(ValueError):
        PumpConfig(pulse_width_s=1e-6, repetition_rate_hz=2e6)
    assert PUMP.at_power(2e-4).average_power_w == 2e-4


def test_channel_pair_symmetry():
    near = channel_pair_for(34, 3)
    assert (near.signal_channel, near.idler_channel) == (37, 31)
    assert near.label() == "C31-C37"

    edge = channel_pair_for(34, 4)
    assert (edge.signal_channel, edge.idler_channel) == (38, 30)
    assert edge.label() == "C30-C38"

    # Energy conservation on the grid: signal + idler frequencies sum to 2x pump.
    assert edge.signal_freq_thz + edge.idler_freq_thz == pytest.approx(
        2 * itu_frequency(34), abs=1e-12
    )

    with pytest.raises(ValueError):
        channel_pair_for(34, 0)
    # Asymmetric frequencies must be rejected at construction.
    with pytest.raises(ValueError):
        ChannelPair(37, 31, 3, itu_frequency(37), itu_frequency(30))


def test_boundary_parameters_apply_from_configured_detuning():
    cfg = SfwmConfig(boundary_pair_efficiency=0.9, boundary_noise_factor=1.2, boundary_detuning=4)
    assert cfg.pair_efficiency_for(3) == 1.0
    assert cfg.pair_efficiency_for(4) == 0.9
    assert cfg.pair_efficiency_for(5) == 0.9
    assert cfg.noise_factor_for(3) == 1.0
    assert cfg.noise_factor_for(4) == 1.2


def test_pair_rate_is_quadratic_with_known_values():
    pair = channel_pair_for(34, 3)
    # Frozen arithmetic: kappa * P^2 pairs per pulse.
    cfg = SfwmConfig(kappa=1.1e7)
    assert pair_rate(PUMP.at_power(1e-4), cfg, pair) == pytest.approx(0.11, rel=1e-12)
    cfg2 = SfwmConfig(kappa=9.0e6)
    assert pair_rate(PUMP.at_power(1e-4), cfg2, pair) == pytest.approx(0.09, rel=1e-12)
    assert pair_rate(PUMP.at_power(2e-5), cfg2, pair) == pytest.approx(3.6e-3, rel=1e-12)

    # Boundary pairs keep only the configured correlated fraction.
    edge = channel_pair_for(34, 4)
    cfg3 = SfwmConfig(kappa=9.0e6, boundary_pair_efficiency=0.96)
    assert pair_rate(PUMP.at_power(1e-4), cfg3, edge) == pytest.approx(0.09 * 0.96, rel=1e-12)


def test_noise_rate_is_linear_with_boundary_factor():
    cfg = SfwmConfig(noise_coeff=200.0, boundary_noise_factor=1.05)
    assert noise_rate(PUMP.at_power(1e-4), cfg, 37) == pytest.approx(0.02, rel=1e-12)
    assert noise_rate(PUMP.at_power(1e-4), cfg, 30) == pytest.approx(0.021, rel=1e-12)
    with pytest.raises(ValueError):
        noise_rate(PUMP, cfg, 99)


@given(p=st.floats(min_value=1e-7, max_value=1e-3), scale=st.floats(min_value=1.1, max_value=10.0))
@settings(max_examples=40, deadline=None)
def test_rate_scaling_exponents(p, scale):
    pair = channel_pair_for(34, 2)
    cfg = SfwmConfig(kappa=1e6, noise_coeff=100.0)
    mu1 = pair_rate(PUMP.at_power(p), cfg, pair)
    mu2 = pair_rate(PUMP.at_power(scale * p), cfg, pair)
    assert mu2 / mu1 == pytest.approx(scale**2, rel=1e-9)
    nu1 = noise_rate(PUMP.at_power(p), cfg, 36)
    nu2 = noise_rate(PUMP.at_power(scale * p), cfg, 36)
    assert nu2 / nu1 == pytest.approx(scale, rel=1e-9)


def test_polarization_state_components():
    st_bal = polarization_state(1.0, 0.0)
    assert np.allclose(st_bal.amplitudes, np.array([1, 0, 0, 1]) / math.sqrt(2))
    st_unbal = polarization_state(0.5, math.pi / 2)
    norm = math.sqrt(1 + 0.25)
    assert st_unbal.amplitudes[0] == pytest.approx(1 / norm)
    assert st_unbal.amplitudes[3] == pytest.approx(0.5j / norm)
    with pytest.raises(ValueError):
        polarization_state(-0.2, 0.0)


@given(
    eta=st.floats(min_value=0.05, max_value=5.0),
    delta=st.floats(min_value=-math.pi, max_value=math.pi),
)
@settings(max_examples=50, deadline=None)
def test_polarization_overlap_closed_form(eta, delta):
    # Overlap with the balanced state: |1 + eta e^{i delta}|^2 / (2 (1 + eta^2)).
    psi = polarization_state(eta, delta)
    target = polarization_state(1.0, 0.0)
    expected = (1 + 2 * eta * math.cos(delta) + eta * eta) / (2 * (1 + eta * eta))
    assert fidelity(psi, target) == pytest.approx(expected, abs=1e-10)


def test_dephasing_kills_coherence_not_populations():
    pure = polarization_state(0.5, 0.0)
    rho = dephased(pure, 0.0)
    diag = np.real(np.diag(rho.matrix))
    assert diag == pytest.approx([0.8, 0.0, 0.0, 0.2], abs=1e-12)
    assert np.max(np.abs(rho.matrix - np.diag(np.diag(rho.matrix)))) == 0.0
    # Mixture keeps populations, so the overlap is the classical one.
    assert fidelity(rho, pure) == pytest.approx(0.8 * 0.8 + 0.2 * 0.2, abs=1e-12)

    # Partial dephasing interpolates linearly in the off-diagonal.
    half = dephased(pure, 0.5)
    full = pure.density()
    assert half.matrix[0, 3] == pytest.approx(0.5 * full.matrix[0, 3], abs=1e-12)
    assert half.matrix[0, 0] == pytest.approx(full.matrix[0, 0], abs=1e-12)

    with pytest.raises(ValueError):
        dephased(pure, 1.2)


def test_timebin_state_and_pump_phase_periodicity():
    state = timebin_state(0.0)
    assert np.allclose(state.amplitudes, np.array([1, 0, 0, -1]) / math.sqrt(2))

    # Interference in the central bin: p = (1 - cos(2 phi_p - phi_s - phi_i)) / 4
    # at the state level, before analyzer post-selection factors.
    for phi_p, phi_s, phi_i in [(0.0, 0.0, 0.0), (0.3, 0.5, -0.2), (1.2, 0.1, 0.7)]:
        p = born_probability(timebin_state(phi_p), timebin_projector(phi_s, phi_i))
        expected = (1 - math.cos(2 * phi_p - phi_s - phi_i)) / 4
        assert p == pytest.approx(expected, abs=1e-12)


@given(phi=st.floats(min_value=-10.0, max_value=10.0))
@settings(max_examples=30, deadline=None)
def test_timebin_pump_phase_is_pi_periodic(phi):
    # The pump phase enters doubled, so the state recurs with period pi.
    assert fidelity(timebin_state(phi + math.pi), timebin_state(phi)) == pytest.approx(
        1.0, abs=1e-10
    )


def test_timebin_basis_slot_probabilities():
    state = timebin_state(0.55)
    assert born_probability(state, timebin_projector("S", "S")) == pytest.approx(0.5, abs=1e-12)
    assert born_probability(state, timebin_projector("L", "L")) == pytest.approx(0.5, abs=1e-12)
    assert born_probability(state, timebin_projector("S", "L")) == pytest.approx(0.0, abs=1e-12)
    assert born_probability(state, timebin_projector("L", "S")) == pytest.approx(0.0, abs=1e-12)


def test_source_config_states_and_transmissions():
    src = SourceConfig(sfwm=SfwmConfig(eta=1.0, delta=0.0, phi_p=0.2, coherence=1.0))
    pol = src.emitted_state("polarization")
    assert fidelity(pol, polarization_state(1.0, 0.0)) == pytest.approx(1.0, abs=1e-12)
    tb = src.emitted_state("timebin")
    assert fidelity(tb, timebin_state(0.2)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        src.emitted_state("frequency")

    # 4 dB per arm: 10^(-0.4).
    assert src.transmission_s() == pytest.approx(10 ** (-0.4), rel=1e-12)
    assert src.transmission_i() == pytest.approx(10 ** (-0.4), rel=1e-12)

    # Partial coherence shows up as reduced fidelity to the pure state.
    noisy = SourceConfig(sfwm=SfwmConfig(coherence=0.9))
    assert fidelity(noisy.emitted_state("polarization"), polarization_state(1.0, 0.0)) == (
        pytest.approx(0.95, abs=1e-12)
    )
