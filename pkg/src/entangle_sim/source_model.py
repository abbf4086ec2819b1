"""Photon-pair source model: emitted states, rates and the DWDM channel plan.

The source is a pulsed fiber four-wave-mixing pair generator whose output is
split onto a 100 GHz ITU grid.  Two entangled degrees of freedom are
supported:

* polarization, (|HH> + eta e^{i delta} |VV>) / sqrt(1 + eta^2), produced by
  bidirectional pumping of a fiber Sagnac loop;
* time bin, (|SS> - e^{i 2 phi_p} |LL>) / sqrt(2), produced by a double pump
  pulse with relative phase phi_p.  The pump phase enters twice because both
  photons inherit it, which is why interference fringes recur with period pi
  in phi_p rather than 2 pi.

Rates follow the standard scaling for spontaneous four-wave mixing: the pair
generation probability per pulse grows with the square of the pump power,
mu = kappa * P^2, while spontaneous Raman scattering contributes a linear
single-photon background nu = noise_coeff * P in each DWDM channel.  Channel
pairs far from the pump sit at the edge of the phase-matching bandwidth and
are modeled with a reduced fraction of correlated pairs plus a noise
enhancement factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.constants import c as _SPEED_OF_LIGHT

from .quantum_core import DensityMatrix, PureState2Q

__all__ = [
    "PumpConfig",
    "SfwmConfig",
    "SourceConfig",
    "ChannelPair",
    "itu_frequency",
    "itu_wavelength_nm",
    "pump_itu_channel",
    "channel_pair_for",
    "pair_rate",
    "noise_rate",
    "polarization_state",
    "timebin_state",
    "dephased",
    "CHANNEL_RANGE",
    "GRID_SPACING_THZ",
]

# 100 GHz ITU-T grid: channel n sits at 190.0 + 0.1 * n THz.  Bounds cover
# the full C band; the experiments here only use a handful around the pump.
GRID_BASE_THZ = 190.0
GRID_SPACING_THZ = 0.1
CHANNEL_RANGE = (1, 72)


def itu_frequency(channel: int) -> float:
    """Center frequency of an ITU grid channel in THz."""
    lo, hi = CHANNEL_RANGE
    if not lo <= channel <= hi:
        raise ValueError(f"ITU channel must lie in [{lo}, {hi}], got {channel}")
    return GRID_BASE_THZ + GRID_SPACING_THZ * channel


def itu_wavelength_nm(channel: int) -> float:
    """Vacuum center wavelength of an ITU grid channel in nm."""
    return _SPEED_OF_LIGHT / (itu_frequency(channel) * 1e12) * 1e9


@dataclass(frozen=True)
class PumpConfig:
    """Pulsed pump laser parameters."""

    center_wavelength_nm: float = 1550.1
    repetition_rate_hz: float = 27.9e6
    pulse_width_s: float = 25e-12
    average_power_w: float = 100e-6

    def __post_init__(self):
        for name in ("center_wavelength_nm", "repetition_rate_hz", "pulse_width_s"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if self.average_power_w < 0.0:
            raise ValueError("average_power_w must be non-negative")
        if self.pulse_width_s * self.repetition_rate_hz >= 1.0:
            raise ValueError("pulse width times repetition rate must stay below 1")

    def at_power(self, power_w: float) -> "PumpConfig":
        return replace(self, average_power_w=power_w)


def pump_itu_channel(pump: PumpConfig) -> int:
    """Nearest ITU grid channel to the pump wavelength.

    The pump must sit within a quarter grid spacing (25 GHz) of some channel;
    a pump parked between channels has no well-defined signal/idler pairing.
    """
    f_thz = _SPEED_OF_LIGHT / (pump.center_wavelength_nm * 1e-9) / 1e12
    channel = round((f_thz - GRID_BASE_THZ) / GRID_SPACING_THZ)
    lo, hi = CHANNEL_RANGE
    if not lo <= channel <= hi:
        raise ValueError(f"pump frequency {f_thz:.4f} THz falls outside the channel grid")
    if abs(f_thz - itu_frequency(channel)) > GRID_SPACING_THZ / 4:
        raise ValueError("pump wavelength is not aligned with the ITU grid")
    return channel


@dataclass(frozen=True)
class ChannelPair:
    """Signal/idler DWDM channels symmetric about the pump.

    The signal is taken on the high-frequency side.  Frequencies satisfy
    signal + idler = 2 * pump exactly because the grid is linear in the
    channel index.
    """

    signal_channel: int
    idler_channel: int
    detuning_k: int
    signal_freq_thz: float
    idler_freq_thz: float

    def __post_init__(self):
        if self.detuning_k < 1:
            raise ValueError("channel detuning must be >= 1")
        pump_freq = (self.signal_freq_thz + self.idler_freq_thz) / 2.0
        expect_s = pump_freq + GRID_SPACING_THZ * self.detuning_k
        if abs(self.signal_freq_thz - expect_s) > 1e-6:
            raise ValueError("channel pair frequencies are not symmetric about the pump")

    def label(self) -> str:
        # Table convention: lower channel number first, e.g. "C31-C37".
        lo = min(self.signal_channel, self.idler_channel)
        hi = max(self.signal_channel, self.idler_channel)
        return f"C{lo}-C{hi}"


def channel_pair_for(pump_channel: int, k: int) -> ChannelPair:
    """Channel pair at detuning +/- k around the pump channel."""
    if k < 1:
        raise ValueError("detuning k must be >= 1 (k = 0 is degenerate with the pump)")
    sig = pump_channel + k
    idl = pump_channel - k
    return ChannelPair(
        signal_channel=sig,
        idler_channel=idl,
        detuning_k=k,
        signal_freq_thz=itu_frequency(sig),
        idler_freq_thz=itu_frequency(idl),
    )


@dataclass(frozen=True)
class SfwmConfig:
    """Four-wave-mixing source parameters.

    eta and delta shape the polarization state, phi_p the time-bin state.
    coherence in [0, 1] scales the off-diagonal terms of the emitted density
    matrix; it models residual phase jitter of the generating interferometers
    (1 = perfectly stable, 0 = fully dephased, i.e. a classical mixture).

    kappa converts squared pump power to pairs per pulse; noise_coeff converts
    pump power to background photons per pulse per arm.  Channel pairs at
    detuning >= boundary_detuning sit at the edge of the phase-matching
    bandwidth: only boundary_pair_efficiency of their pairs remain
    time-correlated (the rest arrive as independent singles) and their Raman
    background is boundary_noise_factor times stronger.
    """

    eta: float = 1.0
    delta: float = 0.0
    phi_p: float = 0.0
    kappa: float = 6.0e6
    noise_coeff: float = 0.0
    coherence: float = 1.0
    boundary_pair_efficiency: float = 0.96
    boundary_noise_factor: float = 1.05
    boundary_detuning: int = 4

    def __post_init__(self):
        if self.eta < 0.0:
            raise ValueError("eta must be non-negative")
        if self.kappa < 0.0 or self.noise_coeff < 0.0:
            raise ValueError("kappa and noise_coeff must be non-negative")
        if not 0.0 <= self.coherence <= 1.0:
            raise ValueError("coherence must lie in [0, 1]")
        if not 0.0 < self.boundary_pair_efficiency <= 1.0:
            raise ValueError("boundary_pair_efficiency must lie in (0, 1]")
        if self.boundary_noise_factor <= 0.0:
            raise ValueError("boundary_noise_factor must be positive")
        if self.boundary_detuning < 1:
            raise ValueError("boundary_detuning must be >= 1")

    def pair_efficiency_for(self, detuning_k: int) -> float:
        """Fraction of generated pairs that remain correlated in this channel pair."""
        if detuning_k >= self.boundary_detuning:
            return self.boundary_pair_efficiency
        return 1.0

    def noise_factor_for(self, detuning_k: int) -> float:
        """Per-channel multiplier on the Raman background."""
        if detuning_k >= self.boundary_detuning:
            return self.boundary_noise_factor
        return 1.0


def pair_rate(pump: PumpConfig, cfg: SfwmConfig, pair: ChannelPair) -> float:
    """Correlated pairs per pulse in this channel pair: kappa * P^2 * efficiency."""
    p = pump.average_power_w
    return cfg.kappa * p * p * cfg.pair_efficiency_for(pair.detuning_k)


def noise_rate(pump: PumpConfig, cfg: SfwmConfig, channel: int) -> float:
    """Background photons per pulse in one DWDM channel: noise_coeff * P.

    Channels at boundary detuning from the pump get the configured noise
    enhancement.
    """
    itu_frequency(channel)  # validate
    k = abs(channel - pump_itu_channel(pump))
    return cfg.noise_coeff * pump.average_power_w * cfg.noise_factor_for(k)


@dataclass(frozen=True)
class SourceConfig:
    """Everything upstream of the analyzers: pump, SFWM parameters, link loss.

    Channel losses are the lumped fiber/DWDM/connector losses per arm in dB,
    excluding detector efficiency.
    """

    pump: PumpConfig = field(default_factory=PumpConfig)
    sfwm: SfwmConfig = field(default_factory=SfwmConfig)
    channel_loss_s_db: float = 4.0
    channel_loss_i_db: float = 4.0

    def __post_init__(self):
        if self.channel_loss_s_db < 0.0 or self.channel_loss_i_db < 0.0:
            raise ValueError("channel losses must be non-negative dB figures")

    def transmission_s(self) -> float:
        return 10.0 ** (-self.channel_loss_s_db / 10.0)

    def transmission_i(self) -> float:
        return 10.0 ** (-self.channel_loss_i_db / 10.0)

    def emitted_state(self, kind: str) -> DensityMatrix:
        """Density matrix leaving the source for the given encoding kind."""
        if kind == "polarization":
            pure = polarization_state(self.sfwm.eta, self.sfwm.delta)
        elif kind == "timebin":
            pure = timebin_state(self.sfwm.phi_p)
        else:
            raise ValueError(f"unknown source kind {kind!r} (use 'polarization' or 'timebin')")
        return dephased(pure, self.sfwm.coherence)

    def at_power(self, power_w: float) -> "SourceConfig":
        return replace(self, pump=self.pump.at_power(power_w))


def polarization_state(eta: float, delta: float) -> PureState2Q:
    """(|HH> + eta e^{i delta} |VV>) / sqrt(1 + eta^2).

    eta captures the pump-power imbalance between the two loop directions,
    delta their accumulated optical phase difference.  eta = 1, delta = 0
    gives the maximally entangled state.
    """
    if eta < 0.0:
        raise ValueError("eta must be non-negative")
    amps = np.array([1.0, 0.0, 0.0, eta * np.exp(1j * delta)], dtype=np.complex128)
    return PureState2Q(amps)


def timebin_state(phi_p: float) -> PureState2Q:
    """(|SS> - e^{i 2 phi_p} |LL>) / sqrt(2) for double-pulse pump phase phi_p."""
    amps = np.array(
        [1.0, 0.0, 0.0, -np.exp(2j * float(phi_p))],
        dtype=np.complex128,
    ) / math.sqrt(2.0)
    return PureState2Q(amps)


def dephased(state: PureState2Q, coherence: float) -> DensityMatrix:
    """Mix |psi><psi| with its fully dephased (diagonal) version.

    rho = c |psi><psi| + (1 - c) diag(|psi><psi|).  Slow phase jitter with
    Gaussian spread sigma produces exactly this with c = exp(-sigma^2 / 2)
    for states whose only coherence sits in one off-diagonal pair, which
    covers both source states here.  coherence = 0 yields the classical
    mixture used as the no-entanglement reference.
    """
    if not 0.0 <= coherence <= 1.0:
        raise ValueError("coherence must lie in [0, 1]")
    rho = np.outer(state.amplitudes, state.amplitudes.conj())
    mixed = coherence * rho + (1.0 - coherence) * np.diag(np.diag(rho))
    return DensityMatrix(mixed)
