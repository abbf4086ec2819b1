"""Config-driven experiment runner.

Each subcommand reproduces one measurement campaign end to end: build the
source and detectors from a config file (or a named preset), run the Monte
Carlo, fit, and write CSV/JSON artifacts into the output directory.  Given
the same config and seed, every artifact is byte-identical across reruns;
nothing time- or host-dependent is ever written.

Commands: fringe, car-sweep, chsh, tomo, multiplex-table, validate.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np
import yaml

from . import analysis
from .measurement_sim import (
    AnalyzerSetting,
    CountRecord,
    DetectorModel,
    acceptance_operators,
    analytic_coincidence_prob,
    analytic_count_expectation,
    make_rng,
    open_setting,
    polarization_setting,
    simulate_counts,
    timebin_setting,
    timebin_slot_probabilities,
)
from .quantum_core import PureState2Q, born_probability, polarization_projector
from .source_model import (
    ChannelPair,
    PumpConfig,
    SfwmConfig,
    SourceConfig,
    channel_pair_for,
    polarization_state,
    pump_itu_channel,
    timebin_state,
)

FORMAT_VERSION = 1

# Disjoint RNG stream ranges so no two commands reuse a (seed, stream) pair.
_STREAM_BASE = {
    "fringe": 0,
    "car-sweep": 10_000,
    "chsh": 20_000,
    "tomo": 30_000,
    "multiplex-table": 50_000,
    "validate": 90_000,
}


class ConfigError(ValueError):
    """Raised for malformed configs; message names the offending key."""


# ------------------------------------------------------------ configuration


@dataclass(frozen=True)
class Durations:
    """Beam seconds per elementary measurement, by campaign."""

    fringe_point_s: float = 15.0
    timebin_fringe_point_s: float = 60.0
    chsh_record_s: float = 30.0
    tomo_setting_s: float = 30.0
    car_sweep_s: tuple[float, ...] = (2000.0, 1000.0, 700.0, 150.0, 60.0, 40.0)
    validate_s: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    source: SourceConfig
    det_s: DetectorModel
    det_i: DetectorModel
    channel_detunings: tuple[int, ...]
    coincidence_window_s: float
    umi_delay_s: float
    target_car: float
    car_reference_detuning: int
    car_anchor_power_w: float
    powers_w: tuple[float, ...]
    durations: Durations
    fringe_points: int
    seed: int
    output_dir: str
    config_sha256: str

    def pump_channel(self) -> int:
        return pump_itu_channel(self.source.pump)

    def pairs(self) -> list[ChannelPair]:
        ch = self.pump_channel()
        return [channel_pair_for(ch, k) for k in self.channel_detunings]

    def reference_pair(self) -> ChannelPair:
        return channel_pair_for(self.pump_channel(), self.car_reference_detuning)

    def at_power(self, power_w: float) -> "ExperimentConfig":
        return dataclasses.replace(self, source=self.source.at_power(power_w))

    def ideal_target(self, kind: str) -> PureState2Q:
        """The noise-free pure state the source aims to emit."""
        sf = self.source.sfwm
        if kind == "polarization":
            return polarization_state(sf.eta, sf.delta)
        if kind == "timebin":
            return timebin_state(sf.phi_p)
        raise ValueError(f"unknown kind: {kind!r}")


def paper_defaults() -> dict:
    """Apparatus numbers for the reference experiment, as a config dict.

    27.9 MHz pump at 1550.1 nm (grid channel 34), 0.4 ns coincidence window,
    15% / 20% detector efficiencies with 10 us dead time, 4 + 4 dB channel
    loss, three channel pairs at detunings 2, 3, 4.  Entanglement runs use
    the 100 uW operating point; the Raman-noise coefficient is calibrated
    automatically so the first-order CAR hits 30 at the 20 uW anchor.
    """
    return {
        "pump": {
            "center_wavelength_nm": 1550.1,
            "repetition_rate_hz": 27.9e6,
            "pulse_width_s": 25.0e-12,
            "average_power_w": 100.0e-6,
        },
        "sfwm": {
            "eta": 1.0,
            "delta": 0.0,
            "phi_p": 0.0,
            "kappa": 6.0e6,
            "noise_coeff": "auto",
            "coherence": 0.965,
            "boundary_pair_efficiency": 0.96,
            "boundary_noise_factor": 1.05,
            "boundary_detuning": 4,
        },
        "channel_loss_db": {"signal": 4.0, "idler": 4.0},
        "detectors": {
            "signal": {
                "efficiency": 0.15,
                "dark_rate_hz": 1.4e5,
                "dead_time_s": 10.0e-6,
                "mode": "gated",
                "gate_width_s": 1.0e-9,
            },
            "idler": {
                "efficiency": 0.20,
                "dark_rate_hz": 4.8e5,
                "dead_time_s": 10.0e-6,
                "mode": "free_running",
            },
        },
        "channel_detunings": [2, 3, 4],
        "coincidence_window_s": 0.4e-9,
        "umi_delay_s": 1.6e-9,
        "target_car": 30.0,
        "car_reference_detuning": 3,
        "car_anchor_power_w": 20.0e-6,
        "powers_w": [5.0e-6, 10.0e-6, 20.0e-6, 50.0e-6, 100.0e-6, 200.0e-6],
        "durations_s": {
            "fringe_point": 15.0,
            "timebin_fringe_point": 60.0,
            "chsh_record": 30.0,
            "tomo_setting": 60.0,
            "car_sweep": [2000.0, 1000.0, 700.0, 150.0, 60.0, 40.0],
            "validate": 1.0,
        },
        "fringe_points": 16,
        "seed": 20260815,
        "output_dir": "out",
    }


def ideal_defaults() -> dict:
    """Default apparatus geometry with no noise, darks, dead time or decoherence.

    Runs at 5 uW so that multi-pair emission (the only remaining background,
    one part in ~1e4 here) stays far below counting noise: fringes read
    V = 1 and CHSH reads 2 sqrt(2) within statistics.
    """
    data = paper_defaults()
    data["pump"]["average_power_w"] = 5.0e-6
    data["sfwm"].update(
        noise_coeff=0.0,
        coherence=1.0,
        boundary_pair_efficiency=1.0,
        boundary_noise_factor=1.0,
    )
    for det in data["detectors"].values():
        det["dark_rate_hz"] = 0.0
        det["dead_time_s"] = 0.0
    data["durations_s"].update(
        fringe_point=20.0, timebin_fringe_point=20.0, chsh_record=20.0, tomo_setting=30.0
    )
    return data


def mixed_defaults() -> dict:
    """Ideal apparatus around a fully dephased (separable) source state."""
    data = ideal_defaults()
    data["sfwm"]["coherence"] = 0.0
    return data


PRESETS = {
    "paper-defaults": paper_defaults,
    "ideal": ideal_defaults,
    "mixed": mixed_defaults,
}


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a mapping")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")


def _get(section: dict, key: str, default):
    value = section.get(key, default)
    if value is None:
        raise ConfigError(f"missing required key {key!r}")
    return value


def _detector_from(section: dict, where: str) -> DetectorModel:
    _check_keys(
        section,
        {"efficiency", "dark_rate_hz", "dead_time_s", "mode", "gate_width_s"},
        where,
    )
    return DetectorModel(
        efficiency=float(_get(section, "efficiency", None)),
        dark_rate_hz=float(section.get("dark_rate_hz", 0.0)),
        dead_time_s=float(section.get("dead_time_s", 0.0)),
        mode=section.get("mode", "gated"),
        gate_width_s=float(section.get("gate_width_s", 1e-9)),
    )


def load_config_data(data: dict, origin: str = "<dict>") -> ExperimentConfig:
    """Build and validate a config from a parsed mapping.

    Unknown keys raise ConfigError naming the key and section.  The special
    value ``noise_coeff: auto`` is resolved here by calibrating the
    first-order CAR to ``target_car`` at the configured pump power on the
    reference channel pair.
    """
    top_keys = {
        "pump",
        "sfwm",
        "channel_loss_db",
        "detectors",
        "channel_detunings",
        "coincidence_window_s",
        "umi_delay_s",
        "target_car",
        "car_reference_detuning",
        "car_anchor_power_w",
        "powers_w",
        "durations_s",
        "fringe_points",
        "seed",
        "output_dir",
    }
    try:
        _check_keys(data, top_keys, "config")

        pump_d = _get(data, "pump", None)
        _check_keys(
            pump_d,
            {"center_wavelength_nm", "repetition_rate_hz", "pulse_width_s", "average_power_w"},
            "pump",
        )
        pump = PumpConfig(
            center_wavelength_nm=float(_get(pump_d, "center_wavelength_nm", 1550.1)),
            repetition_rate_hz=float(_get(pump_d, "repetition_rate_hz", 27.9e6)),
            pulse_width_s=float(_get(pump_d, "pulse_width_s", 25e-12)),
            average_power_w=float(_get(pump_d, "average_power_w", None)),
        )

        sfwm_d = _get(data, "sfwm", None)
        _check_keys(
            sfwm_d,
            {
                "eta",
                "delta",
                "phi_p",
                "kappa",
                "noise_coeff",
                "coherence",
                "boundary_pair_efficiency",
                "boundary_noise_factor",
                "boundary_detuning",
            },
            "sfwm",
        )
        noise_raw = sfwm_d.get("noise_coeff", 0.0)
        sfwm = SfwmConfig(
            eta=float(sfwm_d.get("eta", 1.0)),
            delta=float(sfwm_d.get("delta", 0.0)),
            phi_p=float(sfwm_d.get("phi_p", 0.0)),
            kappa=float(_get(sfwm_d, "kappa", None)),
            noise_coeff=0.0 if noise_raw == "auto" else float(noise_raw),
            coherence=float(sfwm_d.get("coherence", 1.0)),
            boundary_pair_efficiency=float(sfwm_d.get("boundary_pair_efficiency", 1.0)),
            boundary_noise_factor=float(sfwm_d.get("boundary_noise_factor", 1.0)),
            boundary_detuning=int(sfwm_d.get("boundary_detuning", 4)),
        )

        loss_d = data.get("channel_loss_db", {"signal": 0.0, "idler": 0.0})
        _check_keys(loss_d, {"signal", "idler"}, "channel_loss_db")

        det_d = _get(data, "detectors", None)
        _check_keys(det_d, {"signal", "idler"}, "detectors")
        det_s = _detector_from(_get(det_d, "signal", None), "detectors.signal")
        det_i = _detector_from(_get(det_d, "idler", None), "detectors.idler")

        detunings = tuple(int(k) for k in _get(data, "channel_detunings", [3]))
        if not detunings:
            raise ConfigError("channel_detunings must not be empty")
        window = float(data.get("coincidence_window_s", 0.4e-9))
        umi_delay = float(data.get("umi_delay_s", 1.6e-9))
        if umi_delay <= window:
            raise ConfigError("umi_delay_s must exceed coincidence_window_s")
        target_car = float(data.get("target_car", 30.0))
        ref_detuning = int(data.get("car_reference_detuning", detunings[0]))
        if ref_detuning not in detunings:
            raise ConfigError("car_reference_detuning must be one of channel_detunings")
        anchor_power = float(data.get("car_anchor_power_w", 20.0e-6))
        if anchor_power <= 0:
            raise ConfigError("car_anchor_power_w must be positive")

        powers = tuple(float(p) for p in data.get("powers_w", [20e-6]))
        if any(p <= 0 for p in powers):
            raise ConfigError("powers_w must be positive")

        dur_d = data.get("durations_s", {})
        _check_keys(
            dur_d,
            {
                "fringe_point",
                "timebin_fringe_point",
                "chsh_record",
                "tomo_setting",
                "car_sweep",
                "validate",
            },
            "durations_s",
        )
        sweep = dur_d.get("car_sweep", [100.0] * len(powers))
        if len(sweep) != len(powers):
            raise ConfigError("durations_s.car_sweep must match powers_w in length")
        durations = Durations(
            fringe_point_s=float(dur_d.get("fringe_point", 15.0)),
            timebin_fringe_point_s=float(dur_d.get("timebin_fringe_point", 60.0)),
            chsh_record_s=float(dur_d.get("chsh_record", 30.0)),
            tomo_setting_s=float(dur_d.get("tomo_setting", 30.0)),
            car_sweep_s=tuple(float(d) for d in sweep),
            validate_s=float(dur_d.get("validate", 1.0)),
        )
        bad = [d for d in dataclasses.astuple(durations) if np.any(np.asarray(d) <= 0)]
        if bad:
            raise ConfigError("durations_s entries must be positive")

        fringe_points = int(data.get("fringe_points", 16))
        if fringe_points < 12:
            raise ConfigError("fringe_points must be at least 12 (one period, dense)")

        seed = int(_get(data, "seed", None))
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

        source = SourceConfig(
            pump=pump,
            sfwm=sfwm,
            channel_loss_s_db=float(loss_d.get("signal", 0.0)),
            channel_loss_i_db=float(loss_d.get("idler", 0.0)),
        )
        pump_channel = pump_itu_channel(pump)
        ref_pair = channel_pair_for(pump_channel, ref_detuning)
        for k in detunings:
            channel_pair_for(pump_channel, k)  # raises on invalid grid pairs

        if noise_raw == "auto":
            # Calibration always refers to the CAR anchor power, not the
            # configured operating power.
            coeff = analysis.calibrate_noise(
                source.at_power(anchor_power),
                ref_pair,
                det_s,
                det_i,
                target_car,
                window_s=window,
            )
            source = dataclasses.replace(
                source, sfwm=dataclasses.replace(sfwm, noise_coeff=coeff)
            )
    except ConfigError as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{origin}: {exc}") from exc

    canonical = yaml.safe_dump(config_to_dict_raw(data), sort_keys=True)
    sha = hashlib.sha256(canonical.encode()).hexdigest()
    return ExperimentConfig(
        source=source,
        det_s=det_s,
        det_i=det_i,
        channel_detunings=detunings,
        coincidence_window_s=window,
        umi_delay_s=umi_delay,
        target_car=target_car,
        car_reference_detuning=ref_detuning,
        car_anchor_power_w=anchor_power,
        powers_w=powers,
        durations=durations,
        fringe_points=fringe_points,
        seed=seed,
        output_dir=str(data.get("output_dir", "out")),
        config_sha256=sha,
    )


def config_to_dict_raw(data: dict) -> dict:
    """Plain-type copy of a config mapping (tuples to lists, etc)."""

    def convert(value):
        if isinstance(value, dict):
            return {str(k): convert(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [convert(v) for v in value]
        if isinstance(value, (np.floating, np.integer)):
            return value.item()
        return value

    return convert(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Re-serialize a config; loading the result is value-identical.

    noise_coeff is written as the resolved number, never "auto".
    """
    src, det_s, det_i = cfg.source, cfg.det_s, cfg.det_i
    return {
        "pump": {
            "center_wavelength_nm": src.pump.center_wavelength_nm,
            "repetition_rate_hz": src.pump.repetition_rate_hz,
            "pulse_width_s": src.pump.pulse_width_s,
            "average_power_w": src.pump.average_power_w,
        },
        "sfwm": {
            "eta": src.sfwm.eta,
            "delta": src.sfwm.delta,
            "phi_p": src.sfwm.phi_p,
            "kappa": src.sfwm.kappa,
            "noise_coeff": src.sfwm.noise_coeff,
            "coherence": src.sfwm.coherence,
            "boundary_pair_efficiency": src.sfwm.boundary_pair_efficiency,
            "boundary_noise_factor": src.sfwm.boundary_noise_factor,
            "boundary_detuning": src.sfwm.boundary_detuning,
        },
        "channel_loss_db": {
            "signal": src.channel_loss_s_db,
            "idler": src.channel_loss_i_db,
        },
        "detectors": {
            "signal": {
                "efficiency": det_s.efficiency,
                "dark_rate_hz": det_s.dark_rate_hz,
                "dead_time_s": det_s.dead_time_s,
                "mode": det_s.mode,
                "gate_width_s": det_s.gate_width_s,
            },
            "idler": {
                "efficiency": det_i.efficiency,
                "dark_rate_hz": det_i.dark_rate_hz,
                "dead_time_s": det_i.dead_time_s,
                "mode": det_i.mode,
                "gate_width_s": det_i.gate_width_s,
            },
        },
        "channel_detunings": list(cfg.channel_detunings),
        "coincidence_window_s": cfg.coincidence_window_s,
        "umi_delay_s": cfg.umi_delay_s,
        "target_car": cfg.target_car,
        "car_reference_detuning": cfg.car_reference_detuning,
        "car_anchor_power_w": cfg.car_anchor_power_w,
        "powers_w": list(cfg.powers_w),
        "durations_s": {
            "fringe_point": cfg.durations.fringe_point_s,
            "timebin_fringe_point": cfg.durations.timebin_fringe_point_s,
            "chsh_record": cfg.durations.chsh_record_s,
            "tomo_setting": cfg.durations.tomo_setting_s,
            "car_sweep": list(cfg.durations.car_sweep_s),
            "validate": cfg.durations.validate_s,
        },
        "fringe_points": cfg.fringe_points,
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
    }


def load_config_file(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return load_config_data(data, origin=path)


def load_preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return load_config_data(PRESETS[name](), origin=f"<preset {name}>")


# ------------------------------------------------------------ orchestration


def fringe_scan(
    cfg: ExperimentConfig,
    pair: ChannelPair,
    kind: str,
    basis: float,
    stream_base: int,
):
    """Run one fringe: sweep the scanned coordinate, return (x, records).

    polarization: idler analyzer angle scans [0, pi), signal fixed at
    ``basis`` radians.  timebin: idler UMI phase scans [0, 2 pi), signal
    phase fixed at ``basis``.  pump-phase: both analyzer phases fixed at 0
    while the source pump phase scans [0, 2 pi).
    """
    n = cfg.fringe_points
    records = []
    if kind == "polarization":
        xs = np.linspace(0.0, math.pi, n, endpoint=False)
        duration = cfg.durations.fringe_point_s
    elif kind in ("timebin", "pump-phase"):
        xs = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
        duration = cfg.durations.timebin_fringe_point_s
    else:
        raise ValueError(f"unknown fringe kind: {kind!r}")
    for i, x in enumerate(xs):
        if kind == "polarization":
            src = cfg.source
            setting = polarization_setting(basis, float(x))
        elif kind == "timebin":
            src = cfg.source
            setting = timebin_setting(basis, float(x))
        else:
            src = dataclasses.replace(
                cfg.source, sfwm=dataclasses.replace(cfg.source.sfwm, phi_p=float(x))
            )
            setting = timebin_setting(0.0, 0.0)
        records.append(
            simulate_counts(
                src,
                pair,
                setting,
                cfg.det_s,
                cfg.det_i,
                duration,
                seed=cfg.seed,
                stream=stream_base + i,
                window_s=cfg.coincidence_window_s,
            )
        )
    return xs, records


def fit_fringe_auto(x, records, use_net: bool):
    """Fit the fringe at frequency 1 and 2; keep the lower weighted SSR.

    Returns (VisibilityResult, ssr).  The winning frequency identifies the
    oscillation period 2 pi / f without assuming it in advance, which is the
    point of the pump-phase sweep.
    """
    c = np.array([r.coincidences for r in records], dtype=float)
    a = np.array([r.accidentals for r in records], dtype=float)
    y = c - a if use_net else c
    sigma = np.sqrt(np.maximum(c + a, 1.0)) if use_net else np.sqrt(np.maximum(c, 1.0))
    best = None
    for freq in (1.0, 2.0):
        fit = analysis.fit_visibility(x, y, sigma, frequency=freq)
        model = fit.offset + fit.amplitude * np.cos(freq * np.asarray(x) - fit.phase)
        ssr = float(np.sum(((y - model) / sigma) ** 2))
        if best is None or ssr < best[1]:
            best = (fit, ssr)
    return best


def run_car_sweep(cfg: ExperimentConfig, stream_base: int):
    """Open-analyzer power sweep for every channel pair.

    Returns {pair label: list of (power, CountRecord, CarResult, analytic)}.
    """
    out = {}
    stream = stream_base
    for pair in cfg.pairs():
        rows = []
        for power, duration in zip(cfg.powers_w, cfg.durations.car_sweep_s):
            src = cfg.source.at_power(power)
            rec = simulate_counts(
                src,
                pair,
                open_setting(),
                cfg.det_s,
                cfg.det_i,
                duration,
                seed=cfg.seed,
                stream=stream,
                window_s=cfg.coincidence_window_s,
            )
            stream += 1
            if rec.accidentals > 0:
                car = analysis.compute_car(rec)
            else:
                # Zero measured accidentals: report C as a lower bound with a
                # 100% error bar rather than dividing by zero.
                car = analysis.CarResult(
                    car=rec.coincidences,
                    sigma=rec.coincidences,
                    coincidences=rec.coincidences,
                    accidentals=0.0,
                )
            rows.append(
                (
                    power,
                    rec,
                    car,
                    analysis.analytic_car(
                        src, pair, cfg.det_s, cfg.det_i, cfg.coincidence_window_s
                    ),
                )
            )
        out[pair.label()] = rows
    return out


def run_chsh(cfg: ExperimentConfig, pair: ChannelPair, stream_base: int):
    """Measure the 16 CHSH records; returns (records, raw, net)."""
    records = []
    stream = stream_base
    for block in analysis.chsh_settings():
        for setting in block:
            records.append(
                simulate_counts(
                    cfg.source,
                    pair,
                    setting,
                    cfg.det_s,
                    cfg.det_i,
                    cfg.durations.chsh_record_s,
                    seed=cfg.seed,
                    stream=stream,
                    window_s=cfg.coincidence_window_s,
                )
            )
            stream += 1
    raw = analysis.chsh_from_records(records)
    net = analysis.chsh_from_records(records, use_net=True)
    return records, raw, net


def run_tomography(cfg: ExperimentConfig, pair: ChannelPair, kind: str, stream_base: int):
    """16-setting tomography scan; returns (labels, settings, records)."""
    entries = analysis.tomography_settings(kind)
    labels, settings, records = [], [], []
    for i, (label, setting) in enumerate(entries):
        labels.append(label)
        settings.append(setting)
        records.append(
            simulate_counts(
                cfg.source,
                pair,
                setting,
                cfg.det_s,
                cfg.det_i,
                cfg.durations.tomo_setting_s,
                seed=cfg.seed,
                stream=stream_base + i,
                window_s=cfg.coincidence_window_s,
            )
        )
    return labels, settings, records


def _livetime_fraction(record: CountRecord, det: DetectorModel, singles: float) -> float:
    """Non-paralyzable live fraction of one arm during a record.

    With measured rate m and dead time tau_d, the true rate is
    m / (1 - m tau_d), so the arm was live for a fraction 1 - m tau_d of
    the beam time.
    """
    if record.duration_s <= 0.0 or det.dead_time_s <= 0.0:
        return 1.0
    live = 1.0 - (singles / record.duration_s) * det.dead_time_s
    if live <= 0.0:
        raise ValueError("singles rate saturates the detector dead time")
    return live


def reconstruct_from_records(settings, records, det_s: DetectorModel, det_i: DetectorModel, use_net: bool):
    """MLE reconstruction from a tomography scan.

    Time-bin arms have setting-dependent singles rates, so detector dead
    time suppresses the settings unevenly and would skew the fitted state.
    Counts are therefore rescaled by the per-arm live fractions before the
    fit (the standard non-paralyzable correction).
    """
    ops = [analysis.coincidence_operator(s) for s in settings]
    pulses = [r.pulses for r in records]
    counts = []
    for r in records:
        live = _livetime_fraction(r, det_s, r.singles_s) * _livetime_fraction(
            r, det_i, r.singles_i
        )
        value = r.coincidences - r.accidentals if use_net else r.coincidences
        counts.append(max(value, 0.0) / live)
    return ops, pulses, counts, analysis.mle_reconstruct(ops, pulses, counts)


# ------------------------------------------------------------------ output


def _json_payload(cfg: ExperimentConfig, command: str, body: dict) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "command": command,
        "seed": cfg.seed,
        "config_sha256": cfg.config_sha256,
        **body,
    }


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _csv_metadata(cfg: ExperimentConfig) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "seed": cfg.seed,
        "config_sha256": cfg.config_sha256,
    }


def _write_table(path: str, header: list[str], rows: list[list], metadata: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in metadata.items()) + "\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def _fit_block(fit, ssr) -> dict:
    return {
        "visibility": fit.visibility,
        "sigma": fit.sigma,
        "offset": fit.offset,
        "amplitude": fit.amplitude,
        "phase_rad": fit.phase,
        "frequency": fit.frequency,
        "period_rad": 2 * math.pi / fit.frequency,
        "weighted_ssr": ssr,
    }


# -------------------------------------------------------------- subcommands


def cmd_fringe(cfg: ExperimentConfig, out: str, kind: str, detuning: int, basis: float) -> int:
    pair = channel_pair_for(cfg.pump_channel(), detuning)
    basis_rad = math.radians(basis) if kind == "polarization" else basis
    xs, records = fringe_scan(cfg, pair, kind, basis_rad, _STREAM_BASE["fringe"])
    raw_fit, raw_ssr = fit_fringe_auto(xs, records, use_net=False)
    net_fit, net_ssr = fit_fringe_auto(xs, records, use_net=True)

    rows = [
        [float(x), r.coincidences, r.accidentals, r.singles_s, r.singles_i, r.pulses]
        for x, r in zip(xs, records)
    ]
    _write_table(
        os.path.join(out, "fringe.csv"),
        ["x_rad", "coincidences", "accidentals", "singles_s", "singles_i", "pulses"],
        rows,
        _csv_metadata(cfg),
    )
    payload = _json_payload(
        cfg,
        "fringe",
        {
            "kind": kind,
            "pair": pair.label(),
            "basis": basis,
            "power_w": cfg.source.pump.average_power_w,
            "points": len(records),
            "duration_per_point_s": records[0].duration_s,
            "raw": _fit_block(raw_fit, raw_ssr),
            "net": _fit_block(net_fit, net_ssr),
        },
    )
    _write_json(os.path.join(out, "fringe.json"), payload)
    print(
        f"fringe {kind} {pair.label()}: raw V = {raw_fit.visibility:.4f} "
        f"+- {raw_fit.sigma:.4f}, net V = {net_fit.visibility:.4f} "
        f"+- {net_fit.sigma:.4f}, period = {2 * math.pi / raw_fit.frequency:.4f} rad"
    )
    return 0


def cmd_car_sweep(cfg: ExperimentConfig, out: str) -> int:
    sweep = run_car_sweep(cfg, _STREAM_BASE["car-sweep"])
    rows = []
    summary = {}
    for label, entries in sweep.items():
        cars = []
        for power, rec, car, model in entries:
            rows.append(
                [
                    label,
                    float(power),
                    rec.duration_s,
                    rec.coincidences,
                    rec.accidentals,
                    car.car,
                    car.sigma,
                    model,
                ]
            )
            cars.append(car.car)
        best = int(np.argmax(cars))
        summary[label] = {
            "powers_w": [float(p) for p, *_ in entries],
            "car": [c for c in cars],
            "sigma": [e[2].sigma for e in entries],
            "analytic_car": [e[3] for e in entries],
            "peak_power_w": float(entries[best][0]),
        }
    _write_table(
        os.path.join(out, "car_sweep.csv"),
        ["pair", "power_w", "duration_s", "coincidences", "accidentals", "car", "car_sigma", "analytic_car"],
        rows,
        _csv_metadata(cfg),
    )
    _write_json(os.path.join(out, "car_sweep.json"), _json_payload(cfg, "car-sweep", {"pairs": summary}))
    for label, block in summary.items():
        peak = max(block["car"])
        print(f"car-sweep {label}: peak CAR = {peak:.1f} at {block['peak_power_w'] * 1e6:.0f} uW")
    return 0


def cmd_chsh(cfg: ExperimentConfig, out: str, detuning: int) -> int:
    pair = channel_pair_for(cfg.pump_channel(), detuning)
    records, raw, net = run_chsh(cfg, pair, _STREAM_BASE["chsh"])
    analysis.write_records(os.path.join(out, "chsh_records.csv"), records, _csv_metadata(cfg))
    payload = _json_payload(
        cfg,
        "chsh",
        {
            "pair": pair.label(),
            "power_w": cfg.source.pump.average_power_w,
            "raw": {
                "s": raw.s,
                "sigma": raw.sigma,
                "correlations": [[e, s] for e, s in raw.correlations],
            },
            "net": {
                "s": net.s,
                "sigma": net.sigma,
                "correlations": [[e, s] for e, s in net.correlations],
            },
        },
    )
    _write_json(os.path.join(out, "chsh.json"), payload)
    print(
        f"chsh {pair.label()}: raw S = {raw.s:.3f} +- {raw.sigma:.3f}, "
        f"net S = {net.s:.3f} +- {net.sigma:.3f}"
    )
    return 0


def cmd_tomo(cfg: ExperimentConfig, out: str, kind: str, detuning: int) -> int:
    pair = channel_pair_for(cfg.pump_channel(), detuning)
    labels, settings, records = run_tomography(cfg, pair, kind, _STREAM_BASE["tomo"])
    analysis.write_records(os.path.join(out, "tomo_records.csv"), records, _csv_metadata(cfg))

    target = cfg.ideal_target(kind)
    blocks = {}
    for tag, use_net in (("raw", False), ("net", True)):
        ops, pulses, counts, fit = reconstruct_from_records(
            settings, records, cfg.det_s, cfg.det_i, use_net
        )
        boot = analysis.bootstrap_fidelity(
            ops, pulses, counts, target, n_boot=200, seed=cfg.seed
        )
        rho = fit.rho.matrix
        for part, grab in (("re", np.real), ("im", np.imag)):
            _write_table(
                os.path.join(out, f"rho_{tag}_{part}.csv"),
                [f"c{j}" for j in range(4)],
                [[float(v) for v in row] for row in grab(rho)],
                _csv_metadata(cfg),
            )
        blocks[tag] = {
            "fidelity": boot.fidelity,
            "bootstrap_sigma": boot.sigma,
            "converged": fit.converged,
            "eigenvalues": [float(v) for v in fit.rho.eigenvalues()],
        }
    payload = _json_payload(
        cfg,
        "tomo",
        {
            "kind": kind,
            "pair": pair.label(),
            "power_w": cfg.source.pump.average_power_w,
            "settings": labels,
            "raw": blocks["raw"],
            "net": blocks["net"],
        },
    )
    _write_json(os.path.join(out, "tomo.json"), payload)
    print(
        f"tomo {kind} {pair.label()}: raw F = {blocks['raw']['fidelity']:.4f} "
        f"+- {blocks['raw']['bootstrap_sigma']:.4f}, net F = {blocks['net']['fidelity']:.4f} "
        f"+- {blocks['net']['bootstrap_sigma']:.4f}"
    )
    return 0


def cmd_multiplex_table(cfg: ExperimentConfig, out: str, kind: str) -> int:
    """Visibility table across all channel pairs at the configured power."""
    stream = _STREAM_BASE["multiplex-table"]
    rows = []
    table = {}
    bases = [0.0, math.pi / 4] if kind == "polarization" else [0.0]
    for pair in cfg.pairs():
        per_pair = {}
        for basis in bases:
            xs, records = fringe_scan(cfg, pair, kind, basis, stream)
            stream += cfg.fringe_points
            raw_fit, _ = fit_fringe_auto(xs, records, use_net=False)
            net_fit, _ = fit_fringe_auto(xs, records, use_net=True)
            name = f"{math.degrees(basis):.0f}deg" if kind == "polarization" else "phase0"
            per_pair[name] = {
                "raw_visibility": raw_fit.visibility,
                "raw_sigma": raw_fit.sigma,
                "net_visibility": net_fit.visibility,
                "net_sigma": net_fit.sigma,
            }
            rows.append(
                [
                    pair.label(),
                    name,
                    raw_fit.visibility,
                    raw_fit.sigma,
                    net_fit.visibility,
                    net_fit.sigma,
                ]
            )
        table[pair.label()] = per_pair
    _write_table(
        os.path.join(out, "multiplex_table.csv"),
        ["pair", "basis", "raw_visibility", "raw_sigma", "net_visibility", "net_sigma"],
        rows,
        _csv_metadata(cfg),
    )
    payload = _json_payload(
        cfg,
        "multiplex-table",
        {"kind": kind, "power_w": cfg.source.pump.average_power_w, "pairs": table},
    )
    _write_json(os.path.join(out, "multiplex_table.json"), payload)
    for row in rows:
        print(
            f"table {kind} {row[0]} {row[1]}: raw V = {row[2]:.4f} +- {row[3]:.4f}, "
            f"net V = {row[4]:.4f} +- {row[5]:.4f}"
        )
    return 0


# ---------------------------------------------------------------- validate


def _validate_checks(cfg: ExperimentConfig):
    """Deterministic invariant suite; yields (name, passed, detail)."""
    rng = make_rng(cfg.seed, stream=_STREAM_BASE["validate"])

    # Born rule against direct expectation values on random states.
    worst = 0.0
    for _ in range(50):
        amps = rng.normal(size=4) + 1j * rng.normal(size=4)
        state = PureState2Q(amps)
        theta_s, theta_i = rng.uniform(0, math.pi, size=2)
        proj = polarization_projector(float(theta_s), float(theta_i))
        direct = abs(np.vdot(proj.ket, state.amplitudes)) ** 2
        worst = max(worst, abs(born_probability(state, proj) - direct))
    yield "born-rule-oracle", worst < 1e-10, f"max |delta| = {worst:.2e}"

    # Arrival-slot analyzer ports form a valid POVM with the lost-light
    # remainder having eigenvalues 1/4 and 3/4.
    ok = True
    for phi in (0.0, 1.1, 2.7):
        total = sum(
            acceptance_operators(timebin_setting(arm, "S"))[0] for arm in ("S", phi, "L")
        )
        ev = np.sort(np.linalg.eigvalsh(np.eye(2) - total))
        ok = ok and np.allclose(ev, [0.25, 0.75], atol=1e-12)
    yield "umi-port-povm", ok, "lost-port eigenvalues {1/4, 3/4}"

    # Slot histogram invariants: corner sum 1/16, phase-free side cells.
    state = timebin_state(cfg.source.sfwm.phi_p)
    ok = True
    for phi_s in np.linspace(0, 2 * math.pi, 5):
        probs = timebin_slot_probabilities(state, (float(phi_s), 0.4))
        corners = probs[0, 0] + probs[0, 2] + probs[2, 0] + probs[2, 2]
        sides = [probs[0, 1], probs[1, 0], probs[1, 2], probs[2, 1]]
        ok = ok and abs(corners - 1 / 16) < 1e-12
        ok = ok and all(abs(s - 1 / 32) < 1e-12 for s in sides)
    yield "slot-invariants", ok, "corner sum 1/16, side cells 1/32"

    # Monte Carlo against the exact expectation record (dead time off).
    det_s = dataclasses.replace(cfg.det_s, dead_time_s=0.0)
    det_i = dataclasses.replace(cfg.det_i, dead_time_s=0.0)
    pair = cfg.reference_pair()
    ok, detail = True, []
    for j, setting in enumerate(
        [open_setting(), polarization_setting(0.0, 0.0), timebin_setting(0.0, 0.0)]
    ):
        expected = analytic_count_expectation(
            cfg.source, pair, setting, det_s, det_i, cfg.durations.validate_s,
            window_s=cfg.coincidence_window_s,
        )
        got = simulate_counts(
            cfg.source, pair, setting, det_s, det_i, cfg.durations.validate_s,
            seed=cfg.seed, stream=_STREAM_BASE["validate"] + 100 + j,
            window_s=cfg.coincidence_window_s,
        )
        pull = abs(got.coincidences - expected.coincidences) / math.sqrt(
            max(expected.coincidences, 1.0)
        )
        detail.append(f"{pull:.2f}")
        ok = ok and pull < 5.0
    yield "mc-vs-analytic", ok, "coincidence pulls: " + ", ".join(detail)

    # Noise calibration round trip at the anchor power.
    try:
        base = dataclasses.replace(
            cfg.source.at_power(cfg.car_anchor_power_w),
            sfwm=dataclasses.replace(cfg.source.sfwm, noise_coeff=0.0),
        )
        coeff = analysis.calibrate_noise(
            base, pair, det_s, det_i, 25.0, window_s=cfg.coincidence_window_s
        )
        tuned = dataclasses.replace(
            base, sfwm=dataclasses.replace(base.sfwm, noise_coeff=coeff)
        )
        achieved = analysis.analytic_car(
            tuned, pair, det_s, det_i, cfg.coincidence_window_s
        )
        ok = abs(achieved - 25.0) < 1e-6
        detail = f"target 25, achieved {achieved:.9f}"
    except ValueError as exc:
        ok, detail = False, str(exc)
    yield "calibration-round-trip", ok, detail

    # Tomography settings span the full two-qubit operator space.
    ok = True
    for kind in ("polarization", "timebin"):
        mats = np.array(
            [
                analysis.coincidence_operator(s).reshape(-1)
                for _, s in analysis.tomography_settings(kind)
            ]
        )
        rank = np.linalg.matrix_rank(np.concatenate([mats.real, mats.imag], axis=1))
        ok = ok and rank == 16
    yield "tomography-completeness", ok, "rank 16 for both encodings"

    # No sampled state beats the Tsirelson bound on exact probabilities.
    worst = 0.0
    for _ in range(20):
        amps = rng.normal(size=4) + 1j * rng.normal(size=4)
        state = PureState2Q(amps)
        recs = []
        for block in analysis.chsh_settings():
            for setting in block:
                c = 1e6 * analytic_coincidence_prob(state, setting)
                recs.append(CountRecord("v", c + 1, c + 1, c, 0.0, 10**6, 1.0))
        worst = max(worst, analysis.chsh_from_records(recs).s)
    yield "tsirelson-bound", worst <= 2 * math.sqrt(2) + 1e-9, f"max S = {worst:.6f}"

    # Config serialization round trip.
    reloaded = load_config_data(config_to_dict(cfg), origin="<round-trip>")
    same = dataclasses.replace(reloaded, config_sha256=cfg.config_sha256) == cfg
    yield "config-round-trip", same, "load(serialize(config)) == config"


def cmd_validate(cfg: ExperimentConfig, out: str) -> int:
    results = []
    for name, passed, detail in _validate_checks(cfg):
        results.append({"name": name, "passed": bool(passed), "detail": detail})
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    all_passed = all(r["passed"] for r in results)
    payload = _json_payload(
        cfg, "validate", {"checks": results, "all_passed": all_passed}
    )
    _write_json(os.path.join(out, "validate.json"), payload)
    print(f"validate: {'all checks passed' if all_passed else 'FAILURES present'}")
    return 0 if all_passed else 1


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="entangle-sim",
        description="Simulate and analyze a multiplexed entangled photon-pair source.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        group = p.add_mutually_exclusive_group(required=True)
        group.add_argument("--config", help="path to a YAML config file")
        group.add_argument("--preset", choices=sorted(PRESETS), help="built-in config")
        p.add_argument("--seed", type=int, help="override the config seed (u64)")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument(
            "--power",
            type=float,
            help="override the average pump power in watts",
        )

    p = sub.add_parser("fringe", help="two-photon interference fringe plus fit")
    common(p)
    p.add_argument(
        "--kind",
        choices=["polarization", "timebin", "pump-phase"],
        default="polarization",
    )
    p.add_argument("--detuning", type=int, help="channel pair detuning (default: reference)")
    p.add_argument(
        "--basis",
        type=float,
        default=0.0,
        help="fixed signal analyzer: degrees for polarization, radians for timebin",
    )

    p = sub.add_parser("car-sweep", help="CAR versus pump power for every channel pair")
    common(p)

    p = sub.add_parser("chsh", help="16-record CHSH measurement")
    common(p)
    p.add_argument("--detuning", type=int, help="channel pair detuning (default: reference)")

    p = sub.add_parser("tomo", help="16-setting state tomography")
    common(p)
    p.add_argument("--kind", choices=["polarization", "timebin"], default="timebin")
    p.add_argument("--detuning", type=int, help="channel pair detuning (default: reference)")

    p = sub.add_parser("multiplex-table", help="visibility table over all channel pairs")
    common(p)
    p.add_argument("--kind", choices=["polarization", "timebin"], default="polarization")

    p = sub.add_parser("validate", help="run the invariant suite; exit 0 on pass")
    common(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config_file(args.config) if args.config else load_preset(args.preset)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must fit in an unsigned 64-bit integer")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.power is not None:
            cfg = cfg.at_power(args.power)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)

    detuning = getattr(args, "detuning", None)
    if detuning is None:
        detuning = cfg.car_reference_detuning

    if args.command == "fringe":
        return cmd_fringe(cfg, out, args.kind, detuning, args.basis)
    if args.command == "car-sweep":
        return cmd_car_sweep(cfg, out)
    if args.command == "chsh":
        return cmd_chsh(cfg, out, detuning)
    if args.command == "tomo":
        return cmd_tomo(cfg, out, args.kind, detuning)
    if args.command == "multiplex-table":
        return cmd_multiplex_table(cfg, out, args.kind)
    if args.command == "validate":
        return cmd_validate(cfg, out)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
