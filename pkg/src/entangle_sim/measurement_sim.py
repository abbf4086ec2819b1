"""Monte Carlo photon counting with loss, Raman noise, dark counts and dead time.

The simulator never loops over pulses.  For one measurement setting every
click source is an independent Poisson process across the pulse train, so the
pulse train is sampled by category:

* correlated pairs that pass both analyzers and both channels (one shared
  pulse index per event),
* single-arm clicks: pair photons whose partner was rejected or lost,
  uncorrelated photons from broken pairs, Raman noise photons, and dark
  counts (their per-pulse intensities add, so one Poisson draw per arm).

Multiple events can land on one pulse; a detector click is "at least one
event", so merging indices with ``np.unique`` reproduces the exact
1 - exp(-lambda) click saturation.  Coincidences are same-pulse clicks on
both arms; accidentals are estimated from the standard delayed window, i.e.
signal clicks paired with idler clicks one pulse later.

Analyzers are modeled as one acceptance operator per arm.  A polarizer is a
unit-weight projector.  A single output port of an unbalanced interferometer
with the delay matched to the double-pulse separation splits each photon
50/50 twice, which yields the arrival-bin POVM

    E_early = 1/4 |S><S|,   E_central(phi) = 1/2 |p><p|,   E_late = 1/4 |L><L|

with |p> = (|S> + e^{i phi}|L>)/sqrt(2).  The 1/4 and 1/2 weights are the
unavoidable price of single-port, arrival-time post-selection; the remainder
I - sum(E) exits the unused port or the wrong time bins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray

from .quantum_core import DensityMatrix, PureState2Q, kron2
from .source_model import ChannelPair, SourceConfig, noise_rate, pair_rate

try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

__all__ = [
    "DetectorModel",
    "AnalyzerSetting",
    "polarization_setting",
    "timebin_setting",
    "open_setting",
    "CountRecord",
    "acceptance_operators",
    "analytic_coincidence_prob",
    "analytic_count_expectation",
    "simulate_counts",
    "timebin_slot_probabilities",
    "timebin_slot_histogram",
    "apply_dead_time",
    "merge_records",
    "make_rng",
    "DEFAULT_WINDOW_S",
    "DEFAULT_UMI_DELAY_S",
]

# Coincidence window of the timing electronics and the interferometer delay
# separating the arrival bins.  The delay must exceed the window or the three
# bins cannot be distinguished.
DEFAULT_WINDOW_S = 0.4e-9
DEFAULT_UMI_DELAY_S = 1.6e-9

_IMAG_TOL = 1e-8


@dataclass(frozen=True)
class DetectorModel:
    """Single-photon detector: efficiency, dark counts, dead time, gating.

    dark_rate_hz is the free-running dark/background count rate.  For a gated
    detector darks accumulate over gate_width_s per pulse; for a free-running
    one only clicks inside the coincidence window matter, so the effective
    per-pulse dark probability uses the window instead.
    """

    efficiency: float
    dark_rate_hz: float = 0.0
    dead_time_s: float = 0.0
    mode: str = "gated"
    gate_width_s: float = 1e-9

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must lie in [0, 1]")
        if self.dark_rate_hz < 0.0 or self.dead_time_s < 0.0:
            raise ValueError("dark rate and dead time must be non-negative")
        if self.mode not in ("gated", "free_running"):
            raise ValueError(f"mode must be 'gated' or 'free_running', got {self.mode!r}")
        if self.mode == "gated" and self.gate_width_s <= 0.0:
            raise ValueError("gated detectors need a positive gate width")

    def dark_probability(self, window_s: float) -> float:
        width = self.gate_width_s if self.mode == "gated" else window_s
        return self.dark_rate_hz * width


@dataclass(frozen=True)
class AnalyzerSetting:
    """One analyzer configuration for both arms.

    kind 'polarization': arm values are analyzer angles in rad, with optional
    retardances for elliptical settings.  kind 'timebin': arm values are 'S',
    'L' (arrival-bin selection) or a float interferometer phase (central-bin
    superposition).  kind 'open': no analyzer, every photon is accepted;
    used for raw coincidence-to-accidental measurements.

    Use the ``polarization_setting`` / ``timebin_setting`` / ``open_setting``
    helpers instead of the raw constructor.
    """

    kind: str
    arm_s: object = None
    arm_i: object = None
    retard_s: float = 0.0
    retard_i: float = 0.0

    def __post_init__(self):
        if self.kind not in ("polarization", "timebin", "open"):
            raise ValueError(f"unknown analyzer kind {self.kind!r}")
        if self.kind == "polarization":
            float(self.arm_s), float(self.arm_i)  # must be angles
        elif self.kind == "timebin":
            for arm in (self.arm_s, self.arm_i):
                if isinstance(arm, str):
                    if arm not in ("S", "L"):
                        raise ValueError(f"time-bin arm must be 'S', 'L' or a phase, got {arm!r}")
                else:
                    float(arm)

    def label(self) -> str:
        if self.kind == "open":
            return "open"
        if self.kind == "polarization":

            def _p(theta, retard):
                txt = f"{math.degrees(float(theta)):+.2f}deg"
                if retard:
                    txt += f"@{float(retard):+.4f}"
                return txt

            return f"pol({_p(self.arm_s, self.retard_s)}, {_p(self.arm_i, self.retard_i)})"

        def _t(arm):
            return arm if isinstance(arm, str) else f"phi={float(arm):+.4f}"

        return f"tb({_t(self.arm_s)}, {_t(self.arm_i)})"


def polarization_setting(
    theta_s: float, theta_i: float, retard_s: float = 0.0, retard_i: float = 0.0
) -> AnalyzerSetting:
    return AnalyzerSetting("polarization", theta_s, theta_i, retard_s, retard_i)


def timebin_setting(arm_s, arm_i) -> AnalyzerSetting:
    return AnalyzerSetting("timebin", arm_s, arm_i)


def open_setting() -> AnalyzerSetting:
    return AnalyzerSetting("open")


_KET_S = np.array([1.0, 0.0], dtype=np.complex128)
_KET_L = np.array([0.0, 1.0], dtype=np.complex128)


def _arm_operator(kind: str, arm, retard: float) -> NDArray[np.complex128]:
    if kind == "open":
        return np.eye(2, dtype=np.complex128)
    if kind == "polarization":
        theta = float(arm)
        ket = np.array([np.cos(theta), np.exp(1j * retard) * np.sin(theta)])
        return np.outer(ket, ket.conj())
    if arm == "S":
        return 0.25 * np.outer(_KET_S, _KET_S.conj())
    if arm == "L":
        return 0.25 * np.outer(_KET_L, _KET_L.conj())
    phi = float(arm)
    ket = np.array([1.0, np.exp(1j * phi)]) / math.sqrt(2.0)
    return 0.5 * np.outer(ket, ket.conj())


def acceptance_operators(setting: AnalyzerSetting):
    """Per-arm acceptance operators (signal, idler), weights included.

    Each operator M satisfies 0 <= M <= I; tr(rho_arm M) is the probability
    that a photon in arm state rho_arm passes the analyzer into the detected
    mode, including any post-selection weight.
    """
    m_s = _arm_operator(setting.kind, setting.arm_s, setting.retard_s)
    m_i = _arm_operator(setting.kind, setting.arm_i, setting.retard_i)
    return m_s, m_i


def _clamped_real(value: complex, what: str) -> float:
    if abs(value.imag) > _IMAG_TOL:
        raise ValueError(f"{what} has imaginary residue {value.imag:.3e}")
    return min(1.0, max(0.0, float(value.real)))


def analytic_coincidence_prob(
    state: DensityMatrix | PureState2Q, setting: AnalyzerSetting
) -> float:
    """Probability that one emitted pair passes both analyzers.

    Loss, detector efficiency and background are *not* included: this is the
    pure quantum acceptance tr[rho (M_s x M_i)], with the time-bin settings
    carrying their post-selection weights (so a central-central fringe reads
    (1 - cos(2 phi_p - phi_s - phi_i)) / 16 for the ideal source state).
    """
    rho = state.density().matrix if isinstance(state, PureState2Q) else state.matrix
    m_s, m_i = acceptance_operators(setting)
    return _clamped_real(complex(np.trace(rho @ kron2(m_s, m_i))), "coincidence acceptance")


@dataclass(frozen=True)
class CountRecord:
    """Counting result of one measurement setting.

    Counts are stored as floats so that exact analytic expectations can flow
    through the same estimators as Monte Carlo integers.  duration_s is beam
    time, pulses the number of pump pulses actually simulated.
    """

    setting: str
    singles_s: float
    singles_i: float
    coincidences: float
    accidentals: float
    pulses: int
    duration_s: float
    window_s: float = DEFAULT_WINDOW_S
    channel_loss_s_db: float = 4.0
    channel_loss_i_db: float = 4.0

    def __post_init__(self):
        for name in ("singles_s", "singles_i", "coincidences", "accidentals"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        if self.pulses < 0 or self.duration_s < 0.0:
            raise ValueError("pulses and duration must be non-negative")
        limit = min(self.singles_s, self.singles_i) * (1.0 + 1e-12) + 1e-9
        if self.coincidences > limit:
            raise ValueError("coincidences cannot exceed either singles count")

    def car(self) -> float:
        """Convenience ratio; full error propagation lives in the analysis module."""
        if self.accidentals == 0:
            raise ZeroDivisionError("accidentals are zero, CAR undefined")
        return self.coincidences / self.accidentals


@dataclass(frozen=True)
class _Intensities:
    """Per-pulse Poisson intensities for one setting."""

    both: float  # correlated pair detected on both arms
    s_only: float  # any click on signal arm not caused by a detected pair
    i_only: float


def _intensities(
    src: SourceConfig,
    pair: ChannelPair,
    setting: AnalyzerSetting,
    det_s: DetectorModel,
    det_i: DetectorModel,
    window_s: float,
) -> _Intensities:
    power = src.pump.average_power_w
    mu_total = src.sfwm.kappa * power * power
    mu_corr = pair_rate(src.pump, src.sfwm, pair)
    nu_s = noise_rate(src.pump, src.sfwm, pair.signal_channel)
    nu_i = noise_rate(src.pump, src.sfwm, pair.idler_channel)
    tau_s = src.transmission_s() * det_s.efficiency
    tau_i = src.transmission_i() * det_i.efficiency

    m_s, m_i = acceptance_operators(setting)
    if setting.kind == "open":
        q_ss = q_s = q_i = 1.0
    else:
        kind = "polarization" if setting.kind == "polarization" else "timebin"
        rho = src.emitted_state(kind).matrix
        eye = np.eye(2, dtype=np.complex128)
        q_ss = _clamped_real(complex(np.trace(rho @ kron2(m_s, m_i))), "joint acceptance")
        q_s = _clamped_real(complex(np.trace(rho @ kron2(m_s, eye))), "signal acceptance")
        q_i = _clamped_real(complex(np.trace(rho @ kron2(eye, m_i))), "idler acceptance")

    # Unpolarized background photons: acceptance of the maximally mixed arm state.
    a_s = float(np.trace(m_s).real) / 2.0
    a_i = float(np.trace(m_i).real) / 2.0

    lam_both = mu_corr * q_ss * tau_s * tau_i
    # Broken pairs carry the same single-arm marginal as correlated ones.
    lam_s = mu_total * q_s * tau_s + nu_s * a_s * tau_s + det_s.dark_probability(window_s)
    lam_i = mu_total * q_i * tau_i + nu_i * a_i * tau_i + det_i.dark_probability(window_s)
    return _Intensities(
        both=lam_both,
        s_only=max(0.0, lam_s - lam_both),
        i_only=max(0.0, lam_i - lam_both),
    )


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator; (seed, stream) is the full 128-bit key.

    Disjoint streams are statistically independent, so partitioned runs can
    use one stream per partition and merge with :func:`merge_records`.
    """
    if not 0 <= int(seed) < 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    if not 0 <= int(stream) < 2**64:
        raise ValueError("stream must fit in an unsigned 64-bit integer")
    key = np.array([int(seed), int(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _dead_time_walk_py(clicks, starts, ends, dead, keep):
    for c in range(starts.size):
        i = int(starts[c])
        end = int(ends[c])
        release = clicks[i] + dead
        j = i + 1
        while j < end:
            if clicks[j] >= release:
                keep[j] = True
                release = clicks[j] + dead
            j += 1


if _HAVE_NUMBA:
    _dead_time_walk = _njit(cache=True)(_dead_time_walk_py)
else:  # pragma: no cover - exercised only without numba
    _dead_time_walk = _dead_time_walk_py


def apply_dead_time(click_pulses: NDArray[np.int64], dead_pulses: int) -> NDArray[np.int64]:
    """Drop clicks within dead_pulses of the previous *kept* click.

    click_pulses must be sorted and unique.  A kept click at pulse t blocks
    pulses t+1 .. t+dead_pulses-1.  Exact paralyzable-free (non-paralyzable)
    dead time: blocked clicks do not extend the dead window.
    """
    if dead_pulses < 0:
        raise ValueError("dead_pulses must be non-negative")
    clicks = np.asarray(click_pulses, dtype=np.int64)
    if dead_pulses <= 1 or clicks.size == 0:
        return clicks
    gaps = np.diff(clicks)
    # Clusters: maximal runs of clicks separated by < dead_pulses.  Any kept
    # click before a cluster start is at least dead_pulses away, so every
    # cluster start survives; only inside multi-click clusters is a scan
    # needed.
    is_start = np.concatenate(([True], gaps >= dead_pulses))
    keep = is_start.copy()
    starts = np.flatnonzero(is_start)
    ends = np.append(starts[1:], clicks.size)
    multi = ends - starts > 1
    if multi.any():
        _dead_time_walk(clicks, starts[multi], ends[multi], np.int64(dead_pulses), keep)
    return clicks[keep]


def _draw_click_pulses(rng, pulses, intensities):
    """Poisson event counts and pulse indices, in a frozen draw order."""
    k_both = rng.poisson(pulses * intensities.both)
    k_s = rng.poisson(pulses * intensities.s_only)
    k_i = rng.poisson(pulses * intensities.i_only)
    idx_both = rng.integers(0, max(pulses, 1), size=k_both, dtype=np.int64)
    idx_s = rng.integers(0, max(pulses, 1), size=k_s, dtype=np.int64)
    idx_i = rng.integers(0, max(pulses, 1), size=k_i, dtype=np.int64)
    s_clicks = np.unique(np.concatenate([idx_both, idx_s]))
    i_clicks = np.unique(np.concatenate([idx_both, idx_i]))
    return s_clicks, i_clicks


def simulate_counts(
    src: SourceConfig,
    pair: ChannelPair,
    setting: AnalyzerSetting,
    det_s: DetectorModel,
    det_i: DetectorModel,
    duration_s: float,
    seed: int,
    stream: int = 0,
    window_s: float = DEFAULT_WINDOW_S,
) -> CountRecord:
    """Simulate one measurement setting over duration_s of beam time.

    Identical arguments give byte-identical records (counter-based RNG keyed
    by (seed, stream) and a fixed draw order).  For partitioned runs, call
    once per pulse range with distinct streams and merge; dead-time state is
    confined to each partition, which biases counts by at most one dead
    window per partition boundary.
    """
    if duration_s < 0.0:
        raise ValueError("duration must be non-negative")
    rep = src.pump.repetition_rate_hz
    pulses = int(round(duration_s * rep))
    rng = make_rng(seed, stream)

    inten = _intensities(src, pair, setting, det_s, det_i, window_s)
    s_clicks, i_clicks = _draw_click_pulses(rng, pulses, inten)
    s_clicks = apply_dead_time(s_clicks, int(round(det_s.dead_time_s * rep)))
    i_clicks = apply_dead_time(i_clicks, int(round(det_i.dead_time_s * rep)))

    coincidences = np.intersect1d(s_clicks, i_clicks, assume_unique=True).size
    # Delayed-window estimate: idler clicks one pulse later than the signal.
    accidentals = np.intersect1d(s_clicks, i_clicks - 1, assume_unique=True).size

    return CountRecord(
        setting=f"{pair.label()} {setting.label()}",
        singles_s=float(s_clicks.size),
        singles_i=float(i_clicks.size),
        coincidences=float(coincidences),
        accidentals=float(accidentals),
        pulses=pulses,
        duration_s=duration_s,
        window_s=window_s,
        channel_loss_s_db=src.channel_loss_s_db,
        channel_loss_i_db=src.channel_loss_i_db,
    )


def analytic_count_expectation(
    src: SourceConfig,
    pair: ChannelPair,
    setting: AnalyzerSetting,
    det_s: DetectorModel,
    det_i: DetectorModel,
    duration_s: float,
    window_s: float = DEFAULT_WINDOW_S,
) -> CountRecord:
    """Exact expected counts for the Poisson click model, dead time excluded.

    Click probabilities saturate as 1 - exp(-lambda); the same-pulse
    coincidence probability follows from the shared-pair intensity, and the
    accidental expectation is the product of the two independent-pulse
    singles probabilities.  Detectors with dead time have no closed form
    here, so they are rejected rather than silently mis-modeled.
    """
    if det_s.dead_time_s > 0.0 or det_i.dead_time_s > 0.0:
        raise ValueError("analytic expectation is exact only without dead time")
    rep = src.pump.repetition_rate_hz
    pulses = int(round(duration_s * rep))
    t = _intensities(src, pair, setting, det_s, det_i, window_s)
    p_s = 1.0 - math.exp(-(t.both + t.s_only))
    p_i = 1.0 - math.exp(-(t.both + t.i_only))
    p_cc = (
        1.0
        - math.exp(-(t.both + t.s_only))
        - math.exp(-(t.both + t.i_only))
        + math.exp(-(t.both + t.s_only + t.i_only))
    )
    return CountRecord(
        setting=f"{pair.label()} {setting.label()}",
        singles_s=pulses * p_s,
        singles_i=pulses * p_i,
        coincidences=pulses * p_cc,
        accidentals=pulses * p_s * p_i,
        pulses=pulses,
        duration_s=duration_s,
        window_s=window_s,
        channel_loss_s_db=src.channel_loss_s_db,
        channel_loss_i_db=src.channel_loss_i_db,
    )


_SLOT_ORDER = ("early", "central", "late")


def _slot_arms(phi: float):
    return ("S", float(phi), "L")


def timebin_slot_probabilities(
    state: DensityMatrix | PureState2Q, phases: tuple[float, float]
) -> NDArray[np.float64]:
    """3x3 per-pair acceptance matrix over (signal slot, idler slot).

    Rows and columns follow (early, central, late).  Only the central-central
    cell depends on the interferometer phases; the four corner cells come
    from the arrival-bin populations and the side cells are phase-free 50/50
    splits of the corner flux.
    """
    phi_s, phi_i = phases
    out = np.empty((3, 3), dtype=np.float64)
    for i, arm_s in enumerate(_slot_arms(phi_s)):
        for j, arm_i in enumerate(_slot_arms(phi_i)):
            out[i, j] = analytic_coincidence_prob(state, timebin_setting(arm_s, arm_i))
    return out


def timebin_slot_histogram(
    src: SourceConfig,
    pair: ChannelPair,
    phases: tuple[float, float],
    det_s: DetectorModel,
    det_i: DetectorModel,
    duration_s: float,
    seed: int,
    umi_delay_s: float = DEFAULT_UMI_DELAY_S,
    window_s: float = DEFAULT_WINDOW_S,
) -> NDArray[np.int64]:
    """Simulated 3x3 coincidence histogram over arrival-slot combinations.

    Requires the interferometer delay to exceed the coincidence window,
    otherwise neighbouring slots overlap and the histogram is meaningless.
    Slots follow (early, central, late) on both axes; the central slots use
    the given interferometer phases.
    """
    if umi_delay_s <= window_s:
        raise ValueError("interferometer delay must exceed the coincidence window")
    phi_s, phi_i = phases
    counts = np.zeros((3, 3), dtype=np.int64)
    for i, arm_s in enumerate(_slot_arms(phi_s)):
        for j, arm_i in enumerate(_slot_arms(phi_i)):
            rec = simulate_counts(
                src,
                pair,
                timebin_setting(arm_s, arm_i),
                det_s,
                det_i,
                duration_s,
                seed,
                stream=3 * i + j,
                window_s=window_s,
            )
            counts[i, j] = int(rec.coincidences)
    return counts


def merge_records(*records: CountRecord) -> CountRecord:
    """Sum counting records from partitioned runs of the same setting.

    Records must agree on setting, window and channel losses.  Dead-time
    bookkeeping does not cross partition boundaries, so the merged result
    can overcount by at most one dead window per boundary.
    """
    if len(records) < 2:
        raise ValueError("need at least two records to merge")
    first = records[0]
    for rec in records[1:]:
        if rec.setting != first.setting:
            raise ValueError(f"cannot merge records of settings {first.setting!r} and {rec.setting!r}")
        if rec.window_s != first.window_s:
            raise ValueError("cannot merge records with different coincidence windows")
        if (rec.channel_loss_s_db, rec.channel_loss_i_db) != (
            first.channel_loss_s_db,
            first.channel_loss_i_db,
        ):
            raise ValueError("cannot merge records with different channel losses")
    return replace(
        first,
        singles_s=sum(r.singles_s for r in records),
        singles_i=sum(r.singles_i for r in records),
        coincidences=sum(r.coincidences for r in records),
        accidentals=sum(r.accidentals for r in records),
        pulses=sum(r.pulses for r in records),
        duration_s=sum(r.duration_s for r in records),
    )
