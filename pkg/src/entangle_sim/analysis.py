"""Estimators for counting experiments: visibility, CAR, Bell tests, tomography.

Everything in this module is a pure function of count records (or plain count
arrays) so that the same code path serves Monte Carlo output, analytic
expectation records and data read back from disk.

Conventions
-----------
* "raw" quantities use coincidence counts as recorded; "net" quantities use
  accidental-subtracted coincidences C - A.  Poisson errors propagate as
  Var(C - A) = C + A.
* The coincidence-to-accidental ratio is CAR = C / A, the plain ratio of the
  same-pulse to the delayed-window coincidence counts.
* Fringes are fitted with the linear model
      y(x) = c0 + a cos(f x) + b sin(f x)
  which is the unique reparametrization of  c0 (1 + V cos(f x - x0))  that
  keeps the least-squares problem linear.  V = sqrt(a^2 + b^2) / c0.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.optimize

from .measurement_sim import (
    AnalyzerSetting,
    CountRecord,
    DetectorModel,
    acceptance_operators,
    make_rng,
    polarization_setting,
    timebin_setting,
)
from .quantum_core import DensityMatrix, PureState2Q, fidelity
from .source_model import ChannelPair, SourceConfig, noise_rate, pair_rate

__all__ = [
    "VisibilityResult",
    "fit_visibility",
    "visibility_from_records",
    "CarResult",
    "compute_car",
    "analytic_car",
    "calibrate_noise",
    "chsh_settings",
    "chsh_correlation",
    "ChshResult",
    "chsh_from_records",
    "tomography_settings",
    "coincidence_operator",
    "linear_inversion",
    "project_to_physical",
    "MleResult",
    "mle_reconstruct",
    "BootstrapResult",
    "bootstrap_fidelity",
    "write_records",
    "read_records",
]


# ----------------------------------------------------------------- fringes


@dataclass(frozen=True)
class VisibilityResult:
    """Weighted least-squares fringe fit.

    Attributes:
        visibility: fringe contrast V, not clamped to [0, 1].
        sigma: 1-sigma uncertainty on V (delta method over the linear fit).
        offset: fitted mean level c0.
        amplitude: fitted modulation amplitude sqrt(a^2 + b^2).
        phase: fringe phase x0 in radians, y ~ c0 + A cos(f x - x0).
        frequency: angular frequency f used in the model (fixed, not fitted).
    """

    visibility: float
    sigma: float
    offset: float
    amplitude: float
    phase: float
    frequency: float


def fit_visibility(x, y, sigma=None, frequency: float = 1.0) -> VisibilityResult:
    """Fit y(x) = c0 + a cos(f x) + b sin(f x) and return the contrast.

    ``sigma`` are per-point standard deviations; omitted, sqrt(max(y, 1)) is
    used, the Poisson default for count data.  Requires at least four points
    and three distinct x values, otherwise the three-parameter model is
    degenerate.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1d arrays of equal length")
    if x.size < 4:
        raise ValueError("need at least 4 fringe points")
    if np.unique(np.round(x, 12)).size < 3:
        raise ValueError("need at least 3 distinct x values")
    if sigma is None:
        sigma = np.sqrt(np.maximum(y, 1.0))
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")

    design = np.column_stack(
        [np.ones_like(x), np.cos(frequency * x), np.sin(frequency * x)]
    )
    w = design / sigma[:, None]
    beta, *_ = np.linalg.lstsq(w, y / sigma, rcond=None)
    c0, a, b = beta
    if c0 <= 0:
        raise ValueError("fitted fringe offset is not positive; no fringe present")

    amp = math.hypot(a, b)
    vis = amp / c0
    cov = np.linalg.inv(w.T @ w)
    if amp == 0.0:
        # V = 0 exactly; quote the quadrature floor of the two amplitude axes.
        var = (cov[1, 1] + cov[2, 2]) / c0**2
    else:
        grad = np.array([-vis / c0, a / (amp * c0), b / (amp * c0)])
        var = grad @ cov @ grad
    return VisibilityResult(
        visibility=float(vis),
        sigma=float(math.sqrt(max(var, 0.0))),
        offset=float(c0),
        amplitude=float(amp),
        phase=float(math.atan2(b, a)),
        frequency=float(frequency),
    )


def visibility_from_records(
    x,
    records: Sequence[CountRecord],
    use_net: bool = False,
    frequency: float = 1.0,
) -> VisibilityResult:
    """Fringe fit over count records taken at analyzer coordinates ``x``.

    Raw mode fits the coincidence counts directly.  Net mode fits C - A
    (unclamped; points near a fringe minimum may scatter below zero) with
    the propagated sigma sqrt(C + A).
    """
    if len(x) != len(records):
        raise ValueError("one coordinate per record required")
    c = np.array([r.coincidences for r in records], dtype=float)
    a = np.array([r.accidentals for r in records], dtype=float)
    if use_net:
        return fit_visibility(x, c - a, np.sqrt(np.maximum(c + a, 1.0)), frequency)
    return fit_visibility(x, c, np.sqrt(np.maximum(c, 1.0)), frequency)


# --------------------------------------------------------------------- CAR


@dataclass(frozen=True)
class CarResult:
    car: float
    sigma: float
    coincidences: float
    accidentals: float


def compute_car(record: CountRecord) -> CarResult:
    """CAR = C / A with the standard Poisson ratio error.

    sigma = CAR * sqrt(1/C + 1/A).  A record with zero accidentals carries no
    information about the ratio and raises ZeroDivisionError, matching
    CountRecord.car().  Zero coincidences give car = 0 with sigma = 0.
    """
    c, a = record.coincidences, record.accidentals
    if a == 0:
        raise ZeroDivisionError("no accidental counts; CAR undefined")
    car = c / a
    sigma = car * math.sqrt(1.0 / c + 1.0 / a) if c > 0 else 0.0
    return CarResult(car=car, sigma=sigma, coincidences=c, accidentals=a)


def _linear_rates(src, pair, det_s, det_i, window_s):
    """Per-pulse first-order click and pair probabilities (no saturation)."""
    mu_total = src.sfwm.kappa * src.pump.average_power_w**2
    mu_pair = pair_rate(src.pump, src.sfwm, pair)
    nu_s = noise_rate(src.pump, src.sfwm, pair.signal_channel)
    nu_i = noise_rate(src.pump, src.sfwm, pair.idler_channel)
    tau_s = src.transmission_s() * det_s.efficiency
    tau_i = src.transmission_i() * det_i.efficiency
    p_s = (mu_total + nu_s) * tau_s + det_s.dark_probability(window_s)
    p_i = (mu_total + nu_i) * tau_i + det_i.dark_probability(window_s)
    return mu_pair * tau_s * tau_i, p_s, p_i


def analytic_car(
    src: SourceConfig,
    pair: ChannelPair,
    det_s: DetectorModel,
    det_i: DetectorModel,
    window_s: float = 0.4e-9,
) -> float:
    """First-order CAR model: correlated pairs over the singles product.

    CAR = mu_pair tau_s tau_i / (p_s p_i) with p the per-pulse singles
    probabilities including noise photons and dark counts.  Valid while all
    per-pulse probabilities are well below one; the Monte Carlo adds
    saturation, the same-window accidental floor and dead time on top.
    """
    c, p_s, p_i = _linear_rates(src, pair, det_s, det_i, window_s)
    if p_s <= 0 or p_i <= 0:
        raise ValueError("singles probability is zero; CAR diverges")
    return c / (p_s * p_i)


def calibrate_noise(
    src: SourceConfig,
    pair: ChannelPair,
    det_s: DetectorModel,
    det_i: DetectorModel,
    target_car: float,
    window_s: float = 0.4e-9,
) -> float:
    """Noise coefficient that pins the first-order CAR at the given target.

    Solves analytic_car == target_car for the linear noise coefficient at the
    source's configured pump power; all other parameters are taken from
    ``src``.  The singles probabilities are linear in the per-arm noise rate
    nu = coeff * P * factor_k, so the condition is a quadratic with exactly
    one positive root whenever the target is reachable.  Raises ValueError if
    even a noiseless source falls below the target.
    """
    if target_car <= 0:
        raise ValueError("target CAR must be positive")
    p = src.pump.average_power_w
    mu_total = src.sfwm.kappa * p**2
    mu_pair = pair_rate(src.pump, src.sfwm, pair)
    f_s = src.sfwm.noise_factor_for(abs(pair.detuning_k))
    tau_s = src.transmission_s() * det_s.efficiency
    tau_i = src.transmission_i() * det_i.efficiency
    c = mu_pair * tau_s * tau_i
    if c <= 0:
        raise ValueError("no correlated pairs; CAR cannot be calibrated")
    # p_arm = nu tau + g with g the noise-free singles probability.  Both arms
    # share the same detuning, hence the same noise scale factor.
    g_s = mu_total * tau_s + det_s.dark_probability(window_s)
    g_i = mu_total * tau_i + det_i.dark_probability(window_s)
    # tau_s tau_i nu^2 + (tau_s g_i + tau_i g_s) nu + g_s g_i - c/target = 0
    qa = tau_s * tau_i
    qb = tau_s * g_i + tau_i * g_s
    qc = g_s * g_i - c / target_car
    if qc >= 0:
        raise ValueError(
            f"target CAR {target_car} is unreachable: the noiseless source "
            f"already sits at {c / (g_s * g_i):.3g}"
        )
    nu = (-qb + math.sqrt(qb * qb - 4 * qa * qc)) / (2 * qa)
    return nu / (p * f_s)


# -------------------------------------------------------------------- CHSH

# Analyzer base angles (signal, idler) realizing the canonical
# S = E(a,b) - E(a,b') + E(a',b) + E(a',b') combination, maximal for the
# |HH> + |VV> state: a = 22.5 deg, a' = -22.5 deg, b = 0, b' = -45 deg.
_CHSH_ANGLES = (
    (math.pi / 8, 0.0),
    (math.pi / 8, -math.pi / 4),
    (-math.pi / 8, 0.0),
    (-math.pi / 8, -math.pi / 4),
)
_CHSH_SIGNS = (1.0, -1.0, 1.0, 1.0)


def chsh_settings() -> list[list[AnalyzerSetting]]:
    """16 polarization settings for a four-correlator CHSH measurement.

    Four blocks, one per correlator, each listing the (+,+), (+,-), (-,+),
    (-,-) outcome projectors; the "-" outcome is the analyzer rotated by 90
    degrees.  Blocks are ordered so that chsh_from_records applies the sign
    pattern + - + +.
    """
    grid = []
    for alpha, beta in _CHSH_ANGLES:
        block = [
            polarization_setting(alpha + ds, beta + di)
            for ds in (0.0, math.pi / 2)
            for di in (0.0, math.pi / 2)
        ]
        # reorder (+,+), (+,-), (-,+), (-,-) is already the natural order
        grid.append(block)
    return grid


def chsh_correlation(counts) -> tuple[float, float]:
    """Correlation E and its error from the four outcome counts ++, +-, -+, --.

    E = (N++ + N-- - N+- - N-+) / N_total; the variance follows from treating
    the four counts as independent Poisson variables.
    """
    n = np.asarray(counts, dtype=float)
    if n.shape != (4,) or np.any(n < 0):
        raise ValueError("need four non-negative outcome counts")
    total = n.sum()
    if total <= 0:
        raise ValueError("no counts in correlation block")
    signs = np.array([1.0, -1.0, -1.0, 1.0])
    e = float((signs * n).sum() / total)
    var = float((n * (signs - e) ** 2).sum() / total**2)
    return e, math.sqrt(var)


@dataclass(frozen=True)
class ChshResult:
    s: float
    sigma: float
    correlations: tuple[tuple[float, float], ...]


def chsh_from_records(records: Sequence[CountRecord], use_net: bool = False) -> ChshResult:
    """CHSH S from 16 records ordered as produced by chsh_settings().

    S = |E1 - E2 + E3 + E4|; sigma adds the four correlation errors in
    quadrature.  Net mode subtracts accidentals (clamped at zero) before
    forming the correlations.
    """
    if len(records) != 16:
        raise ValueError("expected 16 records (4 correlators x 4 outcomes)")
    es, sigmas = [], []
    for block in range(4):
        counts = []
        for rec in records[4 * block : 4 * block + 4]:
            c = rec.coincidences - rec.accidentals if use_net else rec.coincidences
            counts.append(max(c, 0.0))
        e, se = chsh_correlation(counts)
        es.append(e)
        sigmas.append(se)
    s = sum(sign * e for sign, e in zip(_CHSH_SIGNS, es))
    sigma = math.sqrt(sum(se**2 for se in sigmas))
    return ChshResult(s=abs(s), sigma=sigma, correlations=tuple(zip(es, sigmas)))


# -------------------------------------------------------------- tomography


def tomography_settings(kind: str) -> list[tuple[str, AnalyzerSetting]]:
    """Informationally complete 16-setting scan for one encoding.

    Polarization: {H, V, D, R} on each arm (R via a quarter-wave retardation).
    Time bin: {early, late, central(0), central(pi/2)} on each arm.  The
    early/late blocks double as the rate normalization group in
    linear_inversion since their per-arm operators sum to a multiple of the
    identity.
    """
    if kind == "polarization":
        arms = [
            ("H", (0.0, 0.0)),
            ("V", (math.pi / 2, 0.0)),
            ("D", (math.pi / 4, 0.0)),
            ("R", (math.pi / 4, -math.pi / 2)),
        ]
        return [
            (
                f"{ls}{li}",
                polarization_setting(ts, ti, retard_s=rs, retard_i=ri),
            )
            for ls, (ts, rs) in arms
            for li, (ti, ri) in arms
        ]
    if kind == "timebin":
        arms = [("E", "S"), ("L", "L"), ("c0", 0.0), ("c90", math.pi / 2)]
        return [
            (f"{ls}.{li}", timebin_setting(s, i))
            for ls, s in arms
            for li, i in arms
        ]
    raise ValueError(f"unknown tomography kind: {kind!r}")


def coincidence_operator(setting: AnalyzerSetting) -> np.ndarray:
    """Two-photon acceptance operator M_s (x) M_i in the joint basis."""
    m_s, m_i = acceptance_operators(setting)
    return np.kron(m_s, m_i)


# Hermitian operator basis used to linearize tr(rho M) = sum_j r_j tr(B_j M).
def _hermitian_basis() -> list[np.ndarray]:
    basis = []
    for i in range(4):
        e = np.zeros((4, 4), dtype=complex)
        e[i, i] = 1.0
        basis.append(e)
    for i in range(4):
        for j in range(i + 1, 4):
            e = np.zeros((4, 4), dtype=complex)
            e[i, j] = e[j, i] = 1.0
            basis.append(e)
            e = np.zeros((4, 4), dtype=complex)
            e[i, j] = -1.0j
            e[j, i] = 1.0j
            basis.append(e)
    return basis


_HBASIS = _hermitian_basis()


def linear_inversion(
    operators: Sequence[np.ndarray],
    pulses: Sequence[float],
    counts: Sequence[float],
) -> np.ndarray:
    """Direct least-squares state estimate; may be unphysical.

    Solves counts_k / pulses_k = tr(rho_tilde M_k) for an unnormalized
    Hermitian rho_tilde (the unknown per-pulse rate scale folds into it),
    then normalizes by the trace.  With 16 informationally complete settings
    the system is exactly determined.
    """
    ops = [np.asarray(m, dtype=complex) for m in operators]
    rates = np.asarray(counts, dtype=float) / np.asarray(pulses, dtype=float)
    design = np.array([[np.trace(b @ m).real for b in _HBASIS] for m in ops])
    coeff, *_ = np.linalg.lstsq(design, rates, rcond=None)
    rho = sum(c * b for c, b in zip(coeff, _HBASIS))
    tr = np.trace(rho).real
    if tr <= 0:
        raise ValueError("linear inversion produced a non-positive trace")
    return rho / tr


def project_to_physical(rho: np.ndarray) -> DensityMatrix:
    """Closest density matrix (trace-norm sense) to a Hermitian estimate.

    Eigenvalue water-filling: negative eigenvalues are zeroed and their
    deficit is spread uniformly over the remaining ones.
    """
    h = 0.5 * (np.asarray(rho, dtype=complex) + np.asarray(rho, dtype=complex).conj().T)
    tr = np.trace(h).real
    if tr <= 0:
        raise ValueError("estimate has non-positive trace")
    vals, vecs = np.linalg.eigh(h / tr)
    vals = vals.copy()
    # Walk from the most negative eigenvalue up, dumping each deficit onto
    # the still-positive remainder.
    order = np.argsort(vals)
    deficit = 0.0
    for idx, k in enumerate(order):
        share = deficit / (len(vals) - idx)
        if vals[k] + share < 0:
            deficit += vals[k]
            vals[k] = 0.0
        else:
            vals[order[idx:]] += share
            break
    fixed = (vecs * vals) @ vecs.conj().T
    return DensityMatrix(fixed / np.trace(fixed).real)


def _rho_from_params(t: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Lower-triangular T from the 16 real parameters; rho = T T^dag / tr."""
    tm = np.zeros((4, 4), dtype=complex)
    tm[np.diag_indices(4)] = t[:4]
    k = 4
    for i in range(1, 4):
        for j in range(i):
            tm[i, j] = t[k] + 1.0j * t[k + 1]
            k += 2
    b = tm @ tm.conj().T
    tau = np.trace(b).real
    return tm, b / tau, tau


def _params_from_rho(rho: np.ndarray) -> np.ndarray:
    """Inverse of _rho_from_params via a jittered Cholesky factor."""
    eps = 1e-8
    safe = (np.asarray(rho, dtype=complex) + eps * np.eye(4)) / (1 + 4 * eps)
    low = np.linalg.cholesky(safe)
    t = np.empty(16)
    t[:4] = np.diag(low).real
    k = 4
    for i in range(1, 4):
        for j in range(i):
            t[k] = low[i, j].real
            t[k + 1] = low[i, j].imag
            k += 2
    return t


@dataclass(frozen=True)
class MleResult:
    rho: DensityMatrix
    nll: float
    converged: bool
    iterations: int


def mle_reconstruct(
    operators: Sequence[np.ndarray],
    pulses: Sequence[float],
    counts: Sequence[float],
    init: np.ndarray | None = None,
) -> MleResult:
    """Maximum-likelihood density matrix from Poisson coincidence counts.

    The model is lambda_k = s N_k tr(rho M_k) with one global rate scale s
    profiled out analytically at every step.  rho is parametrized as
    T T^dag / tr(T T^dag) with lower-triangular T, so every iterate is
    physical by construction.  Gradients are analytic; optimization is
    L-BFGS-B.  ``init`` defaults to the physically projected linear
    inversion of the same data.
    """
    ops = np.array([np.asarray(m, dtype=complex) for m in operators])
    n_pulses = np.asarray(pulses, dtype=float)
    n_obs = np.asarray(counts, dtype=float)
    if np.any(n_obs < 0) or np.any(n_pulses <= 0):
        raise ValueError("counts must be non-negative and pulses positive")
    if n_obs.sum() <= 0:
        raise ValueError("no coincidence counts to fit")

    if init is None:
        init = project_to_physical(linear_inversion(ops, n_pulses, n_obs)).matrix
    t0 = _params_from_rho(init)
    total = n_obs.sum()
    tiny = 1e-300

    def objective(t):
        tm, rho, tau = _rho_from_params(t)
        q = np.einsum("kij,ji->k", ops, rho).real
        q = np.maximum(q, tiny)
        norm = float(n_pulses @ q)
        scale = total / norm
        lam = scale * n_pulses * q
        nll = float(lam.sum() - n_obs @ np.log(lam))
        # dNLL/drho with the profiled scale held fixed (envelope theorem).
        weights = (1.0 - n_obs / lam) * scale * n_pulses
        g = np.einsum("k,kij->ij", weights, ops)
        g = 0.5 * (g + g.conj().T)
        gt = g - np.trace(g @ rho).real * np.eye(4)
        a = (tm.conj().T @ gt) / tau
        grad = np.empty(16)
        grad[:4] = 2.0 * np.diag(a).real[:4]
        k = 4
        for i in range(1, 4):
            for j in range(i):
                grad[k] = 2.0 * a[j, i].real
                grad[k + 1] = -2.0 * a[j, i].imag
                k += 2
        return nll, grad

    res = scipy.optimize.minimize(
        objective,
        t0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 10000, "ftol": 1e-14, "gtol": 1e-10},
    )
    _, rho, _ = _rho_from_params(res.x)
    grad_small = float(np.linalg.norm(res.jac)) < 1e-5
    return MleResult(
        rho=DensityMatrix(rho),
        nll=float(res.fun),
        converged=bool(res.success or grad_small),
        iterations=int(res.nit),
    )


@dataclass(frozen=True)
class BootstrapResult:
    fidelity: float
    sigma: float
    samples: tuple[float, ...]


def bootstrap_fidelity(
    operators: Sequence[np.ndarray],
    pulses: Sequence[float],
    counts: Sequence[float],
    target: PureState2Q,
    n_boot: int = 200,
    seed: int = 0,
) -> BootstrapResult:
    """Parametric bootstrap of the MLE fidelity against a target state.

    Each replica redraws every setting's count as Poisson(observed count)
    and refits.  ``fidelity`` is the point estimate from the observed data;
    ``sigma`` is the spread of the replicas.  At least 100 replicas are
    required for a stable error bar.
    """
    if n_boot < 100:
        raise ValueError("use at least 100 bootstrap replicas")
    base = mle_reconstruct(operators, pulses, counts)
    point = fidelity(base.rho, target)
    rng = make_rng(seed)
    n_obs = np.asarray(counts, dtype=float)
    samples = []
    for _ in range(n_boot):
        fake = rng.poisson(n_obs).astype(float)
        if fake.sum() <= 0:
            continue
        fit = mle_reconstruct(operators, pulses, fake, init=base.rho.matrix)
        samples.append(fidelity(fit.rho, target))
    arr = np.array(samples)
    return BootstrapResult(
        fidelity=float(point),
        sigma=float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        samples=tuple(float(v) for v in arr),
    )


# ------------------------------------------------------------- record I/O

_FIELDS = [f.name for f in dataclasses.fields(CountRecord)]
_INT_FIELDS = {"pulses"}


def write_records(path, records: Sequence[CountRecord], metadata: dict | None = None) -> None:
    """CSV dump of count records, one row per record.

    An optional metadata dict is stored in a single leading comment line
    ``# key=value key=value ...``; keys and values must not contain spaces.
    Floats are written with repr so the round trip is exact.
    """
    with open(path, "w", newline="") as fh:
        if metadata:
            for key, value in metadata.items():
                if " " in str(key) or " " in str(value):
                    raise ValueError("metadata keys and values must not contain spaces")
            fh.write("# " + " ".join(f"{k}={v}" for k, v in metadata.items()) + "\n")
        writer = csv.writer(fh)
        writer.writerow(_FIELDS)
        for rec in records:
            row = []
            for name in _FIELDS:
                value = getattr(rec, name)
                row.append(repr(value) if isinstance(value, float) else value)
            writer.writerow(row)


def read_records(path) -> tuple[list[CountRecord], dict]:
    """Read back a CSV written by write_records; returns (records, metadata)."""
    metadata: dict = {}
    with open(path, newline="") as fh:
        first = fh.readline()
        if first.startswith("#"):
            for token in first[1:].split():
                key, _, value = token.partition("=")
                metadata[key] = value
        else:
            fh.seek(0)
        reader = csv.DictReader(fh)
        records = []
        for row in reader:
            kwargs = {}
            for name in _FIELDS:
                raw = row[name]
                if name == "setting":
                    kwargs[name] = raw
                elif name in _INT_FIELDS:
                    kwargs[name] = int(raw)
                else:
                    kwargs[name] = float(raw)
            records.append(CountRecord(**kwargs))
    return records, metadata
