"""Two-qubit states, projectors and probabilities for photon-pair experiments.

All two-photon objects live in a fixed 4-dimensional Hilbert space with
basis order (|00>, |01>, |10>, |11>).  For polarization qubits the
single-photon basis is (|H>, |V>), so the two-photon basis reads
(|HH>, |HV>, |VH>, |VV>).  For time-bin qubits it is (|S>, |L>)
(short / long arrival bin), so the order is (|SS>, |SL>, |LS>, |LL>).
The first slot always refers to the signal photon, the second to the idler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "PureState2Q",
    "DensityMatrix",
    "Projector",
    "density_from_pure",
    "polarization_projector",
    "timebin_projector",
    "born_probability",
    "fidelity",
    "is_physical",
    "ket2",
    "kron2",
]

DIM = 4

# Tolerances used when validating density matrices.
HERMITICITY_TOL = 1e-10
TRACE_TOL = 1e-10
# Eigenvalues above -PSD_TOL count as non-negative (eigensolver round-off).
PSD_TOL = 1e-9
# Expectation values of Hermitian operators must be real up to this residue.
IMAG_TOL = 1e-8


def _as_complex_vector(amplitudes) -> NDArray[np.complex128]:
    vec = np.asarray(amplitudes, dtype=np.complex128)
    if vec.shape != (DIM,):
        raise ValueError(f"two-qubit state needs {DIM} amplitudes, got shape {vec.shape}")
    return vec


def ket2(first: NDArray[np.complex128], second: NDArray[np.complex128]) -> NDArray[np.complex128]:
    """Tensor product of two single-photon kets (signal first, idler second)."""
    a = np.asarray(first, dtype=np.complex128)
    b = np.asarray(second, dtype=np.complex128)
    if a.shape != (2,) or b.shape != (2,):
        raise ValueError("ket2 expects two length-2 kets")
    return np.kron(a, b)


def kron2(op_s: NDArray[np.complex128], op_i: NDArray[np.complex128]) -> NDArray[np.complex128]:
    """Tensor product of one operator per arm, signal factor first."""
    return np.kron(np.asarray(op_s, dtype=np.complex128), np.asarray(op_i, dtype=np.complex128))


@dataclass(frozen=True)
class PureState2Q:
    """Normalized pure two-qubit state.

    The constructor renormalizes the supplied amplitudes, so callers may
    pass unnormalized vectors.  A zero vector is rejected.
    """

    amplitudes: NDArray[np.complex128]

    def __post_init__(self):
        vec = _as_complex_vector(self.amplitudes)
        norm = np.linalg.norm(vec)
        if norm < 1e-12:
            raise ValueError("cannot normalize a zero state vector")
        vec = vec / norm
        vec.flags.writeable = False
        object.__setattr__(self, "amplitudes", vec)

    def ket(self) -> NDArray[np.complex128]:
        return self.amplitudes

    def density(self) -> "DensityMatrix":
        return density_from_pure(self)


@dataclass(frozen=True)
class DensityMatrix:
    """Hermitian, unit-trace 4x4 operator.

    Hermiticity and trace are always enforced.  Positivity is *not*: linear
    tomographic inversion legitimately produces operators with small negative
    eigenvalues, which downstream code detects via :func:`is_physical`.
    Pass ``require_physical=True`` to reject those at construction.
    """

    matrix: NDArray[np.complex128]
    require_physical: bool = field(default=False, compare=False)

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.complex128)
        if mat.shape != (DIM, DIM):
            raise ValueError(f"density matrix must be {DIM}x{DIM}, got {mat.shape}")
        if np.max(np.abs(mat - mat.conj().T)) > HERMITICITY_TOL:
            raise ValueError("density matrix is not Hermitian")
        if abs(np.trace(mat).real - 1.0) > TRACE_TOL or abs(np.trace(mat).imag) > TRACE_TOL:
            raise ValueError("density matrix must have unit trace")
        if self.require_physical and not _psd_ok(mat):
            raise ValueError("density matrix has a negative eigenvalue beyond tolerance")
        mat = mat.copy()
        mat.flags.writeable = False
        object.__setattr__(self, "matrix", mat)

    def eigenvalues(self) -> NDArray[np.float64]:
        return np.linalg.eigvalsh(self.matrix)


@dataclass(frozen=True)
class Projector:
    """Rank-1 projector |k><k| onto a normalized two-photon ket.

    label carries a human-readable description of the analyzer setting that
    realizes the projection (used in reports and CSV output).
    """

    ket: NDArray[np.complex128]
    label: str = ""

    def __post_init__(self):
        vec = _as_complex_vector(self.ket)
        norm = np.linalg.norm(vec)
        if abs(norm - 1.0) > 1e-9:
            if norm < 1e-12:
                raise ValueError("projector ket cannot be zero")
            vec = vec / norm
        vec = vec.copy()
        vec.flags.writeable = False
        object.__setattr__(self, "ket", vec)

    def matrix(self) -> NDArray[np.complex128]:
        return np.outer(self.ket, self.ket.conj())


def density_from_pure(state: PureState2Q) -> DensityMatrix:
    """|psi><psi| as a DensityMatrix."""
    return DensityMatrix(np.outer(state.amplitudes, state.amplitudes.conj()))


def polarization_projector(
    theta_s: float,
    theta_i: float,
    retard_s: float = 0.0,
    retard_i: float = 0.0,
) -> Projector:
    """Projector onto elliptical polarizations per arm.

    Each arm projects onto cos(theta)|H> + e^{i retard} sin(theta)|V>: a
    half-wave-plate rotation by theta followed by an optional retardance.
    The defaults (retard = 0) give plain linear polarizers; theta = pi/4 with
    retard = pi/2 gives the circular analyzer needed for state tomography.
    """

    def _arm(theta, retard):
        return np.array([np.cos(theta), np.exp(1j * retard) * np.sin(theta)], dtype=np.complex128)

    def _lab(theta, retard):
        txt = f"{np.degrees(theta):+.2f}deg"
        if retard != 0.0:
            txt += f"@{retard:+.4f}"
        return txt

    label = f"pol({_lab(theta_s, retard_s)}, {_lab(theta_i, retard_i)})"
    return Projector(ket2(_arm(theta_s, retard_s), _arm(theta_i, retard_i)), label=label)


_TIMEBIN_BASIS_KETS = {
    "S": np.array([1.0, 0.0], dtype=np.complex128),
    "L": np.array([0.0, 1.0], dtype=np.complex128),
}


def _timebin_arm_ket(arm) -> NDArray[np.complex128]:
    """One arm of a time-bin projector: 'S', 'L', or a superposition phase.

    A float phi selects (|S> + e^{i phi}|L>)/sqrt(2), the state analyzed by an
    unbalanced interferometer with relative phase phi when the overlapping
    (central) arrival bin is post-selected.
    """
    if isinstance(arm, str):
        try:
            return _TIMEBIN_BASIS_KETS[arm]
        except KeyError:
            raise ValueError(f"time-bin basis label must be 'S' or 'L', got {arm!r}") from None
    phi = float(arm)
    return np.array([1.0, np.exp(1j * phi)], dtype=np.complex128) / np.sqrt(2.0)


def timebin_projector(arm_s, arm_i) -> Projector:
    """Two-photon time-bin projector.

    Each argument is either 'S', 'L' (arrival-bin basis) or a float phase phi
    giving the superposition (|S> + e^{i phi}|L>)/sqrt(2).
    """

    def _lab(arm):
        return arm if isinstance(arm, str) else f"sup({float(arm):+.4f})"

    ket = ket2(_timebin_arm_ket(arm_s), _timebin_arm_ket(arm_i))
    return Projector(ket, label=f"tb({_lab(arm_s)}, {_lab(arm_i)})")


def _real_expectation(value: complex, what: str) -> float:
    if abs(value.imag) > IMAG_TOL:
        raise ValueError(f"{what} has imaginary residue {value.imag:.3e} beyond {IMAG_TOL:.0e}")
    return min(1.0, max(0.0, float(value.real)))


def born_probability(state: DensityMatrix | PureState2Q, projector: Projector) -> float:
    """Detection probability <k| rho |k> for the projector's ket.

    The result is clamped to [0, 1]; round-off can push it a hair outside,
    and an unphysical state from linear inversion can push it further, but a
    probability must never leave the unit interval.  An imaginary residue
    beyond IMAG_TOL means the state operator is broken and raises.
    """
    if isinstance(state, PureState2Q):
        amp = np.vdot(projector.ket, state.amplitudes)
        return min(1.0, float(np.abs(amp) ** 2))
    val = complex(np.vdot(projector.ket, state.matrix @ projector.ket))
    return _real_expectation(val, "born probability")


def fidelity(state: DensityMatrix | PureState2Q, target: PureState2Q) -> float:
    """Fidelity <target| rho |target> against a pure target state, in [0, 1]."""
    if isinstance(state, PureState2Q):
        return min(1.0, float(np.abs(np.vdot(target.amplitudes, state.amplitudes)) ** 2))
    val = complex(np.vdot(target.amplitudes, state.matrix @ target.amplitudes))
    return _real_expectation(val, "fidelity")


def _psd_ok(mat: NDArray[np.complex128], tol: float = PSD_TOL) -> bool:
    return bool(np.linalg.eigvalsh(mat).min() >= -tol)


def is_physical(rho: DensityMatrix, tol: float = PSD_TOL) -> bool:
    """True when every eigenvalue of rho is >= -tol (tol is a small positive number)."""
    if tol < 0.0:
        raise ValueError("tol is a magnitude; pass a non-negative number")
    return _psd_ok(rho.matrix, tol)
