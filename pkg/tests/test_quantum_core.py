"""Unit tests for two-qubit states, projectors and Born probabilities."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entangle_sim.quantum_core import (
    DensityMatrix,
    Projector,
    PureState2Q,
    born_probability,
    density_from_pure,
    fidelity,
    is_physical,
    ket2,
    polarization_projector,
    timebin_projector,
)

BELL_PHI_PLUS = PureState2Q(np.array([1, 0, 0, 1]) / math.sqrt(2))


def brute_force_born(state_vec, proj_vec):
    """Independent oracle: p = |<k|psi>|^2 via an explicit component sum."""
    amp = 0.0 + 0.0j
    for k in range(4):
        amp += proj_vec[k].conjugate() * state_vec[k]
    return abs(amp) ** 2


def test_born_matches_brute_force_on_bell_state():
    theta = 0.3
    proj = polarization_projector(theta, theta)
    kval = [
        math.cos(theta) * math.cos(theta),
        math.cos(theta) * math.sin(theta),
        math.sin(theta) * math.cos(theta),
        math.sin(theta) * math.sin(theta),
    ]
    expected = brute_force_born(BELL_PHI_PLUS.amplitudes, np.array(kval))
    assert born_probability(BELL_PHI_PLUS, proj) == pytest.approx(expected, abs=1e-12)
    # For |Phi+> and parallel analyzers the closed form is 1/2 at any angle.
    assert born_probability(BELL_PHI_PLUS, proj) == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("ts, ti", [(0.0, 0.0), (0.4, -0.7), (1.1, 0.25), (math.pi / 4, math.pi / 3)])
def test_polarization_fringe_law(ts, ti):
    # <ts, ti | Phi+> = cos(ts - ti) / sqrt(2)
    p = born_probability(BELL_PHI_PLUS, polarization_projector(ts, ti))
    assert p == pytest.approx(0.5 * math.cos(ts - ti) ** 2, abs=1e-12)


def test_polarization_projector_complete_set_sums_to_one():
    rng = np.random.default_rng(7)
    vec = rng.normal(size=4) + 1j * rng.normal(size=4)
    state = PureState2Q(vec)
    ts, ti = 0.37, -1.21
    total = 0.0
    for ds in (0.0, math.pi / 2):
        for di in (0.0, math.pi / 2):
            total += born_probability(state, polarization_projector(ts + ds, ti + di))
    assert total == pytest.approx(1.0, abs=1e-10)


def test_timebin_projector_superposition_arms():
    proj = timebin_projector(0.4, -0.9)
    expected = ket2(
        np.array([1.0, np.exp(0.4j)]) / math.sqrt(2),
        np.array([1.0, np.exp(-0.9j)]) / math.sqrt(2),
    )
    assert np.allclose(proj.ket, expected)
    with pytest.raises(ValueError):
        timebin_projector("X", 0.0)


def test_timebin_basis_slots_are_orthonormal():
    labels = ["S", "L"]
    kets = [timebin_projector(a, b).ket for a in labels for b in labels]
    gram = np.array([[np.vdot(u, v) for v in kets] for u in kets])
    assert np.allclose(gram, np.eye(4), atol=1e-12)


def test_projector_matrix_is_rank_one_idempotent():
    proj = timebin_projector(1.2, "S")
    mat = proj.matrix()
    assert np.allclose(mat, mat @ mat, atol=1e-12)
    assert np.trace(mat).real == pytest.approx(1.0, abs=1e-12)


def test_pure_state_normalizes_and_rejects_zero():
    state = PureState2Q(np.array([3.0, 0.0, 0.0, 4.0]))
    assert np.linalg.norm(state.amplitudes) == pytest.approx(1.0, abs=1e-14)
    assert abs(state.amplitudes[0]) == pytest.approx(0.6, abs=1e-14)
    with pytest.raises(ValueError):
        PureState2Q(np.zeros(4))


def test_pure_state_amplitudes_are_read_only():
    state = PureState2Q(np.array([1.0, 0, 0, 1.0]))
    with pytest.raises(ValueError):
        state.amplitudes[0] = 2.0


def test_density_matrix_validation():
    with pytest.raises(ValueError):
        DensityMatrix(np.eye(4, dtype=complex))  # trace 4
    bad = np.eye(4, dtype=complex) / 4
    bad[0, 1] = 0.1
    with pytest.raises(ValueError):
        DensityMatrix(bad)  # not Hermitian
    rho = density_from_pure(BELL_PHI_PLUS)
    assert np.trace(rho.matrix).real == pytest.approx(1.0, abs=1e-12)


def test_is_physical_tolerance_boundary():
    ok = np.diag([0.6, 0.4 + 1e-10, -1e-10, 0.0]).astype(complex)
    assert is_physical(DensityMatrix(ok))
    bad = np.diag([0.6, 0.4 + 1e-8, -1e-8, 0.0]).astype(complex)
    assert not is_physical(DensityMatrix(bad))
    with pytest.raises(ValueError):
        DensityMatrix(bad, require_physical=True)


def test_fidelity_of_depolarized_bell_state():
    # rho = 0.9 |Phi+><Phi+| + 0.1 I/4 has fidelity 0.9 + 0.1/4 = 0.925.
    rho = DensityMatrix(0.9 * density_from_pure(BELL_PHI_PLUS).matrix + 0.1 * np.eye(4) / 4)
    assert fidelity(rho, BELL_PHI_PLUS) == pytest.approx(0.925, abs=1e-12)


def test_fidelity_pure_vs_pure_is_overlap_squared():
    other = PureState2Q(np.array([1.0, 0.0, 0.0, -1.0]) / math.sqrt(2))
    assert fidelity(other, BELL_PHI_PLUS) == pytest.approx(0.0, abs=1e-12)
    assert fidelity(BELL_PHI_PLUS, BELL_PHI_PLUS) == pytest.approx(1.0, abs=1e-12)


@given(
    eta=st.floats(min_value=0.0, max_value=5.0, allow_nan=False),
    delta=st.floats(min_value=-math.pi, max_value=math.pi, allow_nan=False),
)
@settings(max_examples=60, deadline=None)
def test_unbalanced_state_fidelity_closed_form(eta, delta):
    # F(psi(eta, delta), Phi+) = (1 + 2 eta cos delta + eta^2) / (2 (1 + eta^2))
    amps = np.array([1.0, 0.0, 0.0, eta * np.exp(1j * delta)])
    state = PureState2Q(amps)
    expected = (1.0 + 2.0 * eta * math.cos(delta) + eta**2) / (2.0 * (1.0 + eta**2))
    assert fidelity(state, BELL_PHI_PLUS) == pytest.approx(expected, abs=1e-12)


@given(data=st.data())
@settings(max_examples=60, deadline=None)
def test_born_probability_bounds_and_phase_invariance(data):
    raw = data.draw(
        st.lists(st.floats(min_value=-1, max_value=1, allow_nan=False), min_size=8, max_size=8)
    )
    vec = np.array(raw[:4]) + 1j * np.array(raw[4:])
    if np.linalg.norm(vec) < 1e-6:
        vec = vec + np.array([1.0, 0, 0, 0])
    state = PureState2Q(vec)
    phase = data.draw(st.floats(min_value=-math.pi, max_value=math.pi, allow_nan=False))
    rotated = PureState2Q(vec * np.exp(1j * phase))
    proj = polarization_projector(
        data.draw(st.floats(min_value=-math.pi, max_value=math.pi, allow_nan=False)),
        data.draw(st.floats(min_value=-math.pi, max_value=math.pi, allow_nan=False)),
    )
    p = born_probability(state, proj)
    assert 0.0 <= p <= 1.0 + 1e-12
    assert born_probability(rotated, proj) == pytest.approx(p, abs=1e-12)


def test_projector_label_round_trip():
    assert "pol" in polarization_projector(0.1, 0.2).label
    assert "tb" in timebin_projector("S", 0.5).label


def test_density_eigenvalues_sorted_real():
    rho = density_from_pure(BELL_PHI_PLUS)
    ev = rho.eigenvalues()
    assert ev.shape == (4,)
    assert ev[-1] == pytest.approx(1.0, abs=1e-12)
    assert np.all(ev[:-1] < 1e-12)


@pytest.mark.parametrize("theta", [0.0, math.pi / 8, math.pi / 4])
def test_parallel_analyzers_give_half_at_pinned_angles(theta):
    p = born_probability(BELL_PHI_PLUS, polarization_projector(theta, theta))
    assert p == pytest.approx(0.5, abs=1e-12)


def test_self_fidelity_of_random_pure_states_is_one():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        vec = rng.normal(size=4) + 1j * rng.normal(size=4)
        psi = PureState2Q(vec)
        assert fidelity(density_from_pure(psi), psi) == pytest.approx(1.0, abs=1e-12)


def test_projector_global_phase_invariance():
    rng = np.random.default_rng(11)
    vec = rng.normal(size=4) + 1j * rng.normal(size=4)
    state = PureState2Q(vec)
    base = Projector(np.array([0.5, 0.5, 0.5, 0.5]))
    p0 = born_probability(state, base)
    for phase in np.linspace(-math.pi, math.pi, 20):
        rot = Projector(base.ket * np.exp(1j * phase))
        assert born_probability(state, rot) == pytest.approx(p0, abs=1e-12)


def test_born_and_fidelity_clamp_to_unit_interval():
    # An operator with a small negative eigenvalue (legal linear-inversion
    # output) must still yield probabilities inside [0, 1].
    eps = 1e-4
    mat = np.diag([1.0 + eps, -eps, 0.0, 0.0]).astype(complex)
    rho = DensityMatrix(mat)
    assert not is_physical(rho)
    hv = Projector(np.array([0.0, 1.0, 0.0, 0.0]))
    assert born_probability(rho, hv) == 0.0
    hh = Projector(np.array([1.0, 0.0, 0.0, 0.0]))
    assert born_probability(rho, hh) == 1.0
    assert fidelity(rho, PureState2Q(np.array([0.0, 1.0, 0.0, 0.0]))) == 0.0


def test_is_physical_rejects_negative_tolerance():
    with pytest.raises(ValueError):
        is_physical(density_from_pure(BELL_PHI_PLUS), tol=-1e-9)


def test_circular_analyzers_via_retardance():
    # In the circular basis |Phi+> reads (|RL> + |LR>) / sqrt(2): same-handed
    # analyzers see nothing, opposite-handed ones see 1/2.
    p_rr = born_probability(
        BELL_PHI_PLUS,
        polarization_projector(math.pi / 4, math.pi / 4, math.pi / 2, math.pi / 2),
    )
    p_rl = born_probability(
        BELL_PHI_PLUS,
        polarization_projector(math.pi / 4, math.pi / 4, math.pi / 2, -math.pi / 2),
    )
    assert p_rr == pytest.approx(0.0, abs=1e-12)
    assert p_rl == pytest.approx(0.5, abs=1e-12)
    # Zero retardance reduces to the plain linear-polarizer projector.
    a = polarization_projector(0.3, -0.2)
    b = polarization_projector(0.3, -0.2, 0.0, 0.0)
    assert np.allclose(a.ket, b.ket)
