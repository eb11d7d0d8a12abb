import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pulseforge import gates
from pulseforge.simulate import (
    CollapseChannel,
    IntegrationError,
    ValidationError,
    evolve_lindblad,
    evolve_pwc_unitary,
    expectation,
    lindblad_superoperator,
    propagator,
    substep_convergence,
    unvec,
    vec,
)

DT = 1e-8


def same_up_to_phase(a, b, tol=1e-10):
    k = np.argmax(np.abs(b))
    phase = a.flat[k] / b.flat[k]
    return np.allclose(a, phase * b, atol=tol) and abs(abs(phase) - 1) < tol


def hermitian(dim):
    parts = arrays(float, (2, dim, dim), elements=st.floats(-5, 5))
    return parts.map(lambda p: (p[0] + 1j * p[1] + (p[0] + 1j * p[1]).conj().T) / 2)


def test_zero_generator_is_identity():
    assert np.allclose(propagator(np.zeros((3, 3)), 4.2), np.eye(3))


def test_half_pi_x_rotation_has_trace_root_two():
    u = propagator((np.pi / 2) * gates.X / (2 * DT), DT)
    assert np.allclose(u, gates.rx(np.pi / 2), atol=1e-12)
    assert abs(abs(np.trace(u)) - np.sqrt(2)) < 1e-12


def test_diagonal_generator():
    w = 3.7e8
    u = propagator(np.diag([0.0, w]), DT)
    assert np.allclose(u, np.diag([1, np.exp(-1j * w * DT)]), atol=1e-12)


def test_propagator_rejects_non_hermitian():
    with pytest.raises(ValidationError):
        propagator(np.array([[0, 1], [0, 0]]), DT)


def test_propagator_rejects_nonpositive_dt():
    with pytest.raises(ValidationError):
        propagator(np.eye(2), 0.0)


@given(hermitian(3), st.floats(1e-3, 2.0))
def test_propagator_is_unitary(h, dt):
    u = propagator(h, dt)
    assert np.max(np.abs(u.conj().T @ u - np.eye(3))) < 1e-10


def test_single_segment_matches_propagator():
    h = np.array([[0.3, 0.1j], [-0.1j, -0.2]]) * 1e8
    assert np.allclose(evolve_pwc_unitary([(h, DT)]), propagator(h, DT))


def test_commuting_segments_add_generators():
    h1, h2 = np.diag([0.0, 1.0e8]), np.diag([0.5e8, -2.0e8])
    total = 3 * DT
    expected = propagator((h1 * DT + h2 * 2 * DT) / total, total)
    assert np.allclose(evolve_pwc_unitary([(h1, DT), (h2, 2 * DT)]), expected, atol=1e-12)


def test_eight_sixteenth_turns_make_a_quarter_turn():
    h = (np.pi / 16) * gates.X / (2 * DT)
    assert np.allclose(evolve_pwc_unitary([(h, DT)] * 8), gates.rx(np.pi / 2), atol=1e-12)


def test_first_segment_acts_first():
    hx = (np.pi / 2) * gates.X / (2 * DT)
    hz = (np.pi / 2) * gates.Z / (2 * DT)
    u = evolve_pwc_unitary([(hx, DT), (hz, DT)])
    assert np.allclose(u, gates.rz(np.pi / 2) @ gates.rx(np.pi / 2), atol=1e-12)


def test_empty_segment_list_rejected():
    with pytest.raises(ValidationError):
        evolve_pwc_unitary([])


def test_lindblad_unitary_limit_flips_ground_state():
    rho = np.diag([1.0, 0.0]).astype(complex)
    h = np.pi * gates.X / (2 * DT)
    out = evolve_lindblad(rho, [(h, DT)], substeps=200)
    assert np.allclose(out, np.diag([0.0, 1.0]), atol=1e-8)


@given(hermitian(2), st.integers(1, 3))
def test_lindblad_without_rates_matches_unitary(h, n):
    h = h * 1e8
    segs = [(h, DT)] * n
    psi = np.array([0.6, 0.8j])
    rho = np.outer(psi, psi.conj())
    u = evolve_pwc_unitary(segs)
    out = evolve_lindblad(rho, segs, [CollapseChannel(np.eye(2), 0.0)], substeps=400)
    assert np.allclose(out, u @ rho @ u.conj().T, atol=1e-8)


def test_pure_relaxation_is_exponential():
    gamma, t = 2.0e5, 4e-6
    lower = np.array([[0, 1], [0, 0]], dtype=complex)
    rho = np.diag([0.0, 1.0]).astype(complex)
    out = evolve_lindblad(rho, [(np.zeros((2, 2)), t)], [CollapseChannel(lower, gamma)], 64)
    assert abs(out[1, 1].real - np.exp(-gamma * t)) < 1e-6


def test_identity_segments_leave_state_alone():
    rho = np.array([[0.7, 0.2], [0.2, 0.3]], dtype=complex)
    out = evolve_lindblad(rho, [(np.zeros((2, 2)), DT)] * 3)
    assert np.allclose(out, rho, atol=1e-14)


def test_coarse_steps_raise_integration_error():
    lower = np.array([[0, 1], [0, 0]], dtype=complex)
    rho = np.diag([0.0, 1.0]).astype(complex)
    with pytest.raises(IntegrationError):
        evolve_lindblad(rho, [(np.zeros((2, 2)), 1.0)], [CollapseChannel(lower, 50.0)], 1)


def test_negative_rate_rejected():
    with pytest.raises(ValidationError):
        CollapseChannel(np.eye(2), -1.0)


def test_exact_superoperator_agrees_with_rk4():
    lower = np.array([[0, 1], [0, 0]], dtype=complex)
    channels = [CollapseChannel(lower, 1e5), CollapseChannel(gates.Z, 3e4)]
    h = 2e8 * gates.X + 0.5e8 * gates.Z
    rho = np.diag([1.0, 0.0]).astype(complex)
    exact = unvec(lindblad_superoperator([(h, DT)], channels) @ vec(rho))
    rk4 = evolve_lindblad(rho, [(h, DT)], channels, 256)
    assert np.max(np.abs(rk4 - exact)) < 1e-8
    assert substep_convergence(rho, [(h, DT)], channels, 256) < 1e-7


def test_expectation_examples():
    ground = np.diag([1.0, 0.0])
    plus = np.full((2, 2), 0.5)
    assert expectation(ground, gates.Z) == 1.0
    assert expectation(np.eye(2) / 2, gates.Y) == 0.0
    assert abs(expectation(plus, gates.X) - 1.0) < 1e-12


def test_expectation_dimension_mismatch():
    with pytest.raises(ValidationError):
        expectation(np.eye(3) / 3, gates.Z)


@given(hermitian(3))
def test_evolved_states_stay_physical(h):
    h = h * 1e7
    lower = np.diag([1.0, np.sqrt(2)], 1).astype(complex)
    rho = np.diag([0.2, 0.5, 0.3]).astype(complex)
    out = evolve_lindblad(rho, [(h, DT)] * 2, [CollapseChannel(lower, 1e6)], 16)
    assert np.allclose(out, out.conj().T, atol=1e-12)
    assert abs(np.trace(out).real - 1) < 1e-10
    assert np.linalg.eigvalsh(out).min() > -1e-10
