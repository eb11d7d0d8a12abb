"""Small-dimension quantum dynamics.

Propagators for piecewise-constant Hamiltonians and density-matrix Lindblad
evolution. Everything here is a pure function of its arguments.

Superoperators act on column-stacked density matrices, i.e.
``vec(A @ rho @ B) == kron(B.T, A) @ vec(rho)``.
"""
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.linalg import expm

HERMITIAN_ATOL = 1e-12


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class IntegrationError(RuntimeError):
    """Raised when Lindblad integration produces an unphysical state."""


@dataclass(frozen=True, eq=False)
class CollapseChannel:
    """A Lindblad jump operator together with its rate (1/s)."""

    operator: np.ndarray
    rate: float

    def __post_init__(self):
        if self.rate < 0:
            raise ValidationError(f"collapse rate must be >= 0, got {self.rate}")


Segment = Tuple[np.ndarray, float]


def check_hermitian(h: np.ndarray, atol: float = HERMITIAN_ATOL) -> np.ndarray:
    h = np.asarray(h, dtype=complex)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {h.shape}")
    if not np.allclose(h, h.conj().T, rtol=0.0, atol=atol):
        raise ValidationError("operator is not Hermitian")
    return h


def propagator(h: np.ndarray, dt: float) -> np.ndarray:
    """Return ``exp(-i h dt)`` using a Hermitian eigendecomposition."""
    h = check_hermitian(h)
    if dt <= 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    w, v = np.linalg.eigh(h)
    return (v * np.exp(-1j * w * dt)) @ v.conj().T


def evolve_pwc_unitary(segments: Sequence[Segment]) -> np.ndarray:
    """Time-ordered product ``U_N ... U_2 U_1``; the first segment acts first."""
    if len(segments) == 0:
        raise ValidationError("need at least one segment")
    u = None
    for h, dt in segments:
        step = propagator(h, dt)
        u = step if u is None else step @ u
    return u


def _dissipator_terms(channels: Sequence[CollapseChannel]):
    terms = []
    for ch in channels:
        if ch.rate == 0:
            continue
        op = np.asarray(ch.operator, dtype=complex)
        terms.append((ch.rate, op, op.conj().T @ op))
    return terms


def lindblad_rhs(rho: np.ndarray, h: np.ndarray, channels: Sequence[CollapseChannel]) -> np.ndarray:
    out = -1j * (h @ rho - rho @ h)
    for rate, op, opdag_op in _dissipator_terms(channels):
        out += rate * (op @ rho @ op.conj().T - 0.5 * (opdag_op @ rho + rho @ opdag_op))
    return out


def _rk4(rho, h, terms, dt, substeps):
    step = dt / substeps

    def rhs(r):
        out = -1j * (h @ r - r @ h)
        for rate, op, opdag_op in terms:
            out += rate * (op @ r @ op.conj().T - 0.5 * (opdag_op @ r + r @ opdag_op))
        return out

    for _ in range(substeps):
        k1 = rhs(rho)
        k2 = rhs(rho + 0.5 * step * k1)
        k3 = rhs(rho + 0.5 * step * k2)
        k4 = rhs(rho + step * k3)
        rho = rho + (step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return rho


def check_density_matrix(rho: np.ndarray, atol: float = 1e-10) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {rho.shape}")
    if not np.allclose(rho, rho.conj().T, rtol=0.0, atol=atol):
        raise ValidationError("density matrix is not Hermitian")
    if abs(np.trace(rho).real - 1.0) > atol:
        raise ValidationError("density matrix trace differs from 1")
    if np.linalg.eigvalsh(rho).min() < -atol:
        raise ValidationError("density matrix has negative eigenvalues")
    return rho


def evolve_lindblad(
    rho: np.ndarray,
    segments: Sequence[Segment],
    channels: Sequence[CollapseChannel] = (),
    substeps: int = 32,
) -> np.ndarray:
    """Integrate the Lindblad equation with fixed-step RK4.

    Each segment is split into ``substeps`` equal steps. The result is
    re-Hermitized and renormalized to unit trace.

    Raises:
        IntegrationError: the evolved state has an eigenvalue below -1e-6,
            which usually means ``substeps`` is too small.
    """
    if substeps < 1:
        raise ValidationError("substeps must be >= 1")
    rho = check_density_matrix(rho)
    terms = _dissipator_terms(channels)
    for h, dt in segments:
        h = check_hermitian(h)
        if h.shape != rho.shape:
            raise ValidationError("Hamiltonian and state dimensions differ")
        rho = _rk4(rho, h, terms, dt, substeps)
    rho = 0.5 * (rho + rho.conj().T)
    rho = rho / np.trace(rho).real
    if np.linalg.eigvalsh(rho).min() < -1e-6:
        raise IntegrationError("negative eigenvalue after evolution; increase substeps")
    return rho


def substep_convergence(
    rho: np.ndarray,
    segments: Sequence[Segment],
    channels: Sequence[CollapseChannel] = (),
    substeps: int = 32,
) -> float:
    """Max elementwise change when the RK4 step is halved.

    Used as a self-check on the ``substeps`` knob; values below 1e-7 mean the
    chosen step is converged.
    """
    coarse = evolve_lindblad(rho, segments, channels, substeps)
    fine = evolve_lindblad(rho, segments, channels, 2 * substeps)
    return float(np.max(np.abs(coarse - fine)))


def vec(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho).reshape(-1, order="F")


def unvec(v: np.ndarray) -> np.ndarray:
    d = int(round(np.sqrt(v.size)))
    return v.reshape(d, d, order="F")


def unitary_superoperator(u: np.ndarray) -> np.ndarray:
    return np.kron(u.conj(), u)


def liouvillian(h: np.ndarray, channels: Sequence[CollapseChannel] = ()) -> np.ndarray:
    d = h.shape[0]
    eye = np.eye(d)
    gen = -1j * (np.kron(eye, h) - np.kron(h.T, eye))
    for rate, op, opdag_op in _dissipator_terms(channels):
        gen += rate * (
            np.kron(op.conj(), op)
            - 0.5 * np.kron(eye, opdag_op)
            - 0.5 * np.kron(opdag_op.T, eye)
        )
    return gen


def lindblad_superoperator(
    segments: Sequence[Segment], channels: Sequence[CollapseChannel] = ()
) -> np.ndarray:
    """Exact propagator of the piecewise-constant Lindblad equation."""
    if len(segments) == 0:
        raise ValidationError("need at least one segment")
    out = None
    for h, dt in segments:
        step = expm(liouvillian(check_hermitian(h), channels) * dt)
        out = step if out is None else step @ out
    return out


def expectation(rho: np.ndarray, obs: np.ndarray) -> float:
    rho = np.asarray(rho)
    obs = check_hermitian(obs, atol=1e-10)
    if rho.shape != obs.shape:
        raise ValidationError(f"dimension mismatch: {rho.shape} vs {obs.shape}")
    return float(np.trace(rho @ obs).real)
