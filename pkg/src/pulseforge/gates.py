"""Standard qubit operators and target gates."""
from functools import lru_cache

import numpy as np

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
H = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
S = np.diag([1, 1j]).astype(complex)

PAULIS = {"I": I2, "X": X, "Y": Y, "Z": Z}


def rx(theta):
    return np.cos(theta / 2) * I2 - 1j * np.sin(theta / 2) * X


def ry(theta):
    return np.cos(theta / 2) * I2 - 1j * np.sin(theta / 2) * Y


def rz(theta):
    return np.diag([np.exp(-0.5j * theta), np.exp(0.5j * theta)])


def rphi(theta, phi):
    """Rotation by ``theta`` about the equatorial axis at azimuth ``phi``."""
    axis = np.cos(phi) * X + np.sin(phi) * Y
    return np.cos(theta / 2) * I2 - 1j * np.sin(theta / 2) * axis


def zx(theta):
    """``exp(-i theta/2 Z(x)X)`` with the control as the first tensor factor."""
    zx_op = np.kron(Z, X)
    return np.cos(theta / 2) * np.eye(4) - 1j * np.sin(theta / 2) * zx_op


CNOT = np.array(
    [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex
)
CZ = np.diag([1, 1, 1, -1]).astype(complex)
SWAP = np.array(
    [[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 1]], dtype=complex
)

TARGETS = {
    "rx90": rx(np.pi / 2),
    "zx-90": zx(-np.pi / 2),
    "cnot": CNOT,
    "swap": SWAP,
}


@lru_cache(maxsize=None)
def _pauli_string(label: str) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for ch in label:
        out = np.kron(out, PAULIS[ch])
    out.setflags(write=False)
    return out


def pauli_string(label: str) -> np.ndarray:
    return _pauli_string(label)


@lru_cache(maxsize=None)
def pauli_stack(n_qubits: int) -> np.ndarray:
    """Non-identity Pauli strings stacked in observation order."""
    labels = ["X", "Y", "Z"] if n_qubits == 1 else two_qubit_pauli_labels()
    out = np.array([_pauli_string(l) for l in labels])
    out.setflags(write=False)
    return out


def two_qubit_pauli_labels():
    """The 15 non-identity two-qubit Pauli strings in lexicographic order."""
    return [a + b for a in "IXYZ" for b in "IXYZ" if a + b != "II"]
