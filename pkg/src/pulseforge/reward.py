"""Fidelity and reward math.

Unitary infidelity, state fidelity from tomography, the leakage rescale, and
the repetition-weighted episodic reward an optimizer maximizes.
"""
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import gates
from .control import PwcWaveform, gate_schedule, repeat_schedule
from .device import (
    DeviceEnvironment,
    DeviceModel,
    Observation,
    derive_seed,
    qubit_block,
    qubit_state,
    schedule_unitary,
)
from .simulate import ValidationError

DEFAULT_STATES = {
    "rx90": ("0", "+", "+i"),
    "zx-90": ("00", "10"),
    "cnot": ("00", "10"),
    "swap": ("+0", "+1"),
}


def gate_infidelity(u, target) -> float:
    """``1 - |Tr(U^dag V)|^2 / D^2``; blind to global phase."""
    u = np.asarray(u, dtype=complex)
    target = np.asarray(target, dtype=complex)
    if u.shape != target.shape or u.shape[0] != u.shape[1]:
        raise ValidationError("operators must be square with equal dimensions")
    d = u.shape[0]
    overlap = np.trace(u.conj().T @ target)
    return float(min(max(1.0 - abs(overlap) ** 2 / d ** 2, 0.0), 1.0))


def waveform_infidelity(waveform: PwcWaveform, model: DeviceModel, target: str = "rx90") -> float:
    """Gate infidelity of the coherent action on the computational levels.

    Decoherence and readout are ignored; leakage shows up as a loss of
    overlap because the computational block is no longer unitary.
    """
    u = schedule_unitary(gate_schedule(waveform, target), model)
    return gate_infidelity(qubit_block(u, model.n_qubits), gates.TARGETS[target])


def density_from_observation(observation: Observation, project: bool = True) -> np.ndarray:
    """Linear-inversion estimate, by default projected onto the physical states."""
    n = observation.n_qubits
    dim = 2 ** n
    rho = np.eye(dim, dtype=complex) + np.tensordot(observation.paulis, gates.pauli_stack(n), 1)
    rho = rho / dim
    if not project:
        return rho
    evals, evecs = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    evals = np.clip(evals, 0.0, None)
    if evals.sum() <= 0:
        return np.eye(dim, dtype=complex) / dim
    evals = evals / evals.sum()
    return (evecs * evals) @ evecs.conj().T


def state_fidelity(observation: Observation, target_state, project: bool = True) -> float:
    """``<psi|rho|psi>`` with rho reconstructed from Pauli expectations.

    ``project=False`` skips the eigenvalue clipping. The raw linear estimate
    is unbiased, which matters when averaging many nearly pure states; the
    clipped one can only lose weight on the target and so reads low.
    """
    psi = np.asarray(target_state, dtype=complex).ravel()
    if psi.size != 2 ** observation.n_qubits:
        raise ValidationError("target state dimension does not match the observation")
    psi = psi / np.linalg.norm(psi)
    rho = density_from_observation(observation, project)
    f = float(np.real(psi.conj() @ rho @ psi))
    return float(np.clip(f, 0.0, 1.0)) if project else f


def leakage_rescale(f_qubit: float, leakage: float) -> float:
    return f_qubit / (1 + leakage ** 2)


@dataclass(frozen=True)
class RewardSpec:
    initial_states: Tuple[str, ...] = ("0", "+", "+i")
    repetitions: Tuple[int, ...] = (1, 4, 16)
    weights: Tuple[float, ...] = (0.2, 0.3, 0.5)
    shots_final: int = 1024
    shots_intermediate: int = 256

    def __post_init__(self):
        object.__setattr__(self, "initial_states", tuple(self.initial_states))
        object.__setattr__(self, "repetitions", tuple(int(r) for r in self.repetitions))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if not self.initial_states:
            raise ValidationError("at least one initial state is required")
        if len(self.weights) != len(self.repetitions) or not self.repetitions:
            raise ValidationError("weights and repetitions must have equal nonzero length")
        if any(r < 1 for r in self.repetitions):
            raise ValidationError("repetitions must be positive")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1) > 1e-12:
            raise ValidationError("weights must be nonnegative and sum to 1")
        if self.shots_final < 1 or self.shots_intermediate < 1:
            raise ValidationError("shot counts must be positive")

    @classmethod
    def for_target(cls, target: str, **kwargs) -> "RewardSpec":
        kwargs.setdefault("initial_states", DEFAULT_STATES[target])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "initial_states": list(self.initial_states),
            "repetitions": list(self.repetitions),
            "weights": list(self.weights),
            "shots_final": self.shots_final,
            "shots_intermediate": self.shots_intermediate,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RewardSpec":
        return cls(**dict(data))


def episode_reward(fidelities: Mapping[Tuple[str, int], float], spec: RewardSpec) -> float:
    """Mean over initial states, then weighted sum over repetition counts."""
    total = 0.0
    for r, w in zip(spec.repetitions, spec.weights):
        vals = []
        for s in spec.initial_states:
            if (s, r) not in fidelities:
                raise ValidationError(f"missing fidelity for state {s!r}, repetitions {r}")
            vals.append(fidelities[(s, r)])
        total += w * float(np.mean(vals))
    return float(np.clip(total, 0.0, 1.0))


def target_state(target: str, init: str, repetitions: int) -> np.ndarray:
    n = 1 if target == "rx90" else 2
    u = np.linalg.matrix_power(gates.TARGETS[target], repetitions)
    return u @ qubit_state(init, n)


def measured_fidelity(observation: Observation, target: str, init: str, repetitions: int) -> float:
    f = state_fidelity(observation, target_state(target, init, repetitions))
    if observation.n_qubits == 1:
        f = leakage_rescale(f, float(np.clip(observation.leakage[0], 0.0, 1.0)))
    return f


def measure_reward(
    env: DeviceEnvironment,
    waveform: PwcWaveform,
    spec: RewardSpec,
    target: str,
    seed,
    shots: Optional[int] = -1,
) -> Tuple[float, Dict[Tuple[str, int], float]]:
    """Play the gate ``r`` times on each initial state and score the result.

    ``shots=-1`` uses ``spec.shots_final``; ``None`` is the infinite-shot limit.
    """
    shots = spec.shots_final if shots == -1 else shots
    gate = gate_schedule(waveform, target)
    fids = {}
    for i, init in enumerate(spec.initial_states):
        for j, r in enumerate(spec.repetitions):
            obs = env.tomography(repeat_schedule(gate, r), init, shots, derive_seed(seed, i, j))
            fids[(init, r)] = measured_fidelity(obs, target, init, r)
    return episode_reward(fids, spec), fids
