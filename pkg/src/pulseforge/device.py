"""Simulated transmon hardware.

A :class:`DeviceModel` is the hidden ground truth: Duffing transmons in a
rotating frame, optional exchange coupling, a single-pole distortion filter
on the drive lines, a cubic drive nonlinearity, a static stray detuning,
T1/T2 decoherence, a readout confusion matrix and a drive-scale drift
schedule. Optimizers only ever see a :class:`DeviceEnvironment`, which
exposes shot-sampled measurements and nothing else.

The rotating frame is shared by all transmons and sits at the frequency of
the last transmon (the cross-resonance target). Results of every pulse are
transformed back into each transmon's own frame, as frame-tracking hardware
does.
"""
import json
import weakref
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from functools import reduce
from itertools import product
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import gates
from .control import Depolarize, Gate, Pulse, PwcWaveform, as_schedule
from .simulate import (
    CollapseChannel,
    ValidationError,
    liouvillian,
    propagator,
    unitary_superoperator,
    unvec,
    vec,
)
from scipy.linalg import expm

DEVICE_SCHEMA = 1
LEVELS = 3
MHZ = 2 * np.pi * 1e6
NS = 1e-9


class MitigationError(RuntimeError):
    """Raised when a confusion matrix cannot be inverted."""


@dataclass(frozen=True)
class TransmonParams:
    qubit_freq: float  # rad/s
    anharmonicity: float  # rad/s, negative for transmons
    t1: float = np.inf  # s
    t2: float = np.inf  # s
    drive_scale: float = 2 * np.pi * 17.6e6  # rad/s per unit amplitude

    def __post_init__(self):
        if self.drive_scale <= 0:
            raise ValidationError("drive_scale must be positive")
        if self.anharmonicity == 0:
            raise ValidationError("anharmonicity must be nonzero")
        if self.t1 <= 0 or self.t2 <= 0:
            raise ValidationError("t1 and t2 must be positive")
        if self.t2 > 2 * self.t1 * (1 + 1e-12):
            raise ValidationError("t2 must not exceed 2*t1")


@dataclass(frozen=True)
class DistortionFilter:
    kind: str = "none"
    time_constant: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "single-pole-lowpass"):
            raise ValidationError(f"unknown distortion kind {self.kind!r}")
        if self.kind != "none" and self.time_constant <= 0:
            raise ValidationError("time_constant must be positive for a filter")

    def apply(self, envelope: np.ndarray, dt: float) -> np.ndarray:
        """Filter a PWC envelope and resample at segment midpoints."""
        if self.kind == "none":
            return envelope
        decay_half = np.exp(-0.5 * dt / self.time_constant)
        decay_full = decay_half ** 2
        out = np.empty_like(envelope)
        y = 0j
        for k, z in enumerate(envelope):
            out[k] = z + (y - z) * decay_half
            y = z + (y - z) * decay_full
        return out


def symmetric_confusion(error: float) -> np.ndarray:
    e = float(error)
    return np.array([[1 - e, e, 0.0], [e, 1 - 2 * e, e], [0.0, e, 1 - e]])


@dataclass(frozen=True, eq=False)
class DeviceModel:
    transmons: Tuple[TransmonParams, ...]
    coupling: float = 0.0
    distortion: DistortionFilter = DistortionFilter()
    nonlinear_gain: float = 0.0
    hidden_detuning: float = 0.0
    spam: Tuple[np.ndarray, ...] = None
    drift_schedule: Tuple[Tuple[int, float], ...] = ()
    levels_per_transmon: int = LEVELS
    name: str = "device"

    def __post_init__(self):
        transmons = tuple(self.transmons)
        if len(transmons) not in (1, 2):
            raise ValidationError("a device has one or two transmons")
        object.__setattr__(self, "transmons", transmons)
        if self.levels_per_transmon != LEVELS:
            raise ValidationError("only 3-level transmons are supported")
        spam = self.spam
        if spam is None:
            spam = tuple(np.eye(LEVELS) for _ in transmons)
        spam = tuple(np.asarray(c, dtype=float) for c in spam)
        if len(spam) != len(transmons):
            raise ValidationError("one confusion matrix per transmon is required")
        for c in spam:
            if c.shape != (LEVELS, LEVELS) or c.min() < 0:
                raise ValidationError("confusion matrices must be 3x3 and nonnegative")
            if not np.allclose(c.sum(axis=1), 1.0, atol=1e-12, rtol=0):
                raise ValidationError("confusion matrix rows must sum to 1")
        object.__setattr__(self, "spam", spam)
        drift = tuple((int(e), float(m)) for e, m in self.drift_schedule)
        if [e for e, _ in drift] != sorted(e for e, _ in drift):
            raise ValidationError("drift schedule must be sorted by episode")
        for _, m in drift:
            if not 0.5 < m < 1.5:
                raise ValidationError("drift multipliers must lie in (0.5, 1.5)")
        object.__setattr__(self, "drift_schedule", drift)

    @property
    def n_qubits(self) -> int:
        return len(self.transmons)

    @property
    def dim(self) -> int:
        return LEVELS ** self.n_qubits

    @property
    def channels(self) -> Tuple[str, ...]:
        return ("d0",) if self.n_qubits == 1 else ("u0",)

    def noiseless(self) -> "DeviceModel":
        """Same coherent dynamics with decoherence and readout error removed."""
        transmons = tuple(replace(t, t1=np.inf, t2=np.inf) for t in self.transmons)
        return replace(self, transmons=transmons, spam=None)

    def nominal(self) -> "DeviceModel":
        """What a model-based designer believes: no distortion or hidden terms."""
        return replace(
            self, distortion=DistortionFilter(), nonlinear_gain=0.0, hidden_detuning=0.0
        )

    def scaled_drive(self, factor: float) -> "DeviceModel":
        transmons = tuple(replace(t, drive_scale=t.drive_scale * factor) for t in self.transmons)
        return replace(self, transmons=transmons)

    def summary(self) -> str:
        lines = [f"device {self.name!r}: {self.n_qubits} transmon(s), {LEVELS} levels each"]
        for i, t in enumerate(self.transmons):
            lines.append(
                f"  q{i}: f={t.qubit_freq / MHZ:.1f} MHz  alpha={t.anharmonicity / MHZ:.1f} MHz  "
                f"T1={_fmt_time(t.t1)}  T2={_fmt_time(t.t2)}  drive={t.drive_scale / MHZ:.2f} MHz"
            )
        if self.n_qubits == 2:
            lines.append(f"  coupling J={self.coupling / MHZ:.2f} MHz")
        lines.append(
            f"  distortion={self.distortion.kind} tau={self.distortion.time_constant / NS:.2f} ns  "
            f"nonlinear_gain={self.nonlinear_gain}  hidden_detuning={self.hidden_detuning / MHZ:.3f} MHz"
        )
        for i, c in enumerate(self.spam):
            lines.append(f"  readout q{i}: P(correct)={np.round(np.diag(c), 4).tolist()}")
        if self.drift_schedule:
            mults = [m for _, m in self.drift_schedule]
            lines.append(
                f"  drift schedule: {len(mults)} entries, multipliers {min(mults):g} to {max(mults):g}"
            )
        return "\n".join(lines)


def _fmt_time(t):
    return "inf" if np.isinf(t) else f"{t * 1e6:.1f} us"


# --- persistence -------------------------------------------------------------


def device_to_dict(model: DeviceModel) -> dict:
    def t_ns(t):
        return None if np.isinf(t) else t / NS

    return {
        "device_schema": DEVICE_SCHEMA,
        "name": model.name,
        "note": "Fictional parameters for simulation only.",
        "units": {"frequency": "MHz (cyclic)", "time": "ns"},
        "transmons": [
            {
                "qubit_freq_mhz": t.qubit_freq / MHZ,
                "anharmonicity_mhz": t.anharmonicity / MHZ,
                "t1_ns": t_ns(t.t1),
                "t2_ns": t_ns(t.t2),
                "drive_scale_mhz": t.drive_scale / MHZ,
            }
            for t in model.transmons
        ],
        "coupling_mhz": model.coupling / MHZ,
        "distortion": {
            "kind": model.distortion.kind,
            "time_constant_ns": model.distortion.time_constant / NS,
        },
        "nonlinear_gain": model.nonlinear_gain,
        "hidden_detuning_mhz": model.hidden_detuning / MHZ,
        "spam": {"confusion": [c.tolist() for c in model.spam]},
        "drift_schedule": [list(x) for x in model.drift_schedule],
    }


def device_from_dict(data: dict) -> DeviceModel:
    if data.get("device_schema") != DEVICE_SCHEMA:
        raise ValidationError(f"unsupported device_schema {data.get('device_schema')!r}")

    def secs(v):
        return np.inf if v is None else float(v) * NS

    transmons = tuple(
        TransmonParams(
            qubit_freq=t["qubit_freq_mhz"] * MHZ,
            anharmonicity=t["anharmonicity_mhz"] * MHZ,
            t1=secs(t.get("t1_ns")),
            t2=secs(t.get("t2_ns")),
            drive_scale=t["drive_scale_mhz"] * MHZ,
        )
        for t in data["transmons"]
    )
    dist = data.get("distortion", {}) or {}
    spam_cfg = data.get("spam", {}) or {}
    if "confusion" in spam_cfg:
        spam = tuple(np.array(c, dtype=float) for c in spam_cfg["confusion"])
    elif "readout_error" in spam_cfg:
        errs = spam_cfg["readout_error"]
        errs = errs if isinstance(errs, list) else [errs] * len(transmons)
        spam = tuple(symmetric_confusion(e) for e in errs)
    else:
        spam = None
    return DeviceModel(
        transmons=transmons,
        coupling=data.get("coupling_mhz", 0.0) * MHZ,
        distortion=DistortionFilter(
            dist.get("kind", "none"), (dist.get("time_constant_ns") or 0.0) * NS
        ),
        nonlinear_gain=float(data.get("nonlinear_gain", 0.0)),
        hidden_detuning=data.get("hidden_detuning_mhz", 0.0) * MHZ,
        spam=spam,
        drift_schedule=tuple(tuple(x) for x in data.get("drift_schedule", [])),
        name=data.get("name", "device"),
    )


def load_device(path) -> DeviceModel:
    """Load a device JSON file, or a shipped preset given as ``preset:<name>``."""
    path = str(path)
    if path.startswith("preset:"):
        return load_preset(path.split(":", 1)[1])
    with open(path) as fh:
        return device_from_dict(json.load(fh))


def save_device(model: DeviceModel, path) -> None:
    Path(path).write_text(json.dumps(device_to_dict(model), indent=2) + "\n")


def preset_names() -> List[str]:
    root = resources.files("pulseforge") / "presets"
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> DeviceModel:
    root = resources.files("pulseforge") / "presets"
    target = root / f"{name}.json"
    if not target.is_file():
        raise ValidationError(f"unknown preset {name!r}; available: {preset_names()}")
    return device_from_dict(json.loads(target.read_text()))


# --- operators ---------------------------------------------------------------


def _lowering(levels=LEVELS):
    return np.diag(np.sqrt(np.arange(1, levels)), 1).astype(complex)


def _embed(op: np.ndarray, site: int, n: int) -> np.ndarray:
    mats = [np.eye(LEVELS, dtype=complex)] * n
    mats = list(mats)
    mats[site] = op
    return reduce(np.kron, mats)


def embed_qubit_unitary(u: np.ndarray, qubits: Sequence[int], n: int) -> np.ndarray:
    """Lift a unitary on computational levels to the full transmon space.

    Non-computational states are left untouched.
    """
    qubits = tuple(qubits)
    u = np.asarray(u, dtype=complex)
    if len(qubits) == 1:
        block = np.eye(LEVELS, dtype=complex)
        block[:2, :2] = u
        return _embed(block, qubits[0], n)
    if sorted(qubits) != list(range(n)):
        raise ValidationError("two-qubit gates must act on both transmons")
    if qubits == (1, 0):
        u = gates.SWAP @ u @ gates.SWAP
    full = np.eye(LEVELS ** n, dtype=complex)
    idx = computational_indices(n)
    full[np.ix_(idx, idx)] = u
    return full


def computational_indices(n: int) -> np.ndarray:
    if n == 1:
        return np.array([0, 1])
    return np.array([0, 1, 3, 4])


def qubit_block(u: np.ndarray, n: int) -> np.ndarray:
    idx = computational_indices(n)
    return u[np.ix_(idx, idx)]


_STATE_TOKENS = {
    "0": np.array([1, 0], dtype=complex),
    "1": np.array([0, 1], dtype=complex),
    "+": np.array([1, 1], dtype=complex) / np.sqrt(2),
    "-": np.array([1, -1], dtype=complex) / np.sqrt(2),
    "+i": np.array([1, 1j], dtype=complex) / np.sqrt(2),
    "-i": np.array([1, -1j], dtype=complex) / np.sqrt(2),
}


def parse_state_label(label: str) -> List[str]:
    tokens = []
    i = 0
    while i < len(label):
        if label[i] in "+-" and label[i + 1 : i + 2] == "i":
            tokens.append(label[i : i + 2])
            i += 2
        elif label[i] in _STATE_TOKENS:
            tokens.append(label[i])
            i += 1
        else:
            raise ValidationError(f"bad state label {label!r}")
    return tokens


def qubit_state(label: str, n_qubits: int) -> np.ndarray:
    """State vector on the 2**n computational space for a product-state label."""
    tokens = parse_state_label(label)
    if len(tokens) != n_qubits:
        raise ValidationError(f"state {label!r} does not describe {n_qubits} qubit(s)")
    return reduce(np.kron, [_STATE_TOKENS[t] for t in tokens])


def transmon_state(label: str, n_qubits: int) -> np.ndarray:
    psi = np.zeros(LEVELS ** n_qubits, dtype=complex)
    psi[computational_indices(n_qubits)] = qubit_state(label, n_qubits)
    return psi


_BASIS_CHANGE = {
    "Z": gates.I2,
    "X": gates.H,
    "Y": gates.H @ gates.S.conj().T,
}


def parse_setting(setting: str, n_qubits: int) -> str:
    setting = setting.upper()
    if len(setting) != n_qubits or any(s not in _BASIS_CHANGE for s in setting):
        raise ValidationError(f"bad measurement setting {setting!r}")
    return setting


# --- simulation --------------------------------------------------------------


class _Process:
    """A unitary or a superoperator on the full transmon space."""

    __slots__ = ("unitary", "superop")

    def __init__(self, unitary=None, superop=None):
        self.unitary = unitary
        self.superop = superop

    def as_superop(self):
        if self.superop is None:
            return unitary_superoperator(self.unitary)
        return self.superop

    def then(self, other: "_Process") -> "_Process":
        """Apply ``self`` first, then ``other``."""
        if self.unitary is not None and other.unitary is not None:
            return _Process(unitary=other.unitary @ self.unitary)
        return _Process(superop=other.as_superop() @ self.as_superop())

    def apply(self, rho):
        if self.unitary is not None:
            return self.unitary @ rho @ self.unitary.conj().T
        return unvec(self.superop @ vec(rho))


class _Simulator:
    """Operators and propagator caches for one immutable model."""

    def __init__(self, model: DeviceModel, cache_size: Optional[int] = None):
        self.model = model
        n = model.n_qubits
        self.n = n
        self.dim = model.dim
        a = _lowering()
        self.lower = [_embed(a, j, n) for j in range(n)]
        self.number = [lo.conj().T @ lo for lo in self.lower]
        self.xop = [lo + lo.conj().T for lo in self.lower]
        self.yop = [1j * (lo.conj().T - lo) for lo in self.lower]
        frame = model.transmons[-1].qubit_freq
        self.detunings = [t.qubit_freq - frame for t in model.transmons]
        eye = np.eye(self.dim)
        h = np.zeros((self.dim, self.dim), dtype=complex)
        for j, t in enumerate(model.transmons):
            nj = self.number[j]
            h += (self.detunings[j] + model.hidden_detuning) * nj
            h += 0.5 * t.anharmonicity * nj @ (nj - eye)
        if n == 2:
            h += model.coupling * (
                self.lower[0].conj().T @ self.lower[1] + self.lower[0] @ self.lower[1].conj().T
            )
        self.h_static = h
        self.frame_freqs = self._dressed_frequencies(h - model.hidden_detuning * sum(self.number))
        self.collapse = []
        for j, t in enumerate(model.transmons):
            g1 = 0.0 if np.isinf(t.t1) else 1.0 / t.t1
            gphi = (0.0 if np.isinf(t.t2) else 1.0 / t.t2) - 0.5 * g1
            gphi = max(gphi, 0.0)
            if g1 > 0:
                self.collapse.append(CollapseChannel(self.lower[j], g1))
            if gphi > 0:
                self.collapse.append(CollapseChannel(self.number[j], 2 * gphi))
        self.noiseless = not self.collapse
        self.confusion = reduce(np.kron, model.spam)
        self._confusion_inv = None
        self._bases = {}
        self._cache = OrderedDict()
        self._pulses = OrderedDict()
        self._cache_size = cache_size or (20000 if n == 1 else 400)

    def _dressed_frequencies(self, h_known):
        """Qubit frequencies in the shared frame as a calibration would find them.

        With coupling these include the dispersive shifts; the stray
        hidden detuning is unknown to the operator and left out.
        """
        if self.n == 1:
            return [0.0]
        evals, evecs = np.linalg.eigh(h_known)
        def energy(index):
            return evals[np.argmax(np.abs(evecs[index]) ** 2)]
        e00 = energy(0)
        return [energy(LEVELS) - e00, energy(1) - e00]

    # Hamiltonians

    def control_hamiltonians(self, waveform: PwcWaveform):
        model = self.model
        if set(waveform.channels) != set(model.channels):
            raise ValidationError(
                f"waveform channels {sorted(waveform.channels)} do not match device "
                f"channels {list(model.channels)}"
            )
        dt = waveform.segment_duration
        h = np.repeat(self.h_static[None], waveform.n_segments, axis=0)
        for chan in waveform.channels:
            site = int(chan[1:])
            scale = model.transmons[site].drive_scale
            z = model.distortion.apply(waveform.envelope(chan), dt)
            z = z * (1 + model.nonlinear_gain * np.abs(z) ** 2)
            h = h + scale * (
                z.real[:, None, None] * self.xop[site] + z.imag[:, None, None] * self.yop[site]
            )
        return [(hk, dt) for hk in h]

    def frame_correction(self, duration: float) -> np.ndarray:
        phases = sum(f * duration * np.diag(nj).real for f, nj in zip(self.frame_freqs, self.number))
        return np.diag(np.exp(1j * phases))

    # propagators

    def _segment(self, h, dt):
        key = (h.tobytes(), dt)
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        if self.noiseless:
            out = _Process(unitary=propagator(h, dt))
        else:
            out = _Process(superop=expm(liouvillian(h, self.collapse) * dt))
        self._cache[key] = out
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return out

    def pulse_process(self, waveform: PwcWaveform) -> _Process:
        key = (
            waveform.segment_duration,
            tuple(waveform.channels),
            waveform.amplitudes().tobytes(),
            waveform.phases().tobytes(),
        )
        hit = self._pulses.get(key)
        if hit is not None:
            self._pulses.move_to_end(key)
            return hit
        proc = self._pulse_process(waveform)
        self._pulses[key] = proc
        if len(self._pulses) > self._cache_size // 4:
            self._pulses.popitem(last=False)
        return proc

    def _pulse_process(self, waveform: PwcWaveform) -> _Process:
        proc = None
        for h, dt in self.control_hamiltonians(waveform):
            step = self._segment(h, dt)
            proc = step if proc is None else proc.then(step)
        if any(self.frame_freqs):
            proc = proc.then(_Process(unitary=self.frame_correction(waveform.duration)))
        return proc

    def element_process(self, el) -> _Process:
        if isinstance(el, Pulse):
            return self.pulse_process(el.waveform)
        if isinstance(el, Gate):
            return _Process(unitary=embed_qubit_unitary(el.unitary, el.qubits, self.n))
        if isinstance(el, Depolarize):
            return _Process(superop=self.depolarizing_superop(el))
        raise ValidationError(f"unknown schedule element {el!r}")

    def depolarizing_superop(self, el: Depolarize) -> np.ndarray:
        k = len(el.qubits)
        d2 = 4 ** k
        p = el.strength
        labels = ["".join(t) for t in product("IXYZ", repeat=k)]
        sup = (1 - p * (d2 - 1) / d2) * np.eye(self.dim ** 2, dtype=complex)
        for lab in labels:
            if set(lab) == {"I"}:
                continue
            u = embed_qubit_unitary(gates.pauli_string(lab), el.qubits, self.n)
            sup += (p / d2) * unitary_superoperator(u)
        return sup

    def process(self, schedule) -> _Process:
        proc = _Process(unitary=np.eye(self.dim, dtype=complex))
        for el in as_schedule(schedule):
            proc = proc.then(self.element_process(el))
        return proc

    def final_state(self, schedule, init: str) -> np.ndarray:
        psi = transmon_state(init, self.n)
        rho = np.outer(psi, psi.conj())
        if len(as_schedule(schedule)) == 0:
            return rho
        return self.process(schedule).apply(rho)

    @property
    def confusion_inverse(self) -> np.ndarray:
        if self._confusion_inv is None:
            self._confusion_inv = _confusion_inverse(self.confusion)
        return self._confusion_inv

    def basis_change(self, setting: str) -> np.ndarray:
        b = self._bases.get(setting)
        if b is None:
            mats = []
            for s in setting:
                m = np.eye(LEVELS, dtype=complex)
                m[:2, :2] = _BASIS_CHANGE[s]
                mats.append(m)
            b = self._bases[setting] = reduce(np.kron, mats)
        return b

    def level_probabilities(self, rho: np.ndarray, setting: str) -> np.ndarray:
        b = self.basis_change(setting)
        p = np.real(np.einsum("ij,jk,ik->i", b, rho, b.conj()))
        p = np.clip(p, 0, None)
        return p / p.sum()

    def reported_probabilities_many(self, rho, settings) -> np.ndarray:
        """Reported outcome distributions, one row per setting."""
        key = tuple(settings)
        b = self._bases.get(key)
        if b is None:
            b = self._bases[key] = np.array([self.basis_change(s) for s in settings])
        p = np.real(np.einsum("sij,jk,sik->si", b, rho, b.conj()))
        p = np.clip(p, 0, None)
        p = (p / p.sum(axis=1, keepdims=True)) @ self.confusion
        p = np.clip(p, 0, None)
        return p / p.sum(axis=1, keepdims=True)

    def reported_probabilities(self, rho, setting):
        p = self.level_probabilities(rho, setting) @ self.confusion
        p = np.clip(p, 0, None)
        return p / p.sum()


_SIMULATORS: "weakref.WeakKeyDictionary[DeviceModel, _Simulator]" = weakref.WeakKeyDictionary()


def _simulator(model: DeviceModel) -> _Simulator:
    sim = _SIMULATORS.get(model)
    if sim is None:
        sim = _Simulator(model)
        _SIMULATORS[model] = sim
    return sim


# --- public operations -------------------------------------------------------


def control_hamiltonians(waveform: PwcWaveform, model: DeviceModel):
    """Per-segment Hermitian generators of the true (perturbed) device."""
    return _simulator(model).control_hamiltonians(waveform)


def schedule_unitary(schedule, model: DeviceModel) -> np.ndarray:
    """Coherent full-space unitary of a schedule, ignoring decoherence."""
    sched = as_schedule(schedule)
    if any(isinstance(el, Depolarize) for el in sched):
        raise ValidationError("schedules with depolarizing noise have no unitary")
    return _simulator(model.noiseless()).process(sched).unitary


def schedule_superoperator(schedule, model: DeviceModel) -> np.ndarray:
    return _simulator(model).process(as_schedule(schedule)).as_superop()


def final_state(schedule, init: str, model: DeviceModel) -> np.ndarray:
    return _simulator(model).final_state(as_schedule(schedule), init)


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.default_rng(np.random.SeedSequence([int(s) for s in seed]))
    return np.random.default_rng(seed)


def derive_seed(root, *keys) -> Tuple[int, ...]:
    """Seed for a sub-task: the root seed extended by integer keys."""
    root = tuple(root) if isinstance(root, (tuple, list)) else (int(root),)
    return root + tuple(int(k) for k in keys)


def run_and_observe(
    prefix,
    init: str,
    setting: str,
    shots: int,
    seed,
    model: DeviceModel,
) -> np.ndarray:
    """Prepare ``init``, play ``prefix``, measure in ``setting``; return counts.

    Preparation is ideal; readout error is applied to the level
    probabilities before multinomial sampling. Outcomes are indexed by
    transmon level, ``3*l0 + l1`` for two transmons.
    """
    if shots < 1:
        raise ValidationError("shots must be >= 1")
    sim = _simulator(model)
    setting = parse_setting(setting, sim.n)
    rho = sim.final_state(as_schedule(prefix), init)
    p = sim.reported_probabilities(rho, setting)
    return as_rng(seed).multinomial(shots, p)


def observe_probabilities(prefix, init: str, setting: str, model: DeviceModel) -> np.ndarray:
    """Infinite-shot limit of :func:`run_and_observe` (reported frequencies)."""
    sim = _simulator(model)
    setting = parse_setting(setting, sim.n)
    rho = sim.final_state(as_schedule(prefix), init)
    return sim.reported_probabilities(rho, setting)


def mitigate_readout(counts, model: DeviceModel) -> np.ndarray:
    """Invert the readout confusion matrix on empirical frequencies.

    The mitigator uses the model's own confusion matrix, i.e. calibration is
    assumed perfect. The result is clipped to [0, 1] and renormalized.
    """
    sim = _simulator(model)
    return _mitigate(np.asarray(counts, dtype=float), sim.confusion, sim.confusion_inverse)


def _confusion_inverse(confusion: np.ndarray) -> np.ndarray:
    try:
        inv = np.linalg.inv(confusion)
    except np.linalg.LinAlgError as exc:
        raise MitigationError("confusion matrix is singular") from exc
    if not np.all(np.isfinite(inv)) or np.linalg.cond(confusion) > 1e12:
        raise MitigationError("confusion matrix is singular")
    return inv


def _mitigate(counts: np.ndarray, confusion: np.ndarray, inverse=None) -> np.ndarray:
    if counts.shape[-1] != confusion.shape[0]:
        raise ValidationError("counts do not match the outcome space")
    freqs = counts / counts.sum()
    inv = _confusion_inverse(confusion) if inverse is None else inverse
    p = np.clip(freqs @ inv, 0.0, 1.0)
    return p / p.sum()


@dataclass(frozen=True, eq=False)
class Observation:
    """Measured Pauli expectations followed by leakage populations.

    Single qubit: ``(<X>, <Y>, <Z>, leakage)``. Two qubits: the 15 Pauli
    strings of :func:`gates.two_qubit_pauli_labels` then one leakage value per
    transmon.
    """

    values: np.ndarray
    n_qubits: int

    @property
    def paulis(self) -> np.ndarray:
        return self.values[: 4 ** self.n_qubits - 1]

    @property
    def leakage(self) -> np.ndarray:
        return self.values[4 ** self.n_qubits - 1 :]

    @property
    def pauli_labels(self) -> List[str]:
        return ["X", "Y", "Z"] if self.n_qubits == 1 else gates.two_qubit_pauli_labels()


def observation_size(n_qubits: int) -> int:
    return 4 if n_qubits == 1 else 17


def _merged_bits(p_levels: np.ndarray, n: int) -> np.ndarray:
    """Fold level 2 into level 1 for every transmon; returns 2**n probabilities."""
    if n == 1:
        return np.array([p_levels[0], p_levels[1] + p_levels[2]])
    p = p_levels.reshape((LEVELS,) * n)
    for axis in range(n):
        p = np.moveaxis(p, axis, 0)
        p = np.stack([p[0], p[1] + p[2]])
        p = np.moveaxis(p, 0, axis)
    return p.reshape(-1)


def tomography(
    prefix, init: str, shots: Optional[int], seed, model: DeviceModel
) -> Observation:
    """Pauli-basis tomography after playing ``prefix`` on ``init``.

    Every setting is mitigated over the full level space, then level 2 is
    folded into level 1. Leakage is read from the all-Z setting only.
    ``shots=None`` returns the infinite-shot limit.
    """
    sim = _simulator(model)
    n = sim.n
    rho = sim.final_state(as_schedule(prefix), init)
    settings = ["X", "Y", "Z"] if n == 1 else [a + b for a in "XYZ" for b in "XYZ"]
    p = sim.reported_probabilities_many(rho, settings)
    if shots is not None:
        p = as_rng(seed).multinomial(shots, p).astype(float)
    p = np.clip((p / p.sum(axis=1, keepdims=True)) @ sim.confusion_inverse, 0.0, 1.0)
    p = p / p.sum(axis=1, keepdims=True)
    mitigated = dict(zip(settings, p))
    if n == 1:
        vals = []
        for s in settings:
            b = _merged_bits(mitigated[s], 1)
            vals.append(b[0] - b[1])
        vals.append(mitigated["Z"][2])
        return Observation(np.array(vals), 1)
    signs = np.array([1, -1])
    corr = {}
    marg0 = {a: [] for a in "XYZ"}
    marg1 = {b: [] for b in "XYZ"}
    for s in settings:
        b = _merged_bits(mitigated[s], 2).reshape(2, 2)
        corr[s] = float(signs @ b @ signs)
        marg0[s[0]].append(float(signs @ b.sum(axis=1)))
        marg1[s[1]].append(float(signs @ b.sum(axis=0)))
    vals = []
    for lab in gates.two_qubit_pauli_labels():
        if lab[0] == "I":
            vals.append(np.mean(marg1[lab[1]]))
        elif lab[1] == "I":
            vals.append(np.mean(marg0[lab[0]]))
        else:
            vals.append(corr[lab])
    pz = mitigated["ZZ"].reshape(LEVELS, LEVELS)
    vals.extend([pz[2].sum(), pz[:, 2].sum()])
    return Observation(np.array(vals), 2)


def apply_drift(model: DeviceModel, episode_index: int) -> DeviceModel:
    """Model with drive scale multiplied by the drift entry in effect."""
    if not model.drift_schedule:
        return model
    factor = 1.0
    for start, mult in model.drift_schedule:
        if episode_index >= start:
            factor = mult
        else:
            break
    if factor == 1.0:
        return model
    return model.scaled_drive(factor)


class DeviceEnvironment:
    """Measurement-only access to a device.

    This is the sole interface handed to optimizers: it plays schedules and
    returns shot-sampled tomography, and never exposes the underlying model.
    """

    __slots__ = ("_model", "_drifted", "__weakref__")

    def __init__(self, model: DeviceModel):
        self._model = model
        self._drifted = {}

    @property
    def n_qubits(self) -> int:
        return self._model.n_qubits

    @property
    def channels(self) -> Tuple[str, ...]:
        return self._model.channels

    @property
    def observation_size(self) -> int:
        return observation_size(self._model.n_qubits)

    def at_episode(self, episode_index: int) -> "DeviceEnvironment":
        """The environment as it is during ``episode_index`` (drift applied)."""
        drifted = apply_drift(self._model, episode_index)
        if drifted is self._model:
            return self
        key = drifted.transmons[0].drive_scale
        env = self._drifted.get(key)
        if env is None:
            env = DeviceEnvironment(drifted)
            self._drifted[key] = env
        return env

    def run_and_observe(self, prefix, init, setting, shots, seed):
        return run_and_observe(prefix, init, setting, shots, seed, self._model)

    def tomography(self, prefix, init, shots, seed) -> Observation:
        return tomography(prefix, init, shots, seed, self._model)


def initial_density(init: str, model: DeviceModel) -> np.ndarray:
    psi = transmon_state(init, model.n_qubits)
    return np.outer(psi, psi.conj())


def element_superoperator(element, model: DeviceModel) -> np.ndarray:
    return _simulator(model).element_process(element).as_superop()


def measure_density(rho: np.ndarray, setting: str, shots: Optional[int], seed, model: DeviceModel) -> np.ndarray:
    """Mitigated level probabilities of measuring ``rho`` in ``setting``.

    ``shots=None`` skips sampling and returns the infinite-shot limit.
    """
    sim = _simulator(model)
    setting = parse_setting(setting, sim.n)
    p = sim.reported_probabilities(rho, setting)
    if shots is not None:
        p = as_rng(seed).multinomial(shots, p).astype(float)
    return _mitigate(p, sim.confusion, sim.confusion_inverse)
