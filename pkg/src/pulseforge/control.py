"""Pulse representations and compilation.

Piecewise-constant (PWC) waveforms, the discrete action grid an agent picks
segments from, an analytic DRAG pulse, composite schedules, and the
single-qubit Clifford table built from Rx(pi/2) plus virtual Z rotations.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from . import gates
from .simulate import ValidationError

TWO_PI = 2 * np.pi
PULSE_SCHEMA = 1


def wrap_phase(phase: float) -> float:
    out = float(np.mod(phase, TWO_PI))
    # np.mod can return exactly 2*pi for tiny negative inputs
    return 0.0 if out >= TWO_PI else out


@dataclass(frozen=True)
class Segment:
    amplitude: float
    phase: float = 0.0

    def __post_init__(self):
        amp = float(self.amplitude)
        if not -1e-12 <= amp <= 1 + 1e-12:
            raise ValidationError(f"segment amplitude {amp} outside [0, 1]")
        object.__setattr__(self, "amplitude", min(max(amp, 0.0), 1.0))
        object.__setattr__(self, "phase", wrap_phase(self.phase))

    @property
    def iq(self) -> complex:
        return self.amplitude * np.exp(1j * self.phase)


@dataclass(frozen=True, eq=False)
class PwcWaveform:
    """Per-channel lists of equal-duration segments.

    Channel ids follow the device convention: ``d0`` is the resonant drive of
    a single transmon, ``u0`` the cross-resonance drive of the control transmon.
    """

    channels: Mapping[str, Tuple[Segment, ...]]
    segment_duration: float
    name: str = "pwc"

    def __post_init__(self):
        if not self.channels:
            raise ValidationError("waveform needs at least one channel")
        chans = {k: tuple(v) for k, v in self.channels.items()}
        counts = {len(v) for v in chans.values()}
        if len(counts) != 1:
            raise ValidationError("all channels must have the same segment count")
        if self.segment_duration <= 0:
            raise ValidationError("segment_duration must be positive")
        object.__setattr__(self, "channels", chans)

    @property
    def n_segments(self) -> int:
        return len(next(iter(self.channels.values())))

    @property
    def duration(self) -> float:
        return self.n_segments * self.segment_duration

    @property
    def n_parameters(self) -> int:
        return 2 * self.n_segments * len(self.channels)

    def envelope(self, channel: str) -> np.ndarray:
        """Complex I + iQ values per segment."""
        return np.array([s.iq for s in self.channels[channel]], dtype=complex)

    def amplitudes(self) -> np.ndarray:
        return np.array([[s.amplitude for s in segs] for segs in self.channels.values()])

    def phases(self) -> np.ndarray:
        return np.array([[s.phase for s in segs] for segs in self.channels.values()])

    def prefix(self, k: int) -> "PwcWaveform":
        if not 1 <= k <= self.n_segments:
            raise ValidationError(f"prefix length {k} out of range")
        return replace(self, channels={c: s[:k] for c, s in self.channels.items()})

    def window(self, start: int, stop: int) -> "PwcWaveform":
        return replace(self, channels={c: s[start:stop] for c, s in self.channels.items()})

    def shifted(self, phase: float, channels: Sequence[str] = None) -> "PwcWaveform":
        """Add ``phase`` to every segment of the selected channels."""
        chans = {}
        for c, segs in self.channels.items():
            if channels is None or c in channels:
                segs = tuple(Segment(s.amplitude, s.phase + phase) for s in segs)
            chans[c] = segs
        return replace(self, channels=chans)

    @classmethod
    def from_arrays(cls, amplitudes, phases, segment_duration, channels=("d0",), name="pwc"):
        amps = np.atleast_2d(np.asarray(amplitudes, dtype=float))
        phs = np.atleast_2d(np.asarray(phases, dtype=float))
        if amps.shape != phs.shape or amps.shape[0] != len(channels):
            raise ValidationError("amplitude/phase arrays do not match channels")
        chans = {
            c: tuple(Segment(a, p) for a, p in zip(amps[i], phs[i]))
            for i, c in enumerate(channels)
        }
        return cls(chans, segment_duration, name)

    def to_dict(self) -> dict:
        return {
            "pulse_schema": PULSE_SCHEMA,
            "name": self.name,
            "dt_ns": self.segment_duration * 1e9,
            "dt_s": self.segment_duration,
            "channels": {
                c: [{"amp": s.amplitude, "phase": s.phase} for s in segs]
                for c, segs in self.channels.items()
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PwcWaveform":
        if data.get("pulse_schema") != PULSE_SCHEMA:
            raise ValidationError(f"unsupported pulse_schema {data.get('pulse_schema')!r}")
        chans = {
            c: tuple(Segment(s["amp"], s["phase"]) for s in segs)
            for c, segs in data["channels"].items()
        }
        # dt_s is exact; dt_ns is the human-readable field and may be hand-written
        dt = float(data["dt_s"]) if "dt_s" in data else float(data["dt_ns"]) * 1e-9
        return cls(chans, dt, data.get("name", "pwc"))


# --- composite schedules -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class Pulse:
    waveform: PwcWaveform


@dataclass(frozen=True, eq=False)
class Gate:
    """An instantaneous ideal unitary on the computational levels of ``qubits``."""

    unitary: np.ndarray
    qubits: Tuple[int, ...] = (0,)
    label: str = ""

    def __post_init__(self):
        u = np.asarray(self.unitary, dtype=complex)
        if u.shape != (2 ** len(self.qubits),) * 2:
            raise ValidationError("gate matrix does not match its qubit count")
        object.__setattr__(self, "unitary", u)
        object.__setattr__(self, "qubits", tuple(self.qubits))


@dataclass(frozen=True)
class Depolarize:
    """Depolarizing error on the computational levels of ``qubits``.

    ``error`` is the error per gate, (d-1)/d times the depolarizing strength.
    """

    error: float
    qubits: Tuple[int, ...] = (0,)

    @property
    def strength(self) -> float:
        d = 2 ** len(self.qubits)
        return self.error * d / (d - 1)


Element = Union[Pulse, Gate, Depolarize]
Schedule = Tuple[Element, ...]


def as_schedule(obj) -> Schedule:
    if isinstance(obj, PwcWaveform):
        return (Pulse(obj),)
    if isinstance(obj, (Pulse, Gate, Depolarize)):
        return (obj,)
    return tuple(obj)


def repeat_schedule(obj, r: int) -> Schedule:
    return as_schedule(obj) * r


def shift_schedule(obj, phase: float, qubit: int = 0) -> Schedule:
    """Conjugate a schedule by a frame rotation: ``Rz(phase) G Rz(-phase)``.

    Pulses on the qubit's resonant drive get ``phase`` added to every segment;
    ideal gates are conjugated explicitly; depolarizing noise is invariant.
    """
    out = []
    for el in as_schedule(obj):
        if isinstance(el, Pulse):
            out.append(Pulse(el.waveform.shifted(phase, channels=(f"d{qubit}",))))
        elif isinstance(el, Gate) and qubit in el.qubits:
            rot = np.ones((1, 1), dtype=complex)
            for q in el.qubits:
                rot = np.kron(rot, gates.rz(phase) if q == qubit else gates.I2)
            out.append(Gate(rot @ el.unitary @ rot.conj().T, el.qubits, el.label))
        else:
            out.append(el)
    return tuple(out)


def schedule_duration(obj) -> float:
    return sum(el.waveform.duration for el in as_schedule(obj) if isinstance(el, Pulse))


ECHO_X = Gate(gates.X, (0,), "x-control")


def echoed_cr(waveform: PwcWaveform, k: int = None) -> Schedule:
    """Echoed cross-resonance: first half, X on control, second half, X on control.

    With ``k`` given, only the first ``k`` segments are played (the prefix an
    agent has built so far); the echo pulse appears once the second half starts.
    """
    n = waveform.n_segments
    k = n if k is None else k
    if not 1 <= k <= n:
        raise ValidationError("prefix length out of range")
    half = n // 2
    if k <= half or half == 0:
        return (Pulse(waveform.prefix(k)),)
    return (
        Pulse(waveform.prefix(half)),
        ECHO_X,
        Pulse(waveform.window(half, k)),
        ECHO_X,
    )


def cnot_from_zx(zx_schedule) -> Schedule:
    """CNOT up to global phase: ``Rz_c(pi/2) Rx_t(pi/2) ZX(-pi/2)``."""
    return as_schedule(zx_schedule) + (
        Gate(gates.rz(np.pi / 2), (0,), "rz90-control"),
        Gate(gates.rx(np.pi / 2), (1,), "rx90-target"),
    )


def reversed_cnot(cnot) -> Schedule:
    """CNOT with control and target exchanged, via Hadamards on both qubits."""
    hh = Gate(np.kron(gates.H, gates.H), (0, 1), "hh")
    return (hh,) + as_schedule(cnot) + (hh,)


def swap_from_cnot(cnot) -> Schedule:
    """SWAP as three alternating CNOTs."""
    cnot = as_schedule(cnot)
    return cnot + reversed_cnot(cnot) + cnot


def gate_schedule(waveform: PwcWaveform, target: str, k: int = None) -> Schedule:
    """Schedule that realizes ``target`` from an optimized waveform.

    Single-qubit targets play the waveform directly; two-qubit targets treat
    it as an echoed cross-resonance pulse and wrap it as needed.
    """
    if target == "rx90":
        n = waveform.n_segments if k is None else k
        return (Pulse(waveform.prefix(n)),)
    zx_part = echoed_cr(waveform, k)
    if target == "zx-90":
        return zx_part
    if k is not None and k < waveform.n_segments:
        raise ValidationError("prefixes are only defined for the ZX building block")
    if target == "cnot":
        return cnot_from_zx(zx_part)
    if target == "swap":
        return swap_from_cnot(cnot_from_zx(zx_part))
    raise ValidationError(f"unknown target {target!r}")


# --- discrete actions --------------------------------------------------------


@dataclass(frozen=True)
class ActionGrid:
    amplitude_levels: Tuple[float, ...] = tuple(np.linspace(0.0, 1.0, 8))
    phase_levels: Tuple[float, ...] = tuple(TWO_PI * np.arange(8) / 8)
    channels_per_action: int = 1

    def __post_init__(self):
        amps = tuple(float(a) for a in self.amplitude_levels)
        phs = tuple(float(p) for p in self.phase_levels)
        if not amps or not phs:
            raise ValidationError("action grid levels must be nonempty")
        if list(amps) != sorted(amps) or amps[0] < 0 or amps[-1] > 1:
            raise ValidationError("amplitude levels must be sorted within [0, 1]")
        if list(phs) != sorted(phs) or phs[0] < 0 or phs[-1] >= TWO_PI:
            raise ValidationError("phase levels must be sorted within [0, 2pi)")
        if self.channels_per_action not in (1, 2):
            raise ValidationError("channels_per_action must be 1 or 2")
        object.__setattr__(self, "amplitude_levels", amps)
        object.__setattr__(self, "phase_levels", phs)
        if self.size > 512:
            raise ValidationError(f"action grid too large ({self.size} > 512)")

    @classmethod
    def uniform(cls, n_amplitudes: int, n_phases: int, channels_per_action: int = 1):
        return cls(
            tuple(np.linspace(0.0, 1.0, n_amplitudes)),
            tuple(TWO_PI * np.arange(n_phases) / n_phases),
            channels_per_action,
        )

    @property
    def per_channel(self) -> int:
        return len(self.amplitude_levels) * len(self.phase_levels)

    @property
    def size(self) -> int:
        return self.per_channel ** self.channels_per_action

    def to_dict(self) -> dict:
        return {
            "amplitude_levels": list(self.amplitude_levels),
            "phase_levels": list(self.phase_levels),
            "channels_per_action": self.channels_per_action,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ActionGrid":
        if "n_amplitudes" in data:
            return cls.uniform(data["n_amplitudes"], data["n_phases"], data.get("channels_per_action", 1))
        return cls(tuple(data["amplitude_levels"]), tuple(data["phase_levels"]), data.get("channels_per_action", 1))


def action_to_segments(action_index: int, grid: ActionGrid) -> List[Segment]:
    """Decode an action index, row-major over (amplitude, phase) per channel."""
    if not 0 <= action_index < grid.size:
        raise ValidationError(f"action index {action_index} outside [0, {grid.size})")
    n_ph = len(grid.phase_levels)
    digits = []
    rest = int(action_index)
    for _ in range(grid.channels_per_action):
        rest, d = divmod(rest, grid.per_channel)
        digits.append(d)
    digits.reverse()
    return [Segment(grid.amplitude_levels[d // n_ph], grid.phase_levels[d % n_ph]) for d in digits]


def segments_to_action(segments: Sequence[Segment], grid: ActionGrid) -> int:
    if len(segments) != grid.channels_per_action:
        raise ValidationError("segment count does not match channels_per_action")
    n_ph = len(grid.phase_levels)
    index = 0
    for seg in segments:
        ia = int(np.argmin(np.abs(np.array(grid.amplitude_levels) - seg.amplitude)))
        ip = int(np.argmin(np.abs(np.array(grid.phase_levels) - seg.phase)))
        index = index * grid.per_channel + ia * n_ph + ip
    return index


def assemble_waveform(
    actions: Sequence[int],
    grid: ActionGrid,
    segment_duration: float,
    channels: Sequence[str] = ("d0",),
    name: str = "drl",
) -> PwcWaveform:
    if len(actions) == 0:
        raise ValidationError("need at least one action")
    if len(channels) != grid.channels_per_action:
        raise ValidationError("channel list does not match the action grid")
    per_channel = {c: [] for c in channels}
    for a in actions:
        for c, seg in zip(channels, action_to_segments(a, grid)):
            per_channel[c].append(seg)
    return PwcWaveform(per_channel, segment_duration, name)


def drag_baseline(
    duration: float, amp: float, beta: float, segments: int, channel: str = "d0"
) -> PwcWaveform:
    """Lifted-Gaussian DRAG pulse sampled at segment midpoints.

    Sigma is a quarter of the duration. The Q quadrature is ``beta`` times the
    time derivative of the I envelope, with time measured in units of sigma.
    """
    if segments < 4:
        raise ValidationError("DRAG baseline needs at least 4 segments")
    dt = duration / segments
    sigma = duration / 4
    t = (np.arange(segments) + 0.5) * dt - duration / 2
    edge = np.exp(-0.5 * (duration / 2 / sigma) ** 2)
    gauss = np.exp(-0.5 * (t / sigma) ** 2)
    i_env = amp * (gauss - edge) / (1 - edge)
    q_env = -amp * beta * (t / sigma) * gauss / (1 - edge)
    env = i_env + 1j * q_env
    if np.max(np.abs(env)) > 1 + 1e-12:
        raise ValidationError("DRAG envelope exceeds unit amplitude")
    segs = tuple(Segment(min(abs(z), 1.0), np.angle(z)) for z in env)
    return PwcWaveform({channel: segs}, dt, "drag")


# --- single-qubit Cliffords via virtual Z ------------------------------------

# Each entry lists virtual-Z angles in quarter turns, in time order, with one
# Rx(pi/2) between consecutive angles. Pre-pulse frame updates are restricted
# to {0, +1, -1} quarter turns; this yields 4 zero-pulse, 12 one-pulse and 8
# two-pulse elements, 28 Rx(pi/2) applications in total.
CLIFFORD_TABLE: Tuple[Tuple[int, ...], ...] = (
    (0,), (1,), (2,), (3,),
    (0, 0), (0, 1), (0, 2), (0, 3),
    (1, 0), (1, 1), (1, 2), (1, 3),
    (3, 0), (3, 1), (3, 2), (3, 3),
    (0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 0, 3),
    (1, 1, 0), (1, 1, 1), (1, 1, 2), (1, 1, 3),
)
N_CLIFFORDS = len(CLIFFORD_TABLE)


@dataclass(frozen=True)
class VirtualFrame:
    phases: Tuple[float, ...] = (0.0,)

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(wrap_phase(p) for p in self.phases))

    def rotated(self, angle: float, qubit: int = 0) -> "VirtualFrame":
        phases = list(self.phases)
        phases[qubit] += angle
        return VirtualFrame(tuple(phases))


@dataclass(frozen=True)
class X90Slot:
    """A physical Rx(pi/2) to be played with ``phase`` added to its segments."""

    phase: float


@dataclass(frozen=True)
class FrameUpdate:
    angle: float


def compile_clifford(index: int, frame: VirtualFrame = VirtualFrame(), qubit: int = 0):
    """Compile a Clifford into Rx(pi/2) slots and frame updates.

    Returns ``(ops, new_frame)``. A Z rotation by ``a`` is bookkeeping only: it
    advances the frame, and every later pulse on the qubit is played with its
    phase shifted by minus the accumulated frame.
    """
    if not 0 <= index < N_CLIFFORDS:
        raise ValidationError(f"Clifford index {index} outside [0, 24)")
    ops = []
    quarters = CLIFFORD_TABLE[index]
    for i, q in enumerate(quarters):
        if i > 0:
            ops.append(X90Slot(wrap_phase(-frame.phases[qubit])))
        if q:
            angle = q * np.pi / 2
            ops.append(FrameUpdate(angle))
            frame = frame.rotated(angle, qubit)
    return ops, frame


def count_x90(index: int) -> int:
    return len(CLIFFORD_TABLE[index]) - 1


def clifford_unitary(index: int) -> np.ndarray:
    """Ideal 2x2 matrix of Clifford ``index`` (defined up to global phase)."""
    u = gates.I2
    quarters = CLIFFORD_TABLE[index]
    for i, q in enumerate(quarters):
        if i > 0:
            u = gates.rx(np.pi / 2) @ u
        u = gates.rz(q * np.pi / 2) @ u
    return u


def compiled_unitary(ops, final_frame: VirtualFrame, x90: np.ndarray = None, qubit: int = 0):
    """Play compiled ops with an ideal (or given) Rx(pi/2) and undo the frame.

    ``x90`` is the unitary of the unshifted pulse; a slot with phase ``p``
    realizes ``Rz(p) x90 Rz(-p)``.
    """
    x90 = gates.rx(np.pi / 2) if x90 is None else x90
    u = gates.I2
    for op in ops:
        if isinstance(op, X90Slot):
            u = gates.rz(op.phase) @ x90 @ gates.rz(-op.phase) @ u
    return gates.rz(final_frame.phases[qubit]) @ u
