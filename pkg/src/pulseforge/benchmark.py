"""Gate benchmarking: RB, interleaved RB, decay fitting and repetition tests.

Single-qubit RB compiles every Clifford into physical Rx(pi/2) pulses with
virtual Z frame updates. Two-qubit RB draws from the 11520-element Clifford
group, decomposed into ideal single-qubit layers and CZ entanglers, each CZ
realized with the device CNOT. Survival is the mitigated probability of
returning to the all-zero state.
"""
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares, minimize
from sklearn.base import BaseEstimator

from . import gates
from .control import (
    N_CLIFFORDS,
    FrameUpdate,
    Gate,
    PwcWaveform,
    VirtualFrame,
    X90Slot,
    as_schedule,
    clifford_unitary,
    cnot_from_zx,
    compile_clifford,
    drag_baseline,
    echoed_cr,
    repeat_schedule,
    shift_schedule,
    swap_from_cnot,
)
from .device import (
    DeviceModel,
    as_rng,
    derive_seed,
    element_superoperator,
    initial_density,
    measure_density,
    qubit_block,
    schedule_unitary,
    tomography,
)
from .reward import gate_infidelity, state_fidelity, target_state
from .simulate import ValidationError, unvec, vec

BENCH_SCHEMA = 1
IRB_LABEL = "standard-IRB estimate"


class FitError(RuntimeError):
    """Raised when a decay fit does not converge."""


# --- configuration and fitting -----------------------------------------------


@dataclass(frozen=True)
class RbConfig:
    # 19 log-spaced points collapse to 18 distinct integers after rounding
    sequence_lengths: Tuple[int, ...] = tuple(
        int(x) for x in np.unique(np.round(np.geomspace(1, 2280, 19)))
    )
    randomizations_per_length: int = 20
    shots: Optional[int] = 1024
    seed: int = 0

    def __post_init__(self):
        lengths = tuple(int(m) for m in self.sequence_lengths)
        object.__setattr__(self, "sequence_lengths", lengths)
        if not lengths or any(m < 1 for m in lengths) or list(lengths) != sorted(set(lengths)):
            raise ValidationError("sequence lengths must be positive and strictly ascending")
        if self.randomizations_per_length < 1:
            raise ValidationError("need at least one randomization per length")
        if self.shots is not None and self.shots < 1:
            raise ValidationError("shots must be positive")

    def to_dict(self) -> dict:
        return {
            "sequence_lengths": list(self.sequence_lengths),
            "randomizations_per_length": self.randomizations_per_length,
            "shots": self.shots,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data) -> "RbConfig":
        return cls(**dict(data))


@dataclass(frozen=True)
class DecayFit:
    """``F(m) = A alpha^m + B`` with one-sigma standard errors."""

    A: float
    alpha: float
    B: float
    fit_stage: str = "unconstrained"
    residual: float = 0.0
    alpha_stderr: float = float("nan")
    A_stderr: float = float("nan")
    B_stderr: float = float("nan")

    def predict(self, m) -> np.ndarray:
        return self.A * self.alpha ** np.asarray(m, dtype=float) + self.B

    @property
    def epg(self) -> float:
        return epg_single(self.alpha)

    def to_dict(self) -> dict:
        return {
            "A": self.A,
            "alpha": self.alpha,
            "B": self.B,
            "fit_stage": self.fit_stage,
            "residual": self.residual,
            "alpha_stderr": self.alpha_stderr,
            "A_stderr": self.A_stderr,
            "B_stderr": self.B_stderr,
        }


def _mean_survival(lengths, survivals) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Mean survival per length and, with per-sequence data, its variance."""
    m = np.asarray(lengths, dtype=float)
    rows = [np.atleast_1d(np.asarray(s, dtype=float)) for s in survivals]
    y = np.array([r.mean() for r in rows])
    if m.shape != y.shape:
        raise ValidationError("one survival set per length is required")
    if len(np.unique(m)) < 4:
        raise ValidationError("at least 4 distinct sequence lengths are required")
    var = None
    if all(r.size > 1 for r in rows):
        var = np.array([r.var(ddof=1) / r.size for r in rows])
        if not np.any(var > 0):
            var = None
    return m, y, var


def _stderr(jac, resid, var=None):
    """Parameter standard errors of an unweighted least-squares fit.

    With the per-length variance of the mean the sandwich estimate is used,
    which accounts for survival noise that changes with m; otherwise the
    residual scatter sets a common noise level.
    """
    bread = np.linalg.pinv(jac.T @ jac)
    if var is None:
        dof = max(len(resid) - jac.shape[1], 1)
        cov = bread * float(resid @ resid) / dof
    else:
        cov = bread @ (jac.T * var) @ jac @ bread
    return np.sqrt(np.clip(np.diag(cov), 0, None))


def _solve(residual, jac, x0, lower, upper, x_scale=1.0):
    res = least_squares(
        residual, x0=x0, jac=jac, bounds=(lower, upper), method="trf", x_scale=x_scale,
        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=500,
    )
    if res.status == 0:
        raise FitError(f"decay fit did not converge; rms residual {np.sqrt(np.mean(res.fun ** 2)):.3g}")
    return res


def _rms(res) -> float:
    return float(np.sqrt(np.mean(res.fun ** 2)))


def fit_decay(lengths, survivals, peer: Optional[DecayFit] = None, d: int = 2) -> DecayFit:
    """Fit ``A alpha^m + B`` to mean survival per length.

    ``survivals`` holds, per length, either one number or the per-sequence
    values. With ``peer`` (the unconstrained fit of a dataset being
    compared), A and B are fixed at the mean of both unconstrained fits and
    only alpha is re-fitted.

    When the decay is too shallow over the measured lengths, A and alpha
    trade off freely and shot noise can drive A towards zero. If the fitted
    A is below half its ideal value ``1 - 1/d``, B is pinned at the fully
    mixed survival ``1/d`` and A, alpha are re-fitted
    (``fit_stage="fixed-asymptote"``).
    """
    m, y, var = _mean_survival(lengths, survivals)
    if np.ptp(y) <= 1e-12:
        # no decay at all; alpha is unidentifiable from the data, so report 1
        flat = DecayFit(A=0.0, alpha=1.0, B=float(np.mean(y)), alpha_stderr=0.0, A_stderr=0.0, B_stderr=0.0)
        return flat if peer is None else replace(flat, fit_stage="alpha-refit")

    res = _solve(
        lambda p: p[0] * p[1] ** m + p[2] - y,
        lambda p: np.column_stack([p[1] ** m, p[0] * m * p[1] ** (m - 1), np.ones_like(m)]),
        [0.5, 0.99, 0.5], [-0.1, 1e-9, -0.1], [1.1, 1.0, 1.1], [1.0, 0.01, 1.0],
    )
    se = _stderr(res.jac, res.fun, var)
    full = DecayFit(
        A=float(res.x[0]), alpha=float(res.x[1]), B=float(res.x[2]), fit_stage="unconstrained",
        residual=_rms(res), alpha_stderr=float(se[1]), A_stderr=float(se[0]), B_stderr=float(se[2]),
    )
    if full.A < 0.5 * (1 - 1 / d):
        b_fix = 1.0 / d
        res = _solve(
            lambda p: p[0] * p[1] ** m + b_fix - y,
            lambda p: np.column_stack([p[1] ** m, p[0] * m * p[1] ** (m - 1)]),
            [1 - b_fix, 0.99], [-0.1, 1e-9], [1.1, 1.0], [1.0, 0.01],
        )
        se = _stderr(res.jac, res.fun, var)
        full = DecayFit(
            A=float(res.x[0]), alpha=float(res.x[1]), B=b_fix, fit_stage="fixed-asymptote",
            residual=_rms(res), alpha_stderr=float(se[1]), A_stderr=float(se[0]), B_stderr=0.0,
        )
    if peer is None:
        return full
    a_fix = 0.5 * (full.A + peer.A)
    b_fix = 0.5 * (full.B + peer.B)
    res = _solve(
        lambda p: a_fix * p[0] ** m + b_fix - y,
        lambda p: (a_fix * m * p[0] ** (m - 1))[:, None],
        [full.alpha], [1e-9], [1.0],
    )
    return DecayFit(
        A=a_fix, alpha=float(res.x[0]), B=b_fix, fit_stage="alpha-refit",
        residual=_rms(res), alpha_stderr=float(_stderr(res.jac, res.fun, var)[0]),
    )


def fit_decay_pair(lengths_a, survivals_a, lengths_b, survivals_b, d: int = 2) -> Tuple[DecayFit, DecayFit]:
    """Two-stage comparison fit: unconstrained fits, then shared A, B."""
    fa = fit_decay(lengths_a, survivals_a, d=d)
    fb = fit_decay(lengths_b, survivals_b, d=d)
    return fit_decay(lengths_a, survivals_a, peer=fb, d=d), fit_decay(lengths_b, survivals_b, peer=fa, d=d)


def epc(alpha: float, d: int = 2) -> float:
    """Error per Clifford ``(d-1)(1-alpha)/d``."""
    return (d - 1) * (1 - alpha) / d


def epg_single(alpha: float) -> float:
    """Error per physical Rx(pi/2): ``(6/7)(1-alpha)/2``."""
    if not 0 < alpha <= 1:
        raise ValidationError("alpha must lie in (0, 1]")
    return 6.0 / 7.0 * (1 - alpha) / 2


class DecayFitter(BaseEstimator):
    """Estimator form of :func:`fit_decay`: ``fit(lengths, survivals)``, ``predict(m)``."""

    def __init__(self, d: int = 2):
        self.d = d

    def fit(self, X, y):
        lengths = np.asarray(X, dtype=float).ravel()
        self.fit_ = fit_decay(lengths, list(y), d=self.d)
        self.A_, self.alpha_, self.B_ = self.fit_.A, self.fit_.alpha, self.fit_.B
        self.epc_ = epc(self.alpha_, self.d)
        return self

    def predict(self, X):
        if not hasattr(self, "fit_"):
            raise ValidationError("fitter is not fitted")
        return self.fit_.predict(np.asarray(X, dtype=float).ravel())


# --- single-qubit RB ----------------------------------------------------------


@lru_cache(maxsize=1)
def _clifford_lookup():
    mats = [clifford_unitary(i) for i in range(N_CLIFFORDS)]
    return mats, _PhaseLookup(mats)


class _PhaseLookup:
    """Index of unitaries modulo global phase."""

    def __init__(self, mats):
        self.mats = mats
        self.table = {}
        for i, u in enumerate(mats):
            self.table.setdefault(self.key(u), i)

    @staticmethod
    def key(u) -> bytes:
        flat = u.ravel()
        pivot = flat[np.argmax(np.abs(flat) > 1e-6)]
        v = flat * (abs(pivot) / pivot)
        # adding 0.0 folds -0.0 into +0.0 so equal matrices hash equally
        return (np.round(v, 6) + 0.0).tobytes()

    def index(self, u) -> int:
        idx = self.table.get(self.key(u))
        if idx is None:
            overlaps = [abs(np.trace(v.conj().T @ u)) for v in self.mats]
            idx = int(np.argmax(overlaps))
        return idx


def inverse_clifford(sequence: Sequence[int]) -> int:
    """Index of the Clifford that undoes the composed sequence."""
    mats, lookup = _clifford_lookup()
    total = np.eye(2, dtype=complex)
    for c in sequence:
        total = mats[c] @ total
    return lookup.index(total.conj().T)


def _frame_index(frame: VirtualFrame, qubit: int = 0) -> int:
    return int(round(frame.phases[qubit] / (np.pi / 2))) % 4


class _SingleQubitRb:
    """Superoperator of each (Clifford, incoming frame) pair for one gate."""

    def __init__(self, x90, model: DeviceModel):
        self.model = model
        x90 = as_schedule(x90)
        slot = {
            f: element_chain(shift_schedule(x90, -f * np.pi / 2), model) for f in range(4)
        }
        eye = np.eye(model.dim ** 2, dtype=complex)
        self.table = {}
        for c in range(N_CLIFFORDS):
            for f in range(4):
                ops, frame = compile_clifford(c, VirtualFrame((f * np.pi / 2,)))
                sup = eye
                for op in ops:
                    if isinstance(op, X90Slot):
                        fi = int(round(-op.phase / (np.pi / 2))) % 4
                        sup = slot[fi] @ sup
                self.table[(c, f)] = (sup, _frame_index(frame))

    def run(self, sequence: Sequence[int]) -> np.ndarray:
        v = vec(initial_density("0", self.model))
        f = 0
        for c in sequence:
            sup, f = self.table[(c, f)]
            v = sup @ v
        return unvec(v)


def element_chain(schedule, model: DeviceModel) -> np.ndarray:
    sup = np.eye(model.dim ** 2, dtype=complex)
    for el in as_schedule(schedule):
        sup = element_superoperator(el, model) @ sup
    return sup


def rb_sequences(config: RbConfig, n_elements: int, inverse) -> List[List[List[int]]]:
    """Random Clifford sequences, each closed by its inverse."""
    out = []
    for li, m in enumerate(config.sequence_lengths):
        seqs = []
        for i in range(config.randomizations_per_length):
            rng = as_rng(derive_seed(config.seed, li, i))
            seq = [int(x) for x in rng.integers(n_elements, size=m)]
            seqs.append(seq + [inverse(seq)])
        out.append(seqs)
    return out


def rb_survival(gate_impl, config: RbConfig, model: DeviceModel) -> List[List[float]]:
    """Single-qubit RB survival per length and randomization.

    ``gate_impl`` is the physical Rx(pi/2): a waveform or any schedule (for
    example with injected noise).
    """
    if model.n_qubits != 1:
        raise ValidationError("single-qubit RB needs a single-transmon model")
    runner = _SingleQubitRb(gate_impl, model)
    seqs = rb_sequences(config, N_CLIFFORDS, inverse_clifford)
    out = []
    for li, per_length in enumerate(seqs):
        row = []
        for i, seq in enumerate(per_length):
            rho = runner.run(seq)
            p = measure_density(rho, "Z", config.shots, derive_seed(config.seed, li, i, 1), model)
            row.append(float(p[0]))
        out.append(row)
    return out


@dataclass(frozen=True, eq=False)
class RbResult:
    lengths: Tuple[int, ...]
    survivals: Tuple[Tuple[float, ...], ...]
    fit: DecayFit
    epg: float
    config: RbConfig
    label: str = "rb"

    def payload(self) -> dict:
        return {
            "bench_schema": BENCH_SCHEMA,
            "protocol": self.label,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "lengths": list(self.lengths),
            "survivals": [list(s) for s in self.survivals],
            "fit": self.fit.to_dict(),
            "epg": self.epg,
        }

    def csv_rows(self):
        return [
            (m, float(np.mean(s)), float(np.std(s))) for m, s in zip(self.lengths, self.survivals)
        ]


def run_rb(gate_impl, config: RbConfig, model: DeviceModel) -> RbResult:
    surv = rb_survival(gate_impl, config, model)
    fit = fit_decay(config.sequence_lengths, surv)
    return RbResult(config.sequence_lengths, tuple(map(tuple, surv)), fit, epg_single(fit.alpha), config)


def compare_rb(gate_a, gate_b, config: RbConfig, model: DeviceModel) -> Tuple[RbResult, RbResult]:
    """RB of two gates on identical sequences, fitted with the two-stage procedure."""
    sa = rb_survival(gate_a, config, model)
    sb = rb_survival(gate_b, config, model)
    fa, fb = fit_decay_pair(config.sequence_lengths, sa, config.sequence_lengths, sb)
    lens = config.sequence_lengths
    return (
        RbResult(lens, tuple(map(tuple, sa)), fa, epg_single(fa.alpha), config),
        RbResult(lens, tuple(map(tuple, sb)), fb, epg_single(fb.alpha), config),
    )


# --- two-qubit Clifford group ------------------------------------------------

_X90, _XM90 = gates.rx(np.pi / 2), gates.rx(-np.pi / 2)
_Y90, _YM90 = gates.ry(np.pi / 2), gates.ry(-np.pi / 2)
_S1 = [gates.I2, _X90 @ _Y90, _YM90 @ _XM90]
_S1_X = [_X90, _X90 @ _Y90 @ _X90, _YM90]
_S1_Y = [_Y90, _X90 @ _YM90 @ _XM90, _X90 @ gates.ry(np.pi)]

# A mixer is a list of ("cz",) markers and single-qubit layers (u0, u1).
_CZ = ("cz",)


def _mixers():
    mixers = [[]]
    mixers.append([_CZ, (_YM90, _Y90), _CZ, (_Y90, _YM90), _CZ, (gates.I2, _Y90)])
    for i in range(9):
        mixers.append([_CZ, (_S1[i // 3], _S1_Y[i % 3])])
    for i in range(9):
        mixers.append([_CZ, (_Y90, _XM90), _CZ, (_S1_Y[i // 3], _S1_X[i % 3])])
    return mixers


MIXERS = _mixers()
N_TWO_QUBIT_CLIFFORDS = 24 * 24 * len(MIXERS)


def split_two_qubit_index(idx: int) -> Tuple[int, int, int]:
    if not 0 <= idx < N_TWO_QUBIT_CLIFFORDS:
        raise ValidationError("two-qubit Clifford index out of range")
    return idx // 480, (idx % 480) // 20, idx % 20


def two_qubit_clifford_unitary(idx: int) -> np.ndarray:
    i0, i1, i2 = split_two_qubit_index(idx)
    u = np.kron(clifford_unitary(i0), clifford_unitary(i1))
    for op in MIXERS[i2]:
        u = (gates.CZ if op is _CZ else np.kron(op[0], op[1])) @ u
    return u


@lru_cache(maxsize=1)
def two_qubit_clifford_group():
    mats = [two_qubit_clifford_unitary(i) for i in range(N_TWO_QUBIT_CLIFFORDS)]
    return mats, _PhaseLookup(mats)


def inverse_two_qubit_clifford(sequence: Sequence[int], interleaved: Optional[np.ndarray] = None) -> int:
    mats, lookup = two_qubit_clifford_group()
    total = np.eye(4, dtype=complex)
    for c in sequence:
        total = mats[c] @ total
        if interleaved is not None:
            total = interleaved @ total
    return lookup.index(total.conj().T)


def cz_from_cnot(cnot) -> tuple:
    """CZ = (I x H) CNOT (I x H) with ideal Hadamards on the target."""
    h = Gate(gates.H, (1,), "h-target")
    return (h,) + as_schedule(cnot) + (h,)


class _TwoQubitRb:
    def __init__(self, cnot, model: DeviceModel, interleaved=None):
        self.model = model
        cz = element_chain(cz_from_cnot(cnot), model)
        layer = lambda u0, u1: element_chain(Gate(np.kron(u0, u1), (0, 1)), model)
        self.mixers = []
        for mix in MIXERS:
            sup = np.eye(model.dim ** 2, dtype=complex)
            for op in mix:
                sup = (cz if op is _CZ else layer(*op)) @ sup
            self.mixers.append(sup)
        self.interleaved = None if interleaved is None else element_chain(interleaved, model)
        from .device import embed_qubit_unitary

        c1 = [clifford_unitary(i) for i in range(N_CLIFFORDS)]
        self.starters = [[embed_qubit_unitary(np.kron(a, b), (0, 1), 2) for b in c1] for a in c1]

    def run(self, sequence: Sequence[int]) -> np.ndarray:
        rho = initial_density("00", self.model)
        last = len(sequence) - 1
        for k, c in enumerate(sequence):
            i0, i1, i2 = split_two_qubit_index(c)
            u = self.starters[i0][i1]
            rho = u @ rho @ u.conj().T
            if i2:
                rho = unvec(self.mixers[i2] @ vec(rho))
            if self.interleaved is not None and k < last:
                rho = unvec(self.interleaved @ vec(rho))
        return rho


def two_qubit_rb_survival(cnot, config: RbConfig, model: DeviceModel, interleaved=None):
    """Two-qubit (interleaved) RB survival of |00>.

    ``cnot`` is the schedule the Clifford entanglers are built from;
    ``interleaved`` is an optional schedule inserted after every random Clifford.
    """
    if model.n_qubits != 2:
        raise ValidationError("two-qubit RB needs a two-transmon model")
    runner = _TwoQubitRb(cnot, model, interleaved)
    target = None
    if interleaved is not None:
        target = qubit_block(schedule_unitary(_ideal(interleaved), model), 2)
    seqs = rb_sequences(
        config, N_TWO_QUBIT_CLIFFORDS, lambda s: inverse_two_qubit_clifford(s, target)
    )
    out = []
    for li, per_length in enumerate(seqs):
        row = []
        for i, seq in enumerate(per_length):
            rho = runner.run(seq)
            p = measure_density(rho, "ZZ", config.shots, derive_seed(config.seed, li, i, 1), model)
            row.append(float(p[0]))
        out.append(row)
    return out


def _ideal(schedule):
    """Drop injected noise so the intended unitary can be read off."""
    from .control import Depolarize

    return tuple(el for el in as_schedule(schedule) if not isinstance(el, Depolarize))


@dataclass(frozen=True, eq=False)
class IrbResult:
    reference: RbResult
    interleaved: RbResult
    epg: float
    unphysical: bool
    label: str = IRB_LABEL

    def payload(self) -> dict:
        return {
            "bench_schema": BENCH_SCHEMA,
            "protocol": "irb",
            "seed": self.reference.config.seed,
            "config": self.reference.config.to_dict(),
            "reference": self.reference.payload(),
            "interleaved": self.interleaved.payload(),
            "epg": self.epg,
            "epg_label": self.label,
            "unphysical_ordering": self.unphysical,
        }

    def csv_rows(self):
        ref = self.reference.csv_rows()
        inter = self.interleaved.csv_rows()
        return [r + i[1:] for r, i in zip(ref, inter)]


def irb(clifford_cnot, interleaved_gate, config: RbConfig, model: DeviceModel) -> IrbResult:
    """Reference and interleaved two-qubit RB on the same random sequences.

    The gate EPG is the standard interleaved-RB estimate
    ``(d-1)/d (1 - alpha_int/alpha_ref)`` with d = 4.
    """
    ref = two_qubit_rb_survival(clifford_cnot, config, model)
    inter = two_qubit_rb_survival(clifford_cnot, config, model, interleaved=interleaved_gate)
    lens = config.sequence_lengths
    f_ref = fit_decay(lens, ref, d=4)
    f_int = fit_decay(lens, inter, d=4)
    epg = 0.75 * (1 - f_int.alpha / f_ref.alpha)
    tol = 2 * np.hypot(np.nan_to_num(f_ref.alpha_stderr), np.nan_to_num(f_int.alpha_stderr))
    unphysical = f_int.alpha > f_ref.alpha + tol
    if unphysical:
        warnings.warn("interleaved decay is slower than the reference decay", RuntimeWarning)
    ref_res = RbResult(lens, tuple(map(tuple, ref)), f_ref, epc(f_ref.alpha, 4), config, "rb-2q")
    int_res = RbResult(lens, tuple(map(tuple, inter)), f_int, epc(f_int.alpha, 4), config, "irb-2q")
    return IrbResult(ref_res, int_res, float(epg), bool(unphysical))


# --- repetition experiments ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class RepetitionResult:
    n_values: Tuple[int, ...]
    mean_infidelity: Tuple[float, ...]
    std_infidelity: Tuple[float, ...]
    slope: float
    intercept: float
    initial_states: Tuple[str, ...]
    seed: int = 0

    def payload(self) -> dict:
        return {
            "bench_schema": BENCH_SCHEMA,
            "protocol": "repetition",
            "seed": self.seed,
            "initial_states": list(self.initial_states),
            "n_values": list(self.n_values),
            "mean_infidelity": list(self.mean_infidelity),
            "std_infidelity": list(self.std_infidelity),
            "epg": self.slope,
            "intercept": self.intercept,
        }

    def csv_rows(self):
        return list(zip(self.n_values, self.mean_infidelity, self.std_infidelity))


def repetition_error(
    gate,
    initial_states: Sequence[str],
    n_values: Sequence[int],
    model: DeviceModel,
    target: str,
    runs_per_state: int = 5,
    shots: Optional[int] = 1024,
    seed=0,
) -> RepetitionResult:
    """Infidelity after N gate applications; the OLS slope is the error per gate."""
    n_values = tuple(int(n) for n in n_values)
    if not n_values or list(n_values) != sorted(set(n_values)) or n_values[0] < 1:
        raise ValidationError("n_values must be positive and strictly ascending")
    if len(initial_states) != 2:
        raise ValidationError("repetition experiments use two initial states")
    gate = as_schedule(gate)
    means, stds = [], []
    for ni, n in enumerate(n_values):
        sched = repeat_schedule(gate, n)
        vals = []
        for si, init in enumerate(initial_states):
            psi = target_state(target, init, n)
            for run in range(runs_per_state):
                obs = tomography(sched, init, shots, derive_seed(seed, ni, si, run), model)
                vals.append(1 - state_fidelity(obs, psi, project=False))
        means.append(float(np.mean(vals)))
        stds.append(float(np.std(vals)))
    slope, intercept = np.polyfit(np.array(n_values, float), np.array(means), 1)
    return RepetitionResult(
        n_values, tuple(means), tuple(stds), float(slope), float(intercept),
        tuple(initial_states), seed if isinstance(seed, int) else 0,
    )


# --- composite two-qubit gates and default calibrations -----------------------


def build_cnot(zx_gate) -> tuple:
    """CNOT from an echoed cross-resonance waveform (or any ZX(-pi/2) schedule)."""
    if isinstance(zx_gate, CrCalibration):
        zx_gate = zx_gate.schedule()
    elif isinstance(zx_gate, PwcWaveform):
        zx_gate = echoed_cr(zx_gate)
    return cnot_from_zx(zx_gate)


def build_swap(zx_gate) -> tuple:
    return swap_from_cnot(build_cnot(zx_gate))


def ideal_zx() -> Gate:
    return Gate(gates.zx(-np.pi / 2), (0, 1), "zx-90")


DRAG_DURATION = 36e-9
DRAG_SEGMENTS = 18


def calibrate_drag(model: DeviceModel, duration=DRAG_DURATION, segments=DRAG_SEGMENTS) -> PwcWaveform:
    """Default Rx(pi/2): DRAG amplitude and beta tuned on the nominal model.

    The nominal model omits distortion, nonlinearity and hidden detuning,
    i.e. it is what a model-based calibration would believe.
    """
    ideal = model.nominal().noiseless()

    def cost(p):
        if not 0 < p[0] <= 1:
            return 1.0 + abs(p[0])
        try:
            w = drag_baseline(duration, p[0], p[1], segments)
        except ValidationError:
            return 1.0
        return gate_infidelity(qubit_block(schedule_unitary(w, ideal), 1), gates.TARGETS["rx90"])

    guess = np.pi / (4 * model.transmons[0].drive_scale * duration * 0.4)
    res = minimize(cost, [min(guess, 0.9), 0.0], method="Nelder-Mead",
                   options={"xatol": 1e-9, "fatol": 1e-13, "maxiter": 2000})
    w = drag_baseline(duration, res.x[0], res.x[1], segments)
    return PwcWaveform(w.channels, w.segment_duration, "drag")


CR_SEGMENTS = 10
CR_SEGMENT_DURATION = 30e-9


def cr_waveform(amplitude, phase, ramp=1.0, segments=CR_SEGMENTS, dt=CR_SEGMENT_DURATION):
    """Flat-top echoed CR drive; the second half carries the opposite sign.

    The first and last segment of each half are scaled by ``ramp`` to soften
    the switching transients.
    """
    half = segments // 2
    amps = np.full(segments, float(amplitude))
    amps[[0, half - 1, half, segments - 1]] *= ramp
    phases = np.mod(np.array([phase] * half + [phase + np.pi] * (segments - half)), 2 * np.pi)
    return PwcWaveform.from_arrays(amps, phases, dt, channels=("u0",), name="cr")


@dataclass(frozen=True, eq=False)
class CrCalibration:
    """Default ZX(-pi/2): echoed CR waveform followed by virtual-Z corrections."""

    waveform: PwcWaveform
    z_control: float
    z_target: float

    def schedule(self) -> tuple:
        frame = Gate(np.kron(gates.rz(self.z_control), gates.rz(self.z_target)), (0, 1), "virtual-z")
        return echoed_cr(self.waveform) + (frame,)


def calibrate_cr(model: DeviceModel, segments=CR_SEGMENTS, dt=CR_SEGMENT_DURATION) -> CrCalibration:
    """Tune amplitude, phase, edge ramp and frame corrections on the nominal model."""
    ideal = model.nominal().noiseless()
    target = gates.TARGETS["zx-90"]

    def make(p):
        return CrCalibration(cr_waveform(p[0], p[1], p[2], segments, dt), p[3], p[4])

    def cost(p):
        if not (0 < p[0] <= 1 and 0 <= p[2] <= 1):
            return 2.0
        u = schedule_unitary(make(p).schedule(), ideal)
        return gate_infidelity(qubit_block(u, 2), target)

    starts = [
        (a, ph, r, 0.0, 0.0)
        for a in (0.2, 0.4, 0.6, 0.8, 1.0)
        for ph in (0.0, np.pi)
        for r in (0.5, 1.0)
    ]
    best = min(starts, key=cost)
    res = minimize(cost, best, method="Nelder-Mead",
                   options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 4000})
    return make(res.x)
