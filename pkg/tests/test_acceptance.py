"""Acceptance suite: one test per criterion, each reporting PASS or FAIL.

Each test records a one-line verdict (with its runtime and limit) that the
conftest hook repeats in the terminal summary.
"""

import itertools
import json
import time

import numpy as np
import pytest

from pulseforge import gates
from pulseforge.agent import (
    Policy,
    TrainConfig,
    Trajectory,
    discount_returns,
    policy_gradient,
    surrogate_objective,
    train,
)
from pulseforge.annealing import SaConfig, reward_cost, sa_run
from pulseforge.benchmark import (
    RbConfig,
    build_cnot,
    calibrate_drag,
    compare_rb,
    fit_decay,
    ideal_zx,
    irb,
    repetition_error,
    run_rb,
)
from pulseforge.cli import EXIT_OK, execute
from pulseforge.control import (
    N_CLIFFORDS,
    Depolarize,
    Pulse,
    clifford_unitary,
    compile_clifford,
    compiled_unitary,
    count_x90,
)
from pulseforge.device import DeviceEnvironment, load_preset
from pulseforge.reward import RewardSpec, gate_infidelity, leakage_rescale, waveform_infidelity

ODD_REPS = RewardSpec(repetitions=(1, 2, 5, 9), weights=(0.25,) * 4)
BATCHES = 150
BATCH_SIZE = 25
COMPARE_LENGTHS = (1, 3, 6, 10, 16, 25, 40, 63, 100, 160, 250, 400)


def verdict(log, n, ok, detail, seconds, limit=None):
    ok = bool(ok) and (limit is None or seconds < limit)
    budget = f", limit {limit:g} s" if limit is not None else ""
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail} [{seconds:.1f} s{budget}]"
    log.append(line)
    print(line)
    assert ok, line


# --- 1: gate infidelity -------------------------------------------------------


def test_criterion_1_gate_infidelity(acceptance_log):
    start = time.perf_counter()
    u = gates.rx(0.37) @ gates.rz(1.1)
    cases = [
        (gate_infidelity(u, u), 0.0),
        (gate_infidelity(gates.Z, gates.I2), 1.0),
        (gate_infidelity(np.exp(0.83j) * u, u), 0.0),
        (gate_infidelity(gates.I2, gates.rx(np.pi / 2)), 0.5),
        (gate_infidelity(np.eye(4), np.kron(gates.Z, gates.I2)), 1.0),
    ]
    worst = max(abs(got - want) for got, want in cases)
    verdict(acceptance_log, 1, worst <= 1e-12, f"max deviation {worst:.1e}",
            time.perf_counter() - start, 1)


# --- 2: policy gradient -------------------------------------------------------


def gradient_error(seed):
    rng = np.random.default_rng(seed)
    dims = (int(rng.integers(2, 6)), int(rng.integers(2, 8)), int(rng.integers(2, 10)))
    pol = Policy.xavier(*dims, rng).with_theta(rng.normal(scale=0.7, size=Policy.n_params(*dims)))
    batch = []
    for _ in range(int(rng.integers(1, 4))):
        n = int(rng.integers(1, 5))
        states = rng.uniform(-1, 1, (n, dims[0]))
        returns = rng.normal(size=n)
        batch.append(Trajectory("0", states, rng.integers(0, dims[2], n), states, float(returns[-1]), returns))
    analytic = policy_gradient(batch, pol)
    numeric = np.empty_like(analytic)
    eps = 1e-6
    for i in range(pol.theta.size):
        up, down = pol.theta.copy(), pol.theta.copy()
        up[i] += eps
        down[i] -= eps
        numeric[i] = (surrogate_objective(batch, pol.with_theta(up))
                      - surrogate_objective(batch, pol.with_theta(down))) / (2 * eps)
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)


def test_criterion_2_gradient_oracle(acceptance_log):
    start = time.perf_counter()
    worst = max(gradient_error(seed) for seed in range(100))
    verdict(acceptance_log, 2, worst < 1e-5, f"100 instances, max relative error {worst:.1e}",
            time.perf_counter() - start, 30)


# --- 3: decay fit -------------------------------------------------------------


def test_criterion_3_fit_recovery(acceptance_log):
    start = time.perf_counter()
    lengths = RbConfig().sequence_lengths
    m = np.array(lengths, float)
    worst = 0.0
    for a, alpha, b in itertools.product((0.3, 0.48, 0.6), (0.95, 0.99, 0.998), (0.45, 0.5, 0.55)):
        fit = fit_decay(lengths, a * alpha ** m + b)
        worst = max(worst, abs(fit.A - a), abs(fit.alpha - alpha), abs(fit.B - b))

    rng = np.random.default_rng(0)
    p = 0.48 * 0.995 ** m + 0.5
    covered = 0
    for _ in range(200):
        surv = rng.binomial(1024, np.repeat(p[:, None], 20, axis=1)) / 1024
        fit = fit_decay(lengths, surv)
        covered += abs(fit.alpha - 0.995) <= 3 * fit.alpha_stderr
    verdict(acceptance_log, 3, worst < 1e-6 and covered >= 190,
            f"noiseless max error {worst:.1e}, 3-sigma coverage {covered}/200",
            time.perf_counter() - start, 120)


# --- 4: Clifford compilation --------------------------------------------------


def test_criterion_4_clifford_invariants(acceptance_log):
    start = time.perf_counter()
    units = [clifford_unitary(i) for i in range(N_CLIFFORDS)]
    compiled_ok = all(
        gate_infidelity(compiled_unitary(*compile_clifford(i)), units[i]) < 1e-12
        for i in range(N_CLIFFORDS)
    )
    distinct = all(gate_infidelity(units[i], units[j]) > 1e-6
                   for i in range(N_CLIFFORDS) for j in range(i))

    def member(v):
        return any(gate_infidelity(v, w) < 1e-12 for w in units)

    closed = all(member(u @ v) for u in units for v in units)
    total = sum(count_x90(i) for i in range(N_CLIFFORDS))
    ok = N_CLIFFORDS == 24 and compiled_ok and distinct and closed and total == 28
    verdict(acceptance_log, 4, ok,
            f"{N_CLIFFORDS} Cliffords, compiled={compiled_ok}, closed={closed}, x90 total {total}",
            time.perf_counter() - start, 5)


# --- 5: EPG pipelines ---------------------------------------------------------


def test_criterion_5_epg_pipelines(acceptance_log):
    start = time.perf_counter()
    eps = 5e-3
    single = load_preset("single-noiseless")
    pair = load_preset("two-qubit-noiseless")
    drag = calibrate_drag(single)
    rb_config = RbConfig(sequence_lengths=tuple(np.unique(np.geomspace(1, 400, 12).astype(int))),
                         randomizations_per_length=10, shots=1024, seed=1)
    rb_epg = run_rb((Depolarize(eps), Pulse(drag)), rb_config, single).epg

    cnot = build_cnot(ideal_zx())
    noisy = (Depolarize(eps, (0, 1)),) + cnot
    irb_config = RbConfig(sequence_lengths=tuple(np.unique(np.geomspace(1, 300, 12).astype(int))),
                          randomizations_per_length=10, shots=1024, seed=2)
    irb_epg = irb(cnot, noisy, irb_config, pair).epg
    rep_epg = repetition_error(noisy, ("00", "10"), (1, 3, 5, 7, 9, 11), pair, "cnot", seed=3).slope

    values = (rb_epg, irb_epg, rep_epg)
    spread = max(values) / min(values) - 1
    verdict(acceptance_log, 5, spread <= 0.25,
            f"RB {rb_epg:.2e}, IRB {irb_epg:.2e}, repetition {rep_epg:.2e}, spread {spread:.1%}",
            time.perf_counter() - start, 300)


# --- 6: DRL convergence -------------------------------------------------------


def first_hit(seed, model):
    """Batch index at which the best waveform first beats 1e-2, or None."""
    hit = {}

    def stop(batch, history, best_reward, best_waveform):
        if best_waveform is not None and waveform_infidelity(best_waveform, model) < 1e-2:
            hit["batch"] = batch
            return True
        return False

    config = TrainConfig(reward=ODD_REPS, reward_baseline="batch-mean", seed=seed,
                         plateau_window=BATCHES, episodes_max=BATCHES * BATCH_SIZE)
    train(config, DeviceEnvironment(model), callback=stop)
    return hit.get("batch")


def test_criterion_6_drl_convergence(acceptance_log):
    start = time.perf_counter()
    model = load_preset("single-noiseless")
    hits = [first_hit(seed, model) for seed in range(10)]
    n_ok = sum(h is not None for h in hits)
    verdict(acceptance_log, 6, n_ok >= 8,
            f"{n_ok}/10 seeds below 1e-2, first batches {hits}",
            time.perf_counter() - start, 600)


# --- 7: model mismatch --------------------------------------------------------


@pytest.fixture(scope="module")
def mismatch():
    model = load_preset("single-mismatch")
    return model, calibrate_drag(model)


def mismatch_verdict(log, label, waveform, model, drag, start):
    config = RbConfig(sequence_lengths=COMPARE_LENGTHS, seed=0)
    opt, base = compare_rb(waveform, drag, config, model)
    ratio = base.epg / opt.epg
    verdict(log, 7, ratio >= 1.3,
            f"{label}: EPG {opt.epg:.2e} vs DRAG {base.epg:.2e}, improvement {ratio:.2f}x",
            time.perf_counter() - start, 1800)


def test_criterion_7_mismatch_drl(acceptance_log, mismatch):
    start = time.perf_counter()
    model, drag = mismatch
    config = TrainConfig(reward=ODD_REPS, reward_baseline="batch-mean", seed=0,
                         plateau_window=1000, episodes_max=BATCHES * BATCH_SIZE)
    result = train(config, DeviceEnvironment(model))
    mismatch_verdict(acceptance_log, "DRL", result.best_waveform, model, drag, start)


def test_criterion_7_mismatch_sa(acceptance_log, mismatch):
    start = time.perf_counter()
    model, drag = mismatch
    spec = RewardSpec(repetitions=(1, 2, 5, 9), weights=(0.25,) * 4, shots_final=8192)
    cost = reward_cost(DeviceEnvironment(model), spec, "rx90", drag, 0)
    result = sa_run(drag, cost, SaConfig(seed=0, steps_max=8000))
    mismatch_verdict(acceptance_log, "SA", result.best_waveform, model, drag, start)


# --- 8: drift robustness ------------------------------------------------------


def drift_epgs(waveform, model):
    config = RbConfig(seed=0)
    return [run_rb(waveform, config, model.scaled_drive(f)).epg for f in (1.0, 0.97, 1.03)]


def test_criterion_8_drift_robustness(acceptance_log):
    start = time.perf_counter()
    model = load_preset("single-drift")
    config = TrainConfig(reward=ODD_REPS, reward_baseline="batch-mean", seed=0,
                         plateau_window=1000, episodes_max=BATCHES * BATCH_SIZE)
    drl = train(config, DeviceEnvironment(model)).best_waveform
    drag = calibrate_drag(model)
    d_nom, *d_ext = drift_epgs(drl, model)
    b_nom, *b_ext = drift_epgs(drag, model)
    drl_loss = max(d_ext) / d_nom
    drag_loss = min(b_ext) / b_nom
    verdict(acceptance_log, 8, drl_loss < 2 and drag_loss > 2,
            f"DRL loses {drl_loss:.2f}x (nominal {d_nom:.2e}), "
            f"DRAG loses {drag_loss:.2f}x (nominal {b_nom:.2e})",
            time.perf_counter() - start, 1200)


# --- 9: reward formulas -------------------------------------------------------


def test_criterion_9_reward_formulas(acceptance_log):
    start = time.perf_counter()
    checks = [
        leakage_rescale(1.0, 0.0) == 1.0,
        abs(leakage_rescale(0.98, 0.1) - 0.9702970297) < 1e-10,
        leakage_rescale(0.5, 1.0) == 0.25,
        np.array_equal(discount_returns([0.0, 0.0, 1.0], 0.5), [1.0, 1.0, 1.0]),
        np.array_equal(discount_returns([1.0, 1.0, 1.0], 1.0), [3.0, 2.0, 1.0]),
        np.array_equal(discount_returns([0.0, 0.0, 0.0], 0.9), [0.0, 0.0, 0.0]),
    ]
    verdict(acceptance_log, 9, all(checks), f"{sum(checks)}/{len(checks)} hand-computed values",
            time.perf_counter() - start, 1)


# --- 10: determinism ----------------------------------------------------------

CLI_CONFIGS = {
    "train-drl": {"device": "preset:single-noiseless", "seed": 4,
                  "reward": {"repetitions": [1, 2, 5, 9], "weights": [0.25] * 4},
                  "train": {"episodes_max": 20, "batch_size": 5}},
    "train-sa": {"device": "preset:single-mismatch", "seed": 4, "sa": {"steps_max": 10}},
    "rb": {"device": "preset:single-mismatch", "seed": 4,
           "rb": {"sequence_lengths": [1, 4, 16, 64], "randomizations_per_length": 3}},
    "irb": {"device": "preset:two-qubit-noiseless", "seed": 4,
            "gate": {"kind": "ideal", "depolarizing_error": 5e-3},
            "clifford_gate": {"kind": "ideal"}, "target": "cnot",
            "rb": {"sequence_lengths": [1, 3, 6, 10], "randomizations_per_length": 2}},
    "repeat": {"device": "preset:two-qubit-noiseless", "seed": 4,
               "gate": {"kind": "ideal", "depolarizing_error": 5e-3},
               "clifford_gate": {"kind": "ideal"}, "target": "cnot",
               "repeat": {"n_values": [1, 3, 5], "runs_per_state": 1}},
}


def test_criterion_10_determinism(acceptance_log, tmp_path):
    start = time.perf_counter()
    same = {}
    for command, body in CLI_CONFIGS.items():
        path = tmp_path / f"{command}.json"
        path.write_text(json.dumps(dict(body, run_schema=1)))
        payloads = []
        for run in ("a", "b"):
            assert execute(command, path, out=tmp_path / run) == EXIT_OK
            record = json.loads((tmp_path / run / f"{command}.json").read_text())
            payloads.append(json.dumps(record["payload"], sort_keys=True).encode())
        same[command] = payloads[0] == payloads[1]
    differing = [c for c, ok in same.items() if not ok]
    verdict(acceptance_log, 10, not differing,
            f"{len(same) - len(differing)}/{len(same)} commands byte-identical"
            + (f", differing: {differing}" if differing else ""),
            time.perf_counter() - start)
