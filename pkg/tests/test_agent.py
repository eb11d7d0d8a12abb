import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from pulseforge import agent
from pulseforge.agent import (
    AdamState,
    DrlGateDesigner,
    Policy,
    PolicyFaultError,
    TrainConfig,
    Trajectory,
    adam_step,
    discount_returns,
    initial_observation,
    policy_forward,
    policy_gradient,
    run_episode,
    sample_action,
    surrogate_objective,
    train,
)
from pulseforge.control import ActionGrid, assemble_waveform
from pulseforge.device import DeviceEnvironment, load_preset
from pulseforge.reward import RewardSpec, waveform_infidelity
from pulseforge.simulate import ValidationError

# An 8-segment waveform on the 8x8 grid found by training; infidelity ~7e-3
# on the noiseless preset.
GOOD_ACTIONS = [49, 63, 47, 8, 34, 40, 53, 50]
ODD_REPS = RewardSpec(repetitions=(1, 2, 5, 9), weights=(0.25,) * 4)


def random_batch(rng, policy, n_traj=3, n_steps=4):
    batch = []
    for _ in range(n_traj):
        states = rng.uniform(-1, 1, (n_steps, policy.input_dim))
        actions = rng.integers(0, policy.output_dim, n_steps)
        returns = rng.normal(size=n_steps)
        batch.append(Trajectory("0", states, actions, states, float(returns[-1]), returns))
    return batch


def crafted_policy(logits):
    o = len(logits)
    theta = Policy.pack(np.zeros((1, 1)), np.zeros(1), np.zeros((o, 1)), np.asarray(logits))
    return Policy(1, 1, o, theta)


# --- policy ----------------------------------------------------------------


def test_zero_weights_give_uniform_probabilities():
    pol = Policy(4, 10, 64, np.zeros(Policy.n_params(4, 10, 64)))
    assert np.allclose(policy_forward(pol, np.ones(4)), 1 / 64)


def test_crafted_logits():
    p = policy_forward(crafted_policy([np.log(2), 0.0, 0.0]), [0.3])
    assert np.allclose(p, [0.5, 0.25, 0.25], atol=1e-15)


@given(st.integers(0, 10 ** 6), st.floats(-50, 50))
def test_softmax_is_normalized(seed, scale):
    rng = np.random.default_rng(seed)
    pol = Policy.xavier(4, 10, 64, seed).with_theta(rng.normal(size=Policy.n_params(4, 10, 64)) * scale)
    p = policy_forward(pol, rng.uniform(-1.05, 1.05, 4))
    assert abs(p.sum() - 1) < 1e-12 and p.min() >= 0


def test_non_finite_policy_raises():
    pol = Policy.xavier(4, 10, 64, 0)
    theta = pol.theta.copy()
    theta[3] = np.nan
    with pytest.raises(PolicyFaultError):
        policy_forward(pol.with_theta(theta), np.zeros(4))


def test_policy_input_size_checked():
    with pytest.raises(ValidationError):
        policy_forward(Policy.xavier(4, 10, 64, 0), np.zeros(5))


def test_policy_serialization():
    pol = Policy.xavier(17, 18, 36, 2)
    again = Policy.from_dict(json.loads(json.dumps(pol.to_dict())))
    assert np.array_equal(again.theta, pol.theta)


# --- sampling --------------------------------------------------------------


def test_one_hot_always_sampled():
    rng = np.random.default_rng(0)
    probs = np.zeros(64)
    probs[17] = 1.0
    assert {sample_action(probs, rng) for _ in range(500)} == {17}


def test_uniform_sampling_frequencies():
    rng = np.random.default_rng(1)
    n = 10 ** 5
    counts = np.bincount([sample_action(np.full(64, 1 / 64), rng) for _ in range(n)], minlength=64)
    sigma = np.sqrt(n * (1 / 64) * (63 / 64))
    assert np.all(np.abs(counts - n / 64) < 4 * sigma)


def test_biased_sampling_frequency():
    rng = np.random.default_rng(2)
    draws = [sample_action([0.9, 0.1], rng) for _ in range(10 ** 4)]
    assert abs(draws.count(0) / 10 ** 4 - 0.9) < 0.012


# --- returns and gradients -------------------------------------------------


def test_discount_examples():
    assert discount_returns([0, 0, 1], 0.5).tolist() == [1.0, 1.0, 1.0]
    assert discount_returns([1, 1, 1], 1.0).tolist() == [3.0, 2.0, 1.0]
    assert discount_returns([0, 0, 0, 0], 0.9).tolist() == [0.0] * 4


def test_discount_weights_count_from_the_end():
    r = discount_returns([1.0, 2.0, 4.0], 0.5)
    assert r.tolist() == [1 * 0.25 + 2 * 0.5 + 4, 2 * 0.5 + 4, 4.0]
    assert discount_returns([0, 0, 1], 0.0).tolist() == [1.0, 1.0, 1.0]


def test_zero_returns_give_zero_gradient():
    rng = np.random.default_rng(0)
    pol = Policy.xavier(4, 10, 8, 0)
    batch = [Trajectory("0", t.states, t.actions, t.next_states, 0.0, np.zeros(4))
             for t in random_batch(rng, pol)]
    assert np.all(policy_gradient(batch, pol) == 0)


def test_one_step_gradient_is_onehot_minus_probs():
    pol = crafted_policy([0.2, -0.1, 0.5, 0.0])
    traj = Trajectory("0", np.array([[0.4]]), np.array([2]), np.array([[0.0]]), 1.0, np.array([1.0]))
    grad = policy_gradient([traj], pol)
    _, _, _, gb2 = pol.unpack(grad)
    probs = policy_forward(pol, [0.4])
    assert np.allclose(gb2, np.eye(4)[2] - probs, atol=1e-14)


def finite_difference_error(seed):
    rng = np.random.default_rng(seed)
    dims = (int(rng.integers(2, 6)), int(rng.integers(2, 8)), int(rng.integers(2, 10)))
    pol = Policy.xavier(*dims, rng).with_theta(rng.normal(scale=0.7, size=Policy.n_params(*dims)))
    batch = random_batch(rng, pol, int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    analytic = policy_gradient(batch, pol)
    eps = 1e-6
    numeric = np.empty_like(analytic)
    for i in range(pol.theta.size):
        up, down = pol.theta.copy(), pol.theta.copy()
        up[i] += eps
        down[i] -= eps
        numeric[i] = (surrogate_objective(batch, pol.with_theta(up))
                      - surrogate_objective(batch, pol.with_theta(down))) / (2 * eps)
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)


def test_gradient_matches_finite_differences():
    errors = [finite_difference_error(seed) for seed in range(100)]
    assert max(errors) < 1e-5


# --- Adam ------------------------------------------------------------------


def test_zero_gradient_leaves_theta():
    adam = AdamState.zeros(5)
    theta, new = adam_step(np.arange(5.0), np.zeros(5), adam)
    assert np.array_equal(theta, np.arange(5.0))
    assert new.step == 1


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_first_step_is_bounded_by_learning_rate(g):
    adam = AdamState.zeros(3, learning_rate=0.01)
    theta, _ = adam_step(np.zeros(3), np.array(g), adam)
    assert np.all(np.abs(theta) <= 0.01 * (1 + 1e-6))


def test_learning_rate_decay_and_floor():
    adam = AdamState.zeros(2, learning_rate=0.01, decay=1.0)
    for _ in range(3):
        _, adam = adam_step(np.zeros(2), np.ones(2), adam)
    assert adam.learning_rate == 0.01
    adam = AdamState.zeros(2, learning_rate=0.01, decay=0.5, alpha_min=1e-3)
    for _ in range(10):
        _, adam = adam_step(np.zeros(2), np.ones(2), adam)
    assert adam.learning_rate == 1e-3


def test_ascent_direction():
    theta, _ = adam_step(np.zeros(2), np.array([1.0, -1.0]), AdamState.zeros(2))
    assert theta[0] > 0 > theta[1]


def test_weights_stay_finite_under_many_steps():
    rng = np.random.default_rng(0)
    adam = AdamState.zeros(50)
    theta = np.zeros(50)
    for _ in range(10 ** 4):
        theta, adam = adam_step(theta, rng.normal(scale=100, size=50), adam)
    assert np.all(np.isfinite(theta)) and np.all(np.isfinite(adam.v))


# --- episodes and training -------------------------------------------------


def small_config(**kwargs):
    base = dict(n_segments=2, batch_size=3, episodes_max=6, reward=ODD_REPS, seed=1)
    base.update(kwargs)
    return TrainConfig(**base)


def test_initial_observation_is_exact():
    assert initial_observation("0", 1).tolist() == [0, 0, 1, 0]
    assert np.allclose(initial_observation("+i", 1), [0, 1, 0, 0])
    assert initial_observation("10", 2).size == 17


def test_minimal_episode():
    cfg = small_config(n_segments=1, reward=RewardSpec(initial_states=("0",)))
    pol = Policy.xavier(4, 10, 64, 0)
    res = run_episode(pol, DeviceEnvironment(load_preset("single-noiseless")), cfg)
    assert len(res.trajectories) == 1 and res.trajectories[0].n_steps == 1
    assert res.tomography_calls == 1


def test_call_accounting(monkeypatch):
    env = DeviceEnvironment(load_preset("single-noiseless"))
    calls = []
    original = DeviceEnvironment.tomography
    monkeypatch.setattr(DeviceEnvironment, "tomography",
                        lambda self, *a: calls.append(a) or original(self, *a))
    cfg = TrainConfig(reward=RewardSpec())
    res = run_episode(Policy.xavier(4, 10, 64, 0), env, cfg)
    assert res.tomography_calls == 24
    assert len(calls) == 24 + 3 * 3
    assert all(t.n_steps == 8 for t in res.trajectories)
    assert all(np.array_equal(t.returns, np.full(8, res.reward)) for t in res.trajectories)


def test_pinned_policy_reproduces_known_good_waveform(monkeypatch):
    picks = iter(GOOD_ACTIONS)
    monkeypatch.setattr(agent, "sample_action", lambda probs, rng: next(picks))
    env = DeviceEnvironment(load_preset("single-noiseless"))
    res = run_episode(Policy.xavier(4, 10, 64, 0), env, TrainConfig(reward=ODD_REPS))
    assert list(res.actions) == GOOD_ACTIONS
    assert res.reward >= 0.99


def test_known_good_waveform_oracle():
    wave = assemble_waveform(GOOD_ACTIONS, ActionGrid.uniform(8, 8), 3.55e-9)
    assert waveform_infidelity(wave, load_preset("single-noiseless")) < 1e-2


def test_zero_budget_returns_initial_policy():
    cfg = small_config(episodes_max=0)
    res = train(cfg, load_preset("single-noiseless"))
    assert res.reward_history == () and res.best_waveform is None
    assert np.array_equal(res.policy.theta, Policy.xavier(4, 10, 64, (1, 0)).theta)


def test_training_is_deterministic_and_reports_the_max():
    model = load_preset("single-nominal")
    a = train(small_config(), model)
    b = train(small_config(), DeviceEnvironment(model))
    assert a.reward_history == b.reward_history
    assert np.array_equal(a.policy.theta, b.policy.theta)
    assert a.best_reward == max(a.reward_history)
    assert a.reward_history[a.best_episode] == a.best_reward
    assert a.n_batches == 2
    assert json.dumps(a.payload(), sort_keys=True) == json.dumps(b.payload(), sort_keys=True)


def test_plateau_and_callback_stops():
    model = load_preset("single-noiseless")
    res = train(small_config(episodes_max=300, plateau_window=2, plateau_tol=1.0), model)
    # the first batch always improves on -inf, then two stale batches follow
    assert res.stop_reason == "plateau" and res.n_batches == 3
    res = train(small_config(episodes_max=300), model, lambda b, *_: b == 3)
    assert res.stop_reason == "callback" and res.n_batches == 3


def test_batch_mean_baseline_changes_updates_only():
    model = load_preset("single-noiseless")
    plain = train(small_config(episodes_max=3), model)
    centred = train(small_config(episodes_max=3, reward_baseline="batch-mean"), model)
    assert plain.reward_history == centred.reward_history
    assert not np.allclose(plain.policy.theta, centred.policy.theta)


def test_config_round_trip():
    cfg = TrainConfig.two_qubit(seed=4)
    assert cfg.batch_size == 16 and cfg.hidden_dim == 18 and cfg.grid.size == 36
    assert cfg.reward.initial_states == ("00", "10")
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    with pytest.raises(ValidationError):
        TrainConfig(gamma=1.5)
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)


def test_two_qubit_episode_shapes():
    cfg = TrainConfig.two_qubit(n_segments=2, batch_size=1, episodes_max=1)
    res = train(cfg, load_preset("two-qubit-noiseless"))
    assert res.policy.input_dim == 17 and res.policy.output_dim == 36
    assert res.best_waveform.n_parameters == 4


def test_estimator_api():
    est = DrlGateDesigner(n_segments=2, batch_size=2, episodes_max=2, reward=ODD_REPS.to_dict())
    assert clone(est).get_params()["batch_size"] == 2
    with pytest.raises(ValidationError):
        est.predict()
    est.fit(load_preset("single-noiseless"))
    assert est.predict() is est.best_waveform_
    assert est.reward_history_.shape == (2,)
