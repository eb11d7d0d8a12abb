"""Policy-gradient (REINFORCE) pulse designer.

A two-layer softmax policy maps the latest tomographic observation to a
distribution over discrete segment actions. Each episode builds a pulse one
segment at a time, re-preparing and replaying the prefix after every new
segment, and is scored once at the end by the repetition-weighted reward.
The policy is updated once per batch of episodes with Adam.
"""
import json
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator

from . import gates
from .control import ActionGrid, PwcWaveform, Segment, action_to_segments, gate_schedule
from .device import DeviceEnvironment, DeviceModel, Observation, as_rng, derive_seed, qubit_state
from .reward import RewardSpec, measure_reward
from .simulate import ValidationError

TRAIN_SCHEMA = 1


class PolicyFaultError(RuntimeError):
    """Raised when policy parameters stop being finite."""


# --- policy network ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Policy:
    """Dense tanh layer followed by a softmax layer, stored as one flat vector."""

    input_dim: int
    hidden_dim: int
    output_dim: int
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.shape != (self.n_params(self.input_dim, self.hidden_dim, self.output_dim),):
            raise ValidationError("parameter vector has the wrong size")
        object.__setattr__(self, "theta", theta)

    @staticmethod
    def n_params(input_dim, hidden_dim, output_dim) -> int:
        return hidden_dim * (input_dim + 1) + output_dim * (hidden_dim + 1)

    def unpack(self, theta=None):
        theta = self.theta if theta is None else theta
        i, h, o = self.input_dim, self.hidden_dim, self.output_dim
        w1 = theta[: h * i].reshape(h, i)
        b1 = theta[h * i : h * i + h]
        off = h * i + h
        w2 = theta[off : off + o * h].reshape(o, h)
        b2 = theta[off + o * h :]
        return w1, b1, w2, b2

    @staticmethod
    def pack(w1, b1, w2, b2) -> np.ndarray:
        return np.concatenate([w1.ravel(), b1, w2.ravel(), b2])

    def with_theta(self, theta) -> "Policy":
        return replace(self, theta=np.asarray(theta, dtype=float))

    @classmethod
    def xavier(cls, input_dim, hidden_dim, output_dim, rng) -> "Policy":
        rng = as_rng(rng)
        lim1 = np.sqrt(6.0 / (input_dim + hidden_dim))
        lim2 = np.sqrt(6.0 / (hidden_dim + output_dim))
        w1 = rng.uniform(-lim1, lim1, (hidden_dim, input_dim))
        w2 = rng.uniform(-lim2, lim2, (output_dim, hidden_dim))
        theta = cls.pack(w1, np.zeros(hidden_dim), w2, np.zeros(output_dim))
        return cls(input_dim, hidden_dim, output_dim, theta)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "output_dim": self.output_dim,
            "theta": self.theta.tolist(),
        }

    @classmethod
    def from_dict(cls, data) -> "Policy":
        return cls(data["input_dim"], data["hidden_dim"], data["output_dim"], np.array(data["theta"]))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(policy: Policy, s: np.ndarray):
    w1, b1, w2, b2 = policy.unpack()
    h = np.tanh(s @ w1.T + b1)
    return h, _softmax(h @ w2.T + b2)


def policy_forward(policy: Policy, s) -> np.ndarray:
    """Action probabilities ``softmax(W2 tanh(W1 s + b1) + b2)``."""
    if not np.all(np.isfinite(policy.theta)):
        raise PolicyFaultError("policy parameters contain NaN or inf")
    s = np.asarray(s.values if isinstance(s, Observation) else s, dtype=float)
    if s.shape[-1] != policy.input_dim:
        raise ValidationError(f"observation length {s.shape[-1]} != input_dim {policy.input_dim}")
    return _forward(policy, s)[1]


def sample_action(probs, rng) -> int:
    probs = np.asarray(probs, dtype=float)
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), probs.size - 1))


def discount_returns(rewards, gamma: float) -> np.ndarray:
    """``R[k] = sum_{i>=k} r_i gamma^(N-i)``; the last reward always has weight 1."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 1:
        raise ValidationError("rewards must be a nonempty vector")
    n = r.size
    weights = np.array([gamma ** (n - 1 - i) if n - 1 - i > 0 else 1.0 for i in range(n)])
    return np.cumsum((r * weights)[::-1])[::-1]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One initial state's pass through an episode.

    ``states[k]`` is the observation the k-th action was chosen from and
    ``next_states[k]`` the observation measured after playing it.
    """

    init: str
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    reward: float
    returns: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.actions)


def policy_gradient(batch: Sequence[Trajectory], policy: Policy) -> np.ndarray:
    """Batch-averaged ``sum_k grad log pi(a_k|s_k) R[k]`` by backpropagation."""
    if not batch:
        raise ValidationError("empty batch")
    w1, b1, w2, b2 = policy.unpack()
    s = np.concatenate([np.atleast_2d(t.states) for t in batch])
    a = np.concatenate([np.asarray(t.actions, dtype=int) for t in batch])
    ret = np.concatenate([np.asarray(t.returns, dtype=float) for t in batch])
    if s.shape[1] != policy.input_dim or not (len(s) == len(a) == len(ret)):
        raise ValidationError("trajectory shapes do not match the policy")
    h, p = _forward(policy, s)
    dlogits = -p
    dlogits[np.arange(len(a)), a] += 1.0
    dlogits *= ret[:, None]
    gw2 = dlogits.T @ h
    gb2 = dlogits.sum(axis=0)
    dpre = (dlogits @ w2) * (1 - h ** 2)
    gw1 = dpre.T @ s
    gb1 = dpre.sum(axis=0)
    return Policy.pack(gw1, gb1, gw2, gb2) / len(batch)


def surrogate_objective(batch: Sequence[Trajectory], policy: Policy) -> float:
    """The quantity whose gradient :func:`policy_gradient` returns."""
    total = 0.0
    for t in batch:
        p = policy_forward(policy, np.atleast_2d(t.states))
        total += float(np.sum(np.log(p[np.arange(t.n_steps), t.actions]) * t.returns))
    return total / len(batch)


# --- Adam --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 0.01
    decay: float = 0.999
    alpha_min: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.decay <= 1:
            raise ValidationError("decay must lie in (0, 1]")
        if self.learning_rate <= 0 or self.alpha_min <= 0:
            raise ValidationError("learning rates must be positive")

    @classmethod
    def zeros(cls, n: int, **kwargs) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kwargs)


def adam_step(theta, grad, adam: AdamState) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam ascent step, then learning-rate decay."""
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if theta.shape != grad.shape or grad.shape != adam.m.shape:
        raise ValidationError("theta, gradient and moments must share a shape")
    t = adam.step + 1
    m = adam.beta1 * adam.m + (1 - adam.beta1) * grad
    v = adam.beta2 * adam.v + (1 - adam.beta2) * grad ** 2
    m_hat = m / (1 - adam.beta1 ** t)
    v_hat = v / (1 - adam.beta2 ** t)
    theta = theta + adam.learning_rate * m_hat / (np.sqrt(v_hat) + adam.eps)
    lr = max(adam.decay * adam.learning_rate, adam.alpha_min)
    return theta, replace(adam, m=m, v=v, step=t, learning_rate=lr)


# --- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    target: str = "rx90"
    n_segments: int = 8
    segment_duration: float = 3.55e-9
    grid: ActionGrid = field(default_factory=lambda: ActionGrid.uniform(8, 8))
    reward: RewardSpec = field(default_factory=RewardSpec)
    hidden_dim: int = 10
    batch_size: int = 25
    gamma: float = 0.9
    learning_rate: float = 0.01
    lr_decay: float = 0.999
    alpha_min: float = 1e-4
    episodes_max: int = 3750
    plateau_window: int = 30
    plateau_tol: float = 1e-3
    gradient_states: str = "all"
    reward_baseline: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.target not in gates.TARGETS:
            raise ValidationError(f"unknown target {self.target!r}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0 <= self.gamma <= 1:
            raise ValidationError("gamma must lie in [0, 1]")
        if self.n_segments < 1 or self.segment_duration <= 0:
            raise ValidationError("need at least one segment of positive duration")
        if self.episodes_max < 0:
            raise ValidationError("episodes_max must be >= 0")
        if self.gradient_states not in ("all", "primary"):
            raise ValidationError("gradient_states must be 'all' or 'primary'")
        if self.reward_baseline not in ("none", "batch-mean"):
            raise ValidationError("reward_baseline must be 'none' or 'batch-mean'")

    @classmethod
    def two_qubit(cls, **kwargs) -> "TrainConfig":
        kwargs.setdefault("target", "zx-90")
        kwargs.setdefault("n_segments", 10)
        kwargs.setdefault("segment_duration", 30e-9)
        kwargs.setdefault("grid", ActionGrid.uniform(6, 6))
        kwargs.setdefault("reward", RewardSpec.for_target(kwargs["target"]))
        kwargs.setdefault("hidden_dim", 18)
        kwargs.setdefault("batch_size", 16)
        return cls(**kwargs)

    @property
    def n_qubits(self) -> int:
        return 1 if self.target == "rx90" else 2

    @property
    def channels(self) -> Tuple[str, ...]:
        return ("d0",) if self.n_qubits == 1 else ("u0",)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "n_segments": self.n_segments,
            "dt_ns": self.segment_duration * 1e9,
            "grid": self.grid.to_dict(),
            "reward": self.reward.to_dict(),
            "hidden_dim": self.hidden_dim,
            "batch_size": self.batch_size,
            "gamma": self.gamma,
            "learning_rate": self.learning_rate,
            "lr_decay": self.lr_decay,
            "alpha_min": self.alpha_min,
            "episodes_max": self.episodes_max,
            "plateau_window": self.plateau_window,
            "plateau_tol": self.plateau_tol,
            "gradient_states": self.gradient_states,
            "reward_baseline": self.reward_baseline,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data) -> "TrainConfig":
        data = dict(data)
        if "dt_ns" in data:
            data["segment_duration"] = data.pop("dt_ns") * 1e-9
        if "grid" in data:
            data["grid"] = ActionGrid.from_dict(data["grid"])
        if "reward" in data:
            data["reward"] = RewardSpec.from_dict(data["reward"])
        return cls(**data)


def initial_observation(init: str, n_qubits: int) -> np.ndarray:
    """Exact observation of a freshly prepared state; nothing is measured."""
    psi = qubit_state(init, n_qubits)
    rho = np.outer(psi, psi.conj())
    labels = ["X", "Y", "Z"] if n_qubits == 1 else gates.two_qubit_pauli_labels()
    vals = [np.real(np.trace(rho @ gates.pauli_string(l))) for l in labels]
    return np.array(vals + [0.0] * n_qubits)


def _padded_waveform(segments: List[List[Segment]], config: TrainConfig) -> PwcWaveform:
    n = config.n_segments
    chans = {}
    for c, ch in enumerate(config.channels):
        segs = [step[c] for step in segments]
        segs += [Segment(0.0, 0.0)] * (n - len(segs))
        chans[ch] = tuple(segs)
    return PwcWaveform(chans, config.segment_duration, "drl")


@dataclass(frozen=True, eq=False)
class EpisodeResult:
    trajectories: Tuple[Trajectory, ...]
    reward: float
    waveform: PwcWaveform
    actions: Tuple[int, ...]
    tomography_calls: int


def run_episode(
    policy: Policy, env: DeviceEnvironment, config: TrainConfig, episode_index: int = 0, seed=None
) -> EpisodeResult:
    """Build one pulse segment by segment and score it.

    Actions are drawn from the policy evaluated on the first initial state's
    observation, so the episode yields a single waveform. Every initial
    state is re-prepared and the prefix replayed after each segment, giving
    one trajectory per state over the shared actions.
    """
    seed = config.seed if seed is None else seed
    env = env.at_episode(episode_index)
    if env.channels != config.channels:
        raise ValidationError("environment channels do not match the training target")
    states = config.reward.initial_states
    rng = as_rng(derive_seed(seed, 1, episode_index, 0))
    n = config.n_segments
    obs = [[initial_observation(s, config.n_qubits)] for s in states]
    actions, segments = [], []
    calls = 0
    try:
        for k in range(1, n + 1):
            a = sample_action(policy_forward(policy, obs[0][-1]), rng)
            actions.append(a)
            segments.append(action_to_segments(a, config.grid))
            sched = gate_schedule(_padded_waveform(segments, config), config.target, k)
            for j, init in enumerate(states):
                o = env.tomography(
                    sched, init, config.reward.shots_intermediate,
                    derive_seed(seed, 1, episode_index, 1, k, j),
                )
                obs[j].append(o.values)
                calls += 1
        waveform = _padded_waveform(segments, config)
        reward, _ = measure_reward(
            env, waveform, config.reward, config.target, derive_seed(seed, 1, episode_index, 2)
        )
    except (ValidationError, PolicyFaultError):
        raise
    except Exception as exc:
        raise RuntimeError(f"episode {episode_index} failed: {exc}") from exc
    rewards = np.zeros(n)
    rewards[-1] = reward
    returns = discount_returns(rewards, config.gamma)
    trajs = tuple(
        Trajectory(
            init=init,
            states=np.array(obs[j][:-1]),
            actions=np.array(actions),
            next_states=np.array(obs[j][1:]),
            reward=reward,
            returns=returns,
        )
        for j, init in enumerate(states)
    )
    return EpisodeResult(trajs, reward, waveform, tuple(actions), calls)


@dataclass(frozen=True, eq=False)
class TrainResult:
    best_waveform: Optional[PwcWaveform]
    best_reward: float
    reward_history: Tuple[float, ...]
    policy: Policy
    n_batches: int
    stop_reason: str
    config: TrainConfig
    best_episode: int = -1
    wall_time: float = 0.0

    def payload(self) -> dict:
        """Deterministic JSON content (everything except wall time)."""
        return {
            "train_schema": TRAIN_SCHEMA,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "reward_history": list(self.reward_history),
            "best_reward": self.best_reward,
            "best_episode": self.best_episode,
            "best_waveform": None if self.best_waveform is None else self.best_waveform.to_dict(),
            "n_batches": self.n_batches,
            "stop_reason": self.stop_reason,
            "policy": self.policy.to_dict(),
        }

    def to_dict(self) -> dict:
        d = self.payload()
        d["wall_time_s"] = self.wall_time
        return d


def train(config: TrainConfig, env, callback=None) -> TrainResult:
    """Batched REINFORCE training loop.

    ``env`` may be a :class:`DeviceEnvironment` or a :class:`DeviceModel`
    (wrapped immediately; the agent never reads the model itself). Drift is
    applied per episode index. Training stops when ``episodes_max`` is spent
    or the best reward has not improved by more than ``plateau_tol`` over
    ``plateau_window`` consecutive batches. ``callback(batch, history,
    best_reward, best_waveform)`` runs after every update; a truthy return
    stops training.
    """
    start = time.perf_counter()
    if isinstance(env, DeviceModel):
        env = DeviceEnvironment(env)
    n_obs = env.observation_size
    policy = Policy.xavier(n_obs, config.hidden_dim, config.grid.size, derive_seed(config.seed, 0))
    adam = AdamState.zeros(
        policy.theta.size,
        learning_rate=config.learning_rate,
        decay=config.lr_decay,
        alpha_min=config.alpha_min,
    )
    history: List[float] = []
    best_reward, best_waveform, best_episode = -np.inf, None, -1
    stale, batch_idx, stop = 0, 0, "episode budget"
    episode = 0
    while episode < config.episodes_max:
        n_here = min(config.batch_size, config.episodes_max - episode)
        batch = []
        improved = False
        for _ in range(n_here):
            res = run_episode(policy, env, config, episode)
            history.append(res.reward)
            trajs = res.trajectories if config.gradient_states == "all" else res.trajectories[:1]
            batch.extend(trajs)
            if res.reward > best_reward + config.plateau_tol:
                improved = True
            if res.reward > best_reward:
                best_reward, best_waveform, best_episode = res.reward, res.waveform, episode
            episode += 1
        if config.reward_baseline == "batch-mean":
            mean = float(np.mean(history[-n_here:]))
            batch = [replace(t, returns=t.returns - mean) for t in batch]
        theta, adam = adam_step(policy.theta, policy_gradient(batch, policy), adam)
        if not np.all(np.isfinite(theta)):
            raise PolicyFaultError(f"policy diverged after batch {batch_idx}")
        policy = policy.with_theta(theta)
        batch_idx += 1
        stale = 0 if improved else stale + 1
        if callback is not None and callback(batch_idx, history, best_reward, best_waveform):
            stop = "callback"
            break
        if stale >= config.plateau_window:
            stop = "plateau"
            break
    return TrainResult(
        best_waveform=best_waveform,
        best_reward=float(best_reward) if best_waveform is not None else float("nan"),
        reward_history=tuple(history),
        policy=policy,
        n_batches=batch_idx,
        stop_reason=stop if config.episodes_max > 0 else "episode budget",
        config=config,
        best_episode=best_episode,
        wall_time=time.perf_counter() - start,
    )


class DrlGateDesigner(BaseEstimator):
    """Estimator wrapper around :func:`train`.

    ``fit`` takes a :class:`DeviceEnvironment` (or a model, which is wrapped)
    and exposes ``best_waveform_``, ``best_reward_``, ``reward_history_`` and
    ``policy_``.
    """

    def __init__(
        self,
        target="rx90",
        n_segments=8,
        segment_duration=3.55e-9,
        n_amplitudes=8,
        n_phases=8,
        hidden_dim=10,
        batch_size=25,
        gamma=0.9,
        learning_rate=0.01,
        lr_decay=0.999,
        alpha_min=1e-4,
        episodes_max=3750,
        plateau_window=30,
        plateau_tol=1e-3,
        reward=None,
        gradient_states="all",
        reward_baseline="none",
        seed=0,
    ):
        self.target = target
        self.n_segments = n_segments
        self.segment_duration = segment_duration
        self.n_amplitudes = n_amplitudes
        self.n_phases = n_phases
        self.hidden_dim = hidden_dim
        self.batch_size = batch_size
        self.gamma = gamma
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.alpha_min = alpha_min
        self.episodes_max = episodes_max
        self.plateau_window = plateau_window
        self.plateau_tol = plateau_tol
        self.reward = reward
        self.gradient_states = gradient_states
        self.reward_baseline = reward_baseline
        self.seed = seed

    def make_config(self) -> TrainConfig:
        reward = self.reward
        if reward is None:
            reward = RewardSpec.for_target(self.target)
        elif not isinstance(reward, RewardSpec):
            reward = RewardSpec.from_dict(reward)
        return TrainConfig(
            target=self.target,
            n_segments=self.n_segments,
            segment_duration=self.segment_duration,
            grid=ActionGrid.uniform(self.n_amplitudes, self.n_phases),
            reward=reward,
            hidden_dim=self.hidden_dim,
            batch_size=self.batch_size,
            gamma=self.gamma,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            alpha_min=self.alpha_min,
            episodes_max=self.episodes_max,
            plateau_window=self.plateau_window,
            plateau_tol=self.plateau_tol,
            gradient_states=self.gradient_states,
            reward_baseline=self.reward_baseline,
            seed=self.seed,
        )

    def fit(self, env, y=None):
        self.result_ = train(self.make_config(), env)
        self.best_waveform_ = self.result_.best_waveform
        self.best_reward_ = self.result_.best_reward
        self.reward_history_ = np.array(self.result_.reward_history)
        self.policy_ = self.result_.policy
        return self

    def predict(self, X=None) -> PwcWaveform:
        """The best waveform found during training."""
        if not hasattr(self, "best_waveform_"):
            raise ValidationError("designer is not fitted")
        return self.best_waveform_
