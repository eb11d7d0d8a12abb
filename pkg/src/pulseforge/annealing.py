"""Fast simulated annealing (Cauchy machine) over waveform parameters.

Amplitudes and phases are continuous. Each step draws a Cauchy step length
for amplitudes and phases, moves along isotropic random directions, and
cools all temperatures as ``T0 / (1 + step)``. The only feedback is the
terminal reward, so one step costs one full reward evaluation.
"""
import time
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator

from .control import PwcWaveform, wrap_phase
from .device import DeviceEnvironment, DeviceModel, as_rng, derive_seed
from .reward import RewardSpec, measure_reward
from .simulate import ValidationError

SA_SCHEMA = 1
TWO_PI = 2 * np.pi


@dataclass(frozen=True)
class SaConfig:
    t0_cost: float = 1e-3
    t0_amp: float = 5.0
    t0_phase: float = 20.0
    steps_max: int = 2000
    acceptance: str = "metropolis-exp"
    seed: int = 0

    def __post_init__(self):
        if min(self.t0_cost, self.t0_amp, self.t0_phase) <= 0:
            raise ValidationError("temperatures must be positive")
        if self.acceptance not in ("metropolis-exp", "logistic"):
            raise ValidationError(f"unknown acceptance rule {self.acceptance!r}")
        if self.steps_max < 0:
            raise ValidationError("steps_max must be >= 0")

    def temperatures(self, step: int) -> Tuple[float, float, float]:
        f = 1.0 / (1 + step)
        return self.t0_cost * f, self.t0_amp * f, self.t0_phase * f

    def to_dict(self) -> dict:
        return {
            "t0_cost": self.t0_cost,
            "t0_amp": self.t0_amp,
            "t0_phase": self.t0_phase,
            "steps_max": self.steps_max,
            "acceptance": self.acceptance,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data) -> "SaConfig":
        return cls(**dict(data))


@dataclass(frozen=True, eq=False)
class SaState:
    amplitudes: np.ndarray
    phases: np.ndarray
    cost: float
    best_amplitudes: np.ndarray
    best_phases: np.ndarray
    best_cost: float
    step: int = 0

    @classmethod
    def start(cls, amplitudes, phases, cost: float) -> "SaState":
        a = np.clip(np.asarray(amplitudes, dtype=float), 0.0, 1.0)
        p = np.mod(np.asarray(phases, dtype=float), TWO_PI)
        return cls(a, p, float(cost), a.copy(), p.copy(), float(cost), 0)


def cauchy_draw(scale: float, rng) -> float:
    """Cauchy(0, scale) sample via ``scale * tan(pi (u - 1/2))``."""
    if scale <= 0:
        raise ValidationError("Cauchy scale must be positive")
    return float(scale * np.tan(np.pi * (rng.random() - 0.5)))


def unit_vector(dim: int, rng) -> np.ndarray:
    """Direction drawn uniformly from the unit sphere in ``dim`` dimensions."""
    v = rng.standard_normal(dim)
    norm = np.linalg.norm(v)
    while norm == 0:
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
    return v / norm


def acceptance_probability(delta: float, temperature: float, rule: str) -> float:
    """``F(delta / T)`` where ``delta = C_best - C`` (negative for worse candidates)."""
    x = delta / temperature
    if rule == "metropolis-exp":
        return float(np.exp(min(x, 0.0)))
    return float(1.0 / (1.0 + np.exp(-np.clip(x, -700, 700))))


def sa_step(state: SaState, cost_fn: Callable, config: SaConfig, step_index: int, rng) -> SaState:
    """Propose, evaluate, and accept or reject one candidate."""
    t_cost, t_amp, t_phase = config.temperatures(step_index)
    shape = state.amplitudes.shape
    d_amp = cauchy_draw(t_amp, rng)
    d_phase = cauchy_draw(t_phase, rng)
    u = unit_vector(state.amplitudes.size, rng).reshape(shape)
    v = unit_vector(state.phases.size, rng).reshape(shape)
    amps = np.clip(state.amplitudes + u * d_amp, 0.0, 1.0)
    phases = np.mod(state.phases + v * d_phase, TWO_PI)
    cost = float(cost_fn(amps, phases))
    if cost < state.best_cost:
        accept = True
    else:
        p = acceptance_probability(state.best_cost - cost, t_cost, config.acceptance)
        accept = rng.random() < p
    if not accept:
        return replace(state, step=step_index + 1)
    if cost < state.best_cost:
        return SaState(amps, phases, cost, amps.copy(), phases.copy(), cost, step_index + 1)
    return replace(state, amplitudes=amps, phases=phases, cost=cost, step=step_index + 1)


@dataclass(frozen=True, eq=False)
class SaResult:
    best_waveform: PwcWaveform
    best_cost: float
    cost_history: Tuple[float, ...]
    best_history: Tuple[float, ...]
    config: SaConfig
    wall_time: float = 0.0

    def payload(self) -> dict:
        return {
            "sa_schema": SA_SCHEMA,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "cost_history": list(self.cost_history),
            "best_history": list(self.best_history),
            "best_cost": self.best_cost,
            "best_waveform": self.best_waveform.to_dict(),
        }

    def to_dict(self) -> dict:
        d = self.payload()
        d["wall_time_s"] = self.wall_time
        return d


def sa_run(initial: PwcWaveform, cost_fn: Callable, config: SaConfig, callback=None) -> SaResult:
    """Anneal from ``initial``; returns the best-ever waveform.

    ``cost_fn(amplitudes, phases, step)`` receives arrays shaped
    (channels, segments); the step index lets noisy costs derive seeds.
    """
    start = time.perf_counter()
    rng = as_rng(derive_seed(config.seed, 0))
    amps0, phases0 = initial.amplitudes(), initial.phases()
    state = SaState.start(amps0, phases0, cost_fn(amps0, phases0, -1))
    costs, bests = [], []
    for step in range(config.steps_max):
        state = sa_step(state, lambda a, p: cost_fn(a, p, step), config, step, rng)
        costs.append(state.cost)
        bests.append(state.best_cost)
        if callback is not None:
            callback(step, state)
    best = PwcWaveform.from_arrays(
        state.best_amplitudes,
        state.best_phases,
        initial.segment_duration,
        channels=tuple(initial.channels),
        name="sa",
    )
    return SaResult(best, state.best_cost, tuple(costs), tuple(bests), config,
                    time.perf_counter() - start)


def reward_cost(env: DeviceEnvironment, spec: RewardSpec, target: str, template: PwcWaveform, seed):
    """Cost ``1 - reward`` of a candidate, measured on the device."""

    def cost(amps, phases, step):
        w = PwcWaveform.from_arrays(
            amps, phases, template.segment_duration, channels=tuple(template.channels)
        )
        r, _ = measure_reward(env, w, spec, target, derive_seed(seed, 1, step + 1))
        return 1.0 - r

    return cost


class SaGateDesigner(BaseEstimator):
    """Estimator wrapper: anneal a seed waveform against the measured reward."""

    def __init__(
        self,
        initial_waveform=None,
        target="rx90",
        t0_cost=1e-3,
        t0_amp=5.0,
        t0_phase=20.0,
        steps_max=2000,
        acceptance="metropolis-exp",
        reward=None,
        seed=0,
    ):
        self.initial_waveform = initial_waveform
        self.target = target
        self.t0_cost = t0_cost
        self.t0_amp = t0_amp
        self.t0_phase = t0_phase
        self.steps_max = steps_max
        self.acceptance = acceptance
        self.reward = reward
        self.seed = seed

    def make_config(self) -> SaConfig:
        return SaConfig(self.t0_cost, self.t0_amp, self.t0_phase, self.steps_max,
                        self.acceptance, self.seed)

    def fit(self, env, y=None):
        if self.initial_waveform is None:
            raise ValidationError("an initial waveform (the device default) is required")
        if isinstance(env, DeviceModel):
            env = DeviceEnvironment(env)
        spec = self.reward
        if spec is None:
            spec = RewardSpec.for_target(self.target)
        elif not isinstance(spec, RewardSpec):
            spec = RewardSpec.from_dict(spec)
        config = self.make_config()
        cost = reward_cost(env, spec, self.target, self.initial_waveform, config.seed)
        self.result_ = sa_run(self.initial_waveform, cost, config)
        self.best_waveform_ = self.result_.best_waveform
        self.best_cost_ = self.result_.best_cost
        self.cost_history_ = np.array(self.result_.cost_history)
        return self

    def predict(self, X=None) -> PwcWaveform:
        if not hasattr(self, "best_waveform_"):
            raise ValidationError("designer is not fitted")
        return self.best_waveform_
