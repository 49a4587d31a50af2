"""Built-in continuous-control environments.

* ``pendulum``: torque-limited swing-up, constants and reward of the common
  public Pendulum task so its -200 solve threshold carries over.
* ``line-reacher``: a 1-D double integrator driven to the origin; fast smoke task.
* ``synthetic-load``: cheap linear dynamics plus a tunable busy-wait per step,
  standing in for an expensive simulator in throughput measurements.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .kernels import backend as _k


class EnvStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    act_dim: int
    act_low: tuple[float, ...]
    act_high: tuple[float, ...]
    max_steps: int
    reward_range: tuple[float, float] = (-math.inf, math.inf)

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1:
            raise ValueError("observation and action dims must be >= 1")
        if len(self.act_low) != self.act_dim or len(self.act_high) != self.act_dim:
            raise ValueError("one bound per action dim")
        for lo, hi in zip(self.act_low, self.act_high):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"bad action bounds ({lo}, {hi})")

    @property
    def act_bound(self) -> np.ndarray:
        """Symmetric half-range per action dim (the policy squashes into +-bound)."""
        return np.asarray(self.act_high, dtype=np.float32)


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    truncated: bool


class Env:
    spec: EnvSpec

    def __init__(self) -> None:
        self._t = 0
        self._ended = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        self._t = 0
        self._ended = False
        self._rng = np.random.default_rng(seed)
        self._reset_state()
        return self._obs()

    def step(self, action) -> StepResult:
        if self._ended:
            raise EnvStateError("step() on an ended episode; call reset() first")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(self.spec.act_dim),
                    self.spec.act_low, self.spec.act_high)
        reward, done = self._advance(a)
        self._t += 1
        truncated = not done and self._t >= self.spec.max_steps
        self._ended = done or truncated
        return StepResult(self._obs(), float(reward), bool(done), bool(truncated))

    def sample_action(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.spec.act_low, self.spec.act_high).astype(np.float32)

    # subclass hooks
    def _reset_state(self) -> None:
        raise NotImplementedError

    def _advance(self, a: np.ndarray) -> tuple[float, bool]:
        raise NotImplementedError

    def _obs(self) -> np.ndarray:
        raise NotImplementedError


class Pendulum(Env):
    """theta = 0 is upright; observation is (cos theta, sin theta, theta_dot)."""

    g = 10.0
    m = 1.0
    l = 1.0
    dt = 0.05
    max_torque = 2.0
    max_speed = 8.0

    def __init__(self, max_steps: int = 200) -> None:
        super().__init__()
        self.spec = EnvSpec(3, 1, (-self.max_torque,), (self.max_torque,), max_steps,
                            (-16.2736044, 0.0))
        self.th = 0.0
        self.thdot = 0.0

    def _reset_state(self) -> None:
        self.th = float(self._rng.uniform(-math.pi, math.pi))
        self.thdot = float(self._rng.uniform(-1.0, 1.0))

    def set_state(self, th: float, thdot: float) -> None:
        self.th, self.thdot = float(th), float(thdot)

    def _advance(self, a):
        self.th, self.thdot, reward = _k.pendulum_step(
            self.th, self.thdot, float(a[0]), self.g, self.m, self.l, self.dt,
            self.max_torque, self.max_speed)
        return reward, False

    def _obs(self):
        return np.array([math.cos(self.th), math.sin(self.th), self.thdot], dtype=np.float32)


class LineReacher(Env):
    """Push a unit mass on a line to rest at the origin.

    Terminal (d=1) once |x| and |v| both drop below ``tol``.
    """

    dt = 0.1
    max_force = 1.0
    max_speed = 2.0

    def __init__(self, max_steps: int = 100, start=(-1.0, 1.0), tol: float = 0.02) -> None:
        super().__init__()
        self.spec = EnvSpec(2, 1, (-self.max_force,), (self.max_force,), max_steps)
        self.start = tuple(start)
        self.tol = tol
        self.x = 0.0
        self.v = 0.0

    def _reset_state(self):
        self.x = float(self._rng.uniform(*self.start))
        self.v = 0.0

    def _advance(self, a):
        u = float(a[0])
        self.v = min(max(self.v + u * self.dt, -self.max_speed), self.max_speed)
        self.x += self.v * self.dt
        reward = -(self.x * self.x + 0.1 * self.v * self.v + 0.01 * u * u)
        return reward, abs(self.x) < self.tol and abs(self.v) < self.tol

    def _obs(self):
        return np.array([self.x, self.v], dtype=np.float32)


class SyntheticLoad(Env):
    """Contracting linear dynamics with a configurable compute cost per step."""

    def __init__(self, obs_dim: int = 8, act_dim: int = 2, step_us: float = 1000.0,
                 max_steps: int = 1000) -> None:
        super().__init__()
        self.spec = EnvSpec(obs_dim, act_dim, (-1.0,) * act_dim, (1.0,) * act_dim, max_steps)
        self.step_seconds = step_us * 1e-6
        self.state = np.zeros(obs_dim)

    def _reset_state(self):
        self.state = self._rng.uniform(-1.0, 1.0, self.spec.obs_dim)

    def _advance(self, a):
        _k.spin(self.step_seconds)
        drive = np.resize(a, self.spec.obs_dim)
        self.state = 0.9 * self.state + 0.1 * drive
        return -float(np.mean(self.state ** 2)), False

    def _obs(self):
        return self.state.astype(np.float32)


ENV_REGISTRY: dict[str, Callable[..., Env]] = {
    "pendulum": Pendulum,
    "line-reacher": LineReacher,
    "synthetic-load": SyntheticLoad,
}


def make_env(name: str, **params) -> Env:
    try:
        factory = ENV_REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENV_REGISTRY)}") from None
    return factory(**params)


def episode_return(env: Env, policy, deterministic: bool = True, seed: int | None = None,
                   rng: np.random.Generator | None = None) -> float:
    """Total reward of one full episode.

    ``policy`` is either a ``GaussianPolicyHead`` or a plain ``obs -> action`` callable.
    """
    from .nn import GaussianPolicyHead

    obs = env.reset(seed)
    if rng is None:
        rng = np.random.default_rng(seed)
    total = 0.0
    while True:
        if isinstance(policy, GaussianPolicyHead):
            a, _ = policy.sample(obs[None, :], deterministic, None if deterministic else rng)
            a = a[0]
        else:
            a = policy(obs)
        res = env.step(a)
        total += res.reward
        if res.done or res.truncated:
            return total
        obs = res.obs
