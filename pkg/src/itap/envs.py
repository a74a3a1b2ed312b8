"""Toy stochastic continuous-control environments with latent perturbation regimes.

Each episode is governed by a hidden maximum-perturbation magnitude; the
instantaneous horizontal force follows a clipped uniform random walk, so the
regime is only inferable from interaction history.  A POMDP variant zeroes
the goal coordinates of the observation.

PointMassEnv is the environment all headline numbers use; PushChainEnv is a
one-dimensional sibling kept cheap for unit tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Episode

__all__ = [
    "LatentRegime",
    "PerturbationState",
    "PomdpMask",
    "BehaviorPolicy",
    "PointMassEnv",
    "PushChainEnv",
    "perturbation_update",
    "env_step",
    "apply_observation_mask",
    "scripted_behavior_action",
    "generate_offline_dataset",
    "make_env",
]

# Force-to-acceleration divisor: calibrated once so the expert's mean return
# drops roughly 30% between the calm regime and max perturbation 5.
F_SCALE = 8.0


@dataclass(frozen=True)
class LatentRegime:
    """Hidden per-episode task parameter: the walk's magnitude ceiling."""

    f_max: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.f_max) or self.f_max < 0:
            raise ValueError(f"f_max must be finite and >= 0, got {self.f_max}")


@dataclass(frozen=True)
class PerturbationState:
    """Current horizontal force of the random walk."""

    f_t: float = 0.0


@dataclass(frozen=True)
class PomdpMask:
    """Observation coordinates to zero out at every step."""

    masked_indices: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "masked_indices", frozenset(int(i) for i in self.masked_indices))


@dataclass(frozen=True)
class BehaviorPolicy:
    """Scripted data-collection controller of a given quality tier."""

    kind: str = "expert"  # expert | medium | random
    noise_scale: float = 0.05
    kp: float = 2.0
    kd: float = 1.6

    def __post_init__(self):
        if self.kind not in ("expert", "medium", "random"):
            raise ValueError(f"unknown policy kind: {self.kind}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")

    @classmethod
    def tier(cls, kind: str) -> "BehaviorPolicy":
        base = cls()
        if kind == "expert":
            return base
        if kind == "medium":
            return cls(kind="medium", noise_scale=3 * base.noise_scale, kp=0.5 * base.kp, kd=0.5 * base.kd)
        if kind == "random":
            return cls(kind="random", noise_scale=0.0)
        raise ValueError(f"unknown policy tier: {kind}")


def perturbation_update(
    state: PerturbationState, regime: LatentRegime, rng: np.random.Generator
) -> PerturbationState:
    """One step of the uniform random walk, hard-clipped to +-f_max."""
    lim = 0.1 * regime.f_max
    delta = rng.uniform(-lim, lim) if lim > 0 else 0.0
    return PerturbationState(f_t=float(np.clip(state.f_t + delta, -regime.f_max, regime.f_max)))


def apply_observation_mask(obs: np.ndarray, mask: PomdpMask) -> np.ndarray:
    """Zero the masked coordinates; idempotent."""
    out = np.asarray(obs, dtype=np.float32).copy()
    for i in mask.masked_indices:
        out[i] = 0.0
    return out


class PointMassEnv:
    """2-D point mass pushed toward a goal under a hidden horizontal force.

    Observation is [position, velocity, goal] (6 values); actions are
    accelerations in [-1, 1]^2.  Reward is negative goal distance minus a
    small action cost, so per-step reward is bounded below by
    -(diameter + 0.02).
    """

    obs_dim = 6
    act_dim = 2

    def __init__(
        self,
        regime: LatentRegime = LatentRegime(0.0),
        dt: float = 0.1,
        max_steps: int = 60,
        bound: float = 1.0,
        mask: PomdpMask = PomdpMask(),
        f_scale: float = F_SCALE,
    ):
        self.regime = regime
        self.dt = dt
        self.max_steps = max_steps
        self.bound = bound
        self.mask = mask
        self.f_scale = f_scale
        self.position = np.zeros(2)
        self.velocity = np.zeros(2)
        self.goal = np.zeros(2)
        self.perturbation = PerturbationState(0.0)
        self.steps = 0
        self.done = True
        self._rng = np.random.default_rng(0)

    def reset(self, seed: int | None = None, goal: np.ndarray | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.position = self._rng.uniform(-0.8, 0.8, size=2) * self.bound
        self.velocity = np.zeros(2)
        self.goal = (
            np.asarray(goal, dtype=np.float64)
            if goal is not None
            else self._rng.uniform(-0.8, 0.8, size=2) * self.bound
        )
        self.perturbation = PerturbationState(0.0)
        self.steps = 0
        self.done = False
        return self._observe()

    def _observe(self) -> np.ndarray:
        obs = np.concatenate([self.position, self.velocity, self.goal]).astype(np.float32)
        return apply_observation_mask(obs, self.mask)

    def step(self, action: np.ndarray):
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        force_acc = np.array([self.perturbation.f_t / self.f_scale, 0.0])
        self.velocity = self.velocity + self.dt * (a + force_acc)
        self.position = np.clip(
            self.position + self.dt * self.velocity, -self.bound, self.bound
        )
        reward = -float(np.linalg.norm(self.position - self.goal)) - 0.01 * float((a**2).sum())
        self.perturbation = perturbation_update(self.perturbation, self.regime, self._rng)
        self.steps += 1
        self.done = self.steps >= self.max_steps
        return self._observe(), reward, self.done


class PushChainEnv:
    """1-D cart pushed along a line toward a goal; same perturbation law.

    Kept deliberately tiny (obs [position, velocity, goal], scalar action)
    as a cheap environment for unit tests.
    """

    obs_dim = 3
    act_dim = 1

    def __init__(
        self,
        regime: LatentRegime = LatentRegime(0.0),
        dt: float = 0.1,
        max_steps: int = 60,
        bound: float = 1.0,
        mask: PomdpMask = PomdpMask(),
        f_scale: float = F_SCALE,
    ):
        self.regime = regime
        self.dt = dt
        self.max_steps = max_steps
        self.bound = bound
        self.mask = mask
        self.f_scale = f_scale
        self.position = 0.0
        self.velocity = 0.0
        self.goal = 0.0
        self.perturbation = PerturbationState(0.0)
        self.steps = 0
        self.done = True
        self._rng = np.random.default_rng(0)

    def reset(self, seed: int | None = None, goal: float | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.position = float(self._rng.uniform(-0.8, 0.8)) * self.bound
        self.velocity = 0.0
        self.goal = float(goal) if goal is not None else float(self._rng.uniform(-0.8, 0.8)) * self.bound
        self.perturbation = PerturbationState(0.0)
        self.steps = 0
        self.done = False
        return self._observe()

    def _observe(self) -> np.ndarray:
        obs = np.array([self.position, self.velocity, self.goal], dtype=np.float32)
        return apply_observation_mask(obs, self.mask)

    def step(self, action):
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
        self.velocity = self.velocity + self.dt * (a + self.perturbation.f_t / self.f_scale)
        self.position = float(
            np.clip(self.position + self.dt * self.velocity, -self.bound, self.bound)
        )
        reward = -abs(self.position - self.goal) - 0.01 * a * a
        self.perturbation = perturbation_update(self.perturbation, self.regime, self._rng)
        self.steps += 1
        self.done = self.steps >= self.max_steps
        return self._observe(), reward, self.done


def env_step(env, action):
    """Functional alias for the environment step method."""
    return env.step(action)


def scripted_behavior_action(
    policy: BehaviorPolicy, obs: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Data-collection action: PD drive toward the goal, or uniform noise.

    The observation layout is [position(k), velocity(k), goal(k)].
    """
    obs = np.asarray(obs, dtype=np.float64)
    k = obs.shape[0] // 3
    if policy.kind == "random":
        return rng.uniform(-1.0, 1.0, size=k)
    pos, vel, goal = obs[:k], obs[k : 2 * k], obs[2 * k :]
    drive = np.clip(policy.kp * (goal - pos) - policy.kd * vel, -1.0, 1.0)
    if policy.noise_scale > 0:
        drive = drive + policy.noise_scale * rng.standard_normal(k)
    return drive


def make_env(name: str, regime: LatentRegime, mask: PomdpMask = PomdpMask(), **kw):
    if name == "pointmass":
        return PointMassEnv(regime=regime, mask=mask, **kw)
    if name == "pushchain":
        return PushChainEnv(regime=regime, mask=mask, **kw)
    raise ValueError(f"unknown environment: {name}")


def rollout(env, policy: BehaviorPolicy, rng: np.random.Generator, env_seed: int) -> Episode:
    observations, actions, rewards = [], [], []
    obs = env.reset(seed=env_seed)
    done = False
    while not done:
        act = scripted_behavior_action(policy, obs, rng)
        observations.append(obs)
        nxt, rew, done = env.step(act)
        actions.append(np.clip(act, -1.0, 1.0))
        rewards.append(rew)
        obs = nxt
    return Episode(
        observations=np.stack(observations),
        actions=np.stack(actions),
        rewards=np.array(rewards),
        regime_label=env.regime.f_max,
    )


def generate_offline_dataset(
    env_name: str,
    regimes,
    tiers,
    episodes_per_cell: int,
    seed: int,
    mask: PomdpMask = PomdpMask(),
    **env_kw,
) -> list[Episode]:
    """Deterministic pooled dataset: one block of episodes per (regime, tier) cell."""
    if episodes_per_cell < 1:
        raise ValueError("episodes_per_cell must be >= 1")
    episodes = []
    root = np.random.SeedSequence(seed)
    for ri, f_max in enumerate(regimes):
        for ti, tier in enumerate(tiers):
            policy = BehaviorPolicy.tier(tier)
            for e in range(episodes_per_cell):
                ss = np.random.SeedSequence(seed, spawn_key=(ri, ti, e))
                pol_rng = np.random.default_rng(ss)
                env = make_env(env_name, LatentRegime(float(f_max)), mask=mask, **env_kw)
                env_seed = int(np.random.default_rng(
                    np.random.SeedSequence(seed, spawn_key=(ri, ti, e, 1))
                ).integers(0, 2**63 - 1))
                episodes.append(rollout(env, policy, pol_rng, env_seed))
    return episodes
