from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ContractViolation(ValueError):
    """An agent issued an invalid or unavailable action."""


class UnsupportedEnvError(TypeError):
    pass


@dataclass(frozen=True)
class DecPomdpSpec:
    n_agents: int
    obs_dim: int
    state_dim: int
    n_actions: int
    episode_limit: int
    gamma: float = 0.99

    def __post_init__(self):
        if self.n_agents < 1 or self.n_actions < 1 or self.episode_limit < 1:
            raise ValueError(f"invalid Dec-POMDP spec: {self}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")


@dataclass
class StepResult:
    observations: np.ndarray  # (n_agents, obs_dim)
    global_state: np.ndarray  # (state_dim,)
    reward: float
    terminated: bool
    truncated: bool
    avail_actions: np.ndarray  # (n_agents, n_actions) bool
    info: dict = field(default_factory=dict)

    @property
    def done(self) -> bool:
        return self.terminated or self.truncated


class Env:
    """Common surface of the in-repo environments."""

    spec: DecPomdpSpec
    name = "env"

    def reset(self, seed=None) -> StepResult:
        raise NotImplementedError

    def step(self, joint_action) -> StepResult:
        raise NotImplementedError

    def _check_actions(self, joint_action, avail):
        acts = np.asarray(joint_action)
        n, k = self.spec.n_agents, self.spec.n_actions
        if acts.shape != (n,):
            raise ContractViolation(f"expected {n} actions, got shape {acts.shape}")
        for i, a in enumerate(acts):
            if int(a) != a or not 0 <= a < k:
                raise ContractViolation(f"agent {i}: action {a!r} outside [0, {k})")
            if not avail[i, int(a)]:
                raise ContractViolation(f"agent {i}: action {int(a)} is not available")
        return acts.astype(np.int64)


def discounted_return(rewards, gamma: float) -> float:
    g = 0.0
    for r in reversed(list(rewards)):
        g = float(r) + gamma * g
    return g
