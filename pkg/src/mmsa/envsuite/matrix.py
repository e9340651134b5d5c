"""Single-step cooperative matrix games."""
from __future__ import annotations

import itertools

import numpy as np

from .base import DecPomdpSpec, Env, StepResult, UnsupportedEnvError

COORDINATION = np.array([[1.0, 0.0], [0.0, 1.0]])
CLIMBING = np.array([[11.0, -30.0, 0.0], [-30.0, 7.0, 6.0], [0.0, 0.0, 5.0]])


class MatrixGame(Env):
    """One joint action, one shared payoff, then the episode ends.

    Each agent observes a constant 1 followed by its own one-hot id.
    """

    def __init__(self, payoff, name="matrix", gamma=0.99):
        self.payoff = np.asarray(payoff, dtype=np.float64)
        n = self.payoff.ndim
        k = self.payoff.shape[0]
        if any(s != k for s in self.payoff.shape):
            raise ValueError(f"payoff tensor must be hyper-cubic, got {self.payoff.shape}")
        self.name = name
        self.spec = DecPomdpSpec(n_agents=n, obs_dim=1 + n, state_dim=1, n_actions=k, episode_limit=1, gamma=gamma)
        self._obs = np.concatenate([np.ones((n, 1)), np.eye(n)], axis=1)
        self._t = 0

    def _result(self, reward, terminated):
        n, k = self.spec.n_agents, self.spec.n_actions
        return StepResult(
            observations=self._obs.copy(),
            global_state=np.ones(1),
            reward=float(reward),
            terminated=terminated,
            truncated=False,
            avail_actions=np.ones((n, k), dtype=bool),
        )

    def reset(self, seed=None) -> StepResult:
        self._t = 0
        return self._result(0.0, False)

    def step(self, joint_action) -> StepResult:
        acts = self._check_actions(joint_action, np.ones((self.spec.n_agents, self.spec.n_actions), dtype=bool))
        self._t += 1
        return self._result(self.payoff[tuple(acts)], True)

    def optimum(self) -> float:
        return float(self.payoff.max())


def coordination_game(**kw) -> MatrixGame:
    return MatrixGame(COORDINATION, name="coordination", **kw)


def climbing_game(**kw) -> MatrixGame:
    return MatrixGame(CLIMBING, name="climbing", **kw)


def enumerate_joint_returns(env: Env) -> dict[tuple, float]:
    """Exhaustive joint-action table of a single-step game, by actually stepping it."""
    if env.spec.episode_limit != 1:
        raise UnsupportedEnvError(f"{env.name}: joint-return enumeration needs a single-step game")
    table = {}
    for joint in itertools.product(range(env.spec.n_actions), repeat=env.spec.n_agents):
        env.reset(seed=0)
        res = env.step(np.array(joint))
        if not res.done:
            raise UnsupportedEnvError(f"{env.name}: episode did not end after one step")
        table[joint] = res.reward
    return table
