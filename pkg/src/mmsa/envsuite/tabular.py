"""Small fully enumerable Dec-POMDPs.

The model carries its own behaviour policy ``pi_i(a | o)`` so that the
likelihood of an action/observation record is well defined without any
learning in the loop.  Index ``n_obs`` in the policy table stands for "no
observation yet" (the first action is taken blind).

Text format, one record per line, ``#`` starts a comment::

    states 3
    agents 2
    actions 2
    observations 2
    horizon 4
    gamma 0.99
    I s prob                 initial distribution
    T s a1 a2 s' prob        transition
    R s a1 a2 value          reward
    O s agent obs [prob]     observation (prob defaults to 1)
    P agent obs action prob  behaviour policy; obs "-" before the first observation
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import DecPomdpSpec, Env, StepResult

STOCHASTIC_TOL = 1e-12


class TabularFormatError(ValueError):
    pass


@dataclass
class TabularDecPomdp:
    init: np.ndarray  # (S,)
    T: np.ndarray  # (S, J, S), J = n_actions ** n_agents, row-major joint index
    O: np.ndarray  # (S, N, n_obs)
    R: np.ndarray  # (S, J)
    policy: np.ndarray  # (N, n_obs + 1, n_actions)
    horizon: int = 4
    gamma: float = 0.99

    def __post_init__(self):
        self.init = np.asarray(self.init, dtype=np.float64)
        self.T = np.asarray(self.T, dtype=np.float64)
        self.O = np.asarray(self.O, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.policy = np.asarray(self.policy, dtype=np.float64)
        s = self.n_states
        if self.T.shape != (s, self.n_joint, s):
            raise ValueError(f"T has shape {self.T.shape}, expected {(s, self.n_joint, s)}")
        if self.O.shape[:2] != (s, self.n_agents) or self.R.shape != (s, self.n_joint):
            raise ValueError("O or R shape inconsistent with the state/agent counts")
        if self.policy.shape != (self.n_agents, self.n_obs + 1, self.n_actions):
            raise ValueError(f"policy has shape {self.policy.shape}")
        for name, arr in (("initial distribution", self.init), ("T", self.T), ("O", self.O), ("policy", self.policy)):
            if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=-1) - 1.0) > STOCHASTIC_TOL):
                raise ValueError(f"{name} rows must be probability vectors (tolerance {STOCHASTIC_TOL})")

    @property
    def n_states(self):
        return len(self.init)

    @property
    def n_agents(self):
        return self.policy.shape[0]

    @property
    def n_actions(self):
        return self.policy.shape[2]

    @property
    def n_obs(self):
        return self.O.shape[2]

    @property
    def n_joint(self):
        return self.n_actions ** self.n_agents

    def joint_index(self, joint_action) -> int:
        return int(np.ravel_multi_index(tuple(int(a) for a in joint_action), (self.n_actions,) * self.n_agents))

    def obs_likelihood(self, joint_obs) -> np.ndarray:
        """p(o | s) for every state s."""
        return np.prod(self.O[:, np.arange(self.n_agents), np.asarray(joint_obs)], axis=1)

    def log_policy(self, joint_obs, joint_action) -> float:
        """sum_i log pi_i(a_i | o_i); ``joint_obs`` None means before the first observation."""
        obs = [self.n_obs] * self.n_agents if joint_obs is None else list(joint_obs)
        return float(sum(np.log(self.policy[i, obs[i], joint_action[i]]) for i in range(self.n_agents)))

    def sample_record(self, rng, steps=None):
        """Simulate the behaviour policy: actions ``(steps+1, N)``, observations ``(steps, N)``."""
        steps = self.horizon if steps is None else steps
        s = rng.choice(self.n_states, p=self.init)
        actions, observations = [], []
        obs = None
        for t in range(steps + 1):
            idx = [self.n_obs] * self.n_agents if obs is None else obs
            a = [rng.choice(self.n_actions, p=self.policy[i, idx[i]]) for i in range(self.n_agents)]
            actions.append(a)
            if t == steps:
                break
            s = rng.choice(self.n_states, p=self.T[s, self.joint_index(a)])
            obs = [rng.choice(self.n_obs, p=self.O[s, i]) for i in range(self.n_agents)]
            observations.append(obs)
        return np.array(actions), np.array(observations).reshape(steps, self.n_agents)


def _dirichlet(rng, shape, concentration=1.0):
    return rng.dirichlet(np.full(shape[-1], concentration), size=shape[:-1])


def random_tabular(rng, n_states=3, n_agents=2, n_actions=2, n_obs=2, horizon=4, deterministic_obs=False):
    j = n_actions ** n_agents
    init = _dirichlet(rng, (n_states,))
    if deterministic_obs:
        O = np.zeros((n_states, n_agents, n_obs))
        for s in range(n_states):
            for i in range(n_agents):
                O[s, i, rng.integers(n_obs)] = 1.0
    else:
        O = _dirichlet(rng, (n_states, n_agents, n_obs))
    return TabularDecPomdp(
        init=init,
        T=_dirichlet(rng, (n_states, j, n_states)),
        O=O,
        R=rng.normal(size=(n_states, j)),
        policy=_dirichlet(rng, (n_agents, n_obs + 1, n_actions)),
        horizon=horizon,
    )


# -- text format -------------------------------------------------------------


def parse_tabular(text: str) -> TabularDecPomdp:
    header = {}
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        if key in ("states", "agents", "actions", "observations", "horizon", "gamma"):
            if len(parts) != 2:
                raise TabularFormatError(f"line {lineno}: {key} takes one value")
            header[key] = float(parts[1]) if key == "gamma" else int(parts[1])
        elif key in ("I", "T", "R", "O", "P"):
            rows.append((lineno, key, parts[1:]))
        else:
            raise TabularFormatError(f"line {lineno}: unknown record {key!r}")
    for key in ("states", "agents", "actions", "observations"):
        if key not in header:
            raise TabularFormatError(f"missing header line {key!r}")
    s, n, k, m = header["states"], header["agents"], header["actions"], header["observations"]
    j = k ** n
    init = np.zeros(s)
    T = np.zeros((s, j, s))
    R = np.zeros((s, j))
    O = np.zeros((s, n, m))
    P = np.zeros((n, m + 1, k))
    for lineno, key, f in rows:
        try:
            if key == "I":
                init[int(f[0])] = float(f[1])
            elif key == "T":
                a = np.ravel_multi_index(tuple(int(x) for x in f[1:1 + n]), (k,) * n)
                T[int(f[0]), a, int(f[1 + n])] = float(f[2 + n])
            elif key == "R":
                a = np.ravel_multi_index(tuple(int(x) for x in f[1:1 + n]), (k,) * n)
                R[int(f[0]), a] = float(f[1 + n])
            elif key == "O":
                O[int(f[0]), int(f[1]), int(f[2])] = float(f[3]) if len(f) > 3 else 1.0
            else:
                obs = m if f[1] == "-" else int(f[1])
                P[int(f[0]), obs, int(f[2])] = float(f[3])
        except (IndexError, ValueError) as exc:
            raise TabularFormatError(f"line {lineno}: malformed {key} record ({exc})") from None
    if not P.any():
        P[:] = 1.0 / k
    try:
        return TabularDecPomdp(init, T, O, R, P, horizon=header.get("horizon", 4), gamma=header.get("gamma", 0.99))
    except ValueError as exc:
        raise TabularFormatError(str(exc)) from None


def dump_tabular(model: TabularDecPomdp) -> str:
    n, k = model.n_agents, model.n_actions
    lines = [f"states {model.n_states}", f"agents {n}", f"actions {k}", f"observations {model.n_obs}",
             f"horizon {model.horizon}", f"gamma {float(model.gamma)!r}"]
    joints = list(np.ndindex(*(k,) * n))
    lines += [f"I {s} {float(p)!r}" for s, p in enumerate(model.init) if p]
    for s in range(model.n_states):
        for ji, ja in enumerate(joints):
            acts = " ".join(map(str, ja))
            lines += [f"T {s} {acts} {s2} {float(p)!r}" for s2, p in enumerate(model.T[s, ji]) if p]
            lines.append(f"R {s} {acts} {float(model.R[s, ji])!r}")
        for i in range(n):
            lines += [f"O {s} {i} {o} {float(p)!r}" for o, p in enumerate(model.O[s, i]) if p]
    for i in range(n):
        for o in range(model.n_obs + 1):
            label = "-" if o == model.n_obs else str(o)
            lines += [f"P {i} {label} {a} {float(p)!r}" for a, p in enumerate(model.policy[i, o]) if p]
    return "\n".join(lines) + "\n"


def load_tabular(path) -> TabularDecPomdp:
    with open(path, encoding="utf-8") as fh:
        return parse_tabular(fh.read())


class TabularEnv(Env):
    """Step a tabular model; observations and state are one-hot vectors."""

    def __init__(self, model: TabularDecPomdp, name: str = "tabular"):
        self.model, self.name = model, name
        self.spec = DecPomdpSpec(
            n_agents=model.n_agents,
            obs_dim=model.n_obs,
            state_dim=model.n_states,
            n_actions=model.n_actions,
            episode_limit=model.horizon,
            gamma=model.gamma,
        )
        self._rng = np.random.default_rng()
        self.state = 0
        self._t = 0

    def _result(self, reward, truncated):
        m = self.model
        obs = np.zeros((m.n_agents, m.n_obs))
        for i in range(m.n_agents):
            obs[i, self._rng.choice(m.n_obs, p=m.O[self.state, i])] = 1.0
        return StepResult(
            observations=obs,
            global_state=np.eye(m.n_states)[self.state],
            reward=float(reward),
            terminated=False,
            truncated=truncated,
            avail_actions=np.ones((m.n_agents, m.n_actions), dtype=bool),
        )

    def reset(self, seed=None) -> StepResult:
        self._rng = np.random.default_rng(seed)
        self.state = int(self._rng.choice(self.model.n_states, p=self.model.init))
        self._t = 0
        return self._result(0.0, False)

    def step(self, joint_action) -> StepResult:
        acts = self._check_actions(joint_action, np.ones((self.spec.n_agents, self.spec.n_actions), dtype=bool))
        j = self.model.joint_index(acts)
        reward = self.model.R[self.state, j]
        self.state = int(self._rng.choice(self.model.n_states, p=self.model.T[self.state, j]))
        self._t += 1
        return self._result(reward, self._t >= self.spec.episode_limit)
