"""Recurrent per-agent value network with shared parameters.

For agent i at step t the GRU consumes ``obs ⊕ onehot(last action) ⊕ onehot(i)``
and yields ``h``.  Each candidate action ``a`` is scored by a two-layer head on
``[z_o, z_oa(a), phi_oa(a), h]`` where the three embeddings come from the
(frozen, from this network's point of view) SALE encoders.

Arrays are laid out with the agent axis second to last before features:
``(..., n_agents, features)``, and candidate actions add one more axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envsuite.base import DecPomdpSpec
from .sale import PassthroughEncoders
from .tensorcore import (
    DimensionError,
    ParamGroup,
    Tensor,
    action_value_head,
    add_gru,
    as_tensor,
    elu,
    linear,
    no_grad,
    one_hot,
    recurrent_cell,
    stack,
    uniform_init,
)

HIDDEN = 64


@dataclass
class EpsilonSchedule:
    start: float = 1.0
    finish: float = 0.05
    anneal_steps: int = 50_000
    current_step: int = 0

    def value(self, t=None) -> float:
        t = self.current_step if t is None else t
        if self.anneal_steps <= 0:
            return self.finish
        frac = min(max(t, 0) / self.anneal_steps, 1.0)
        return self.start + frac * (self.finish - self.start)


def epsilon_at(schedule: EpsilonSchedule, t: int) -> float:
    return schedule.value(t)


def masked_argmax(q, avail=None) -> np.ndarray:
    """Greedy action per row; unavailable actions never win, ties go to the lowest index."""
    q = np.asarray(q, dtype=np.float64)
    if avail is not None:
        q = np.where(np.asarray(avail, dtype=bool), q, -np.inf)
    return np.argmax(q, axis=-1)


def select_actions(q_values, avail, epsilon: float, rng: np.random.Generator, greedy: bool = False) -> np.ndarray:
    """Epsilon-greedy joint action from per-agent Q values ``(n_agents, n_actions)``."""
    q_values = np.asarray(q_values)
    avail = np.asarray(avail, dtype=bool)
    if not avail.any(axis=-1).all():
        raise ValueError("every agent needs at least one available action")
    eps = 0.0 if greedy else float(epsilon)
    acts = masked_argmax(q_values, avail)
    for i in range(len(acts)):
        if eps > 0.0 and rng.random() < eps:
            choices = np.flatnonzero(avail[i])
            acts[i] = choices[rng.integers(len(choices))]
    return acts


class AgentNetwork:
    """Shared-parameter agent network; ``enc`` supplies observation embeddings."""

    def __init__(self, spec: DecPomdpSpec, enc, rng=None, hidden: int = HIDDEN, group: ParamGroup | None = None):
        self.spec, self.enc, self.hidden = spec, enc, hidden
        n, o, k = spec.n_agents, spec.obs_dim, spec.n_actions
        self.in_dim = o + k + n
        zd = enc.z_dim
        if group is None:
            group = ParamGroup("agent")
            add_gru(group, rng, "gru", self.in_dim, hidden)
            fan = 3 * zd + hidden
            for key, rows in (("q1.wz", zd), ("q1.wza", zd), ("q1.wphi", zd), ("q1.wh", hidden)):
                group.add(key, uniform_init(rng, fan, (rows, hidden)))
            group.add("q1.b", np.zeros(hidden))
            group.add("q2.w", uniform_init(rng, hidden, (hidden, 1)))
            group.add("q2.b", np.zeros(1))
        self.group = group

    def clone(self) -> "AgentNetwork":
        """Independent deep copy of the parameters (target network, eval snapshots)."""
        return AgentNetwork(self.spec, self.enc, hidden=self.hidden, group=self.group.snapshot())

    # -- pieces --------------------------------------------------------
    def init_hidden(self, lead=()) -> np.ndarray:
        return np.zeros(tuple(lead) + (self.spec.n_agents, self.hidden))

    def rnn_inputs(self, obs, last_actions) -> np.ndarray:
        """``obs (..., N, O)``, ``last_actions (..., N)`` with -1 meaning none."""
        obs = np.asarray(obs, dtype=np.float64)
        n, k = self.spec.n_agents, self.spec.n_actions
        if obs.shape[-2:] != (n, self.spec.obs_dim):
            raise DimensionError(f"observations shape {obs.shape} does not end with {(n, self.spec.obs_dim)}")
        la = np.asarray(last_actions)
        last = one_hot(np.maximum(la, 0), k) * (la >= 0)[..., None]
        ids = np.broadcast_to(np.eye(n), obs.shape[:-2] + (n, n))
        return np.concatenate([obs, last, ids], axis=-1)

    def step_hidden(self, x, h_prev) -> Tensor:
        return recurrent_cell(x, h_prev, self.group.params)

    def embeddings(self, obs):
        """(z_o, z_oa, phi_oa) for every candidate action, as constants.

        Shapes: ``(..., N, Z)``, ``(..., N, A, Z)``, ``(..., N, A, Z)``.
        """
        obs = np.asarray(obs, dtype=np.float64)
        k = self.spec.n_actions
        with no_grad():
            z = self.enc.encode_state(obs).data
            acts = np.broadcast_to(np.arange(k)[:, None], obs.shape[:-1] + (k, 1))
            rep = np.broadcast_to(obs[..., None, :], obs.shape[:-1] + (k, obs.shape[-1]))
            if isinstance(self.enc, PassthroughEncoders):
                _, z_sa, phi = self.enc.embed(rep, acts)
            else:
                # f does not depend on the action, so it runs once per observation
                z_sa = self.enc.encode_state_action(np.broadcast_to(z[..., None, :], z.shape[:-1] + (k, z.shape[-1])), acts)
                phi = self.enc.linear_feature(rep, acts)
        return z, z_sa.data, phi.data

    def q_values(self, h, z_o, z_oa, phi_oa) -> Tensor:
        """Q for every candidate action from hidden ``(..., N, H)`` and constant embeddings."""
        p = self.group.params
        return action_value_head(h, z_o, z_oa, phi_oa, p["q1.wz"], p["q1.wza"], p["q1.wphi"], p["q1.wh"],
                                 p["q1.b"], p["q2.w"], p["q2.b"])

    # -- single-step forward -------------------------------------------
    def forward_step(self, obs, last_actions, h_prev):
        """One decision step for all agents: ``(q (..., N, A), h_next)``."""
        x = self.rnn_inputs(obs, last_actions)
        h = self.step_hidden(x, h_prev)
        z_o, z_oa, phi = self.embeddings(obs)
        return self.q_values(h, z_o, z_oa, phi), h

    # -- teacher-forced sequence ---------------------------------------
    def unroll(self, obs, actions):
        """Hidden states for a time-major batch.

        ``obs`` is ``(T+1, B, N, O)`` and ``actions`` ``(T, B, N)``; returns a
        tensor ``(T+1, B, N, H)`` where entry t has consumed obs_t and a_{t-1}.
        """
        obs = np.asarray(obs)
        steps, b = obs.shape[0], obs.shape[1]
        n = self.spec.n_agents
        last = np.concatenate([np.full((1, b, n), -1), np.asarray(actions)[: steps - 1]], axis=0)
        x = self.rnn_inputs(obs, last)
        h = Tensor(self.init_hidden((b,)))
        hs = []
        for t in range(steps):
            h = self.step_hidden(x[t], h)
            hs.append(h)
        return stack(hs, axis=0)


def agent_forward(net: AgentNetwork, obs, last_action, agent_id: int, hidden_prev):
    """Q values and next hidden state for a single agent."""
    n = net.spec.n_agents
    if not 0 <= agent_id < n:
        raise DimensionError(f"agent_id {agent_id} outside [0, {n})")
    obs = np.asarray(obs, dtype=np.float64)
    x = np.concatenate([
        obs,
        one_hot(max(last_action, 0), net.spec.n_actions) * (last_action >= 0),
        one_hot(agent_id, n),
    ])
    h = net.step_hidden(x, as_tensor(hidden_prev))
    z_o, z_oa, phi = net.embeddings(obs[None, :])
    q = net.q_values(h.reshape(1, net.hidden), z_o, z_oa, phi)
    return q.reshape(net.spec.n_actions), h


def joint_forward(net: AgentNetwork, observations, last_actions, hidden_prev, avail=None):
    """All agents at once: ``(q (N, A), h_t (N*H,), greedy joint action)``."""
    observations = np.asarray(observations)
    if observations.shape[0] != net.spec.n_agents:
        raise DimensionError(f"expected {net.spec.n_agents} agents, got {observations.shape[0]}")
    q, h = net.forward_step(observations, last_actions, hidden_prev)
    return q, h, masked_argmax(q.data, avail)
