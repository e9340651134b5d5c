"""Monotonic mixing of per-agent Q values.

Hypernetworks map the context ``state ⊕ rollout`` to the mixing weights; the
weights pass through ``abs`` so Q_tot is non-decreasing in every agent's Q.
"""
from __future__ import annotations

import itertools

import numpy as np

from .tensorcore import (
    ParamGroup,
    Tensor,
    add_linear,
    as_tensor,
    elu,
    linear,
    mlp2,
    no_grad,
    stop_gradient,
)
from .tensorcore.tensor import tabs

EMBED = 32
HYPER = 64


class Mixer:
    def __init__(self, n_agents: int, state_dim: int, rollout_dim: int, rng=None, embed_dim: int = EMBED,
                 hypernet_embed: int = HYPER, group: ParamGroup | None = None):
        self.n_agents, self.state_dim, self.rollout_dim = n_agents, state_dim, rollout_dim
        self.ctx_dim = state_dim + rollout_dim
        self.embed_dim, self.hypernet_embed = embed_dim, hypernet_embed
        # monotonicity lives in these two maps; the verification suite swaps one to inject a fault
        self.weight_fn = tabs
        self.out_weight_fn = tabs
        if group is None:
            group = ParamGroup("mixer")
            c, e, h = self.ctx_dim, embed_dim, hypernet_embed
            for prefix, n_in, n_out in (
                ("hw1.l1", c, h), ("hw1.l2", h, n_agents * e),
                ("hb1", c, e),
                ("hw2.l1", c, h), ("hw2.l2", h, e),
                ("hb2.l1", c, e), ("hb2.l2", e, 1),
            ):
                add_linear(group, rng, prefix, n_in, n_out)
        self.group = group

    def clone(self) -> "Mixer":
        m = Mixer(self.n_agents, self.state_dim, self.rollout_dim, embed_dim=self.embed_dim,
                  hypernet_embed=self.hypernet_embed, group=self.group.snapshot())
        m.weight_fn, m.out_weight_fn = self.weight_fn, self.out_weight_fn
        return m

    def _hyper(self, ctx, a, b):
        p = self.group.params
        return mlp2(ctx, p[f"{a}.w"], p[f"{a}.b"], p[f"{b}.w"], p[f"{b}.b"], activation="relu")

    def context(self, state, rollout, use_global_state: bool = True, use_rollout: bool = True) -> np.ndarray:
        """Context vector; ablated parts are zero-filled so shapes never change."""
        state = np.asarray(state, dtype=np.float64)
        rollout = np.asarray(rollout, dtype=np.float64)
        if state.shape[-1] != self.state_dim or rollout.shape[-1] != self.rollout_dim:
            raise ValueError(
                f"context parts {state.shape[-1]}+{rollout.shape[-1]} do not match {self.state_dim}+{self.rollout_dim}"
            )
        if not use_global_state:
            state = np.zeros_like(state)
        if not use_rollout:
            rollout = np.zeros_like(rollout)
        return np.concatenate([state, rollout], axis=-1)

    def __call__(self, q_agents, ctx) -> Tensor:
        return mix(self, q_agents, ctx)


def mix(m: Mixer, q_agents, ctx) -> Tensor:
    """Q_tot for ``q_agents (..., N)`` under context ``(..., C)``; returns shape ``(...)``."""
    q = as_tensor(q_agents)
    # the context is data: neither the state nor the imagined rollout is trained through here
    ctx = stop_gradient(ctx)
    if q.shape[-1] != m.n_agents:
        raise ValueError(f"mixer expects {m.n_agents} agent values, got {q.shape[-1]}")
    if ctx.shape[-1] != m.ctx_dim:
        raise ValueError(f"mixer expects context dim {m.ctx_dim}, got {ctx.shape[-1]}")
    lead = q.shape[:-1]
    p = m.group.params
    e = m.embed_dim
    w1 = m.weight_fn(m._hyper(ctx, "hw1.l1", "hw1.l2")).reshape(*lead, m.n_agents, e)
    b1 = linear(ctx, p["hb1.w"], p["hb1.b"])
    hidden = elu((q.reshape(*lead, 1, m.n_agents) @ w1).reshape(*lead, e) + b1)
    w2 = m.out_weight_fn(m._hyper(ctx, "hw2.l1", "hw2.l2"))
    b2 = m._hyper(ctx, "hb2.l1", "hb2.l2")
    return (hidden * w2).sum(axis=-1) + b2.reshape(*lead)


def td_target(m_target: Mixer, q_next, ctx_next, reward, terminated, gamma: float) -> np.ndarray:
    """``r + gamma * (1 - terminated) * Q_tot^-``, as constants.

    ``q_next`` holds each target agent's value at its own greedy action, which
    is the joint maximiser of a monotonic mixer.
    """
    with no_grad():
        q_tot = mix(m_target, np.asarray(q_next.data if isinstance(q_next, Tensor) else q_next), ctx_next).data
    r = np.asarray(reward, dtype=np.float64)
    done = np.asarray(terminated, dtype=np.float64)
    return r + gamma * (1.0 - done) * q_tot


def td_loss(q_tot: Tensor, target, mask=None) -> Tensor:
    """Mean squared TD error over valid entries."""
    y = np.asarray(target.data if isinstance(target, Tensor) else target)
    d = q_tot - Tensor(y)
    sq = d * d
    if mask is None:
        if sq.size == 0:
            raise ValueError("td_loss: empty batch")
        return sq.mean()
    m = np.asarray(mask, dtype=np.float64)
    if m.sum() == 0:
        raise ValueError("td_loss: no valid transitions")
    return (sq * Tensor(m)).sum() / float(m.sum())


def joint_greedy_max(m: Mixer, q_table, ctx):
    """Exhaustive maximum of Q_tot over all joint actions (small problems only).

    ``q_table`` is ``(N, A)``; returns ``(best_joint_action, best_value)``.
    """
    q_table = np.asarray(q_table)
    n, k = q_table.shape
    joints = np.array(list(itertools.product(range(k), repeat=n)))
    qs = q_table[np.arange(n)[None, :], joints]
    with no_grad():
        vals = mix(m, qs, np.broadcast_to(ctx, (len(joints), m.ctx_dim))).data
    best = int(np.argmax(vals))
    return tuple(int(a) for a in joints[best]), float(vals[best])
