"""Latent imagination model.

A posterior ``q(s | h_t)`` infers a latent state from the agents' joint hidden
state.  The latent is embedded into the triple ``(z_sa, z, phi)`` by the latent
SALE encoders; VAE-1 maps the triple to a predicted triple', whose ``z'`` part
becomes the next latent, and VAE-2 maps triple' to the next joint hidden state.
A learned prior conditioned on the previous triple regularises the posterior.

Batched tensors use leading axes freely; the last axis is always features.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agentnet import AgentNetwork, masked_argmax
from .tensorcore import (
    GaussianDiag,
    ParamGroup,
    Tensor,
    add_linear,
    as_tensor,
    concat,
    kl_diag_gaussian,
    mlp2,
    no_grad,
    stop_gradient,
    take,
)

LATENT = 16
HIDDEN = 64


def kl_balanced(q: GaussianDiag, p: GaussianDiag, alpha: float = 0.8) -> Tensor:
    """alpha * KL(q || sg(p)) + (1 - alpha) * KL(sg(q) || p).

    Same value as the plain KL; the posterior gets an alpha share of the
    gradient and the prior the rest.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return kl_diag_gaussian(q, p.detach()) * alpha + kl_diag_gaussian(q.detach(), p) * (1.0 - alpha)


def standard_kl(d: GaussianDiag) -> Tensor:
    """KL(d || N(0, I)) per leading index."""
    return kl_diag_gaussian(d, GaussianDiag.standard(d.mean.shape))


@dataclass
class WorldModelStep:
    posterior: GaussianDiag | None
    prior: GaussianDiag | None
    s_hat: Tensor
    triple: Tensor
    triple_recon: Tensor
    s_next: Tensor
    h_next: Tensor
    a_hat: np.ndarray
    vae_latents: tuple = ()


@dataclass
class RolloutResult:
    latents: list
    aggregated: np.ndarray
    horizon: int
    steps: list = field(default_factory=list)


class WorldModel:
    """Parameters of the posterior, prior and the two VAEs (group ``world_model``).

    ``enc`` is the latent-space SALE encoder (joint actions); ``agent`` is
    used only to pick imagined greedy actions.
    """

    def __init__(self, n_agents: int, n_actions: int, enc, agent: AgentNetwork | None, rng=None,
                 latent: int = LATENT, hidden: int = HIDDEN, agent_hidden: int = 64, group: ParamGroup | None = None):
        if enc.z_dim != latent:
            raise ValueError("the predicted embedding doubles as the next latent, so z_dim must equal the latent size")
        self.n_agents, self.n_actions = n_agents, n_actions
        self.enc, self.agent = enc, agent
        self.latent, self.z_dim = latent, enc.z_dim
        self.h_dim = n_agents * agent_hidden
        self.triple_dim = 3 * enc.z_dim
        if group is None:
            group = ParamGroup("world_model")
            t, h, L = self.triple_dim, hidden, latent
            for prefix, n_in, n_out in (
                ("post.l1", self.h_dim, h), ("post.l2", h, 2 * L),
                ("prior.l1", t, h), ("prior.l2", h, 2 * L),
                ("v1.enc1", t, h), ("v1.enc2", h, 2 * L), ("v1.dec1", L, h), ("v1.dec2", h, t),
                ("v2.enc1", t, h), ("v2.enc2", h, 2 * L), ("v2.dec1", L, h), ("v2.dec2", h, self.h_dim),
            ):
                add_linear(group, rng, prefix, n_in, n_out)
        self.group = group

    # -- building blocks -----------------------------------------------
    def _mlp(self, x, a, b):
        p = self.group.params
        return mlp2(x, p[f"{a}.w"], p[f"{a}.b"], p[f"{b}.w"], p[f"{b}.b"])

    def _gauss(self, x, a, b) -> GaussianDiag:
        out = self._mlp(x, a, b)
        L = self.latent
        return GaussianDiag.from_raw(out[..., :L], out[..., L:])

    def posterior(self, h) -> GaussianDiag:
        return self._gauss(as_tensor(h), "post.l1", "post.l2")

    def prior(self, triple_prev) -> GaussianDiag:
        return self._gauss(as_tensor(triple_prev), "prior.l1", "prior.l2")

    def triple(self, s_hat, actions) -> Tensor:
        """``z_sa ⊕ z ⊕ phi`` of a latent and joint action; encoder parameters are frozen here."""
        z, z_sa, phi = self.enc.embed(s_hat, actions, frozen=True)
        return concat([z_sa, z, phi], axis=-1)

    def split_triple(self, triple):
        z = self.z_dim
        return triple[..., :z], triple[..., z:2 * z], triple[..., 2 * z:]

    def vae1(self, triple, noise):
        d = self._gauss(triple, "v1.enc1", "v1.enc2")
        return d, self._mlp(d.sample(noise), "v1.dec1", "v1.dec2")

    def vae2(self, triple_next, noise):
        d = self._gauss(triple_next, "v2.enc1", "v2.enc2")
        return d, self._mlp(d.sample(noise), "v2.dec1", "v2.dec2")

    def noise(self, rng, lead) -> np.ndarray:
        return rng.standard_normal(tuple(lead) + (self.latent,))

    def clone(self) -> "WorldModel":
        return WorldModel(self.n_agents, self.n_actions, self.enc, self.agent, latent=self.latent,
                          agent_hidden=self.h_dim // self.n_agents, group=self.group.snapshot())

    # -- imagination -----------------------------------------------------
    def greedy_actions(self, h_joint, obs_emb, avail=None) -> np.ndarray:
        """Greedy joint action of the agent network evaluated on a (possibly imagined) joint hidden state."""
        h = np.asarray(h_joint.data if isinstance(h_joint, Tensor) else h_joint)
        lead = h.shape[:-1]
        h = h.reshape(lead + (self.n_agents, self.h_dim // self.n_agents))
        if obs_emb is None:
            obs_emb = self.agent.embeddings(np.zeros(lead + (self.n_agents, self.agent.spec.obs_dim)))
        with no_grad():
            q = self.agent.q_values(h, *obs_emb).data
        return masked_argmax(q, avail)


def posterior_infer(wm: WorldModel, h_t, rng=None, noise=None):
    d = wm.posterior(h_t)
    if noise is None:
        noise = wm.noise(rng, d.mean.shape[:-1])
    return d, d.sample(noise)


def prior_infer(wm: WorldModel, triple_prev) -> GaussianDiag:
    return wm.prior(triple_prev)


def imagine_step(wm: WorldModel, h_t, rng, s_hat=None, a_hat=None, obs_emb=None, avail=None) -> WorldModelStep:
    """One imagined transition from the joint hidden state ``h_t``.

    ``s_hat`` skips posterior inference (rollouts thread the predicted latent);
    ``a_hat`` overrides the greedy action choice.
    """
    h_t = as_tensor(h_t)
    post = None
    if s_hat is None:
        post, s_hat = posterior_infer(wm, h_t, rng)
    s_hat = as_tensor(s_hat)
    if a_hat is None:
        a_hat = wm.greedy_actions(h_t, obs_emb, avail)
    triple = wm.triple(s_hat, a_hat)
    lead = triple.shape[:-1]
    d1, triple_next = wm.vae1(triple, wm.noise(rng, lead))
    s_next = wm.split_triple(triple_next)[1]
    d2, h_next = wm.vae2(triple_next, wm.noise(rng, lead))
    return WorldModelStep(post, None, s_hat, triple, triple_next, s_next, h_next, np.asarray(a_hat), (d1, d2))


def rollout(wm: WorldModel, h_t, j: int, rng, s_hat=None, a0=None, obs_emb=None, avail=None) -> RolloutResult:
    """Imagine ``j`` steps ahead and concatenate the ``j + 1`` latents.

    The first action may be supplied (``a0``); later actions are greedy on the
    imagined hidden states and are not masked, since availability of imagined
    states is unknown.  Values only, nothing is recorded for differentiation.
    """
    if j < 0:
        raise ValueError("rollout horizon must be non-negative")
    with no_grad():
        h = as_tensor(h_t)
        if s_hat is None:
            _, s_hat = posterior_infer(wm, h, rng)
        s = as_tensor(s_hat)
        latents = [s.data]
        steps = []
        for k in range(j):
            step = imagine_step(wm, h, rng, s_hat=s, a_hat=a0 if k == 0 else None,
                                obs_emb=obs_emb, avail=avail if k == 0 else None)
            steps.append(step)
            s, h = step.s_next, step.h_next
            latents.append(s.data)
    return RolloutResult(latents, np.concatenate(latents, axis=-1), j, steps)


@dataclass
class WorldModelLoss:
    l_kl: Tensor
    l_rec: Tensor
    s_hat: np.ndarray  # posterior sample per state row


def pack_transitions(mask):
    """Row indices for the valid part of a ``(T, B)`` transition mask.

    Returns ``(rows, cur, nxt, prev)``: ``rows`` are the flat ``t * B + b``
    positions of every stored step (``t <= length``), ``cur``/``nxt`` index
    into ``rows`` for each valid transition, and ``prev`` is the previous
    transition of the same episode (``-1`` at episode start).
    """
    m = np.asarray(mask) > 0
    steps, b = m.shape
    state_ok = np.zeros((steps + 1, b), dtype=bool)
    state_ok[0] = True
    state_ok[1:] = m
    rows = np.flatnonzero(state_ok)
    pos = np.full((steps + 1, b), -1)
    pos.flat[rows] = np.arange(len(rows))
    vpos = np.full((steps, b), -1)
    vflat = np.flatnonzero(m)
    vpos.flat[vflat] = np.arange(len(vflat))
    t_idx, b_idx = np.unravel_index(vflat, (steps, b))
    cur = pos[t_idx, b_idx]
    nxt = pos[t_idx + 1, b_idx]
    prev = np.where(t_idx > 0, vpos[np.maximum(t_idx - 1, 0), b_idx], -1)
    return rows, cur, nxt, prev


def world_model_loss_packed(wm: WorldModel, h, actions, cur, nxt, prev, rng, kl_balance: bool = True,
                            alpha: float = 0.8) -> WorldModelLoss:
    """L_KL and L_REC on packed rows.

    ``h`` is ``(R, N*H)`` (one row per stored step, used as data), ``actions``
    ``(V, N)`` holds the real joint action of each transition, ``cur``/``nxt``
    index its two states in ``h`` and ``prev`` its predecessor transition.
    """
    if len(cur) == 0:
        raise ValueError("world_model_loss: no valid transitions in the batch")
    h = stop_gradient(h)
    post, s_all = posterior_infer(wm, h, rng)
    s_hat = take(s_all, cur)
    post_t = GaussianDiag(take(post.mean, cur), take(post.log_std, cur))
    triple = wm.triple(s_hat, actions)
    padded = concat([Tensor(np.zeros((1, wm.triple_dim))), triple], axis=0)
    prior = wm.prior(take(padded, np.asarray(prev) + 1))
    v = len(cur)
    d1, triple_next = wm.vae1(triple, wm.noise(rng, (v,)))
    d2, h_next = wm.vae2(triple_next, wm.noise(rng, (v,)))

    kl_pp = kl_balanced(post_t, prior, alpha) if kl_balance else kl_diag_gaussian(post_t, prior)
    kl = standard_kl(prior) + kl_pp + standard_kl(d1) + standard_kl(d2)

    def sq(a, c):
        d = a - c
        return (d * d).mean(axis=-1)

    za, zs, ph = wm.split_triple(triple)
    za2, zs2, ph2 = wm.split_triple(triple_next)
    rec = sq(za, za2) + sq(zs, zs2) + sq(ph, ph2) + sq(take(h, nxt), h_next)
    return WorldModelLoss(kl.mean(), rec.mean(), s_all.data)


def world_model_loss(wm: WorldModel, h, actions, mask, rng, kl_balance: bool = True,
                     alpha: float = 0.8) -> WorldModelLoss:
    """L_KL and L_REC over a teacher-forced, time-major batch.

    ``h`` is ``(T+1, B, N*H)``, ``actions`` ``(T, B, N)`` and ``mask`` ``(T, B)``
    marks real transitions.  Both losses are averaged over valid transitions;
    ``s_hat`` comes back as ``(T+1, B, L)`` with zeros on padding.
    """
    h = as_tensor(h)
    steps, b = h.shape[0] - 1, h.shape[1]
    rows, cur, nxt, prev = pack_transitions(mask)
    if len(cur) == 0:
        raise ValueError("world_model_loss: no valid transitions in the batch")
    h_rows = take(h.reshape((steps + 1) * b, h.shape[-1]), rows)
    acts = np.asarray(actions).reshape(steps * b, -1)[np.flatnonzero(np.asarray(mask) > 0)]
    out = world_model_loss_packed(wm, h_rows, acts, cur, nxt, prev, rng, kl_balance, alpha)
    full = np.zeros(((steps + 1) * b, wm.latent))
    full[rows] = out.s_hat
    out.s_hat = full.reshape(steps + 1, b, wm.latent)
    return out
