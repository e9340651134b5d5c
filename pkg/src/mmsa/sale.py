"""State-action learned embeddings.

An encoder pair maps an input ``x`` to ``z = norm(f(x))`` and a
(``z``, action) pair to ``z_sa = g(z ⊕ embed(action))``.  A separate linear
feature map gives ``phi = norm(W (x ⊕ onehot(action)) + b)``.  The encoders are
trained only by the next-embedding prediction loss; every other consumer sees
their outputs as constants.
"""
from __future__ import annotations

import numpy as np

from .envsuite.base import ContractViolation
from .tensorcore import (
    NORMALIZERS,
    DimensionError,
    ParamGroup,
    Tensor,
    add_linear,
    as_tensor,
    avg_l1_norm,
    concat,
    linear,
    mlp2,
    one_hot,
    stop_gradient,
    uniform_init,
)

Z_DIM = 16
ACTION_EMBED = 4
HIDDEN = 64


class DecouplingError(AssertionError):
    pass


class SaleEncoders:
    """f, g and the linear feature map for one input space.

    ``slots`` is the number of agent actions consumed together (1 for a local
    action, N for a joint one).  Parameters live in ``group`` under ``prefix``.
    """

    def __init__(self, group: ParamGroup, rng, prefix: str, in_dim: int, n_actions: int, slots: int = 1,
                 z_dim: int = Z_DIM, hidden: int = HIDDEN, action_embed: int = ACTION_EMBED,
                 normalizer: str = "avgl1"):
        if normalizer not in NORMALIZERS:
            raise ValueError(f"unknown normalizer {normalizer!r}; expected one of {sorted(NORMALIZERS)}")
        self.group, self.prefix = group, prefix
        self.in_dim, self.n_actions, self.slots = in_dim, n_actions, slots
        self.z_dim, self.action_embed = z_dim, action_embed
        self.normalizer = normalizer
        self.norm = NORMALIZERS[normalizer]
        add_linear(group, rng, f"{prefix}.f1", in_dim, hidden)
        add_linear(group, rng, f"{prefix}.f2", hidden, z_dim)
        group.add(f"{prefix}.embed", uniform_init(rng, n_actions, (n_actions, action_embed)))
        add_linear(group, rng, f"{prefix}.g1", z_dim + slots * action_embed, hidden)
        add_linear(group, rng, f"{prefix}.g2", hidden, z_dim)
        add_linear(group, rng, f"{prefix}.phi", in_dim + slots * n_actions, z_dim)

    # parameters, optionally cut off from the tape
    def _p(self, key, frozen):
        t = self.group[f"{self.prefix}.{key}"]
        return stop_gradient(t) if frozen else t

    def _mlp(self, x, a, b, frozen):
        return mlp2(x, self._p(f"{a}.w", frozen), self._p(f"{a}.b", frozen),
                    self._p(f"{b}.w", frozen), self._p(f"{b}.b", frozen))

    def action_onehot(self, actions) -> np.ndarray:
        a = np.asarray(actions)
        if a.shape[-1:] != (self.slots,):
            raise DimensionError(f"{self.prefix}: expected action shape (..., {self.slots}), got {a.shape}")
        if a.size and (a.min() < 0 or a.max() >= self.n_actions):
            raise ContractViolation(f"{self.prefix}: action index outside [0, {self.n_actions})")
        oh = one_hot(a, self.n_actions)
        return oh.reshape(a.shape[:-1] + (self.slots * self.n_actions,))

    def encode_state(self, x, frozen=False) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"{self.prefix}: input dim {x.shape[-1]} != encoder input {self.in_dim}")
        return self.norm(self._mlp(x, "f1", "f2", frozen))

    def encode_state_action(self, z, actions, frozen=False) -> Tensor:
        oh = self.action_onehot(actions)
        lead = oh.shape[:-1]
        emb = linear(oh.reshape(lead + (self.slots, self.n_actions)), self._p("embed", frozen))
        emb = emb.reshape(*lead, self.slots * self.action_embed)
        return self._mlp(concat([as_tensor(z), emb], axis=-1), "g1", "g2", frozen)

    def linear_feature(self, x, actions=None, frozen=False) -> Tensor:
        x = as_tensor(x)
        if actions is not None:
            x = concat([x, Tensor(self.action_onehot(actions))], axis=-1)
        if x.shape[-1] != self.in_dim + self.slots * self.n_actions:
            raise DimensionError(f"{self.prefix}: feature input dim {x.shape[-1]} does not match the map")
        return self.norm(linear(x, self._p("phi.w", frozen), self._p("phi.b", frozen)))

    def embed(self, x, actions, frozen=False):
        """(z, z_sa, phi) for inputs ``x`` and integer actions ``(..., slots)``."""
        z = self.encode_state(x, frozen)
        return z, self.encode_state_action(z, actions, frozen), self.linear_feature(x, actions, frozen)

    def sale_loss(self, x, actions, x_next, mask=None, target_fn=stop_gradient) -> Tensor:
        return sale_loss(self, x, actions, x_next, mask, target_fn)


def _fold(x: np.ndarray, width: int) -> np.ndarray:
    """Zero-pad the last axis to a multiple of ``width`` and sum the blocks."""
    d = x.shape[-1]
    k = max(1, -(-d // width))
    pad = np.zeros(x.shape[:-1] + (k * width - d,))
    return np.concatenate([x, pad], axis=-1).reshape(x.shape[:-1] + (k, width)).sum(axis=-2)


class PassthroughEncoders:
    """Parameter-free stand-in used when learned embeddings are switched off.

    Raw inputs (and input ⊕ one-hot action) are folded to the embedding width
    and normalised, so downstream shapes do not change.
    """

    def __init__(self, in_dim: int, n_actions: int, slots: int = 1, z_dim: int = Z_DIM, normalizer: str = "avgl1"):
        self.in_dim, self.n_actions, self.slots, self.z_dim = in_dim, n_actions, slots, z_dim
        self.norm = NORMALIZERS[normalizer]
        self.prefix = "passthrough"

    action_onehot = SaleEncoders.action_onehot

    def encode_state(self, x, frozen=False) -> Tensor:
        return self.norm(Tensor(_fold(as_tensor(x).data, self.z_dim)))

    def _joint(self, x, actions):
        return self.norm(Tensor(_fold(np.concatenate([as_tensor(x).data, self.action_onehot(actions)], -1), self.z_dim)))

    def encode_state_action(self, z, actions, frozen=False, x=None) -> Tensor:
        raise NotImplementedError("pass-through encoders build joint features from the raw input; use embed()")

    def linear_feature(self, x, actions=None, frozen=False) -> Tensor:
        return self._joint(x, actions)

    def embed(self, x, actions, frozen=False):
        joint = self._joint(x, actions)
        return self.encode_state(x), joint, joint


# -- functional surface ----------------------------------------------------


def encode_state(enc, x) -> Tensor:
    return enc.encode_state(x)


def encode_state_action(enc, z, action) -> Tensor:
    return enc.encode_state_action(z, action)


def linear_feature(enc, x, action=None) -> Tensor:
    return enc.linear_feature(x, action)


def sale_loss(enc: SaleEncoders, x, actions, x_next, mask=None, target_fn=stop_gradient) -> Tensor:
    """Squared L2 error between g(f(x), a) and the frozen embedding of ``x_next``.

    Summed over embedding dims, averaged over samples (``mask`` selects valid rows).
    ``target_fn`` cuts the target branch; it is a parameter only so that the
    verification suite can inject a missing cut.
    """
    z_sa = enc.encode_state_action(enc.encode_state(x), actions)
    target = target_fn(enc.encode_state(x_next))
    diff = z_sa - target
    per = (diff * diff).sum(axis=-1)
    if mask is None:
        return per.mean()
    m = np.asarray(mask, dtype=np.float64)
    if m.sum() == 0:
        raise ValueError("sale_loss: no valid transitions")
    return (per * m).sum() / float(m.sum())


def assert_decoupled(groups, source: str = "loss") -> None:
    """Raise if any parameter of an ``encoders`` group carries a nonzero gradient."""
    for g in groups:
        if g.name != "encoders":
            continue
        for t in g:
            if t.grad is not None and np.any(t.grad != 0):
                raise DecouplingError(f"{t.name} received gradient from {source} (max |g| = {np.abs(t.grad).max():.3e})")
