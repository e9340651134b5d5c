"""Parameter groups, initialisers and the RMSProp update."""
from __future__ import annotations

import copy

import numpy as np

from .tensor import Tensor, TapeError

RMSPROP_ALPHA = 0.99
RMSPROP_EPS = 1e-5
GROUP_NAMES = ("agent", "mixer", "encoders", "world_model")


class ParamGroup:
    """Named, ordered parameters that are optimised together.

    ``grad_sources`` names the losses allowed to write gradients into this
    group; decoupling audits read it.
    """

    def __init__(self, name: str, grad_sources=("total",)):
        self.name = name
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, np.ndarray] = {}
        self.grad_sources = frozenset(grad_sources)

    def add(self, key: str, value) -> Tensor:
        if key in self.params:
            raise KeyError(f"{self.name}: duplicate parameter {key!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = f"{self.name}.{key}"
        self.params[key] = t
        return t

    def __getitem__(self, key) -> Tensor:
        return self.params[key]

    def __contains__(self, key):
        return key in self.params

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    @property
    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def accepts(self, source: str) -> bool:
        return source in self.grad_sources

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def has_grads(self) -> bool:
        return all(t.grad is not None for t in self.params.values())

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.vdot(t.grad, t.grad)) for t in self if t.grad is not None)))

    def copy_from(self, other: "ParamGroup"):
        for k, t in self.params.items():
            t.data = other.params[k].data.copy()

    def snapshot(self) -> "ParamGroup":
        """Deep copy of values; optimiser state and grads are not shared."""
        g = ParamGroup(self.name, self.grad_sources)
        for k, t in self.params.items():
            g.add(k, t.data.copy())
        g.state = copy.deepcopy(self.state)
        return g

    def n_values(self) -> int:
        return sum(t.size for t in self)


def clip_grad_norm(group: ParamGroup, max_norm: float) -> float:
    """Rescale the group's gradients in place so their global norm is at most ``max_norm``."""
    norm = group.grad_norm()
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in group:
            t.grad = t.grad * scale
    return norm


def rmsprop_step(group: ParamGroup, lr: float, alpha: float = RMSPROP_ALPHA, eps: float = RMSPROP_EPS) -> None:
    """acc <- alpha*acc + (1-alpha)*g^2 ; p <- p - lr*g/sqrt(acc + eps)."""
    missing = [t.name for t in group if t.grad is None]
    if missing:
        raise TapeError(f"rmsprop_step: no gradient for {missing[:3]} (run backward first)")
    for key, t in group.params.items():
        g = t.grad
        acc = group.state.get(key)
        if acc is None:
            acc = group.state[key] = np.zeros_like(t.data)
        acc *= alpha
        acc += (1.0 - alpha) * g * g
        t.data = t.data - lr * g / np.sqrt(acc + eps)


# -- initialisers ---------------------------------------------------------


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def orthogonal_init(rng: np.random.Generator, shape, gain: float = 1.0) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def add_linear(group: ParamGroup, rng, prefix: str, n_in: int, n_out: int, bias: bool = True):
    w = group.add(f"{prefix}.w", uniform_init(rng, n_in, (n_in, n_out)))
    b = group.add(f"{prefix}.b", np.zeros(n_out)) if bias else None
    return w, b
