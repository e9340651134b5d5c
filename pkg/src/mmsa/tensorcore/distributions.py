from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor, _record, as_tensor, clip, exp, stop_gradient

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


@dataclass
class GaussianDiag:
    """Diagonal Gaussian over the last axis; ``log_std`` is always clamped."""

    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.log_std = as_tensor(self.log_std)
        if self.mean.shape != self.log_std.shape:
            raise DimensionError(f"GaussianDiag: mean {self.mean.shape} vs log_std {self.log_std.shape}")

    @classmethod
    def from_raw(cls, mean, raw_log_std) -> "GaussianDiag":
        return cls(mean, clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX))

    @classmethod
    def standard(cls, shape) -> "GaussianDiag":
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)

    def sample(self, noise) -> Tensor:
        return reparam_sample(self, noise)

    def detach(self) -> "GaussianDiag":
        return GaussianDiag(stop_gradient(self.mean), stop_gradient(self.log_std))

    def log_prob(self, x) -> np.ndarray:
        x = np.asarray(x)
        var = np.exp(2 * self.log_std.data)
        return np.sum(
            -0.5 * (x - self.mean.data) ** 2 / var - self.log_std.data - 0.5 * np.log(2 * np.pi), axis=-1
        )


def reparam_sample(d: GaussianDiag, noise) -> Tensor:
    """``mean + exp(log_std) * noise``; the noise is treated as a constant."""
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if noise.shape != d.mean.shape:
        raise DimensionError(f"reparam_sample: noise shape {noise.shape} does not match mean shape {d.mean.shape}")
    return d.mean + exp(d.log_std) * noise


def kl_diag_gaussian(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    """KL(q || p) summed over the last axis (one value per leading index)."""
    if q.mean.shape != p.mean.shape:
        raise DimensionError(f"kl_diag_gaussian: shapes {q.mean.shape} and {p.mean.shape} differ")
    mq, lq, mp, lp = q.mean.data, q.log_std.data, p.mean.data, p.log_std.data
    vq = np.exp(2 * lq)
    inv_vp = np.exp(-2 * lp)
    d = mq - mp
    out = np.sum(lp - lq + 0.5 * (vq + d * d) * inv_vp - 0.5, axis=-1)

    def vjp(g):
        g = np.asarray(g)[..., None]
        dmq = g * d * inv_vp
        return (
            dmq,
            g * (vq * inv_vp - 1.0),
            -dmq,
            g * (1.0 - (vq + d * d) * inv_vp),
        )

    return _record(out, (q.mean, q.log_std, p.mean, p.log_std), vjp)
