"""Fused network building blocks with hand-written vector-Jacobian products."""
from __future__ import annotations

import numpy as np

from .tensor import DTYPE, DimensionError, Tensor, _record, _sigmoid, as_tensor, elu_values

AVG_L1_EPS = 1e-8


def linear(x, weights, bias=None) -> Tensor:
    """``x @ weights + bias`` over the last axis of ``x``; weights are (in, out)."""
    x, w = as_tensor(x), as_tensor(weights)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weights shape {w.shape}")
    b = None if bias is None else as_tensor(bias)
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match weights shape {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    wd = w.data

    def vjp(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out.reshape(lead + (wd.shape[1],)), parents, vjp)


def _relu_values(x):
    return np.maximum(x, 0.0), x > 0


_ACTIVATIONS = {"elu": elu_values, "relu": _relu_values}


def mlp2(x, w1, b1, w2, b2, activation: str = "elu") -> Tensor:
    """Two affine layers with a hidden nonlinearity, recorded as one node."""
    x, w1, b1, w2, b2 = (as_tensor(t) for t in (x, w1, b1, w2, b2))
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise DimensionError(f"mlp2: input shape {x.shape} incompatible with weights {w1.shape}, {w2.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w1.shape[0])
    hid, dact = _ACTIVATIONS[activation](x2 @ w1.data + b1.data)
    out = hid @ w2.data + b2.data
    w1d, w2d = w1.data, w2.data

    def vjp(g):
        g2 = g.reshape(-1, w2d.shape[1])
        gpre = (g2 @ w2d.T) * dact
        return (
            (gpre @ w1d.T).reshape(x.shape) if x.requires_grad else None,
            x2.T @ gpre if w1.requires_grad else None,
            gpre.sum(axis=0) if b1.requires_grad else None,
            hid.T @ g2 if w2.requires_grad else None,
            g2.sum(axis=0) if b2.requires_grad else None,
        )

    return _record(out.reshape(lead + (w2d.shape[1],)), (x, w1, b1, w2, b2), vjp)


def action_value_head(h, z_o, z_oa, phi, wz, wza, wphi, wh, b, w2, b2) -> Tensor:
    """Per-action values ``elu(row + z_oa Wza + phi Wphi) w2 + b2`` as one node.

    ``row = z_o Wz + h Wh + b`` is shared by all actions.  Shapes: ``h``
    ``(..., H)``, ``z_o`` ``(..., Z)``, ``z_oa`` and ``phi`` ``(..., A, Z)``;
    the result is ``(..., A)``.
    """
    ts = [as_tensor(t) for t in (h, z_o, z_oa, phi, wz, wza, wphi, wh, b, w2, b2)]
    h, z_o, z_oa, phi, wz, wza, wphi, wh, b, w2, b2 = ts
    lead, k = h.shape[:-1], z_oa.shape[-2]
    if z_o.shape[:-1] != lead or z_oa.shape[:-2] != lead or phi.shape[:-1] != z_oa.shape[:-1]:
        raise DimensionError(f"action_value_head: inconsistent leading shapes {h.shape}, {z_o.shape}, {z_oa.shape}, {phi.shape}")
    hid = wh.shape[1]
    h2 = h.data.reshape(-1, h.shape[-1])
    zo2 = z_o.data.reshape(-1, z_o.shape[-1])
    za2 = z_oa.data.reshape(-1, z_oa.shape[-1])
    ph2 = phi.data.reshape(-1, phi.shape[-1])
    row = zo2 @ wz.data + h2 @ wh.data + b.data  # (M, hid)
    pre = (za2 @ wza.data + ph2 @ wphi.data).reshape(-1, k, hid)
    pre += row[:, None, :]
    act, dact = elu_values(pre)
    w2v = w2.data[:, 0]
    out = act @ w2v + b2.data[0]

    def vjp(g):
        g2 = g.reshape(-1, k)
        gpre = g2[..., None] * w2v
        gpre *= dact
        grow = gpre.sum(axis=1)
        gflat = gpre.reshape(-1, hid)
        grads = [
            (grow @ wh.data.T).reshape(h.shape) if h.requires_grad else None,
            (grow @ wz.data.T).reshape(z_o.shape) if z_o.requires_grad else None,
            (gflat @ wza.data.T).reshape(z_oa.shape) if z_oa.requires_grad else None,
            (gflat @ wphi.data.T).reshape(phi.shape) if phi.requires_grad else None,
            zo2.T @ grow if wz.requires_grad else None,
            za2.T @ gflat if wza.requires_grad else None,
            ph2.T @ gflat if wphi.requires_grad else None,
            h2.T @ grow if wh.requires_grad else None,
            grow.sum(axis=0) if b.requires_grad else None,
            (act.reshape(-1, hid).T @ g2.reshape(-1))[:, None] if w2.requires_grad else None,
            np.array([g2.sum()]) if b2.requires_grad else None,
        ]
        return tuple(grads)

    return _record(out.reshape(lead + (k,)), tuple(ts), vjp)


def avg_l1_norm(x, eps: float = AVG_L1_EPS) -> Tensor:
    """Divide each vector (last axis) by the mean of its absolute values."""
    x = as_tensor(x)
    xd = x.data
    n = xd.shape[-1]
    m = np.mean(np.abs(xd), axis=-1, keepdims=True)
    guarded = m <= eps
    denom = np.where(guarded, eps, m)
    out = xd / denom
    sgn = np.sign(xd)

    def vjp(g):
        # d(x_i/m)/dx_j = delta_ij/m - x_i sign(x_j) / (n m^2); the guard branch is linear.
        dot = np.sum(g * out, axis=-1, keepdims=True)
        gx = g / denom - np.where(guarded, 0.0, dot * sgn / (n * denom))
        return (gx,)

    return _record(out, (x,), vjp)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance rescaling per vector, no affine parameters."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(xd.var(axis=-1, keepdims=True) + eps)
    y = (xd - mu) * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record(y, (x,), vjp)


def identity_norm(x) -> Tensor:
    return as_tensor(x)


NORMALIZERS = {"avgl1": avg_l1_norm, "layernorm": layer_norm, "none": identity_norm}


def gru_cell(x, h, w_in, w_hid, b_in, b_hid) -> Tensor:
    """GRU update (reset, update, candidate gate order).

    ``w_in`` is (in, 3H), ``w_hid`` is (H, 3H), biases are (3H,).
    """
    x, h = as_tensor(x), as_tensor(h)
    w_in, w_hid, b_in, b_hid = (as_tensor(t) for t in (w_in, w_hid, b_in, b_hid))
    H = w_hid.shape[0]
    if h.shape[-1] != H:
        raise DimensionError(f"gru_cell: hidden shape {h.shape} does not match hidden size {H}")
    if x.shape[-1] != w_in.shape[0]:
        raise DimensionError(f"gru_cell: input shape {x.shape} incompatible with weights shape {w_in.shape}")
    if x.shape[:-1] != h.shape[:-1]:
        raise DimensionError(f"gru_cell: batch shapes differ, {x.shape} vs {h.shape}")
    lead = h.shape[:-1]
    xd = x.data.reshape(-1, w_in.shape[0])
    hd = h.data.reshape(-1, H)
    gi = xd @ w_in.data + b_in.data
    gh = hd @ w_hid.data + b_hid.data
    r = _sigmoid(gi[:, :H] + gh[:, :H])
    z = _sigmoid(gi[:, H:2 * H] + gh[:, H:2 * H])
    hn = gh[:, 2 * H:]
    n = np.tanh(gi[:, 2 * H:] + r * hn)
    out = (1.0 - z) * n + z * hd
    wi, wh = w_in.data, w_hid.data

    def vjp(g):
        g = g.reshape(-1, H)
        dn = g * (1.0 - z)
        dz = g * (hd - n)
        dn_pre = dn * (1.0 - n * n)
        dr = dn_pre * hn
        dr_pre = dr * r * (1.0 - r)
        dz_pre = dz * z * (1.0 - z)
        d_gi = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
        d_gh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        dx = (d_gi @ wi.T).reshape(x.shape)
        dh = (g * z + d_gh @ wh.T).reshape(h.shape)
        return dx, dh, xd.T @ d_gi, hd.T @ d_gh, d_gi.sum(axis=0), d_gh.sum(axis=0)

    return _record(out.reshape(lead + (H,)), (x, h, w_in, w_hid, b_in, b_hid), vjp)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _record(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def mse(a, b) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = float(diff.size)
    return _record(
        np.asarray(np.sum(diff * diff) / n, dtype=DTYPE),
        (a, b),
        lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n),
    )


def one_hot(indices, n: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros(idx.shape + (n,), dtype=DTYPE)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out
