"""Minimal reverse-mode autodiff engine used by every network in the package."""
import numpy as np

from .checkpoint import CheckpointError, dump_bytes, load_bytes, load_checkpoint, restore_groups, save_checkpoint
from .distributions import LOG_STD_MAX, LOG_STD_MIN, GaussianDiag, kl_diag_gaussian, reparam_sample
from .ops import (
    AVG_L1_EPS,
    NORMALIZERS,
    action_value_head,
    avg_l1_norm,
    gru_cell,
    layer_norm,
    linear,
    log_softmax,
    mlp2,
    mse,
    one_hot,
)
from .optim import (
    GROUP_NAMES,
    RMSPROP_ALPHA,
    RMSPROP_EPS,
    ParamGroup,
    add_linear,
    clip_grad_norm,
    orthogonal_init,
    rmsprop_step,
    uniform_init,
)
from .tensor import (
    DimensionError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    backward,
    concat,
    current_tape,
    elu,
    exp,
    log,
    matmul,
    maximum,
    no_grad,
    relu,
    sigmoid,
    square,
    stack,
    stop_gradient,
    take,
    tanh,
)


def recurrent_cell(x, hidden_prev, params, prefix: str = "gru"):
    """GRU step using ``{prefix}.w_in/.w_hid/.b_in/.b_hid`` from a parameter mapping."""
    return gru_cell(
        x,
        hidden_prev,
        params[f"{prefix}.w_in"],
        params[f"{prefix}.w_hid"],
        params[f"{prefix}.b_in"],
        params[f"{prefix}.b_hid"],
    )


def add_gru(group: ParamGroup, rng, prefix: str, n_in: int, hidden: int):
    group.add(f"{prefix}.w_in", uniform_init(rng, hidden, (n_in, 3 * hidden)))
    w_hid = [orthogonal_init(rng, (hidden, hidden)) for _ in range(3)]
    group.add(f"{prefix}.w_hid", np.concatenate(w_hid, axis=1))
    group.add(f"{prefix}.b_in", np.zeros(3 * hidden))
    group.add(f"{prefix}.b_hid", np.zeros(3 * hidden))
