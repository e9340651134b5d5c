import numpy as np
import pytest

from mmsa.envsuite import ContractViolation
from mmsa.sale import DecouplingError, PassthroughEncoders, SaleEncoders, assert_decoupled, sale_loss
from mmsa.tensorcore import DimensionError, ParamGroup, Tape, Tensor, backward


def _enc(normalizer="avgl1", seed=0):
    g = ParamGroup("encoders", grad_sources=("sale",))
    return SaleEncoders(g, np.random.default_rng(seed), "obs", 5, 3, 1, normalizer=normalizer), g


@pytest.mark.parametrize("normalizer", ["avgl1", "layernorm", "none"])
def test_embedding_shapes(normalizer):
    enc, _ = _enc(normalizer)
    x = np.random.default_rng(1).normal(size=(4, 2, 5))
    a = np.zeros((4, 2, 1), dtype=int)
    z, z_sa, phi = enc.embed(x, a)
    assert z.shape == z_sa.shape == phi.shape == (4, 2, enc.z_dim)


def test_state_embedding_is_avg_l1_normalised():
    enc, _ = _enc()
    z = enc.encode_state(np.random.default_rng(2).normal(size=(6, 5))).data
    assert np.allclose(np.abs(z).mean(axis=-1), 1.0)


def test_bad_inputs_are_rejected():
    enc, _ = _enc()
    with pytest.raises(DimensionError):
        enc.encode_state(np.ones((2, 4)))
    with pytest.raises(ContractViolation):
        enc.action_onehot(np.array([[3]]))
    with pytest.raises(ValueError):
        _enc("batchnorm")


def test_target_branch_carries_no_gradient():
    enc, g = _enc()
    rng = np.random.default_rng(3)
    x, xn = rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
    a = rng.integers(0, 3, size=(8, 1))
    with Tape():
        xt = Tensor(xn, requires_grad=True)
        backward(sale_loss(enc, x, a, xt))
    assert xt.grad is None
    # with the cut removed the next-state input does receive gradient
    with Tape():
        xt = Tensor(xn, requires_grad=True)
        backward(sale_loss(enc, x, a, xt, target_fn=lambda t: t))
    assert xt.grad is not None and np.abs(xt.grad).max() > 0


def test_frozen_embeddings_leave_encoder_untouched():
    enc, g = _enc()
    x = np.random.default_rng(4).normal(size=(3, 5))
    with Tape():
        xt = Tensor(x, requires_grad=True)
        z, z_sa, phi = enc.embed(xt, np.zeros((3, 1), dtype=int), frozen=True)
        backward((z.sum() + z_sa.sum() + phi.sum()))
    assert all(t.grad is None for t in g)
    assert xt.grad is not None


def test_masked_loss_averages_valid_rows():
    enc, _ = _enc()
    rng = np.random.default_rng(5)
    x, xn = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    a = rng.integers(0, 3, size=(4, 1))
    full = sale_loss(enc, x[:2], a[:2], xn[:2]).item()
    masked = sale_loss(enc, x, a, xn, mask=[1, 1, 0, 0]).item()
    assert np.isclose(full, masked)


def test_assert_decoupled_flags_encoder_gradients():
    enc, g = _enc()
    assert_decoupled([g])
    next(iter(g)).grad = np.ones(next(iter(g)).shape)
    with pytest.raises(DecouplingError):
        assert_decoupled([g], "td")


def test_passthrough_keeps_shapes():
    enc = PassthroughEncoders(40, 6, 1)
    x = np.random.default_rng(6).normal(size=(3, 40))
    z, z_sa, phi = enc.embed(x, np.zeros((3, 1), dtype=int))
    assert z.shape == z_sa.shape == phi.shape == (3, 16)
