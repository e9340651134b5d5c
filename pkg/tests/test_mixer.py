import numpy as np
import pytest

from mmsa.mixer import Mixer, joint_greedy_max, mix, td_loss, td_target
from mmsa.tensorcore import Tape, Tensor, backward
from mmsa.verify import igm_violations, monotonicity_violations


def test_monotone_in_every_agent_value():
    r = monotonicity_violations(draws=200, seed=1)
    assert r["analytic"] == 0 and r["perturbation"] == 0
    assert r["min_gradient"] >= 0


def test_igm_holds_by_enumeration():
    assert igm_violations(draws=50, seed=2) == 0


def test_sign_fault_is_detected():
    r = monotonicity_violations(draws=50, seed=3, inject="mixer.sign_flip")
    assert r["analytic"] > 0


def test_output_shape_and_context_checks():
    rng = np.random.default_rng(0)
    m = Mixer(3, 4, 2, rng)
    out = mix(m, rng.normal(size=(5, 7, 3)), rng.normal(size=(5, 7, 6)))
    assert out.shape == (5, 7)
    with pytest.raises(ValueError):
        mix(m, rng.normal(size=(5, 2)), rng.normal(size=(5, 6)))
    with pytest.raises(ValueError):
        m.context(np.ones(3), np.ones(2))


def test_ablated_context_parts_are_zero():
    m = Mixer(2, 3, 4, np.random.default_rng(0))
    ctx = m.context(np.ones(3), np.ones(4), use_global_state=False)
    assert np.all(ctx[:3] == 0) and np.all(ctx[3:] == 1)
    ctx = m.context(np.ones(3), np.ones(4), use_rollout=False)
    assert np.all(ctx[3:] == 0)


def test_context_is_not_trained_through():
    rng = np.random.default_rng(1)
    m = Mixer(2, 3, 0, rng)
    with Tape():
        c = Tensor(rng.normal(size=3), requires_grad=True)
        backward(mix(m, Tensor(rng.normal(size=2), requires_grad=True), c))
    assert c.grad is None


def test_td_target_bootstraps_unless_terminated():
    rng = np.random.default_rng(2)
    m = Mixer(2, 1, 0, rng)
    q_next = rng.normal(size=(2, 2))
    ctx = np.ones((2, 1))
    y = td_target(m, q_next, ctx, reward=[1.0, 1.0], terminated=[0.0, 1.0], gamma=0.5)
    q_tot = mix(m, q_next, ctx).data
    assert np.isclose(y[0], 1.0 + 0.5 * q_tot[0])
    assert y[1] == 1.0


def test_td_loss_masking():
    q = Tensor(np.array([1.0, 2.0, 3.0]))
    assert np.isclose(td_loss(q, [0.0, 0.0, 0.0], mask=[1, 0, 0]).item(), 1.0)
    assert np.isclose(td_loss(q, [1.0, 2.0, 0.0]).item(), 3.0)
    with pytest.raises(ValueError):
        td_loss(q, [0, 0, 0], mask=[0, 0, 0])


def test_joint_greedy_max_enumerates_all():
    rng = np.random.default_rng(4)
    m = Mixer(2, 2, 0, rng)
    table = np.array([[0.0, 1.0, -1.0], [2.0, 0.0, 0.5]])
    ctx = np.array([0.7, -1.3])
    best, val = joint_greedy_max(m, table, ctx)
    assert best == (1, 0)
    assert np.isclose(val, mix(m, np.array([1.0, 2.0]), ctx).item())
