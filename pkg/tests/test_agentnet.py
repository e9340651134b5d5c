import numpy as np
import pytest

from mmsa.agentnet import (
    AgentNetwork,
    EpsilonSchedule,
    agent_forward,
    epsilon_at,
    joint_forward,
    masked_argmax,
    select_actions,
)
from mmsa.envsuite import foraging_from_template
from mmsa.sale import SaleEncoders
from mmsa.tensorcore import ParamGroup


def _net(seed=0):
    env = foraging_from_template("2s-5x5-2p-1f-coop-v2")
    rng = np.random.default_rng(seed)
    enc = SaleEncoders(ParamGroup("encoders"), rng, "obs", env.spec.obs_dim, env.spec.n_actions, 1)
    return env, AgentNetwork(env.spec, enc, rng, hidden=16)


def test_epsilon_schedule_values():
    s = EpsilonSchedule()
    assert epsilon_at(s, 0) == 1.0
    assert np.isclose(epsilon_at(s, 25_000), 0.525)
    assert np.isclose(epsilon_at(s, 50_000), 0.05)
    assert np.isclose(epsilon_at(s, 10**6), 0.05)


def test_masked_argmax_never_picks_unavailable():
    q = np.array([[5.0, 1.0, 2.0], [0.0, 0.0, 9.0]])
    avail = np.array([[False, True, True], [True, True, False]])
    assert list(masked_argmax(q, avail)) == [2, 0]


def test_epsilon_greedy_respects_availability():
    rng = np.random.default_rng(0)
    avail = np.array([[False, True, False], [True, False, False]])
    for _ in range(50):
        a = select_actions(np.zeros((2, 3)), avail, 1.0, rng)
        assert list(a) == [1, 0]
    with pytest.raises(ValueError):
        select_actions(np.zeros((1, 2)), np.zeros((1, 2), dtype=bool), 0.1, rng)


def test_greedy_ignores_epsilon():
    rng = np.random.default_rng(1)
    q = np.array([[0.0, 3.0]])
    assert all(select_actions(q, np.ones((1, 2), bool), 1.0, rng, greedy=True)[0] == 1 for _ in range(20))


def test_forward_shapes_and_single_agent_agreement():
    env, net = _net()
    res = env.reset(seed=0)
    q, h, greedy = joint_forward(net, res.observations, np.array([-1, -1]), net.init_hidden(), res.avail_actions)
    assert q.shape == (2, 6) and h.shape == (2, 16)
    assert res.avail_actions[np.arange(2), greedy].all()
    q1, h1 = agent_forward(net, res.observations[1], -1, 1, np.zeros(16))
    assert np.allclose(q1.data, q.data[1])
    assert np.allclose(h1.data, h.data[1])


def test_unroll_matches_stepwise_forward():
    env, net = _net(1)
    rng = np.random.default_rng(2)
    obs = rng.normal(size=(4, 3, 2, env.spec.obs_dim))
    acts = rng.integers(0, 6, size=(3, 3, 2))
    hs = net.unroll(obs, acts).data
    h = net.init_hidden((3,))
    last = np.full((3, 2), -1)
    for t in range(4):
        _, ht = net.forward_step(obs[t], last, h)
        assert np.allclose(ht.data, hs[t])
        h = ht.data
        if t < 3:
            last = acts[t]


def test_clone_is_independent():
    _, net = _net()
    other = net.clone()
    next(iter(other.group)).data[...] += 1.0
    assert not np.allclose(next(iter(other.group)).data, next(iter(net.group)).data)
