import numpy as np
import pytest

from vbc.agent import AgentNet, combine, Encoder, message_variance
from vbc.nn import Dense, GruCell, ParamBlock, max_relative_error


def test_local_forward_zero_weights_returns_q_bias():
    net = AgentNet(obs_dim=4, n_actions=3, d_h=5)
    net.q_head.b.value[...] = np.array([0.3, -0.7, 0.1])
    q, c, h = net.step(np.zeros(4), np.zeros(5), cache=False)
    assert np.array_equal(q, np.array([0.3, -0.7, 0.1]))
    assert np.array_equal(c, np.zeros(5))


def test_local_forward_pure():
    rng = np.random.default_rng(11)
    net = AgentNet(obs_dim=4, n_actions=3, d_h=5)
    net.init_params(rng)
    obs = rng.normal(size=4)
    h = rng.normal(size=5) * 0.1
    out1 = net.step(obs, h, cache=False)
    out2 = net.step(obs, h, cache=False)
    for a, b in zip(out1, out2):
        assert np.array_equal(a, b)


def test_local_forward_matches_manual_composition():
    rng = np.random.default_rng(21)
    net = AgentNet(obs_dim=4, n_actions=3, d_h=5)
    net.init_params(rng)
    obs = rng.normal(size=4)
    h_prev = rng.normal(size=5) * 0.5

    # independent composition from the raw layer ops
    embed = Dense(4, 5, "leaky_relu", "e")
    gru = GruCell(5, 5, "g")
    q_head = Dense(5, 3, "identity", "q")
    embed.w.value[...] = net.embed.w.value
    embed.b.value[...] = net.embed.b.value
    for k in gru._params:
        gru._params[k].value[...] = net.gru._params[k].value
    q_head.w.value[...] = net.q_head.w.value
    q_head.b.value[...] = net.q_head.b.value

    x = embed.forward(obs, cache=False)
    c = gru.forward(x, h_prev, cache=False)
    q = q_head.forward(c, cache=False)

    q2, c2, h2 = net.step(obs, h_prev, cache=False)
    assert np.array_equal(q, q2)
    assert np.array_equal(c, c2)
    assert np.array_equal(c2, h2)


def test_hidden_state_equals_intermediate():
    rng = np.random.default_rng(5)
    net = AgentNet(obs_dim=3, n_actions=2, d_h=4)
    net.init_params(rng)
    _, c, h = net.step(rng.normal(size=3), np.zeros(4), cache=False)
    assert c is h


def test_encoder_zero_weights_zero_message():
    enc = Encoder(d_h=4, n_actions=3, hidden=6)
    assert np.array_equal(enc.forward(np.random.default_rng(0).normal(size=4),
                                      cache=False),
                          np.zeros(3))


def test_encoder_shared_across_agents():
    rng = np.random.default_rng(9)
    enc = Encoder(d_h=4, n_actions=3, hidden=6)
    enc.init_params(rng)
    c = rng.normal(size=4)
    # the same encoder object is the shared parameter set; two "agents"
    # calling it on the same c must agree bitwise
    m1 = enc.forward(c, cache=False)
    m2 = enc.forward(c, cache=False)
    assert np.array_equal(m1, m2)


def test_encoder_matches_manual_composition():
    rng = np.random.default_rng(13)
    enc = Encoder(d_h=4, n_actions=3, hidden=6)
    enc.init_params(rng)
    c = rng.normal(size=4)
    hidden = np.maximum(enc.fc1.w.value @ c + enc.fc1.b.value, 0.0) \
        + 0.01 * np.minimum(enc.fc1.w.value @ c + enc.fc1.b.value, 0.0)
    expected = enc.fc2.w.value @ hidden + enc.fc2.b.value
    assert np.allclose(enc.forward(c, cache=False), expected, atol=1e-12)


def test_combine_empty_and_arithmetic():
    q = np.array([1.0, 2.0])
    assert np.array_equal(combine(q, []), q)
    out = combine(q, [np.array([0.5, -1.0]), np.array([0.5, 1.0])])
    assert np.array_equal(out, np.array([2.0, 2.0]))


def test_combine_does_not_mutate_input():
    q = np.array([1.0, 2.0])
    combine(q, [np.array([1.0, 1.0])])
    assert np.array_equal(q, np.array([1.0, 2.0]))


def test_combine_permutation_invariant():
    rng = np.random.default_rng(3)
    q = rng.normal(size=4)
    msgs = [rng.normal(size=4) for _ in range(3)]
    a = combine(q, msgs)
    b = combine(q, [msgs[2], msgs[0], msgs[1]])
    assert np.allclose(a, b, atol=1e-12)


def test_combine_length_mismatch():
    with pytest.raises(ValueError):
        combine(np.zeros(3), [np.zeros(2)])


def test_message_variance_values():
    assert message_variance(np.array([2.0, 2.0, 2.0])) == 0.0
    assert message_variance(np.array([0.0, 2.0])) == 1.0
    assert abs(message_variance(np.array([1.0, 2.0, 3.0])) - 2.0 / 3.0) < 1e-15
    assert message_variance(np.array([5.0])) == 0.0


def test_message_variance_nonnegative():
    rng = np.random.default_rng(17)
    for _ in range(100):
        v = message_variance(rng.normal(size=5))
        assert v >= 0.0


def test_agent_gradcheck():
    for seed in range(5):
        rng = np.random.default_rng(40 + seed)
        net = AgentNet(obs_dim=3, n_actions=2, d_h=4)
        net.init_params(rng)
        block = ParamBlock(net.params())
        obs = rng.normal(size=(2, 3))
        h = rng.normal(size=(2, 4)) * 0.3
        up_q = rng.normal(size=(2, 2))
        up_c = rng.normal(size=(2, 4))

        def loss(cache=False):
            q, c, _ = net.step(obs, h, cache=cache)
            return float((q * up_q).sum() + (c * up_c).sum())

        block.zero_grad()
        loss(cache=True)
        net.backward_step(up_q, up_c, np.zeros_like(h))
        assert max_relative_error(loss, block) < 1e-4


def test_encoder_gradcheck():
    for seed in range(5):
        rng = np.random.default_rng(60 + seed)
        enc = Encoder(d_h=3, n_actions=4, hidden=5)
        enc.init_params(rng)
        block = ParamBlock(enc.params())
        c = rng.normal(size=(2, 3))
        up = rng.normal(size=(2, 4))

        def loss(cache=False):
            return float((enc.forward(c, cache=cache) * up).sum())

        block.zero_grad()
        loss(cache=True)
        enc.backward(up)
        assert max_relative_error(loss, block) < 1e-4
