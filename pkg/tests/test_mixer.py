import numpy as np
import pytest

from vbc.mixer import elu, QmixMixer, vdn_mix, VdnMixer
from vbc.nn import ParamBlock, max_relative_error


def test_vdn_mix_values():
    assert vdn_mix(np.array([0.0, 0.0, 0.0])) == 0.0
    assert vdn_mix(np.array([1.5, -0.5, 2.0])) == 3.0


def test_vdn_mix_permutation_invariant():
    rng = np.random.default_rng(2)
    q = rng.normal(size=5)
    assert np.allclose(vdn_mix(q), vdn_mix(q[::-1].copy()), atol=1e-12)


def test_vdn_mixer_backward():
    mixer = VdnMixer(3)
    out = mixer.forward(np.array([[1.0, 2.0, 3.0], [0.0, 1.0, -1.0]]))
    assert np.array_equal(out, np.array([6.0, 0.0]))
    dq, _ = mixer.backward(np.array([2.0, -1.0]))
    assert np.array_equal(dq, np.array([[2.0, 2.0, 2.0], [-1.0, -1.0, -1.0]]))
    with pytest.raises(RuntimeError):
        mixer.backward(np.array([1.0]))


def test_qmix_vdn_reduction_exact():
    rng = np.random.default_rng(4)
    mixer = QmixMixer.vdn_reduction(n_agents=3, state_dim=6)
    for _ in range(20):
        q = rng.normal(size=3) * 5.0
        s = rng.normal(size=6)
        assert mixer.forward(q, s, cache=False) == vdn_mix(q)


def test_qmix_hand_evaluated_tiny_instance():
    # d_mix=2, one agent pair; all hypernet weights zero so the mixing
    # weights come from the biases alone and are state-independent
    mixer = QmixMixer(n_agents=2, state_dim=3, d_mix=2)
    mixer.hw1.b.value[...] = np.array([1.0, -2.0, 0.5, 3.0])  # W1 rows: (1,-2),(0.5,3)
    mixer.hb1.b.value[...] = np.array([0.1, -0.2])
    mixer.hw2.b.value[...] = np.array([2.0, -1.0])
    mixer.hb2.b.value[...] = np.array([0.25])

    q = np.array([1.0, 2.0])
    s = np.zeros(3)
    # hand evaluation with |.| applied: W1 = ((1,2),(0.5,3)), W2 = (2,1)
    a1 = 1.0 * 1.0 + 2.0 * 0.5 + 0.1
    a2 = 1.0 * 2.0 + 2.0 * 3.0 - 0.2
    z1, z2 = elu(np.array([a1]))[0], elu(np.array([a2]))[0]
    expected = z1 * 2.0 + z2 * 1.0 + 0.25
    got = mixer.forward(q, s, cache=False)
    assert abs(got - expected) < 1e-12


def test_qmix_monotonic_in_every_agent():
    rng = np.random.default_rng(8)
    mixer = QmixMixer(n_agents=3, state_dim=5, d_mix=4)
    mixer.init_params(rng)
    eps = 1e-4
    for _ in range(200):
        q = rng.normal(size=3) * 2.0
        s = rng.normal(size=5)
        base = mixer.forward(q, s, cache=False)
        for i in range(3):
            qp = q.copy()
            qp[i] += eps
            assert mixer.forward(qp, s, cache=False) - base >= -1e-9


def test_qmix_dim_mismatch():
    mixer = QmixMixer(n_agents=2, state_dim=3, d_mix=2)
    with pytest.raises(ValueError):
        mixer.forward(np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        mixer.forward(np.zeros(2), np.zeros(4))


def test_qmix_gradcheck():
    for seed in range(5):
        rng = np.random.default_rng(70 + seed)
        mixer = QmixMixer(n_agents=2, state_dim=3, d_mix=2)
        mixer.init_params(rng)
        block = ParamBlock(mixer.params())
        q = rng.normal(size=(3, 2))
        s = rng.normal(size=(3, 3))
        up = rng.normal(size=3)

        def loss(cache=False):
            return float((mixer.forward(q, s, cache=cache) * up).sum())

        block.zero_grad()
        loss(cache=True)
        dq, ds = mixer.backward(up)
        assert max_relative_error(loss, block) < 1e-4

        # input gradients too
        h = 1e-5
        fd_dq = np.zeros_like(q)
        for idx in np.ndindex(*q.shape):
            qp = q.copy(); qp[idx] += h
            qm = q.copy(); qm[idx] -= h
            fd_dq[idx] = (float((mixer.forward(qp, s, cache=False) * up).sum())
                          - float((mixer.forward(qm, s, cache=False) * up).sum())) / (2 * h)
        assert np.max(np.abs(fd_dq - dq)
                      / np.maximum(1e-8, np.abs(fd_dq) + np.abs(dq))) < 1e-4
        fd_ds = np.zeros_like(s)
        for idx in np.ndindex(*s.shape):
            sp = s.copy(); sp[idx] += h
            sm = s.copy(); sm[idx] -= h
            fd_ds[idx] = (float((mixer.forward(q, sp, cache=False) * up).sum())
                          - float((mixer.forward(q, sm, cache=False) * up).sum())) / (2 * h)
        assert np.max(np.abs(fd_ds - ds)
                      / np.maximum(1e-8, np.abs(fd_ds) + np.abs(ds))) < 1e-4


def test_vdn_reduction_backward_gives_unit_grads():
    mixer = QmixMixer.vdn_reduction(n_agents=3, state_dim=2)
    q = np.array([[0.5, -1.0, 2.0]])
    s = np.array([[0.3, 0.7]])
    mixer.forward(q, s)
    dq, _ = mixer.backward(np.array([1.0]))
    assert np.allclose(dq, np.ones((1, 3)), atol=1e-12)
