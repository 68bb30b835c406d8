"""Joint action-value mixers: additive (VDN) and monotonic state-conditioned.

The monotonic mixer generates its mixing weights from the global state via
hypernetworks and takes absolute values, so the joint value is nondecreasing
in every agent utility regardless of state.
"""

from __future__ import annotations

import numpy as np

from .nn import Array, Dense, Param, _as_batch


def elu(x: Array) -> Array:
    return np.where(x > 0.0, x, np.exp(np.minimum(x, 0.0)) - 1.0)


def elu_grad(x: Array) -> Array:
    return np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


def vdn_mix(q_chosen: Array) -> Array:
    """Sum of the chosen per-agent action values, over the last axis."""
    q = np.asarray(q_chosen, dtype=np.float64)
    return q.sum(axis=-1)


class VdnMixer:
    """Parameter-free additive mixer with the same forward/backward API."""

    def __init__(self, n_agents: int):
        self.n_agents = n_agents
        self._cache: list[int] = []

    def init_params(self, rng) -> None:
        pass

    def params(self) -> list[Param]:
        return []

    def forward(self, q_chosen: Array, state: Array = None,
                cache: bool = True) -> Array:
        q, was_vec = _as_batch(q_chosen)
        if q.shape[1] != self.n_agents:
            raise ValueError(f"expected {self.n_agents} agent values, got {q.shape[1]}")
        if cache:
            self._cache.append(q.shape[0])
        out = q.sum(axis=-1)
        return out[0] if was_vec else out

    def backward(self, dout: Array) -> tuple[Array, None]:
        if not self._cache:
            raise RuntimeError("vdn mixer: backward without matching forward")
        self._cache.pop()
        d = np.atleast_1d(np.asarray(dout, dtype=np.float64))
        return np.repeat(d[:, None], self.n_agents, axis=1), None


class QmixMixer:
    """Two-layer monotonic mixer with state-conditioned nonnegative weights.

    forward(q, s) = act(q @ |W1(s)| + b1(s)) @ |W2(s)| + b2(s), with an ELU
    between layers by default. `vdn_reduction` builds an instance whose
    hypernetworks are constants producing W1 = identity, W2 = 1, biases 0
    and an identity activation, which makes it equal to the additive mixer
    for every input.
    """

    def __init__(self, n_agents: int, state_dim: int, d_mix: int = 32,
                 activation: str = "elu", name: str = "mix"):
        if activation not in ("elu", "identity"):
            raise ValueError(f"unknown mixer activation {activation!r}")
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.d_mix = d_mix
        self.activation = activation
        self.hw1 = Dense(state_dim, n_agents * d_mix, "identity", name + ".hw1")
        self.hb1 = Dense(state_dim, d_mix, "identity", name + ".hb1")
        self.hw2 = Dense(state_dim, d_mix, "identity", name + ".hw2")
        self.hb2 = Dense(state_dim, 1, "identity", name + ".hb2")
        self._cache: list[tuple] = []

    @classmethod
    def vdn_reduction(cls, n_agents: int, state_dim: int) -> "QmixMixer":
        mixer = cls(n_agents, state_dim, d_mix=n_agents, activation="identity")
        mixer.hw1.b.value[...] = np.eye(n_agents).reshape(-1)
        mixer.hw2.b.value[...] = 1.0
        return mixer

    def init_params(self, rng: np.random.Generator) -> None:
        for head in (self.hw1, self.hb1, self.hw2, self.hb2):
            head.init_params(rng)

    def params(self) -> list[Param]:
        return (self.hw1.params() + self.hb1.params()
                + self.hw2.params() + self.hb2.params())

    def forward(self, q_chosen: Array, state: Array, cache: bool = True) -> Array:
        q, q_vec = _as_batch(q_chosen)
        s, s_vec = _as_batch(state)
        if q_vec != s_vec or q.shape[0] != s.shape[0]:
            raise ValueError("q and state batch shapes do not match")
        if q.shape[1] != self.n_agents:
            raise ValueError(f"expected {self.n_agents} agent values, got {q.shape[1]}")

        b = q.shape[0]
        w1_raw = self.hw1.forward(s, cache=cache).reshape(b, self.n_agents, self.d_mix)
        w1 = np.abs(w1_raw)
        b1 = self.hb1.forward(s, cache=cache)
        w2_raw = self.hw2.forward(s, cache=cache)
        w2 = np.abs(w2_raw)
        b2 = self.hb2.forward(s, cache=cache)

        a = np.einsum("bn,bnm->bm", q, w1) + b1
        z = elu(a) if self.activation == "elu" else a
        out = (z * w2).sum(axis=-1) + b2[:, 0]
        if cache:
            self._cache.append((q, w1_raw, w1, w2_raw, w2, a, z))
        return out[0] if q_vec else out

    def backward(self, dout: Array) -> tuple[Array, Array]:
        if not self._cache:
            raise RuntimeError("mixer: backward without matching forward")
        q, w1_raw, w1, w2_raw, w2, a, z = self._cache.pop()
        d = np.atleast_1d(np.asarray(dout, dtype=np.float64))[:, None]

        dz = d * w2
        dw2 = d * z
        db2 = d
        da = dz * elu_grad(a) if self.activation == "elu" else dz
        dq = np.einsum("bm,bnm->bn", da, w1)
        dw1 = np.einsum("bn,bm->bnm", q, da)
        db1 = da

        ds = self.hw1.backward((dw1 * np.sign(w1_raw)).reshape(q.shape[0], -1))
        ds = ds + self.hb1.backward(db1)
        ds = ds + self.hw2.backward(dw2 * np.sign(w2_raw))
        ds = ds + self.hb2.backward(db2)
        return dq, ds
