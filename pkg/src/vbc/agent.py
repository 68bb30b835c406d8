"""Per-agent recurrent Q-network, shared message encoder and combiner.

One parameter set serves every agent: the observation carries an agent-id
one-hot, so full weight sharing still lets agents behave differently. The
GRU output at each step doubles as both the recurrent carry and the input
to the message encoder.
"""

from __future__ import annotations

import numpy as np

from .nn import Array, Dense, GruCell, Param


class AgentNet:
    """obs -> FC embed -> GRU -> c; c -> FC -> local action values.

    `step` returns (q_local, c, h_new) where c and h_new are the same
    vector by construction.
    """

    def __init__(self, obs_dim: int, n_actions: int, d_h: int = 32,
                 name: str = "agent"):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.d_h = d_h
        self.embed = Dense(obs_dim, d_h, "leaky_relu", name + ".embed")
        self.gru = GruCell(d_h, d_h, name + ".gru")
        self.q_head = Dense(d_h, n_actions, "identity", name + ".q")

    def init_params(self, rng: np.random.Generator) -> None:
        self.embed.init_params(rng)
        self.gru.init_params(rng)
        self.q_head.init_params(rng)

    def params(self) -> list[Param]:
        return self.embed.params() + self.gru.params() + self.q_head.params()

    def initial_hidden(self, n: int) -> Array:
        return np.zeros((n, self.d_h))

    def step(self, obs: Array, h_prev: Array,
             cache: bool = True) -> tuple[Array, Array, Array]:
        x = self.embed.forward(obs, cache=cache)
        c = self.gru.forward(x, h_prev, cache=cache)
        q = self.q_head.forward(c, cache=cache)
        return q, c, c

    def backward_step(self, dq: Array, dc: Array, dh_new: Array) -> Array:
        """Unwind one cached step; returns the gradient wrt h_prev.

        dq flows through the Q head, dc is any extra gradient arriving at
        the GRU output (encoder path), dh_new arrives from the next step.
        """
        dtotal = self.q_head.backward(dq) + dc + dh_new
        dx, dh_prev = self.gru.backward(dtotal)
        self.embed.backward(dx)
        return dh_prev


class Encoder:
    """Shared message encoder: FC -> leaky-ReLU -> FC sized to |A|."""

    def __init__(self, d_h: int, n_actions: int, hidden: int = 64,
                 name: str = "enc"):
        self.d_h = d_h
        self.n_actions = n_actions
        self.fc1 = Dense(d_h, hidden, "leaky_relu", name + ".fc1")
        self.fc2 = Dense(hidden, n_actions, "identity", name + ".fc2")

    def init_params(self, rng: np.random.Generator) -> None:
        self.fc1.init_params(rng)
        self.fc2.init_params(rng)

    def params(self) -> list[Param]:
        return self.fc1.params() + self.fc2.params()

    def forward(self, c: Array, cache: bool = True) -> Array:
        return self.fc2.forward(self.fc1.forward(c, cache=cache), cache=cache)

    def backward(self, dm: Array) -> Array:
        return self.fc1.backward(self.fc2.backward(dm))


def combine(q_local: Array, messages: list[Array]) -> Array:
    """Elementwise sum of local action values and received messages.

    Messages are added in list order with sequential in-place adds, so two
    callers that present the same messages in the same order get bit-equal
    results.
    """
    q_local = np.asarray(q_local, dtype=np.float64)
    out = q_local.copy()
    for m in messages:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != q_local.shape:
            raise ValueError(
                f"message shape {m.shape} does not match {q_local.shape}")
        out += m
    return out


def message_variance(m: Array) -> float:
    """Population variance over the message components."""
    return float(np.var(np.asarray(m, dtype=np.float64)))
