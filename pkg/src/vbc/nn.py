"""Dense and GRU layers with hand-written backward passes on float64 arrays.

Each layer keeps an explicit cache stack: forward pushes the activations it
will need, backward pops them. Running several forward passes (one per
timestep) and then unwinding them in reverse order gives backpropagation
through time without any graph machinery.
"""

from __future__ import annotations

import json

import numpy as np

Array = np.ndarray


def leaky_relu(x: Array, slope: float = 0.01) -> Array:
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_grad(x: Array, slope: float = 0.01) -> Array:
    return np.where(x >= 0.0, 1.0, slope)


def sigmoid(x: Array) -> Array:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _as_batch(x: Array) -> tuple[Array, bool]:
    """Promote a vector to a 1-row batch; report whether it was a vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError(f"expected 1-D or 2-D input, got shape {x.shape}")


class Param:
    """Named tensor plus gradient and squared-gradient optimizer state."""

    __slots__ = ("name", "value", "grad", "sq")

    def __init__(self, name: str, value: Array):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.sq = np.zeros_like(self.value)


class Dense:
    """Fully connected layer y = act(W x + b)."""

    ACTIVATIONS = ("identity", "leaky_relu")

    def __init__(self, n_in: int, n_out: int, activation: str = "identity",
                 name: str = "dense"):
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.n_in = n_in
        self.n_out = n_out
        self.activation = activation
        self.name = name
        self.w = Param(name + ".w", np.zeros((n_out, n_in)))
        self.b = Param(name + ".b", np.zeros(n_out))
        self._cache: list[tuple[Array, Array]] = []

    def init_params(self, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(self.n_in)
        self.w.value[...] = rng.uniform(-bound, bound, self.w.value.shape)
        self.b.value[...] = rng.uniform(-bound, bound, self.b.value.shape)

    def params(self) -> list[Param]:
        return [self.w, self.b]

    def forward(self, x: Array, cache: bool = True) -> Array:
        x2, was_vec = _as_batch(x)
        if x2.shape[1] != self.n_in:
            raise ValueError(
                f"{self.name}: expected input dim {self.n_in}, got {x2.shape[1]}")
        pre = x2 @ self.w.value.T + self.b.value
        out = leaky_relu(pre) if self.activation == "leaky_relu" else pre
        if cache:
            self._cache.append((x2, pre))
        return out[0] if was_vec else out

    def backward(self, dy: Array) -> Array:
        if not self._cache:
            raise RuntimeError(f"{self.name}: backward without matching forward")
        x2, pre = self._cache.pop()
        dy2, was_vec = _as_batch(dy)
        dpre = dy2 * leaky_relu_grad(pre) if self.activation == "leaky_relu" else dy2
        self.w.grad += dpre.T @ x2
        self.b.grad += dpre.sum(axis=0)
        dx = dpre @ self.w.value
        return dx[0] if was_vec else dx


class GruCell:
    """GRU with update gate z, reset gate r and tanh candidate.

    Convention used here: h_new = (1 - z) * h_prev + z * h_tilde, with the
    candidate computed from the reset-gated previous state.
    """

    def __init__(self, n_in: int, n_h: int, name: str = "gru"):
        self.n_in = n_in
        self.n_h = n_h
        self.name = name
        self._params = {}
        for gate in ("z", "r", "h"):
            self._params["w_" + gate] = Param(f"{name}.w_{gate}", np.zeros((n_h, n_in)))
            self._params["u_" + gate] = Param(f"{name}.u_{gate}", np.zeros((n_h, n_h)))
            self._params["b_" + gate] = Param(f"{name}.b_{gate}", np.zeros(n_h))
        self._cache: list[tuple[Array, ...]] = []

    def init_params(self, rng: np.random.Generator) -> None:
        for key, p in self._params.items():
            fan_in = self.n_in if key.startswith("w") else self.n_h
            bound = 1.0 / np.sqrt(fan_in)
            p.value[...] = rng.uniform(-bound, bound, p.value.shape)

    def params(self) -> list[Param]:
        return list(self._params.values())

    def _gate(self, kind: str, x: Array, h: Array) -> Array:
        p = self._params
        return (x @ p["w_" + kind].value.T + h @ p["u_" + kind].value.T
                + p["b_" + kind].value)

    def forward(self, x: Array, h_prev: Array, cache: bool = True) -> Array:
        x2, was_vec = _as_batch(x)
        h2, _ = _as_batch(h_prev)
        if x2.shape[1] != self.n_in or h2.shape[1] != self.n_h:
            raise ValueError(
                f"{self.name}: expected dims ({self.n_in}, {self.n_h}), "
                f"got ({x2.shape[1]}, {h2.shape[1]})")
        if x2.shape[0] != h2.shape[0]:
            raise ValueError(f"{self.name}: batch sizes differ")
        z = sigmoid(self._gate("z", x2, h2))
        r = sigmoid(self._gate("r", x2, h2))
        rh = r * h2
        h_tilde = np.tanh(x2 @ self._params["w_h"].value.T
                          + rh @ self._params["u_h"].value.T
                          + self._params["b_h"].value)
        h_new = (1.0 - z) * h2 + z * h_tilde
        if cache:
            self._cache.append((x2, h2, z, r, rh, h_tilde))
        return h_new[0] if was_vec else h_new

    def backward(self, dh_new: Array) -> tuple[Array, Array]:
        if not self._cache:
            raise RuntimeError(f"{self.name}: backward without matching forward")
        x2, h2, z, r, rh, h_tilde = self._cache.pop()
        d2, was_vec = _as_batch(dh_new)
        p = self._params

        dz = d2 * (h_tilde - h2)
        dh_tilde = d2 * z
        dh_prev = d2 * (1.0 - z)

        da_h = dh_tilde * (1.0 - h_tilde * h_tilde)
        p["w_h"].grad += da_h.T @ x2
        p["u_h"].grad += da_h.T @ rh
        p["b_h"].grad += da_h.sum(axis=0)
        dx = da_h @ p["w_h"].value
        drh = da_h @ p["u_h"].value
        dr = drh * h2
        dh_prev += drh * r

        da_z = dz * z * (1.0 - z)
        p["w_z"].grad += da_z.T @ x2
        p["u_z"].grad += da_z.T @ h2
        p["b_z"].grad += da_z.sum(axis=0)
        dx += da_z @ p["w_z"].value
        dh_prev += da_z @ p["u_z"].value

        da_r = dr * r * (1.0 - r)
        p["w_r"].grad += da_r.T @ x2
        p["u_r"].grad += da_r.T @ h2
        p["b_r"].grad += da_r.sum(axis=0)
        dx += da_r @ p["w_r"].value
        dh_prev += da_r @ p["u_r"].value

        if was_vec:
            return dx[0], dh_prev[0]
        return dx, dh_prev


class ParamBlock:
    """Ordered collection of named parameters with an RMSprop step."""

    def __init__(self, params: list[Param]):
        self._params: dict[str, Param] = {}
        for p in params:
            if p.name in self._params:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            self._params[p.name] = p

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def zero_grad(self) -> None:
        for p in self:
            p.grad[...] = 0.0

    def rmsprop_step(self, lr: float, alpha: float = 0.99,
                     eps: float = 1e-8) -> None:
        """s <- alpha*s + (1-alpha)*g^2; theta <- theta - lr*g/sqrt(s+eps).

        Clears gradients afterwards. Raises on any non-finite gradient so a
        diverging run fails loudly instead of silently corrupting weights.
        """
        for p in self:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in {p.name}")
            p.sq[...] = alpha * p.sq + (1.0 - alpha) * p.grad * p.grad
            p.value[...] -= lr * p.grad / np.sqrt(p.sq + eps)
        self.zero_grad()

    def copy_from(self, other: "ParamBlock") -> None:
        if self.names() != other.names():
            raise ValueError("parameter blocks do not match")
        for name, p in self._params.items():
            src = other[name]
            if p.value.shape != src.value.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.value[...] = src.value

    def state_dict(self) -> dict:
        return {
            name: {"shape": list(p.value.shape),
                   "data": p.value.reshape(-1).tolist()}
            for name, p in self._params.items()
        }

    def save(self, path, version: str) -> None:
        payload = {"version": version, "params": self.state_dict()}
        with open(path, "w") as fh:
            json.dump(payload, fh)

    def load(self, path) -> str:
        with open(path) as fh:
            payload = json.load(fh)
        if "version" not in payload:
            raise ValueError(f"checkpoint {path} has no version field")
        params = payload.get("params", {})
        missing = set(self._params) - set(params)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
        for name, p in self._params.items():
            entry = params[name]
            if tuple(entry["shape"]) != p.value.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint has {entry['shape']}, "
                    f"expected {list(p.value.shape)}")
            p.value[...] = np.asarray(entry["data"], dtype=np.float64).reshape(
                p.value.shape)
        return payload["version"]


def finite_difference_grads(f, block: ParamBlock, h: float = 1e-5) -> dict:
    """Central finite differences of scalar f() in every parameter entry."""
    out = {}
    for p in block:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lo_hi = f()
            flat[i] = orig - h
            lo_lo = f()
            flat[i] = orig
            gflat[i] = (lo_hi - lo_lo) / (2.0 * h)
        out[p.name] = g
    return out


def max_relative_error(f, block: ParamBlock, h: float = 1e-5) -> float:
    """Compare analytic gradients already stored in the block against
    central finite differences of f(). Returns the worst relative error.

    The denominator is floored at 1e-6: entries where both gradients sit
    below that are compared on an absolute scale, since central differences
    at h=1e-5 cannot resolve relative error on near-zero gradients.
    """
    fd = finite_difference_grads(f, block, h)
    worst = 0.0
    for p in block:
        num = np.abs(p.grad - fd[p.name])
        den = np.maximum(1e-6, np.abs(p.grad) + np.abs(fd[p.name]))
        worst = max(worst, float((num / den).max()))
    return worst
