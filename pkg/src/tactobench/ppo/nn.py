"""Dense networks with hand-written reverse-mode gradients.

Parameters live in a flat ``dict[str, ndarray]`` so that optimisers,
gradient checks and checkpoints can treat them uniformly.  Each layer keeps
whatever it needs from the forward pass in a cache list consumed by the
matching backward call.
"""
from __future__ import annotations

import numpy as np

Params = dict[str, np.ndarray]


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x, y):
    return np.where(x > 0, 1.0, y + 1.0)


def tanh_grad(x, y):
    return 1.0 - y * y


ACTIVATIONS = {
    "elu": (elu, elu_grad),
    "tanh": (np.tanh, tanh_grad),
}


def linear_init(params: Params, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                gain: float = 1.0) -> None:
    # Glorot-uniform weights, zero bias
    lim = gain * np.sqrt(6.0 / (n_in + n_out))
    params[f"{name}.w"] = rng.uniform(-lim, lim, (n_in, n_out))
    params[f"{name}.b"] = np.zeros(n_out)


def linear(params: Params, name: str, x: np.ndarray) -> np.ndarray:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def linear_backward(params: Params, name: str, x: np.ndarray, gy: np.ndarray, grads: Params,
                    need_input_grad: bool = True):
    grads[f"{name}.w"] = grads.get(f"{name}.w", 0.0) + x.T @ gy
    grads[f"{name}.b"] = grads.get(f"{name}.b", 0.0) + gy.sum(axis=0)
    return gy @ params[f"{name}.w"].T if need_input_grad else None


class MLP:
    """Stack of linear layers, each followed by the activation."""

    def __init__(self, name: str, sizes: list[int], activation: str = "elu"):
        self.name = name
        self.sizes = list(sizes)
        self.activation = activation
        self.fn, self.dfn = ACTIVATIONS[activation]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def init(self, params: Params, rng: np.random.Generator) -> None:
        for i in range(self.n_layers):
            linear_init(params, f"{self.name}.{i}", self.sizes[i], self.sizes[i + 1], rng)

    def forward(self, params: Params, x: np.ndarray):
        cache = []
        for i in range(self.n_layers):
            z = linear(params, f"{self.name}.{i}", x)
            y = self.fn(z)
            cache.append((x, z, y))
            x = y
        return x, cache

    def backward(self, params: Params, cache, gy: np.ndarray, grads: Params,
                 need_input_grad: bool = True):
        for i in reversed(range(self.n_layers)):
            x, z, y = cache[i]
            gz = gy * self.dfn(z, y)
            gy = linear_backward(params, f"{self.name}.{i}", x, gz, grads,
                                 need_input_grad=need_input_grad or i > 0)
        return gy


def flatten(params: Params, keys: list[str] | None = None) -> np.ndarray:
    keys = sorted(params) if keys is None else keys
    return np.concatenate([np.ravel(params[k]) for k in keys]) if keys else np.zeros(0)


def global_norm(grads: Params) -> float:
    # fixed key order keeps the reduction deterministic
    return float(np.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads))))


class Adam:
    """Adam with bias correction; state is a plain dict of arrays."""

    def __init__(self, params: Params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(grads):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["scalars"] = np.array([self.t, self.lr], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k == "scalars":
                self.t, self.lr = int(v[0]), float(v[1])
            else:
                kind, _, name = k.partition(".")
                getattr(self, kind)[name] = v.copy()

    def snapshot(self):
        return (self.t, self.lr, {k: v.copy() for k, v in self.m.items()},
                {k: v.copy() for k, v in self.v.items()})

    def restore(self, snap) -> None:
        self.t, self.lr, self.m, self.v = snap[0], snap[1], snap[2], snap[3]
