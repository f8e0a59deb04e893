"""Small network building blocks registered into a ParamRegistry."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamRegistry, Rng, Tensor


def glorot_uniform(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -limit, limit)


def orthogonal(rng: Rng, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal((n, n)))
    return q * np.sign(np.diag(r))


class Linear:
    def __init__(self, params: ParamRegistry, name: str, n_in: int, n_out: int, rng: Rng,
                 zero_init: bool = False, bias: float = 0.0):
        w = np.zeros((n_in, n_out)) if zero_init else glorot_uniform(rng.child(name), n_in, n_out)
        self.w = params.add(f"{name}.w", w)
        self.b = params.add(f"{name}.b", np.full(n_out, bias, dtype=float))
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class MLP:
    """Linear layers with ELU between them and a linear output."""

    def __init__(self, params: ParamRegistry, name: str, sizes: list[int], rng: Rng,
                 zero_last: bool = False, out_bias=0.0):
        n = len(sizes) - 1
        self.layers = [
            Linear(params, f"{name}.l{i}", sizes[i], sizes[i + 1], rng,
                   zero_init=zero_last and i == n - 1, bias=out_bias if i == n - 1 else 0.0)
            for i in range(n)
        ]
        if not np.isscalar(out_bias):
            self.layers[-1].b.data = np.asarray(out_bias, dtype=float).copy()

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = ad.elu(layer(x))
        return self.layers[-1](x)


class RNNCell:
    """Vanilla tanh RNN: h' = tanh(x W + h U + b)."""

    def __init__(self, params: ParamRegistry, name: str, n_in: int, n_hidden: int, rng: Rng):
        self.w = params.add(f"{name}.w", glorot_uniform(rng.child(name, "w"), n_in, n_hidden))
        self.u = params.add(f"{name}.u", orthogonal(rng.child(name, "u"), n_hidden))
        self.b = params.add(f"{name}.b", np.zeros(n_hidden))
        self.n_hidden = n_hidden

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return ad.tanh(x @ self.w + h @ self.u + self.b)


class GRUCell:
    def __init__(self, params: ParamRegistry, name: str, n_in: int, n_hidden: int, rng: Rng):
        H = n_hidden
        self.w = params.add(f"{name}.w", glorot_uniform(rng.child(name, "w"), n_in, 3 * H))
        u = np.concatenate([orthogonal(rng.child(name, "u", i), H) for i in range(3)], axis=1)
        self.u = params.add(f"{name}.u", u)
        self.b = params.add(f"{name}.b", np.zeros(3 * H))
        self.n_hidden = H

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        H = self.n_hidden
        gx = x @ self.w + self.b
        gh = h @ self.u
        z = ad.sigmoid(gx[..., :H] + gh[..., :H])
        r = ad.sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
        n = ad.tanh(gx[..., 2 * H:] + r * gh[..., 2 * H:])
        return n + z * (h - n)
