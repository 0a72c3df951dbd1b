"""Small learnable building blocks shared by the encoder, decoder and waveformer."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Module, Tensor

_ACTIVATIONS = {"gelu": T.gelu, "tanh": T.tanh, "relu": T.relu}


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = T.uniform_init((n_in, n_out), n_in, rng)
        self.bias = T.uniform_init((n_out,), n_in, rng) if bias else None

    def __call__(self, x) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def zero_(self) -> "Linear":
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0
        return self


class MLP(Module):
    """Fully connected net; activation between layers, none after the last."""

    def __init__(self, sizes, rng: np.random.Generator, activation: str = "gelu"):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self._act = _ACTIVATIONS[activation]

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self._act(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)
