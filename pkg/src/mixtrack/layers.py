"""Parameterized building blocks: linear, layer norm, two-layer MLP."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .rng import Rng

INIT_STD = 0.02
INIT_CLIP = 2.0


def trunc_normal_param(rng: Rng, shape) -> ag.Tensor:
    return ag.Tensor(rng.trunc_normal(shape, std=INIT_STD, clip=INIT_CLIP), requires_grad=True)


def zeros_param(shape) -> ag.Tensor:
    return ag.Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def ones_param(shape) -> ag.Tensor:
    return ag.Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


class Linear:
    def __init__(self, rng: Rng, d_in: int, d_out: int):
        self.w = trunc_normal_param(rng, (d_in, d_out))
        self.b = zeros_param((d_out,))

    def __call__(self, x: ag.Tensor) -> ag.Tensor:
        return ag.matmul(x, self.w) + self.b

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = ones_param((dim,))
        self.bias = zeros_param((dim,))
        self.eps = eps

    def __call__(self, x: ag.Tensor) -> ag.Tensor:
        return ag.layer_norm(x, self.gain, self.bias, eps=self.eps)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class Mlp:
    """Linear -> GELU -> Linear."""

    def __init__(self, rng: Rng, d_in: int, d_hidden: int, d_out: int | None = None):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out if d_out is not None else d_in)

    def __call__(self, x: ag.Tensor) -> ag.Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))

    def params(self, prefix: str) -> dict:
        return {**self.fc1.params(f"{prefix}.fc1"), **self.fc2.params(f"{prefix}.fc2")}
