"""Token-based prediction heads: box-coordinate distributions and quality score.

Both heads read only the four prediction tokens. Box coordinates are
regressed as probability distributions over n_bins uniform bins on [0, 1]
(bin i has center (i + 0.5) / n_bins) and decoded as the expectation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .layers import Linear, Mlp
from .rng import Rng

COORD_ORDER = ("t", "l", "b", "r")


@dataclass
class Box:
    """Normalized box, top/left/bottom/right in [0, 1]."""

    t: float
    l: float
    b: float
    r: float

    @property
    def width(self) -> float:
        return max(0.0, self.r - self.l)

    @property
    def height(self) -> float:
        return max(0.0, self.b - self.t)

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self):
        return (0.5 * (self.t + self.b), 0.5 * (self.l + self.r))

    def as_array(self) -> np.ndarray:
        return np.array([self.t, self.l, self.b, self.r], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Box":
        t, l, b, r = (float(v) for v in arr)
        return cls(t, l, b, r)


@dataclass
class BoxDistribution:
    """Rows ordered (T, L, B, R); each row nonnegative and sums to 1."""

    probs: np.ndarray  # [4, n_bins]

    def __post_init__(self):
        probs = np.asarray(self.probs)
        if probs.ndim != 2 or probs.shape[0] != 4:
            raise ValueError(f"expected [4, n_bins] probabilities, got {probs.shape}")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-6):
            raise ValueError("rows must be nonnegative and sum to 1 within 1e-6")
        self.probs = probs

    @property
    def n_bins(self) -> int:
        return self.probs.shape[1]


def bin_centers(n_bins: int, dtype=np.float32) -> np.ndarray:
    return ((np.arange(n_bins) + 0.5) / n_bins).astype(dtype)


def decode_box(probs: ag.Tensor) -> ag.Tensor:
    """Expectation over bin centers, then clamp so t <= b and l <= r.

    probs: [..., 4, n_bins] -> [..., 4] coordinates in (T, L, B, R) order.
    """
    n = probs.shape[-1]
    centers = ag.Tensor(bin_centers(n, dtype=probs.data.dtype))
    coords = ag.sum_(probs * centers, axis=-1)  # [..., 4]
    t = coords[..., 0:1]
    l = coords[..., 1:2]
    b = coords[..., 2:3]
    r = coords[..., 3:4]
    return ag.concat([ag.minimum(t, b), ag.minimum(l, r),
                      ag.maximum(t, b), ag.maximum(l, r)], axis=-1)


def decode_distribution(dist: BoxDistribution) -> Box:
    coords = decode_box(ag.Tensor(dist.probs)).data
    return Box.from_array(coords)


class BoxHead:
    """One weight-shared 2-layer MLP (d -> d -> n_bins) applied per token."""

    def __init__(self, rng: Rng, embed_dim: int, n_bins: int):
        self.n_bins = n_bins
        self.mlp = Mlp(rng, embed_dim, embed_dim, n_bins)

    def __call__(self, pred_tokens: ag.Tensor) -> ag.Tensor:
        """[..., 4, d] prediction tokens -> [..., 4, n_bins] distributions."""
        if pred_tokens.shape[-2] != 4:
            raise ValueError(f"expected 4 prediction tokens, got {pred_tokens.shape[-2]}")
        return ag.softmax(self.mlp(pred_tokens), axis=-1)

    def params(self, prefix: str) -> dict:
        return self.mlp.params(f"{prefix}.mlp")


class ScoreHead:
    """Mean of the four prediction tokens -> 2-layer MLP -> sigmoid."""

    def __init__(self, rng: Rng, embed_dim: int):
        self.fc1 = Linear(rng, embed_dim, embed_dim)
        self.fc2 = Linear(rng, embed_dim, 1)

    def __call__(self, pred_tokens: ag.Tensor) -> ag.Tensor:
        """[..., 4, d] -> [...] confidence score in (0, 1)."""
        if pred_tokens.shape[-2] != 4:
            raise ValueError(f"expected 4 prediction tokens, got {pred_tokens.shape[-2]}")
        pooled = ag.mean(pred_tokens, axis=-2)
        logits = self.fc2(ag.gelu(self.fc1(pooled)))
        return ag.reshape(ag.sigmoid(logits), logits.shape[:-1])

    def params(self, prefix: str) -> dict:
        return {**self.fc1.params(f"{prefix}.fc1"), **self.fc2.params(f"{prefix}.fc2")}
