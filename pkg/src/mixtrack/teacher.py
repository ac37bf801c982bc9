"""Dense-corner teacher head and the 2-D -> 1-D marginalization bridge.

The teacher scores every search-region feature cell with two linear probes
(top-left and bottom-right), bilinearly upsamples the score grids to the
bin resolution, and normalizes each with a softmax over all positions. Its
box decode is the soft-argmax (expectation over the joint map); the
marginals of the same maps are the soft labels for distilling into 1-D
coordinate distributions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .heads import Box, BoxDistribution, bin_centers
from .layers import Linear
from .rng import Rng


@dataclass
class CornerHeatmaps:
    """Normalized top-left / bottom-right corner maps (each sums to 1)."""

    tl: np.ndarray  # [side, side]
    br: np.ndarray

    def __post_init__(self):
        for name, m in (("tl", np.asarray(self.tl)), ("br", np.asarray(self.br))):
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError(f"{name} map must be square 2-D, got {m.shape}")
            if np.any(m < 0) or abs(float(m.sum()) - 1.0) > 1e-6:
                raise ValueError(f"{name} map must be nonnegative and sum to 1 within 1e-6")
        self.tl = np.asarray(self.tl)
        self.br = np.asarray(self.br)

    @property
    def side(self) -> int:
        return self.tl.shape[0]


def upsample_matrix(src: int, dst: int, dtype=np.float32) -> np.ndarray:
    """Bilinear interpolation matrix [dst, src], half-pixel-centered grid.

    Rows sum to 1, so constant maps upsample to the same constant.
    """
    out = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        pos = (i + 0.5) * scale - 0.5
        i0 = int(np.floor(pos))
        w = pos - i0
        i0c = min(max(i0, 0), src - 1)
        i1c = min(max(i0 + 1, 0), src - 1)
        out[i, i0c] += 1.0 - w
        out[i, i1c] += w
    return out.astype(dtype)


def bilinear_upsample(maps: ag.Tensor, dst: int) -> ag.Tensor:
    """[..., s, s] -> [..., dst, dst] bilinear upsampling as two matmuls."""
    src = maps.shape[-1]
    if src == dst:
        return maps
    mat = upsample_matrix(src, dst, dtype=maps.data.dtype)
    up_rows = ag.matmul(ag.Tensor(mat), maps)        # [..., dst, src]
    return ag.matmul(up_rows, ag.Tensor(np.ascontiguousarray(mat.T)))


def normalize_2d(logits: ag.Tensor) -> ag.Tensor:
    """Softmax over all positions of [..., h, w] maps."""
    h, w = logits.shape[-2], logits.shape[-1]
    flat = ag.reshape(logits, logits.shape[:-2] + (h * w,))
    return ag.reshape(ag.softmax(flat, axis=-1), logits.shape)


def soft_argmax(maps: ag.Tensor) -> ag.Tensor:
    """Expectation of (row, col) coordinates over the joint map.

    maps: [..., side, side] normalized -> [..., 2] with entries in [0, 1]
    ((row + 0.5)/side, (col + 0.5)/side weighting). Summation runs over the
    full joint, independently of the marginalization path.
    """
    side = maps.shape[-1]
    centers = bin_centers(side, dtype=maps.data.dtype)
    row_w = ag.Tensor(centers.reshape(side, 1))
    col_w = ag.Tensor(centers.reshape(1, side))
    row = ag.sum_(maps * row_w, axis=(-2, -1))
    col = ag.sum_(maps * col_w, axis=(-2, -1))
    return ag.concat([ag.reshape(row, row.shape + (1,)), ag.reshape(col, col.shape + (1,))], axis=-1)


def marginalize_maps(tl: ag.Tensor, br: ag.Tensor) -> ag.Tensor:
    """Corner maps [..., n, n] -> coordinate distributions [..., 4, n].

    Row index carries the vertical coordinate: T and B are row marginals
    (sum over columns), L and R are column marginals (sum over rows).
    """
    if tl.shape != br.shape or tl.shape[-1] != tl.shape[-2]:
        raise ValueError(f"corner maps must be square and same shape, got {tl.shape} / {br.shape}")
    rows_t = ag.sum_(tl, axis=-1)
    cols_l = ag.sum_(tl, axis=-2)
    rows_b = ag.sum_(br, axis=-1)
    cols_r = ag.sum_(br, axis=-2)
    parts = [ag.reshape(m, m.shape[:-1] + (1, m.shape[-1])) for m in (rows_t, cols_l, rows_b, cols_r)]
    return ag.concat(parts, axis=-2)


def marginalize(maps: CornerHeatmaps, n_bins: int | None = None) -> BoxDistribution:
    if n_bins is not None and maps.side != n_bins:
        raise ValueError(f"map side {maps.side} does not match n_bins {n_bins}")
    probs = marginalize_maps(ag.Tensor(maps.tl), ag.Tensor(maps.br)).data
    return BoxDistribution(probs)


class CornerHead:
    """Per-cell linear corner scorers + upsample + 2-D softmax."""

    def __init__(self, rng: Rng, embed_dim: int, feat_side: int, n_bins: int):
        self.feat_side = feat_side
        self.n_bins = n_bins
        self.tl_score = Linear(rng, embed_dim, 1)
        self.br_score = Linear(rng, embed_dim, 1)

    def __call__(self, search_feats: ag.Tensor):
        """[batch, n_search, d] search features -> (tl, br) maps [batch, n_bins, n_bins]."""
        b, n, _ = search_feats.shape
        if n != self.feat_side ** 2:
            raise ValueError(f"search features of length {n} do not form a "
                             f"{self.feat_side}x{self.feat_side} grid")
        maps = []
        for scorer in (self.tl_score, self.br_score):
            logits = ag.reshape(scorer(search_feats), (b, self.feat_side, self.feat_side))
            maps.append(normalize_2d(bilinear_upsample(logits, self.n_bins)))
        return maps[0], maps[1]

    def decode(self, tl: ag.Tensor, br: ag.Tensor) -> ag.Tensor:
        """Soft-argmax both maps -> [batch, 4] boxes in (T, L, B, R) order."""
        tl_rc = soft_argmax(tl)
        br_rc = soft_argmax(br)
        return ag.concat([tl_rc, br_rc], axis=-1)

    def params(self, prefix: str) -> dict:
        return {**self.tl_score.params(f"{prefix}.tl_score"),
                **self.br_score.params(f"{prefix}.br_score")}


def heatmaps_from_arrays(tl, br) -> CornerHeatmaps:
    return CornerHeatmaps(np.asarray(tl), np.asarray(br))


def decode_heatmaps(maps: CornerHeatmaps) -> Box:
    """Joint soft-argmax decode of a single heatmap pair."""
    coords = ag.concat([soft_argmax(ag.Tensor(maps.tl)), soft_argmax(ag.Tensor(maps.br))], axis=-1)
    return Box.from_array(coords.data)
