"""Patch embedding, prediction tokens, and the mixed-attention backbone.

The token sequence is laid out as [templates | search | prediction tokens].
Attention is asymmetric: template queries attend only to template keys,
while search and prediction-token queries attend to the full sequence.
Each block supports a residual-branch decay factor gamma in [0, 1] used by
progressive depth pruning; gamma = 1 is the standard block and gamma = 0
makes the block an exact identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .config import ModelConfig
from .errors import ConfigError
from .layers import Linear, LayerNorm, Mlp, trunc_normal_param
from .rng import Rng


@dataclass(frozen=True)
class TokenLayout:
    """Block structure of one mixed token sequence."""

    n_template: int
    n_search: int
    n_pred: int = 4

    @property
    def seq_len(self) -> int:
        return self.n_template + self.n_search + self.n_pred

    @property
    def template_slice(self) -> slice:
        return slice(0, self.n_template)

    @property
    def search_slice(self) -> slice:
        return slice(self.n_template, self.n_template + self.n_search)

    @property
    def pred_slice(self) -> slice:
        return slice(self.n_template + self.n_search, self.seq_len)


@dataclass
class MixedTokenSequence:
    tokens: ag.Tensor  # [batch, seq_len, embed_dim]
    layout: TokenLayout

    def __post_init__(self):
        if self.tokens.shape[1] != self.layout.seq_len:
            raise ValueError(
                f"layout counts sum to {self.layout.seq_len} but sequence length is {self.tokens.shape[1]}")

    def template_tokens(self) -> ag.Tensor:
        return ag.slice_axis(self.tokens, 1, 0, self.layout.n_template)

    def search_tokens(self) -> ag.Tensor:
        return ag.slice_axis(self.tokens, 1, self.layout.n_template,
                             self.layout.n_template + self.layout.n_search)

    def pred_tokens(self) -> ag.Tensor:
        return ag.slice_axis(self.tokens, 1, self.layout.n_template + self.layout.n_search,
                             self.layout.seq_len)


@dataclass
class AttnRecord:
    """Attention probabilities of one block (numpy, for inspection only).

    template_probs: [batch, heads, n_template, n_template]; template queries
    see template keys only, so mass on search/pred columns is structurally
    zero. rest_probs: [batch, heads, n_search + n_pred, seq_len].
    """

    template_probs: np.ndarray
    rest_probs: np.ndarray


def patchify(images: ag.Tensor, patch: int) -> ag.Tensor:
    """[B, H, W, 3] -> [B, (H/p)*(W/p), p*p*3], row-major patch order."""
    b, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = ag.reshape(images, (b, gh, patch, gw, patch, c))
    x = ag.transpose(x, (0, 1, 3, 2, 4, 5))
    return ag.reshape(x, (b, gh * gw, patch * patch * c))


def _broadcast_rows(param: ag.Tensor, batch: int) -> ag.Tensor:
    """[n, d] parameter -> [batch, n, d] with gradient summed back."""
    n, d = param.shape
    expanded = ag.reshape(param, (1, n, d))
    return ag.add(expanded, ag.Tensor(np.zeros((batch, 1, 1), dtype=param.data.dtype)))


class PMAMBlock:
    """Pre-norm transformer block with asymmetric mixed attention."""

    def __init__(self, rng: Rng, dim: int, num_heads: int, mlp_hidden: int):
        if dim % num_heads != 0:
            raise ConfigError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, mlp_hidden)
        self._gamma = 1.0

    @property
    def gamma(self) -> float:
        return self._gamma

    @gamma.setter
    def gamma(self, value: float):
        if not (0.0 <= value <= 1.0):
            raise ValueError(f"gamma must be in [0, 1], got {value}")
        self._gamma = float(value)

    def attention(self, x: ag.Tensor, layout: TokenLayout, record=None) -> ag.Tensor:
        b, seq, d = x.shape
        nh, dh = self.num_heads, self.dim // self.num_heads
        qkv = self.qkv(x)
        qkv = ag.reshape(qkv, (b, seq, 3, nh, dh))
        qkv = ag.transpose(qkv, (2, 0, 3, 1, 4))  # [3, B, nh, L, dh]
        q, k, v = qkv[0], qkv[1], qkv[2]

        nt = layout.n_template
        scale = 1.0 / math.sqrt(dh)
        q_t, k_t, v_t = q[:, :, :nt], k[:, :, :nt], v[:, :, :nt]
        att_t = ag.softmax(ag.matmul(q_t, ag.transpose(k_t, (0, 1, 3, 2))) * scale, axis=-1)
        out_t = ag.matmul(att_t, v_t)

        q_se = q[:, :, nt:]
        att_se = ag.softmax(ag.matmul(q_se, ag.transpose(k, (0, 1, 3, 2))) * scale, axis=-1)
        out_se = ag.matmul(att_se, v)

        if record is not None:
            record.append(AttnRecord(att_t.data, att_se.data))

        merged = ag.concat([out_t, out_se], axis=2)          # [B, nh, L, dh]
        merged = ag.transpose(merged, (0, 2, 1, 3))
        return self.proj(ag.reshape(merged, (b, seq, d)))

    def forward(self, x: ag.Tensor, layout: TokenLayout, gamma=None, record=None) -> ag.Tensor:
        g = self._gamma if gamma is None else float(gamma)
        if not (0.0 <= g <= 1.0):
            raise ValueError(f"gamma must be in [0, 1], got {g}")
        a = self.attention(self.norm1(x), layout, record=record)
        y = x + a
        f = self.mlp(self.norm2(y))
        if g == 1.0:
            return y + f
        # decayed residual branch: x + g * (FFN(ATTN + x) + ATTN); exact
        # identity at g == 0
        return x + (a + f) * g

    def params(self, prefix: str) -> dict:
        out = {}
        out.update(self.norm1.params(f"{prefix}.norm1"))
        out.update(self.qkv.params(f"{prefix}.qkv"))
        out.update(self.proj.params(f"{prefix}.proj"))
        out.update(self.norm2.params(f"{prefix}.norm2"))
        out.update(self.mlp.params(f"{prefix}.mlp"))
        return out


class PMAMBackbone:
    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        d = config.embed_dim
        self.patch_proj = Linear(rng, config.patch_size ** 2 * 3, d)
        self.pos_template = trunc_normal_param(rng, (config.tokens_per_template, d))
        self.pos_search = trunc_normal_param(rng, (config.n_search_tokens, d))
        self.pred_tokens = trunc_normal_param(rng, (config.n_pred_tokens, d))
        self.blocks = [PMAMBlock(rng, d, config.num_heads, config.mlp_hidden)
                       for _ in range(config.depth)]
        self.out_norm = LayerNorm(d)

    @property
    def gammas(self) -> list:
        return [blk.gamma for blk in self.blocks]

    def set_gamma(self, layers_1idx, value: float):
        """Set gamma on the given 1-indexed layers."""
        for layer in layers_1idx:
            if not (1 <= layer <= len(self.blocks)):
                raise ValueError(f"layer {layer} out of range 1..{len(self.blocks)}")
            self.blocks[layer - 1].gamma = value

    def layout_for(self, n_templates: int) -> TokenLayout:
        return TokenLayout(n_template=n_templates * self.config.tokens_per_template,
                           n_search=self.config.n_search_tokens,
                           n_pred=self.config.n_pred_tokens)

    def tokenize(self, templates, search) -> MixedTokenSequence:
        """Embed template/search patches, add position embeddings, append
        prediction tokens (which carry no position embedding)."""
        cfg = self.config
        if not 1 <= len(templates) <= cfg.n_templates:
            raise ConfigError(f"expected 1..{cfg.n_templates} templates, got {len(templates)}")
        templates = [t if isinstance(t, ag.Tensor) else ag.Tensor(np.asarray(t, dtype=np.float32))
                     for t in templates]
        search = search if isinstance(search, ag.Tensor) else ag.Tensor(np.asarray(search, dtype=np.float32))

        b = search.shape[0]
        if search.shape[1:] != (cfg.search_size, cfg.search_size, 3):
            raise ConfigError(f"search image shape {tuple(search.shape[1:])} != "
                              f"({cfg.search_size}, {cfg.search_size}, 3)")
        for t in templates:
            if t.shape != (b, cfg.template_size, cfg.template_size, 3):
                raise ConfigError(f"template image shape {tuple(t.shape)} != "
                                  f"({b}, {cfg.template_size}, {cfg.template_size}, 3)")

        pos_t = ag.reshape(self.pos_template, (1,) + tuple(self.pos_template.shape))
        blocks = [self.patch_proj(patchify(t, cfg.patch_size)) + pos_t for t in templates]
        pos_s = ag.reshape(self.pos_search, (1,) + tuple(self.pos_search.shape))
        blocks.append(self.patch_proj(patchify(search, cfg.patch_size)) + pos_s)
        blocks.append(_broadcast_rows(self.pred_tokens, b))

        tokens = ag.concat(blocks, axis=1)
        return MixedTokenSequence(tokens, self.layout_for(len(templates)))

    def forward_tokens(self, seq: MixedTokenSequence, gammas=None, record_features=False,
                       attn_records=None):
        """Run all blocks; returns (post-norm sequence, per-layer features).

        features[i] is block i's full output sequence (pre final norm), i.e.
        exactly the input of block i+1.
        """
        if gammas is not None and len(gammas) != len(self.blocks):
            raise ValueError(f"got {len(gammas)} gammas for {len(self.blocks)} blocks")
        x = seq.tokens
        features = []
        for i, blk in enumerate(self.blocks):
            x = blk.forward(x, seq.layout, gamma=None if gammas is None else gammas[i],
                            record=attn_records)
            if record_features:
                features.append(x)
        out = self.out_norm(x)
        return MixedTokenSequence(out, seq.layout), features

    def forward(self, templates, search, gammas=None, record_features=False, attn_records=None):
        seq = self.tokenize(templates, search)
        return self.forward_tokens(seq, gammas=gammas, record_features=record_features,
                                   attn_records=attn_records)

    def params(self, prefix: str = "backbone") -> dict:
        out = {}
        out.update(self.patch_proj.params(f"{prefix}.patch_proj"))
        out[f"{prefix}.pos_template"] = self.pos_template
        out[f"{prefix}.pos_search"] = self.pos_search
        out[f"{prefix}.pred_tokens"] = self.pred_tokens
        for i, blk in enumerate(self.blocks):
            out.update(blk.params(f"{prefix}.blocks.{i}"))
        out.update(self.out_norm.params(f"{prefix}.out_norm"))
        return out
