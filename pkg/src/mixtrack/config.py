"""Model configuration and the standard variants."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

from .errors import ConfigError

N_PRED_TOKENS = 4


@dataclass
class ModelConfig:
    """Architecture hyperparameters for one tracker variant.

    `n_bins` follows the convention n_bins = search_size / (patch_size / 4)
    unless set explicitly; for distillation it must equal the teacher's
    heatmap side.
    """

    depth: int
    embed_dim: int
    num_heads: int = 0          # 0 -> embed_dim // 64
    mlp_ratio: float = 4.0
    patch_size: int = 16
    search_size: int = 288
    template_size: int = 128
    n_bins: int = 0             # 0 -> search_size // (patch_size // 4)
    n_templates: int = 1
    n_pred_tokens: int = field(default=N_PRED_TOKENS)

    def __post_init__(self):
        if self.num_heads == 0:
            self.num_heads = max(1, self.embed_dim // 64)
        if self.n_bins == 0:
            self.n_bins = self.search_size // max(1, self.patch_size // 4)
        self.validate()

    def validate(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.n_pred_tokens != N_PRED_TOKENS:
            raise ConfigError(f"n_pred_tokens is fixed at {N_PRED_TOKENS}")
        if self.search_size % self.patch_size != 0:
            raise ConfigError(f"search_size {self.search_size} not divisible by patch_size {self.patch_size}")
        if self.template_size % self.patch_size != 0:
            raise ConfigError(f"template_size {self.template_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        hidden = self.embed_dim * self.mlp_ratio
        if abs(hidden - round(hidden)) > 1e-9:
            raise ConfigError(f"mlp_ratio {self.mlp_ratio} gives non-integer hidden dim for embed_dim {self.embed_dim}")
        if self.n_templates < 1:
            raise ConfigError("n_templates must be >= 1")
        if self.n_bins < 2:
            raise ConfigError(f"n_bins must be >= 2, got {self.n_bins}")

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def search_tokens_side(self) -> int:
        return self.search_size // self.patch_size

    @property
    def n_search_tokens(self) -> int:
        return self.search_tokens_side ** 2

    @property
    def template_tokens_side(self) -> int:
        return self.template_size // self.patch_size

    @property
    def tokens_per_template(self) -> int:
        return self.template_tokens_side ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown model config key: {sorted(unknown)[0]}")
        if "depth" not in d or "embed_dim" not in d:
            missing = [k for k in ("depth", "embed_dim") if k not in d]
            raise ConfigError(f"missing model config key: {missing[0]}")
        return cls(**d)


def config_b() -> ModelConfig:
    """8-layer, dim-768, MLP-ratio-4 variant at 288/128 (the GPU model)."""
    return ModelConfig(depth=8, embed_dim=768, mlp_ratio=4.0, search_size=288, template_size=128)


def config_s() -> ModelConfig:
    """4-layer, dim-768, MLP-ratio-1 variant at 224/112 (the CPU model)."""
    return ModelConfig(depth=4, embed_dim=768, mlp_ratio=1.0, search_size=224, template_size=112)


def config_dense_12() -> ModelConfig:
    """12-layer starting point that the pruning routes shrink from."""
    return ModelConfig(depth=12, embed_dim=768, mlp_ratio=4.0, search_size=288, template_size=128)


def config_toy(depth=6, embed_dim=64, mlp_ratio=4.0, search_size=64, template_size=32,
               n_templates=2) -> ModelConfig:
    """Desk-scale config used by the synthetic end-to-end experiments."""
    return ModelConfig(depth=depth, embed_dim=embed_dim, mlp_ratio=mlp_ratio,
                       search_size=search_size, template_size=template_size,
                       patch_size=16, n_templates=n_templates)


PRESETS = {
    "b": config_b,
    "s": config_s,
    "dense12": config_dense_12,
    "toy": config_toy,
}
