"""Configurable mini vision transformer: embedding, pre-norm encoder blocks,
mean-pooled classification head.

The same class serves as the trained ancestor network and as the
depth-expanded descendants; only the config differs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

INIT_STD = 0.02


class ShapeError(ValueError):
    """Input does not conform to the model's input spec."""


@dataclass(frozen=True)
class TokenInputSpec:
    """Sequences of continuous token vectors (the desk-scale runtime path)."""

    num_tokens: int
    input_dim: int


@dataclass(frozen=True)
class ImageInputSpec:
    """Square images patchified into tokens."""

    image_size: int
    patch_size: int
    channels: int

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def input_dim(self) -> int:
        return self.channels * self.patch_size ** 2


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int
    num_heads: int
    depth: int
    num_classes: int
    input_spec: TokenInputSpec | ImageInputSpec
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim <= 0 or self.num_heads <= 0 or self.mlp_ratio <= 0:
            raise ValueError("embed_dim, num_heads and mlp_ratio must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    def with_depth(self, depth: int) -> "ModelConfig":
        return replace(self, depth=depth)


def deit_base_config(num_classes: int = 1000) -> ModelConfig:
    """Full-scale reference config, used for parameter accounting."""
    return ModelConfig(
        embed_dim=768,
        num_heads=12,
        depth=12,
        num_classes=num_classes,
        input_spec=ImageInputSpec(image_size=224, patch_size=16, channels=3),
    )


def desk_config(
    num_classes: int = 4,
    depth: int = 12,
    num_tokens: int = 16,
    input_dim: int = 32,
    embed_dim: int = 64,
    num_heads: int = 4,
) -> ModelConfig:
    """Small default that runs the full pipeline in minutes."""
    return ModelConfig(
        embed_dim=embed_dim,
        num_heads=num_heads,
        depth=depth,
        num_classes=num_classes,
        input_spec=TokenInputSpec(num_tokens=num_tokens, input_dim=input_dim),
    )


# ---------------------------------------------------------------------------
# parameter accounting


def count_block_parameters(config: ModelConfig) -> int:
    """Exact weight+bias count of one encoder block."""
    d, r = config.embed_dim, config.mlp_ratio
    qkv = 3 * d * d + 3 * d
    proj = d * d + d
    ffn = 2 * r * d * d + (r + 1) * d
    norms = 4 * d
    return qkv + proj + ffn + norms


def count_embedding_parameters(config: ModelConfig) -> int:
    """Token projection plus learned position embedding."""
    spec = config.input_spec
    d = config.embed_dim
    return spec.input_dim * d + d + spec.num_tokens * d


def count_head_parameters(config: ModelConfig) -> int:
    return config.embed_dim * config.num_classes + config.num_classes


def count_trunk_parameters(config: ModelConfig) -> int:
    """Everything except the classification head (embedding, blocks, final norm)."""
    return (
        count_embedding_parameters(config)
        + config.depth * count_block_parameters(config)
        + 2 * config.embed_dim
    )


def count_parameters(config: ModelConfig, scope: str = "full_model") -> int:
    if scope == "block":
        return count_block_parameters(config)
    if scope == "full_model":
        return count_trunk_parameters(config) + count_head_parameters(config)
    raise ValueError(f"unknown scope {scope!r}; expected 'block' or 'full_model'")


# ---------------------------------------------------------------------------
# encoder block


class EncoderBlock:
    """Pre-norm transformer block: x + Attn(LN1(x)), then + FFN(LN2(.))."""

    PARAM_NAMES = (
        "ln1_gain", "ln1_bias",
        "w_qkv", "b_qkv",
        "w_proj", "b_proj",
        "ln2_gain", "ln2_bias",
        "w_up", "b_up",
        "w_down", "b_down",
    )

    def __init__(self, config: ModelConfig, rng: np.random.Generator, trainable: bool = True):
        d = config.embed_dim
        hidden = config.mlp_ratio * d
        self.embed_dim = d
        self.num_heads = config.num_heads
        self.head_dim = d // config.num_heads

        def w(shape):
            return Parameter(rng.normal(0.0, INIT_STD, size=shape).astype(np.float32), trainable)

        def zeros(n):
            return Parameter(np.zeros(n, dtype=np.float32), trainable)

        self.ln1_gain = Parameter(np.ones(d, dtype=np.float32), trainable)
        self.ln1_bias = zeros(d)
        self.w_qkv = w((d, 3 * d))
        self.b_qkv = zeros(3 * d)
        self.w_proj = w((d, d))
        self.b_proj = zeros(d)
        self.ln2_gain = Parameter(np.ones(d, dtype=np.float32), trainable)
        self.ln2_bias = zeros(d)
        self.w_up = w((d, hidden))
        self.b_up = zeros(hidden)
        self.w_down = w((hidden, d))
        self.b_down = zeros(d)

    def parameters(self) -> list[Parameter]:
        return [getattr(self, name) for name in self.PARAM_NAMES]

    def named_parameters(self):
        return [(name, getattr(self, name)) for name in self.PARAM_NAMES]

    def set_trainable(self, trainable: bool) -> None:
        for p in self.parameters():
            p.trainable = trainable
            p.requires_grad = trainable

    def copy(self, trainable: bool) -> "EncoderBlock":
        dup = EncoderBlock.__new__(EncoderBlock)
        dup.embed_dim = self.embed_dim
        dup.num_heads = self.num_heads
        dup.head_dim = self.head_dim
        for name in self.PARAM_NAMES:
            setattr(dup, name, getattr(self, name).copy(trainable=trainable))
        return dup

    def forward(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        if d != self.embed_dim:
            raise ShapeError(f"block expects embed dim {self.embed_dim}, got {d}")
        h = ad.layer_norm(x, self.ln1_gain, self.ln1_bias)
        qkv = ad.add(ad.matmul(h, self.w_qkv), self.b_qkv)
        nh, hd = self.num_heads, self.head_dim
        q = ad.transpose(ad.reshape(ad.slice_last(qkv, 0, d), (b, t, nh, hd)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(ad.slice_last(qkv, d, 2 * d), (b, t, nh, hd)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(ad.slice_last(qkv, 2 * d, 3 * d), (b, t, nh, hd)), (0, 2, 1, 3))
        att = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        att = ad.softmax_rows(att)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
        x = ad.add(x, ad.add(ad.matmul(ctx, self.w_proj), self.b_proj))
        h2 = ad.layer_norm(x, self.ln2_gain, self.ln2_bias)
        f = ad.gelu(ad.add(ad.matmul(h2, self.w_up), self.b_up))
        f = ad.add(ad.matmul(f, self.w_down), self.b_down)
        return ad.add(x, f)


# ---------------------------------------------------------------------------
# full classifier


def patchify(images: np.ndarray, spec: ImageInputSpec) -> np.ndarray:
    """(B, C, S, S) images -> (B, tokens, C*P*P) rows; pure input prep."""
    b, c, s, s2 = images.shape
    if c != spec.channels or s != spec.image_size or s2 != spec.image_size:
        raise ShapeError(f"expected images (B, {spec.channels}, {spec.image_size}, {spec.image_size})")
    p = spec.patch_size
    g = s // p
    x = images.reshape(b, c, g, p, g, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, c * p * p))


class ViTClassifier:
    """Token/patch embedding, encoder stack, mean pooling, linear head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.embed_dim
        spec = config.input_spec
        self.embed_w = Parameter(rng.normal(0.0, INIT_STD, size=(spec.input_dim, d)).astype(np.float32))
        self.embed_b = Parameter(np.zeros(d, dtype=np.float32))
        self.pos_embed = Parameter(rng.normal(0.0, INIT_STD, size=(spec.num_tokens, d)).astype(np.float32))
        self.blocks = [EncoderBlock(config, rng) for _ in range(config.depth)]
        self.norm_gain = Parameter(np.ones(d, dtype=np.float32))
        self.norm_bias = Parameter(np.zeros(d, dtype=np.float32))
        self.head_w = Parameter(rng.normal(0.0, INIT_STD, size=(d, config.num_classes)).astype(np.float32))
        self.head_b = Parameter(np.zeros(config.num_classes, dtype=np.float32))

    def parameters(self) -> list[Parameter]:
        params = [self.embed_w, self.embed_b, self.pos_embed]
        for blk in self.blocks:
            params.extend(blk.parameters())
        params.extend([self.norm_gain, self.norm_bias, self.head_w, self.head_b])
        return params

    def _prepare(self, batch) -> Tensor:
        spec = self.config.input_spec
        arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float32)
        if isinstance(spec, ImageInputSpec) and arr.ndim == 4:
            arr = patchify(arr, spec)
        if arr.ndim != 3 or arr.shape[1] != spec.num_tokens or arr.shape[2] != spec.input_dim:
            raise ShapeError(
                f"expected batch (B, {spec.num_tokens}, {spec.input_dim}), got {arr.shape}"
            )
        return batch if isinstance(batch, Tensor) and arr is batch.data else Tensor(arr)

    def embed(self, batch) -> Tensor:
        x = self._prepare(batch)
        return ad.add(ad.add(ad.matmul(x, self.embed_w), self.embed_b), self.pos_embed)

    def forward(self, batch) -> Tensor:
        x = self.embed(batch)
        for blk in self.blocks:
            x = blk.forward(x)
        x = ad.layer_norm(x, self.norm_gain, self.norm_bias)
        pooled = ad.reduce_mean(x, axis=1)
        return ad.add(ad.matmul(pooled, self.head_w), self.head_b)

    __call__ = forward


def model_state(model: ViTClassifier) -> list[tuple[str, np.ndarray]]:
    items = [
        ("embed_w", model.embed_w.data),
        ("embed_b", model.embed_b.data),
        ("pos_embed", model.pos_embed.data),
    ]
    for i, blk in enumerate(model.blocks):
        for name, p in blk.named_parameters():
            items.append((f"block{i:02d}.{name}", p.data))
    items += [
        ("norm_gain", model.norm_gain.data),
        ("norm_bias", model.norm_bias.data),
        ("head_w", model.head_w.data),
        ("head_b", model.head_b.data),
    ]
    return items


def load_model_state(model: ViTClassifier, arrays: dict[str, np.ndarray]) -> None:
    for name, arr in model_state(model):
        src = arrays.get(name)
        if src is None:
            raise KeyError(f"checkpoint missing tensor {name!r}")
        if src.shape != arr.shape:
            raise ValueError(f"tensor {name!r} shape {src.shape} != expected {arr.shape}")
        arr[...] = src
