"""Vision transformer backbone with a class token and a trailing budget row.

Token layout for an image with ``N`` patches is ``N + 2`` rows: patches
``0..N-1``, the class token at ``N`` and the budget token at ``N + 1``.
Because selection never drops the last two rows, the class token is always
the second-to-last row, also after discarded tokens are removed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Value
from .layers import INIT_STD, FeedForward, LayerNorm, Linear, Module, param

MASK_FILL = -1e9
# fixed pixel standardization; [0, 1] inputs share a large offset that stalls early training
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    height: int = 32
    width: int = 32
    patch: int = 4
    dim: int = 64
    heads: int = 4
    head_dim_k: int = 16
    head_dim_v: int = 16
    depth: int = 6
    split: int = 3
    num_classes: int = 10
    ffn_dim: int = 256

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(
                f"image {self.height}x{self.width} not divisible by patch size {self.patch}"
            )
        if not 1 < self.split < self.depth:
            raise ValueError(f"split point must satisfy 1 < s < L, got s={self.split}, L={self.depth}")
        if min(self.dim, self.heads, self.head_dim_k, self.head_dim_v, self.num_classes) < 1:
            raise ValueError("dimensions must be positive")

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def num_tokens(self) -> int:
        """Rows of the token matrix: patches, class token, budget token."""
        return self.num_patches + 2

    @property
    def class_index(self) -> int:
        return self.num_patches

    @property
    def budget_index(self) -> int:
        return self.num_patches + 1

    @property
    def input_size(self) -> int:
        return self.channels * self.height * self.width

    def to_dict(self) -> dict:
        return asdict(self)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, C*P*P), patches in row-major order."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // patch) * (w // patch), c * patch * patch)


class PatchEmbed(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.proj = Linear(config.channels * config.patch**2, config.dim, rng)
        # one learned position per patch plus one for the class token
        self.pos = param(rng.normal(0.0, INIT_STD, size=(config.num_patches + 1, config.dim)))
        self.cls = param(rng.normal(0.0, INIT_STD, size=(config.dim,)))

    def __call__(self, images, budget_rows) -> Value:
        cfg = self.config
        images = np.asarray(images, dtype=dc.DTYPE)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (cfg.channels, cfg.height, cfg.width):
            raise ShapeError(f"patch_embed: image shape {images.shape[1:]} does not match config")
        batch = images.shape[0]
        budget_rows = budget_rows if isinstance(budget_rows, Value) else Value(budget_rows)
        if budget_rows.shape != (batch, cfg.dim):
            raise ShapeError(f"patch_embed: budget rows {budget_rows.shape}, expected {(batch, cfg.dim)}")
        n = cfg.num_patches
        pixels = (patchify(images, cfg.patch) - PIXEL_MEAN) / PIXEL_STD
        tokens = self.proj(pixels) + dc.take(self.pos, np.arange(n), axis=0)
        cls = self.cls + dc.take(self.pos, [n], axis=0)  # (1, d)
        cls = dc.mul(cls, np.ones((batch, 1, 1)))
        return dc.concat([tokens, cls, dc.reshape(budget_rows, (batch, 1, cfg.dim))], axis=-2)


def patch_embed(images, embed: PatchEmbed, budget_rows) -> Value:
    return embed(images, budget_rows)


def self_attention_head(h, wq, wk, wv, key_bias=None) -> Value:
    """Single head: ``softmax(Q K^T / sqrt(d_k)) V`` with row-wise softmax."""
    h, wq, wk, wv = (dc._wrap(v) for v in (h, wq, wk, wv))
    d = h.shape[-1]
    if wq.shape[0] != d or wk.shape[0] != d or wv.shape[0] != d or wq.shape[1] != wk.shape[1]:
        raise ShapeError(
            f"self_attention_head: H {h.shape}, Wq {wq.shape}, Wk {wk.shape}, Wv {wv.shape}"
        )
    q, k, v = h @ wq, h @ wk, h @ wv
    scores = dc.matmul(q, dc.transpose(k, _swap_last(k.ndim))) * (1.0 / np.sqrt(wq.shape[1]))
    if key_bias is not None:
        scores = scores + key_bias
    return dc.matmul(dc.softmax(scores, axis=-1), v)


def attention_weights(h, wq, wk) -> np.ndarray:
    q = np.asarray(h) @ np.asarray(wq)
    k = np.asarray(h) @ np.asarray(wk)
    return dc.softmax(q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])).data


def multi_head_attention(h, heads, wo) -> Value:
    """``[SA_1(H), ..., SA_H(H)] W_o``; ``heads`` is a list of (Wq, Wk, Wv)."""
    wo = dc._wrap(wo)
    outs = [self_attention_head(h, *w) for w in heads]
    width = sum(o.shape[-1] for o in outs)
    if wo.shape[0] != width:
        raise ShapeError(f"multi_head_attention: {len(heads)} heads give width {width}, W_o is {wo.shape}")
    return dc.concat(outs, axis=-1) @ wo


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def key_bias_from_mask(keep: np.ndarray | None) -> np.ndarray | None:
    """Additive attention bias that hides keys where ``keep`` is False."""
    if keep is None:
        return None
    keep = np.asarray(keep, dtype=bool)
    return np.where(keep, 0.0, MASK_FILL)[:, None, None, :]


class Attention(Module):
    """Fused multi-head attention; numerically the same as :func:`multi_head_attention`."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        d, h, dk, dv = config.dim, config.heads, config.head_dim_k, config.head_dim_v
        self.heads, self.dk, self.dv = h, dk, dv
        self.wq = param(rng.normal(0.0, INIT_STD, size=(d, h * dk)))
        self.wk = param(rng.normal(0.0, INIT_STD, size=(d, h * dk)))
        self.wv = param(rng.normal(0.0, INIT_STD, size=(d, h * dv)))
        self.out = Linear(h * dv, d, rng)

    def head_weights(self, i: int):
        """(Wq_i, Wk_i, Wv_i) views for head ``i``."""
        ks, vs = slice(i * self.dk, (i + 1) * self.dk), slice(i * self.dv, (i + 1) * self.dv)
        return self.wq.data[:, ks], self.wk.data[:, ks], self.wv.data[:, vs]

    def __call__(self, x: Value, key_bias=None) -> Value:
        b, m, _ = x.shape
        h = self.heads

        def split(t, width):
            return dc.transpose(dc.reshape(t, (b, m, h, width)), (0, 2, 1, 3))

        q = split(x @ self.wq, self.dk)
        k = split(x @ self.wk, self.dk)
        v = split(x @ self.wv, self.dv)
        scores = dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.dk))
        if key_bias is not None:
            scores = scores + key_bias
        ctx = dc.matmul(dc.softmax(scores, axis=-1), v)
        ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (b, m, h * self.dv))
        return self.out(ctx)


class Block(Module):
    """Pre-norm transformer block: ``H + MHA(LN(H))`` then ``+ FFN(LN(.))``."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.norm1 = LayerNorm(config.dim)
        self.attn = Attention(config, rng)
        self.norm2 = LayerNorm(config.dim)
        self.ffn = FeedForward([config.dim, config.ffn_dim, config.dim], rng, activation=dc.gelu)

    def __call__(self, x, keep: np.ndarray | None = None) -> Value:
        x = dc._wrap(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = dc.reshape(x, (1,) + x.shape)
            keep = None if keep is None else np.asarray(keep)[None]
        x = x + self.attn(self.norm1(x), key_bias_from_mask(keep))
        x = x + self.ffn(self.norm2(x))
        return dc.reshape(x, x.shape[1:]) if squeeze else x


class Head(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.norm = LayerNorm(config.dim)
        self.fc = Linear(config.dim, config.num_classes, rng)

    def __call__(self, tokens: Value, class_row: int = -2) -> Value:
        """Logits from the class token only (second-to-last row by default).

        The receiver's sequence carries no budget row, so it passes ``class_row=-1``.
        """
        if tokens.shape[-2] < -class_row:
            raise ShapeError("classify: token matrix has no class-token row")
        cls = dc.take(tokens, [tokens.shape[-2] + class_row], axis=-2)
        cls = dc.reshape(cls, cls.shape[:-2] + cls.shape[-1:])
        return self.fc(self.norm(cls))


class ViT(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.embed = PatchEmbed(config, rng)
        self.blocks = [Block(config, rng) for _ in range(config.depth)]
        self.head = Head(config, rng)

    def __call__(self, images, budget_rows) -> Value:
        x = self.embed(images, budget_rows)
        for block in self.blocks:
            x = block(x)
        return self.head(x)


def split_model(model: ViT, s: int) -> tuple[list[Block], list[Block]]:
    """First ``s`` blocks for the transmitter, the rest for the receiver."""
    depth = len(model.blocks)
    if not 1 < s < depth:
        raise ValueError(f"split point must satisfy 1 < s < L, got s={s}, L={depth}")
    return model.blocks[:s], model.blocks[s:]
