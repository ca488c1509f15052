"""Toy ViT encoder with a per-patch linear segmentation head."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    gelu,
    layer_norm,
    matmul,
    softmax_rows,
    swap_last,
    transpose,
)


class ConfigError(ValueError):
    """Raised for inconsistent model, toolbox or training configuration."""


@dataclass
class BackboneConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    depth: int = 4
    dim: int = 32
    heads: int = 1
    mlp_ratio: int = 2
    num_classes: int = 5

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "depth", "dim", "heads", "mlp_ratio", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def _weight(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)), name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), name=name)


def _ones(shape, name: str) -> Tensor:
    return Tensor(np.ones(shape), name=name)


class ParamContainer:
    """Ordered name -> Tensor mapping shared by backbone parts and modules."""

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.set_requires_grad(flag)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


class PatchEmbed(ParamContainer):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.weight = _weight(rng, cfg.patch_dim, cfg.dim, "weight")
        self.bias = _zeros(cfg.dim, "bias")
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(cfg.num_tokens, cfg.dim)), name="pos")

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias, "pos": self.pos}

    def __call__(self, images: np.ndarray) -> Tensor:
        patches = Tensor(patchify(images, self.cfg))
        return matmul(patches, self.weight) + self.bias + self.pos


def patchify(images: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """``(..., h, w, c)`` images to ``(..., l, p*p*c)`` row-major patch vectors."""
    images = np.asarray(images, dtype=np.float64)
    s, c, p = cfg.image_size, cfg.channels, cfg.patch_size
    if images.shape[-3:] != (s, s, c):
        raise ShapeError(f"expected images of shape (..., {s}, {s}, {c}), got {images.shape}")
    lead = images.shape[:-3]
    g = s // p
    x = images.reshape(lead + (g, p, g, p, c))
    n = len(lead)
    x = np.transpose(x, tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return x.reshape(lead + (g * g, p * p * c))


class TransformerBlock(ParamContainer):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        d, hidden = cfg.dim, cfg.dim * cfg.mlp_ratio
        self.heads = cfg.heads
        self.ln1_g, self.ln1_b = _ones(d, "ln1_g"), _zeros(d, "ln1_b")
        self.w_q, self.b_q = _weight(rng, d, d, "w_q"), _zeros(d, "b_q")
        self.w_k, self.b_k = _weight(rng, d, d, "w_k"), _zeros(d, "b_k")
        self.w_v, self.b_v = _weight(rng, d, d, "w_v"), _zeros(d, "b_v")
        self.w_o, self.b_o = _weight(rng, d, d, "w_o"), _zeros(d, "b_o")
        self.ln2_g, self.ln2_b = _ones(d, "ln2_g"), _zeros(d, "ln2_b")
        self.w_1, self.b_1 = _weight(rng, d, hidden, "w_1"), _zeros(hidden, "b_1")
        self.w_2, self.b_2 = _weight(rng, hidden, d, "w_2"), _zeros(d, "b_2")

    def parameters(self):
        names = (
            "ln1_g", "ln1_b", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
            "ln2_g", "ln2_b", "w_1", "b_1", "w_2", "b_2",
        )
        return {n: getattr(self, n) for n in names}

    def attention(self, h: Tensor, spatial=None) -> Tensor:
        q = matmul(h, self.w_q) + self.b_q
        k = matmul(h, self.w_k) + self.b_k
        v = matmul(h, self.w_v) + self.b_v
        if spatial is not None:
            q = q + spatial.query_delta(h)
            v = v + spatial.value_delta(h)
        lead, (l, d) = h.shape[:-2], h.shape[-2:]
        H = self.heads
        dh = d // H
        n = len(lead)
        split_axes = tuple(range(n)) + (n + 1, n, n + 2)

        def split(t: Tensor) -> Tensor:
            return transpose(t.reshape(lead + (l, H, dh)), split_axes)

        qh, kh, vh = split(q), split(k), split(v)
        att = softmax_rows(matmul(qh, swap_last(kh)) * (1.0 / math.sqrt(dh)))
        ctx = transpose(matmul(att, vh), split_axes).reshape(lead + (l, d))
        return matmul(ctx, self.w_o) + self.b_o

    def mlp(self, h: Tensor) -> Tensor:
        return matmul(gelu(matmul(h, self.w_1) + self.b_1), self.w_2) + self.b_2

    def __call__(self, x: Tensor, spatial=None, semantic=None, frequency=None) -> Tensor:
        """Pre-norm block.  Hooks are toolbox modules attached to this layer."""
        x_attn = x + self.attention(layer_norm(x, self.ln1_g, self.ln1_b), spatial)
        h = layer_norm(x_attn, self.ln2_g, self.ln2_b)
        out = x_attn + self.mlp(h)
        if semantic is not None:
            out = out + semantic(h)
        if frequency is not None:
            out = frequency(out)
        return out


def block_forward(block: TransformerBlock, tokens: Tensor, hooks=None) -> Tensor:
    hooks = hooks or {}
    return block(
        tokens,
        spatial=hooks.get("spatial"),
        semantic=hooks.get("semantic"),
        frequency=hooks.get("frequency"),
    )


class Head(ParamContainer):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.weight = _weight(rng, cfg.dim, cfg.num_classes, "weight")
        self.bias = _zeros(cfg.num_classes, "bias")

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, tokens: Tensor) -> Tensor:
        return matmul(tokens, self.weight) + self.bias


class Backbone(ParamContainer):
    """Patch embedding followed by ``depth`` transformer blocks (the frozen part)."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator | int | None = None):
        rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.embed = PatchEmbed(cfg, rng)
        self.blocks = [TransformerBlock(cfg, rng) for _ in range(cfg.depth)]

    def parameters(self):
        out = {f"embed.{k}": v for k, v in self.embed.parameters().items()}
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in blk.parameters().items()})
        return out

    def freeze(self) -> None:
        self.set_trainable(False)

    def unfreeze(self) -> None:
        self.set_trainable(True)

    def encode(self, images: np.ndarray, toolbox=None) -> list[Tensor]:
        """Return the token list ``[T_1, ..., T_{I+1}]``."""
        tokens = [self.embed(images)]
        for i, blk in enumerate(self.blocks):
            hooks = toolbox.hooks(i) if toolbox is not None else None
            tokens.append(block_forward(blk, tokens[-1], hooks))
        return tokens


def encode(backbone: Backbone, head: Head, images: np.ndarray, toolbox=None):
    """Per-layer tokens and per-patch logits ``(..., l, C)``."""
    tokens = backbone.encode(images, toolbox)
    return tokens, head(tokens[-1])
