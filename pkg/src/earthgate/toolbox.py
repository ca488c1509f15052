"""Spatial, semantic and frequency PEFT modules attached at every block."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .backbone import Backbone, ConfigError, ParamContainer
from .tensor import Tensor, ShapeError, dft2, filter_operator, fourier_filter, gelu, idft2, matmul, softmax_rows


class ModuleKind(enum.IntEnum):
    SPATIAL = 0
    SEMANTIC = 1
    FREQUENCY = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, text: str) -> "ModuleKind":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown module kind {text!r}") from None


ALL_KINDS = tuple(ModuleKind)


class ModuleId(NamedTuple):
    layer: int
    kind: ModuleKind

    def __str__(self) -> str:
        return f"{self.layer}.{self.kind.label}"


@dataclass
class ToolboxDims:
    spatial_rank: int = 64
    semantic_dim: int = 64
    frequency_dim: int = 32
    cutoff: float = 0.3
    scale: float = 0.1

    def validate(self, d: int) -> None:
        if not 1 <= self.spatial_rank < d:
            raise ConfigError(f"spatial rank must satisfy 1 <= r < d={d}, got {self.spatial_rank}")
        if not 1 <= self.semantic_dim < d:
            raise ConfigError(f"semantic bottleneck must satisfy 1 <= d_hat < d={d}, got {self.semantic_dim}")
        if not 1 <= self.frequency_dim < d:
            raise ConfigError(f"frequency bottleneck must satisfy 1 <= d_f < d={d}, got {self.frequency_dim}")
        if not 0.0 < self.cutoff < 1.0:
            raise ConfigError(f"cutoff must lie in (0, 1), got {self.cutoff}")


def merge_lora(w0, a, b) -> np.ndarray:
    """Plain merged weight ``W0 + A @ B`` (A: d x r down, B: r x d up)."""
    return np.asarray(w0, dtype=np.float64) + np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)


def spatial_forward(x: Tensor, w0: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """``x @ W0`` plus the unmerged low-rank path ``(x @ A) @ B``."""
    return matmul(x, w0) + matmul(matmul(x, a), b)


class SpatialModule(ParamContainer):
    kind = ModuleKind.SPATIAL

    def __init__(self, d: int, rank: int, rng: np.random.Generator):
        std = 1.0 / math.sqrt(d)
        self.a_q = Tensor(rng.normal(0.0, std, size=(d, rank)), name="a_q")
        self.b_q = Tensor(np.zeros((rank, d)), name="b_q")
        self.a_v = Tensor(rng.normal(0.0, std, size=(d, rank)), name="a_v")
        self.b_v = Tensor(np.zeros((rank, d)), name="b_v")

    def parameters(self):
        return {"a_q": self.a_q, "b_q": self.b_q, "a_v": self.a_v, "b_v": self.b_v}

    def query_delta(self, h: Tensor) -> Tensor:
        return matmul(matmul(h, self.a_q), self.b_q)

    def value_delta(self, h: Tensor) -> Tensor:
        return matmul(matmul(h, self.a_v), self.b_v)


class Bottleneck(ParamContainer):
    """``GELU(x @ W_down) @ W_up`` with a zero-initialised up-projection."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator, prefix: str = ""):
        self.prefix = prefix
        self.w_down = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, hidden)), name=prefix + "w_down")
        self.w_up = Tensor(np.zeros((hidden, d)), name=prefix + "w_up")

    def parameters(self):
        return {self.prefix + "w_down": self.w_down, self.prefix + "w_up": self.w_up}

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(gelu(matmul(x, self.w_down)), self.w_up)


class SemanticModule(Bottleneck):
    kind = ModuleKind.SEMANTIC

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        super().__init__(d, hidden, rng)


def semantic_forward(t: Tensor, module: SemanticModule) -> Tensor:
    return module(t)


def frequency_masks(g: int, cutoff: float) -> tuple[np.ndarray, np.ndarray]:
    """Complementary square low/high-pass masks in DC-centred coordinates.

    A bin ``(u, v)`` is low-pass when ``max(|u|, |v|) <= cutoff * g / 2``
    with ``u, v`` the signed frequencies of the unshifted DFT layout.
    """
    freqs = np.abs(np.fft.fftfreq(g) * g)
    radius = np.maximum(freqs[:, None], freqs[None, :])
    low = (radius <= cutoff * g / 2.0).astype(np.float64)
    return low, 1.0 - low


def _grid_side(l: int) -> int:
    g = math.isqrt(l)
    if g * g != l:
        raise ConfigError(f"token count {l} is not a perfect square")
    return g


def frequency_split(tokens, cutoff: float) -> tuple[np.ndarray, np.ndarray]:
    """Split ``(l, d)`` tokens into low- and high-frequency parts per channel."""
    x = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected (l, d) tokens, got {x.shape}")
    l, d = x.shape
    g = _grid_side(l)
    if not 0.0 < cutoff < 1.0:
        raise ConfigError(f"cutoff must lie in (0, 1), got {cutoff}")
    low, high = frequency_masks(g, cutoff)
    spec = dft2(x.T.reshape(d, g, g))
    parts = []
    for mask in (low, high):
        masked = type(spec)(g, g, spec.real * mask, spec.imag * mask)
        parts.append(idft2(masked).reshape(d, l).T.copy())
    return parts[0], parts[1]


class FrequencyModule(ParamContainer):
    kind = ModuleKind.FREQUENCY
    EXPERTS = ("spatial", "low", "high")

    def __init__(self, d: int, hidden: int, grid: int, cutoff: float, scale: float,
                 rng: np.random.Generator):
        self.cutoff = cutoff
        self.scale = scale
        self.low_mask, self.high_mask = frequency_masks(grid, cutoff)
        self.low_op = filter_operator(self.low_mask)
        self.high_op = filter_operator(self.high_mask)
        self.experts = {name: Bottleneck(d, hidden, rng, prefix=f"{name}.") for name in self.EXPERTS}
        self.router_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, 3)), name="router.w")
        self.router_b = Tensor(np.zeros(3), name="router.b")

    def parameters(self):
        out = {}
        for exp in self.experts.values():
            out.update(exp.parameters())
        out["router.w"] = self.router_w
        out["router.b"] = self.router_b
        return out

    def router(self, t: Tensor) -> Tensor:
        return softmax_rows(matmul(t, self.router_w) + self.router_b)

    def __call__(self, t: Tensor) -> Tensor:
        lf = fourier_filter(t, self.low_mask, self.low_op)
        hf = fourier_filter(t, self.high_mask, self.high_op)
        outs = (self.experts["spatial"](t), self.experts["low"](lf), self.experts["high"](hf))
        w = self.router(t)
        mix = None
        for e, out in enumerate(outs):
            term = w[..., e:e + 1] * out
            mix = term if mix is None else mix + term
        return t + mix * self.scale


def frequency_forward(t: Tensor, module: FrequencyModule) -> Tensor:
    return module(t)


_FACTORY = {
    ModuleKind.SPATIAL: lambda d, g, dims, rng: SpatialModule(d, dims.spatial_rank, rng),
    ModuleKind.SEMANTIC: lambda d, g, dims, rng: SemanticModule(d, dims.semantic_dim, rng),
    ModuleKind.FREQUENCY: lambda d, g, dims, rng: FrequencyModule(
        d, dims.frequency_dim, g, dims.cutoff, dims.scale, rng
    ),
}

_HOOK_NAME = {
    ModuleKind.SPATIAL: "spatial",
    ModuleKind.SEMANTIC: "semantic",
    ModuleKind.FREQUENCY: "frequency",
}


class Toolbox:
    """Registry of attached modules keyed by :class:`ModuleId`.

    Every attached module takes part in the forward pass; only modules in the
    active set have ``requires_grad`` parameters.
    """

    def __init__(self, modules: dict[ModuleId, ParamContainer], dims: ToolboxDims):
        self.modules = dict(sorted(modules.items()))
        self.dims = dims
        self.active: tuple[ModuleId, ...] = ()

    def __len__(self) -> int:
        return len(self.modules)

    def __contains__(self, mid) -> bool:
        return mid in self.modules

    def ids(self) -> list[ModuleId]:
        return list(self.modules)

    @property
    def kinds(self) -> tuple[ModuleKind, ...]:
        return tuple(sorted({mid.kind for mid in self.modules}))

    def hooks(self, layer: int) -> dict:
        return {
            _HOOK_NAME[mid.kind]: mod for mid, mod in self.modules.items() if mid.layer == layer
        }

    def module_parameters(self) -> dict[ModuleId, dict[str, Tensor]]:
        return {mid: mod.parameters() for mid, mod in self.modules.items()}

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for mid, params in self.module_parameters().items():
            for name, p in params.items():
                out[f"toolbox.{mid.layer}.{mid.kind.label}.{name}"] = p
        return out

    def module_size(self, mid: ModuleId) -> int:
        return self.modules[mid].num_parameters()

    def set_active(self, active: Iterable[ModuleId]) -> None:
        active = tuple(active)
        unknown = [mid for mid in active if mid not in self.modules]
        if unknown:
            raise KeyError(f"unknown module ids: {', '.join(map(str, unknown))}")
        chosen = set(active)
        for mid, mod in self.modules.items():
            mod.set_trainable(mid in chosen)
        self.active = tuple(sorted(chosen))

    def trainable_count(self) -> int:
        return sum(p.size for p in self.parameters().values() if p.requires_grad)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


def attach_toolbox(
    backbone: Backbone,
    dims: ToolboxDims | None = None,
    kinds: Iterable[ModuleKind] = ALL_KINDS,
    rng: np.random.Generator | int | None = None,
) -> Toolbox:
    """Create one module per (layer, kind); all start inactive and output zero."""
    dims = dims or ToolboxDims()
    cfg = backbone.cfg
    g = _grid_side(cfg.num_tokens)
    dims.validate(cfg.dim)
    rng = np.random.default_rng(rng)
    kinds = tuple(sorted(set(kinds)))
    modules = {}
    for layer in range(cfg.depth):
        for kind in kinds:
            modules[ModuleId(layer, kind)] = _FACTORY[kind](cfg.dim, g, dims, rng)
    box = Toolbox(modules, dims)
    box.set_active(())
    return box
