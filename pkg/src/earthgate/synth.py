"""Seeded toy segmentation scenes with controllable domain shifts.

Three independent shift axes:

* spatial: object size (``spatial_scale``) and orientation (``rotation``),
* semantic: per-class colour (``semantic_palette``),
* frequency: a sinusoidal stripe artifact plus Gaussian noise.

Geometry is drawn before any appearance randomness, so two specs that differ
only in appearance produce identical label maps for the same seed.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MANIFEST_NAME = "manifest.json"
_SPLIT_CODE = {"pretrain": 0, "train": 1, "test": 2}
_BIN_MAGIC = b"EGDS"
_BIN_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class DomainSpec:
    name: str
    semantic_palette: list[list[float]]
    spatial_scale: float = 1.0
    rotation: float = 0.0
    artifact_amplitude: float = 0.0
    artifact_frequency: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.semantic_palette = [[float(v) for v in row] for row in self.semantic_palette]
        pal = np.asarray(self.semantic_palette)
        if self.spatial_scale <= 0:
            raise DatasetError(f"{self.name}: spatial_scale must be > 0")
        if self.artifact_amplitude < 0 or self.noise_sigma < 0:
            raise DatasetError(f"{self.name}: artifact amplitude and noise must be >= 0")
        if pal.ndim != 2 or np.any(pal < 0) or np.any(pal > 1):
            raise DatasetError(f"{self.name}: palette must be a (classes, channels) array in [0, 1]")
        dist = np.linalg.norm(pal[:, None, :] - pal[None, :, :], axis=-1)
        np.fill_diagonal(dist, np.inf)
        if dist.min() <= 0.1:
            raise DatasetError(f"{self.name}: palette colours closer than 0.1")

    @property
    def palette(self) -> np.ndarray:
        return np.asarray(self.semantic_palette, dtype=np.float64)

    def replace(self, **changes) -> "DomainSpec":
        d = asdict(self)
        d.update(changes)
        return DomainSpec(**d)


@dataclass
class DatasetConfig:
    num_classes: int = 5
    channels: int = 3
    image_size: int = 32
    patch_size: int = 4
    min_shapes: int = 3
    max_shapes: int = 6
    train_count: int = 100
    test_count: int = 50
    pretrain_count: int = 200

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise DatasetError("image_size must be divisible by patch_size")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise DatasetError("need 1 <= min_shapes <= max_shapes")
        if self.num_classes < 2:
            raise DatasetError("need at least two classes")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    domain: str


@dataclass
class Benchmark:
    config: DatasetConfig
    source: DomainSpec
    targets: list[DomainSpec]
    train: list[Sample]
    test: dict[str, list[Sample]]
    pretrain_domain: DomainSpec | None = None
    pretrain: list[Sample] = field(default_factory=list)


def _rotated_frame(spec: DomainSpec, xs, ys, cx, cy):
    th = math.radians(spec.rotation)
    dx, dy = xs - cx, ys - cy
    return dx * math.cos(th) + dy * math.sin(th), -dx * math.sin(th) + dy * math.cos(th)


def _draw_geometry(spec: DomainSpec, cfg: DatasetConfig, rng: np.random.Generator) -> np.ndarray:
    """Pixel class map; objects are painted in order so later ones occlude."""
    s = cfg.image_size
    ys, xs = np.mgrid[0:s, 0:s] + 0.5
    cls_map = np.zeros((s, s), dtype=np.int64)
    k = spec.spatial_scale
    for _ in range(int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))):
        cls = int(rng.integers(1, cfg.num_classes))
        cx, cy = rng.uniform(0, s, size=2)
        u, v = _rotated_frame(spec, xs, ys, cx, cy)
        shape = (cls - 1) % 4
        if shape == 0:  # building: rectangle
            hw, hh = rng.uniform(2.0, 4.0, size=2) * k
            inside = (np.abs(u) <= hw) & (np.abs(v) <= hh)
        elif shape == 1:  # forest: round blob
            r = rng.uniform(3.0, 5.0) * k
            inside = u * u + v * v <= r * r
        elif shape == 2:  # road: long ribbon through the centre
            half = rng.uniform(1.0, 1.75) * k
            inside = np.abs(v) <= half if rng.random() < 0.5 else np.abs(u) <= half
        else:  # water: elongated ellipse
            a, b = rng.uniform(4.0, 7.0) * k, rng.uniform(2.5, 4.0) * k
            inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        cls_map[inside] = cls
    return cls_map


def patch_majority(cls_map: np.ndarray, patch: int, num_classes: int) -> np.ndarray:
    """Majority class per patch; ties go to the smaller class index."""
    s = cls_map.shape[0]
    g = s // patch
    blocks = cls_map.reshape(g, patch, g, patch).transpose(0, 2, 1, 3).reshape(g, g, -1)
    counts = np.stack([(blocks == c).sum(-1) for c in range(num_classes)], axis=-1)
    return counts.argmax(-1).astype(np.int64)


def artifact_pattern(spec: DomainSpec, cfg: DatasetConfig) -> np.ndarray:
    s = cfg.image_size
    x = np.arange(s, dtype=np.float64)
    row = spec.artifact_amplitude * np.sin(2.0 * np.pi * spec.artifact_frequency * x / s)
    return np.broadcast_to(row[None, :, None], (s, s, cfg.channels))


def generate_scene(spec: DomainSpec, rng: np.random.Generator, cfg: DatasetConfig | None = None) -> Sample:
    cfg = cfg or DatasetConfig()
    pal = spec.palette
    if pal.shape != (cfg.num_classes, cfg.channels):
        raise DatasetError(
            f"{spec.name}: palette shape {pal.shape} != ({cfg.num_classes}, {cfg.channels})"
        )
    cls_map = _draw_geometry(spec, cfg, rng)
    image = pal[cls_map]
    if spec.artifact_amplitude:
        image = image + artifact_pattern(spec, cfg)
    if spec.noise_sigma:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return Sample(image, patch_majority(cls_map, cfg.patch_size, cfg.num_classes), spec.name)


def sample_rng(spec: DomainSpec, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, _SPLIT_CODE[split], index])


def generate_split(spec: DomainSpec, split: str, count: int, cfg: DatasetConfig) -> list[Sample]:
    # one generator per sample keeps results independent of generation order
    return [generate_scene(spec, sample_rng(spec, split, i), cfg) for i in range(count)]


def make_benchmark(
    source: DomainSpec,
    targets: Sequence[DomainSpec],
    cfg: DatasetConfig | None = None,
    pretrain_domain: DomainSpec | None = None,
) -> Benchmark:
    cfg = cfg or DatasetConfig()
    names = [source.name] + [t.name for t in targets]
    if pretrain_domain is not None:
        names.append(pretrain_domain.name)
    if len(set(names)) != len(names):
        raise DatasetError(f"duplicate domain names in {names}")
    train = generate_split(source, "train", cfg.train_count, cfg)
    test = {t.name: generate_split(t, "test", cfg.test_count, cfg) for t in targets}
    pretrain = []
    if pretrain_domain is not None:
        pretrain = generate_split(pretrain_domain, "pretrain", cfg.pretrain_count, cfg)
    return Benchmark(cfg, source, list(targets), train, test, pretrain_domain, pretrain)


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])


# manifest and binary dump ----------------------------------------------------

def manifest_dict(bench_or_parts) -> dict:
    b = bench_or_parts
    return {
        "format": "earthgate-dataset",
        "version": 1,
        "config": asdict(b.config),
        "source": asdict(b.source),
        "targets": [asdict(t) for t in b.targets],
        "pretrain": asdict(b.pretrain_domain) if b.pretrain_domain is not None else None,
    }


def read_manifest(path) -> tuple[DatasetConfig, DomainSpec, list[DomainSpec], DomainSpec | None]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("format") != "earthgate-dataset":
        raise DatasetError(f"{path} is not a dataset manifest")
    cfg = DatasetConfig(**data["config"])
    source = DomainSpec(**data["source"])
    targets = [DomainSpec(**t) for t in data["targets"]]
    pre = DomainSpec(**data["pretrain"]) if data.get("pretrain") else None
    return cfg, source, targets, pre


def benchmark_from_manifest(path) -> Benchmark:
    cfg, source, targets, pre = read_manifest(path)
    return make_benchmark(source, targets, cfg, pre)


def _encode_split(samples: Sequence[Sample], cfg: DatasetConfig) -> bytes:
    s, c, g = cfg.image_size, cfg.channels, cfg.grid
    parts = [_BIN_MAGIC, struct.pack("<6I", _BIN_VERSION, len(samples), s, s, c, g)]
    for smp in samples:
        parts.append(np.ascontiguousarray(smp.image, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(smp.labels, dtype=np.uint8).tobytes())
    return b"".join(parts)


def _decode_split(blob: bytes, domain: str) -> list[Sample]:
    if blob[:4] != _BIN_MAGIC:
        raise DatasetError("bad sample file magic")
    version, n, h, w, c, g = struct.unpack_from("<6I", blob, 4)
    if version != _BIN_VERSION:
        raise DatasetError(f"unsupported sample file version {version}")
    off = 4 + 24
    img_bytes, lab_bytes = h * w * c * 8, g * g
    if len(blob) != off + n * (img_bytes + lab_bytes):
        raise DatasetError("sample file truncated")
    out = []
    for _ in range(n):
        img = np.frombuffer(blob, dtype="<f8", count=h * w * c, offset=off).reshape(h, w, c).copy()
        off += img_bytes
        lab = np.frombuffer(blob, dtype=np.uint8, count=g * g, offset=off).reshape(g, g).astype(np.int64)
        off += lab_bytes
        out.append(Sample(img, lab, domain))
    return out


def _split_files(bench: Benchmark) -> dict[str, tuple[str, list[Sample]]]:
    files = {f"{bench.source.name}.train.bin": (bench.source.name, bench.train)}
    for name, samples in bench.test.items():
        files[f"{name}.test.bin"] = (name, samples)
    if bench.pretrain_domain is not None:
        files[f"{bench.pretrain_domain.name}.pretrain.bin"] = (bench.pretrain_domain.name, bench.pretrain)
    return files


def dump_benchmark(bench: Benchmark, out_dir) -> dict[str, str]:
    """Write sample files plus a manifest; returns file name -> sha256."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digests = {}
    for fname, (_, samples) in _split_files(bench).items():
        blob = _encode_split(samples, bench.config)
        (out / fname).write_bytes(blob)
        digests[fname] = hashlib.sha256(blob).hexdigest()
    manifest = manifest_dict(bench)
    manifest["files"] = digests
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return digests


def load_benchmark(data_dir, verify: bool = True) -> Benchmark:
    """Load a dumped dataset; falls back to regeneration when files are absent."""
    data_dir = Path(data_dir)
    cfg, source, targets, pre = read_manifest(data_dir)
    manifest = json.loads((data_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
    files = manifest.get("files") or {}
    if not files:
        return make_benchmark(source, targets, cfg, pre)
    loaded = {}
    for fname, digest in files.items():
        blob = (data_dir / fname).read_bytes()
        if verify and hashlib.sha256(blob).hexdigest() != digest:
            raise DatasetError(f"{fname}: checksum mismatch")
        domain = fname.split(".")[0]
        loaded[fname] = _decode_split(blob, domain)
    train = loaded[f"{source.name}.train.bin"]
    test = {t.name: loaded[f"{t.name}.test.bin"] for t in targets}
    pretrain = loaded.get(f"{pre.name}.pretrain.bin", []) if pre is not None else []
    return Benchmark(cfg, source, targets, train, test, pre, pretrain)


# default benchmark -------------------------------------------------------------

TOY_CASID_CLASSES = ("Background", "Building", "Forest", "Road", "Water")

_PRETRAIN_PALETTE = [
    [0.55, 0.50, 0.42],
    [0.80, 0.35, 0.30],
    [0.25, 0.60, 0.25],
    [0.45, 0.45, 0.50],
    [0.20, 0.35, 0.75],
]

_SOURCE_PALETTE = [
    [0.62, 0.58, 0.45],
    [0.72, 0.30, 0.42],
    [0.30, 0.52, 0.20],
    [0.52, 0.47, 0.55],
    [0.18, 0.42, 0.66],
]


def toy_casid_domains() -> tuple[DomainSpec, DomainSpec, list[DomainSpec]]:
    """(pretrain, source, [spatial, semantic, frequency]) specs of the toy benchmark."""
    pretrain = DomainSpec("pretrain", _PRETRAIN_PALETTE, noise_sigma=0.03, seed=7)
    source = DomainSpec("source", _SOURCE_PALETTE, noise_sigma=0.03,
                        artifact_amplitude=0.05, artifact_frequency=6.0, seed=11)
    perturbed = np.clip(
        np.asarray(_SOURCE_PALETTE)[[0, 1, 2, 3, 4]]
        + np.array([[0.05, 0.08, -0.02], [-0.12, 0.1, 0.08], [0.12, 0.05, 0.1],
                    [-0.1, -0.04, -0.12], [0.1, 0.12, -0.08]]),
        0.0, 1.0,
    ).tolist()
    targets = [
        source.replace(name="spatial", spatial_scale=2.0, rotation=30.0, seed=21),
        source.replace(name="semantic", semantic_palette=perturbed, seed=22),
        source.replace(name="frequency", artifact_amplitude=0.5, artifact_frequency=6.0, seed=23),
    ]
    return pretrain, source, targets


def toy_casid(cfg: DatasetConfig | None = None) -> Benchmark:
    pretrain, source, targets = toy_casid_domains()
    return make_benchmark(source, targets, cfg or DatasetConfig(), pretrain)
