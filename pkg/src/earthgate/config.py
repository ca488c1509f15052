"""Run configuration stored as flat INI sections.

Every key carries its unit in a trailing comment when written, and the
complete resolved configuration is copied into each run directory.
"""
from __future__ import annotations

import configparser
import enum
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig, ConfigError
from .fisher import GateConfig
from .toolbox import ALL_KINDS, ModuleKind, ToolboxDims


class Mode(str, enum.Enum):
    FROZEN = "Frozen"
    FULL_TUNING = "FullTuning"
    GATE = "CrossEarthGate"
    ALL_MODULES = "AllModulesNoSelection"
    WITHOUT_SPATIAL = "WithoutSpatial"
    WITHOUT_SEMANTIC = "WithoutSemantic"
    WITHOUT_FREQUENCY = "WithoutFrequency"

    @classmethod
    def parse(cls, text: str) -> "Mode":
        for m in cls:
            if m.value.lower() == text.strip().lower():
                return m
        raise ConfigError(f"unknown mode {text!r}; choose from {', '.join(m.value for m in cls)}")

    @property
    def uses_toolbox(self) -> bool:
        return self not in (Mode.FROZEN, Mode.FULL_TUNING)

    @property
    def uses_gate(self) -> bool:
        return self.uses_toolbox and self is not Mode.ALL_MODULES

    @property
    def kinds(self) -> tuple[ModuleKind, ...]:
        drop = {
            Mode.WITHOUT_SPATIAL: ModuleKind.SPATIAL,
            Mode.WITHOUT_SEMANTIC: ModuleKind.SEMANTIC,
            Mode.WITHOUT_FREQUENCY: ModuleKind.FREQUENCY,
        }.get(self)
        if not self.uses_toolbox:
            return ()
        return tuple(k for k in ALL_KINDS if k is not drop)


@dataclass
class TrainConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    toolbox: ToolboxDims = field(default_factory=ToolboxDims)
    gate: GateConfig = field(default_factory=GateConfig)
    mode: Mode = Mode.GATE
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 1
    seed: int = 0
    dataset: str = ""
    eval_interval: int = 0
    pretrain_iterations: int = 0
    pretrain_learning_rate: float = 1e-3
    pretrain_batch_size: int = 8
    pretrain_seed: int = 0

    @property
    def total_iterations(self) -> int:
        return self.gate.total_iterations

    @property
    def resolved_eval_interval(self) -> int:
        return self.eval_interval or self.gate.interval

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.mode.uses_toolbox:
            self.toolbox.validate(self.backbone.dim)
            if self.mode.uses_gate:
                n = len(self.mode.kinds) * self.backbone.depth
                if self.gate.top_k > n:
                    raise ConfigError(f"top_k={self.gate.top_k} exceeds {n} modules in mode {self.mode.value}")


_UNITS = {
    "image_size": "pixels", "channels": "bands", "patch_size": "pixels", "depth": "blocks",
    "dim": "features", "heads": "count", "mlp_ratio": "x dim", "num_classes": "count",
    "spatial_rank": "rank", "semantic_dim": "features", "frequency_dim": "features",
    "cutoff": "fraction of half-band", "scale": "unitless",
    "top_k": "modules", "accumulation_steps": "samples", "selection_count": "events",
    "total_iterations": "iterations", "learning_rate": "per step", "weight_decay": "per step",
    "batch_size": "samples", "seed": "integer", "dataset": "path", "eval_interval": "iterations (0 = gate interval)",
    "pretrain_iterations": "iterations", "pretrain_learning_rate": "per step",
    "pretrain_batch_size": "samples", "pretrain_seed": "integer", "mode": "enum",
}

_SECTIONS = (("backbone", BackboneConfig), ("toolbox", ToolboxDims), ("gate", GateConfig))
_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name not in ("backbone", "toolbox", "gate")]


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value.strip()


def _build(cls, section: configparser.SectionProxy | None):
    defaults = cls()
    kwargs = {}
    if section is not None:
        known = {f.name for f in fields(cls)}
        for key, raw in section.items():
            if key not in known:
                raise ConfigError(f"unknown key [{section.name}] {key}")
            kwargs[key] = _coerce(raw, getattr(defaults, key))
    return cls(**kwargs)


def parse_config(text: str, base_dir: Path | None = None) -> TrainConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    unknown = set(cp.sections()) - {"backbone", "toolbox", "gate", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    parts = {name: _build(cls, cp[name] if cp.has_section(name) else None) for name, cls in _SECTIONS}
    cfg = TrainConfig(**parts)
    if cp.has_section("train"):
        for key, raw in cp["train"].items():
            if key not in _TRAIN_KEYS:
                raise ConfigError(f"unknown key [train] {key}")
            if key == "mode":
                cfg.mode = Mode.parse(raw)
            else:
                setattr(cfg, key, _coerce(raw, getattr(cfg, key)))
    if cfg.dataset and base_dir is not None and not Path(cfg.dataset).is_absolute():
        cfg.dataset = str((base_dir / cfg.dataset).resolve())
    return cfg


def load_config(path) -> TrainConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for name, _ in _SECTIONS:
        lines.append(f"[{name}]")
        obj = getattr(cfg, name)
        for f in fields(obj):
            lines.append(f"{f.name} = {getattr(obj, f.name)}  # {_UNITS.get(f.name, '')}".rstrip())
        lines.append("")
    lines.append("[train]")
    for key in _TRAIN_KEYS:
        val = getattr(cfg, key)
        val = val.value if isinstance(val, Mode) else val
        lines.append(f"{key} = {val}  # {_UNITS.get(key, '')}".rstrip())
    return "\n".join(lines) + "\n"


def config_to_dict(cfg: TrainConfig) -> dict:
    out = {name: {f.name: getattr(getattr(cfg, name), f.name) for f in fields(getattr(cfg, name))}
           for name, _ in _SECTIONS}
    out["train"] = {k: (getattr(cfg, k).value if k == "mode" else getattr(cfg, k)) for k in _TRAIN_KEYS}
    return out


def config_from_dict(d: dict) -> TrainConfig:
    cfg = TrainConfig(
        backbone=BackboneConfig(**d["backbone"]),
        toolbox=ToolboxDims(**d["toolbox"]),
        gate=GateConfig(**d["gate"]),
    )
    for k, v in d["train"].items():
        setattr(cfg, k, Mode.parse(v) if k == "mode" else v)
    return cfg
