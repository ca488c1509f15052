"""Training and evaluation loop for all run modes."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .backbone import Backbone, BackboneConfig, ConfigError, Head
from .config import Mode, TrainConfig, config_from_dict, config_to_dict
from .fisher import FisherGate, ImportanceTable
from .metrics import MetricsRecord
from .optim import AdamW
from .synth import Benchmark, DatasetConfig, Sample, stack
from .tensor import Tensor, backward, cross_entropy, get_record, no_grad
from .toolbox import ModuleId, ModuleKind, Toolbox, attach_toolbox

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "earthgate-run"


class SegmentationModel:
    """Backbone, optional toolbox and the always-trainable head."""

    def __init__(self, backbone: Backbone, head: Head, toolbox: Toolbox | None = None):
        self.backbone = backbone
        self.head = head
        self.toolbox = toolbox

    @property
    def cfg(self) -> BackboneConfig:
        return self.backbone.cfg

    def logits(self, images: np.ndarray) -> Tensor:
        tokens = self.backbone.encode(images, self.toolbox)
        return self.head(tokens[-1])

    def loss(self, images: np.ndarray, labels: np.ndarray) -> Tensor:
        return cross_entropy(self.logits(images), np.asarray(labels).reshape(-1))

    def sample_loss(self, sample) -> Tensor:
        image, labels = sample
        return self.loss(image, labels)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone.parameters().items()}
        out.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        if self.toolbox is not None:
            out.update(self.toolbox.parameters())
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def trainable_count(self) -> int:
        return sum(p.size for p in self.parameters().values() if p.requires_grad)

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        if single:
            images = images[None]
        g = self.cfg.grid
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                logits = self.logits(images[start:start + batch_size]).data
                out.append(logits.argmax(-1).reshape(-1, g, g))
        pred = np.concatenate(out) if out else np.zeros((0, g, g), dtype=np.int64)
        return pred[0] if single else pred


def check_dataset(cfg: BackboneConfig, data: DatasetConfig) -> None:
    pairs = [
        ("image_size", cfg.image_size, data.image_size),
        ("patch_size", cfg.patch_size, data.patch_size),
        ("channels", cfg.channels, data.channels),
        ("num_classes", cfg.num_classes, data.num_classes),
    ]
    bad = [f"{n}: model {a} vs data {b}" for n, a, b in pairs if a != b]
    if bad:
        raise ConfigError("dataset does not match model config (" + "; ".join(bad) + ")")


# pretraining -------------------------------------------------------------------

_PRETRAIN_CACHE: dict[str, Backbone] = {}


def _pretrain_key(cfg: TrainConfig, samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(config_to_dict(cfg)["backbone"], sort_keys=True).encode())
    h.update(repr((cfg.pretrain_iterations, cfg.pretrain_learning_rate,
                   cfg.pretrain_batch_size, cfg.pretrain_seed)).encode())
    for s in samples:
        h.update(s.image.tobytes())
        h.update(s.labels.tobytes())
    return h.hexdigest()


def pretrain_backbone(cfg: TrainConfig, samples: Sequence[Sample]) -> Backbone:
    """Train backbone and a throwaway head on the unshifted pretraining domain.

    Stands in for a pretrained foundation model.  Results are cached in-process
    so every mode of an ablation starts from the same weights.
    """
    key = _pretrain_key(cfg, samples)
    if key in _PRETRAIN_CACHE:
        return copy.deepcopy(_PRETRAIN_CACHE[key])
    rng = np.random.default_rng([cfg.pretrain_seed, 101])
    backbone = Backbone(cfg.backbone, rng)
    if cfg.pretrain_iterations and samples:
        head = Head(cfg.backbone, rng)
        model = SegmentationModel(backbone, head)
        backbone.unfreeze()
        head.set_trainable(True)
        opt = AdamW(model.parameters(), lr=cfg.pretrain_learning_rate, weight_decay=0.01)
        images, labels = stack(samples)
        record = get_record()
        for it in range(cfg.pretrain_iterations):
            idx = rng.integers(0, len(images), size=cfg.pretrain_batch_size)
            loss = model.loss(images[idx], labels[idx])
            backward(loss)
            opt.step()
            model.zero_grad()
            record.clear()
            if (it + 1) % 500 == 0:
                log.info("pretrain %d/%d loss %.4f", it + 1, cfg.pretrain_iterations, loss.item())
    backbone.freeze()
    _PRETRAIN_CACHE[key] = copy.deepcopy(backbone)
    return backbone


def build_model(cfg: TrainConfig, backbone: Backbone) -> SegmentationModel:
    head = Head(cfg.backbone, np.random.default_rng([cfg.seed, 4]))
    toolbox = None
    if cfg.mode.uses_toolbox:
        toolbox = attach_toolbox(backbone, cfg.toolbox, cfg.mode.kinds, rng=np.random.default_rng([cfg.seed, 1]))
    if cfg.mode is Mode.FULL_TUNING:
        backbone.unfreeze()
    else:
        backbone.freeze()
    head.set_trainable(True)
    if cfg.mode is Mode.ALL_MODULES:
        toolbox.set_active(toolbox.ids())
    return SegmentationModel(backbone, head, toolbox)


# training ------------------------------------------------------------------------

@dataclass
class RunResult:
    losses: list[float]
    metrics: list[MetricsRecord]
    history: list[ImportanceTable]
    summary: dict


class Trainer:
    def __init__(self, cfg: TrainConfig, bench: Benchmark, backbone: Backbone | None = None):
        cfg.validate()
        check_dataset(cfg.backbone, bench.config)
        if not bench.train:
            raise ConfigError("benchmark has no training samples")
        self.cfg = cfg
        self.bench = bench
        if backbone is None:
            backbone = pretrain_backbone(cfg, bench.pretrain)
        else:
            backbone = copy.deepcopy(backbone)
        self.model = build_model(cfg, backbone)
        self.optimizer = AdamW(self.model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
        self.batch_rng = np.random.default_rng([cfg.seed, 2])
        # separate stream so Fisher sampling never shifts the training batches
        self.fisher_rng = np.random.default_rng([cfg.seed, 3])
        self.gate = FisherGate(cfg.gate) if cfg.mode.uses_gate else None
        if self.gate is not None:
            cfg.gate.check_modules(len(self.model.toolbox))
        self.iteration = 0
        self.losses: list[float] = []
        self.metrics: list[MetricsRecord] = []
        self.trainable_trace: list[int] = []
        self._images, self._labels = stack(bench.train)

    # data --------------------------------------------------------------------
    def _fisher_sample(self):
        i = int(self.fisher_rng.integers(0, len(self._images)))
        return self._images[i], self._labels[i]

    def _batch(self):
        idx = self.batch_rng.integers(0, len(self._images), size=self.cfg.batch_size)
        return self._images[idx], self._labels[idx]

    # loop ----------------------------------------------------------------------
    def step(self) -> float:
        it = self.iteration
        if self.gate is not None:
            self.gate.maybe_step(self.model, self._fisher_sample, it)
        images, labels = self._batch()
        loss = self.model.loss(images, labels)
        backward(loss)
        self.trainable_trace.append(self.model.trainable_count())
        self.optimizer.step()
        self.model.zero_grad()
        get_record().clear()
        value = loss.item()
        self.losses.append(value)
        self.iteration += 1
        T = self.cfg.total_iterations
        if self.iteration % self.cfg.resolved_eval_interval == 0 or self.iteration == T:
            self.metrics.extend(self.evaluate_targets())
        return value

    def run(self, until: int | None = None) -> RunResult:
        stop = self.cfg.total_iterations if until is None else min(until, self.cfg.total_iterations)
        while self.iteration < stop:
            self.step()
        return self.result()

    def result(self) -> RunResult:
        return RunResult(list(self.losses), list(self.metrics),
                         list(self.gate.history) if self.gate else [], self.summary())

    # evaluation ----------------------------------------------------------------
    def evaluate(self, samples: Sequence[Sample], domain: str) -> MetricsRecord:
        return evaluate_model(self.model, samples, domain, self.iteration)

    def evaluate_targets(self) -> list[MetricsRecord]:
        return [self.evaluate(s, name) for name, s in self.bench.test.items()]

    def summary(self) -> dict:
        model = self.model
        head = model.head.num_parameters()
        box = model.toolbox
        out = {
            "mode": self.cfg.mode.value,
            "iteration": self.iteration,
            "head_parameters": head,
            "backbone_parameters": model.backbone.num_parameters(),
            "toolbox_parameters": sum(p.size for p in box.parameters().values()) if box else 0,
            "trainable_now": model.trainable_count(),
            "max_trainable_per_step": max(self.trainable_trace) if self.trainable_trace else model.trainable_count(),
        }
        if self.gate is not None:
            ever = self.gate.ever_selected()
            out["ever_active_modules"] = len(ever)
            out["ever_active_parameters"] = sum(box.module_size(m) for m in ever) + head
        elif box is not None:
            out["ever_active_modules"] = len(box)
            out["ever_active_parameters"] = sum(p.size for p in box.parameters().values()) + head
        return out

    # persistence ---------------------------------------------------------------
    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        arrays = {k: p.data for k, p in self.model.parameters().items()}
        arrays.update(self.optimizer.state_arrays())
        meta = {
            "format": CHECKPOINT_FORMAT,
            "config": config_to_dict(self.cfg),
            "iteration": self.iteration,
            "losses": self.losses,
            "trainable_trace": self.trainable_trace,
            "metrics": [
                {"iteration": r.iteration, "domain": r.domain,
                 "per_class_iou": [None if np.isnan(v) else v for v in r.per_class_iou],
                 "miou": None if np.isnan(r.miou) else r.miou}
                for r in self.metrics
            ],
            "optimizer_steps": dict(sorted(self.optimizer.t.items())),
            "active": [[m.layer, m.kind.label] for m in self.model.toolbox.active] if self.model.toolbox else [],
            "gate_history": [t.to_dict() for t in self.gate.history] if self.gate else [],
            "rng": {"batch": self.batch_rng.bit_generator.state, "fisher": self.fisher_rng.bit_generator.state},
        }
        return meta, arrays

    def save(self, path) -> None:
        meta, arrays = self.state()
        ckpt.save_checkpoint(path, meta, arrays)

    @classmethod
    def restore(cls, path, bench: Benchmark) -> "Trainer":
        meta, arrays = ckpt.load_checkpoint(path)
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ckpt.CheckpointError("not a training checkpoint")
        cfg = config_from_dict(meta["config"])
        backbone = backbone_from_arrays(cfg.backbone, arrays)
        trainer = cls(cfg, bench, backbone=backbone)
        trainer._load(meta, arrays)
        return trainer

    def _load(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.model.parameters().items():
            p.data = np.array(arrays[name], dtype=np.float64)
        self.optimizer.load_state(arrays, meta["optimizer_steps"])
        self.iteration = int(meta["iteration"])
        self.losses = [float(v) for v in meta["losses"]]
        self.trainable_trace = [int(v) for v in meta["trainable_trace"]]
        self.metrics = [_record_from_dict(d) for d in meta["metrics"]]
        if self.gate is not None:
            self.gate.history = [ImportanceTable.from_dict(d) for d in meta["gate_history"]]
        if self.model.toolbox is not None:
            self.model.toolbox.set_active(
                ModuleId(int(l), ModuleKind.parse(k)) for l, k in meta["active"]
            )
        self.batch_rng.bit_generator.state = meta["rng"]["batch"]
        self.fisher_rng.bit_generator.state = meta["rng"]["fisher"]


def _record_from_dict(d: dict) -> MetricsRecord:
    nan = float("nan")
    return MetricsRecord(
        int(d["iteration"]), d["domain"],
        tuple(nan if v is None else float(v) for v in d["per_class_iou"]),
        nan if d["miou"] is None else float(d["miou"]),
    )


def backbone_from_arrays(cfg: BackboneConfig, arrays: dict[str, np.ndarray]) -> Backbone:
    backbone = Backbone(cfg, np.random.default_rng(0))
    for name, p in backbone.parameters().items():
        p.data = np.array(arrays[f"backbone.{name}"], dtype=np.float64)
    backbone.freeze()
    return backbone


def model_from_checkpoint(path) -> tuple[SegmentationModel, TrainConfig, dict]:
    """Rebuild the trained model for evaluation only."""
    meta, arrays = ckpt.load_checkpoint(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ckpt.CheckpointError("not a training checkpoint")
    cfg = config_from_dict(meta["config"])
    model = build_model(cfg, backbone_from_arrays(cfg.backbone, arrays))
    for name, p in model.parameters().items():
        p.data = np.array(arrays[name], dtype=np.float64)
    return model, cfg, meta


def evaluate_model(model: SegmentationModel, samples: Sequence[Sample], domain: str,
                   iteration: int = 0) -> MetricsRecord:
    images, labels = stack(samples)
    pred = model.predict(images)
    return MetricsRecord.from_predictions(iteration, domain, pred, labels, model.cfg.num_classes)


def train(cfg: TrainConfig, bench: Benchmark, backbone: Backbone | None = None) -> tuple[Trainer, RunResult]:
    trainer = Trainer(cfg, bench, backbone)
    return trainer, trainer.run()
