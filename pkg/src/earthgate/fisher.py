"""Fisher-guided module selection.

Importance of a module is the sum of its parameters' empirical diagonal
Fisher entries (mean squared per-sample loss gradient).  Scores are
normalised within each module kind, then the global top-k modules are
made trainable until the next selection event.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .backbone import ConfigError
from .tensor import Tensor, backward, get_record
from .toolbox import ModuleId, ModuleKind

log = logging.getLogger(__name__)

IMPORTANCE_COLUMNS = (
    "event_index",
    "iteration",
    "layer",
    "kind",
    "raw_score",
    "normalized_score",
    "selected",
)


@dataclass
class GateConfig:
    top_k: int = 18
    accumulation_steps: int = 100
    selection_count: int = 10
    total_iterations: int = 30000

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.accumulation_steps < 1:
            raise ConfigError("accumulation_steps must be >= 1")
        if self.selection_count < 1:
            raise ConfigError("selection_count must be >= 1")
        if self.total_iterations // self.selection_count < 1:
            raise ConfigError(
                f"total_iterations={self.total_iterations} too small for "
                f"selection_count={self.selection_count}"
            )

    @property
    def interval(self) -> int:
        return self.total_iterations // self.selection_count

    def is_event(self, iteration: int) -> bool:
        n = self.interval
        return iteration % n == 0 and iteration // n < self.selection_count

    def schedule(self) -> list[int]:
        return [e * self.interval for e in range(self.selection_count)]

    def check_modules(self, num_modules: int) -> None:
        if self.top_k > num_modules:
            raise ConfigError(f"top_k={self.top_k} exceeds the {num_modules} attached modules")


class FisherAccumulator:
    """Running per-parameter sums of squared gradients, per module."""

    def __init__(self):
        self.sums: dict[ModuleId, dict[str, np.ndarray]] = {}
        self.samples_seen = 0

    def reset(self) -> None:
        self.sums = {}
        self.samples_seen = 0

    def add(self, module_params: Mapping[ModuleId, Mapping[str, Tensor]]) -> None:
        for mid, params in module_params.items():
            slot = self.sums.setdefault(mid, {})
            for name, p in params.items():
                sq = np.zeros(p.shape) if p.grad is None else p.grad * p.grad
                slot[name] = slot[name] + sq if name in slot else sq

    def fisher(self) -> dict[ModuleId, dict[str, np.ndarray]]:
        """Averaged diagonal Fisher estimate per module and parameter."""
        if self.samples_seen == 0:
            raise ValueError("no samples accumulated")
        n = float(self.samples_seen)
        return {mid: {k: v / n for k, v in params.items()} for mid, params in self.sums.items()}


def accumulate_fisher(
    loss_fn: Callable[[object], Tensor],
    module_params: Mapping[ModuleId, Mapping[str, Tensor]],
    samples: Sequence,
    acc: FisherAccumulator,
    extra_params: Iterable[Tensor] = (),
) -> None:
    """Add one squared-gradient term per sample; no parameter is updated.

    ``loss_fn`` maps a single sample to the scalar task loss.  Gradients of
    every parameter in ``module_params`` and ``extra_params`` are cleared
    before and after each sample so nothing leaks into training.
    """
    if len(samples) == 0:
        raise ValueError("accumulate_fisher needs at least one sample")
    tracked = [p for params in module_params.values() for p in params.values()]
    tracked.extend(extra_params)
    record = get_record()
    for p in tracked:
        p.zero_grad()
    for sample in samples:
        loss = loss_fn(sample)
        backward(loss)
        acc.add(module_params)
        for p in tracked:
            p.zero_grad()
        record.clear()
    acc.samples_seen += len(samples)


def aggregate_module_scores(acc: FisherAccumulator) -> dict[ModuleId, float]:
    return {
        mid: float(sum(v.sum() for v in params.values()))
        for mid, params in acc.fisher().items()
    }


def normalize_scores(raw: Mapping[ModuleId, float]) -> dict[ModuleId, float]:
    """Divide each score by its kind's total; a zero-mass kind maps to 0."""
    totals: dict[ModuleKind, float] = {}
    for mid, s in raw.items():
        totals[mid.kind] = totals.get(mid.kind, 0.0) + s
    return {
        mid: (s / totals[mid.kind] if totals[mid.kind] > 0 else 0.0)
        for mid, s in raw.items()
    }


def select_top_k(normalized: Mapping[ModuleId, float], k: int) -> list[ModuleId]:
    """Top-k ids by score; ties go to the lower layer, then Spatial<Semantic<Frequency.

    Modules with a zero score are never selected, so fewer than ``k`` ids
    come back when fewer than ``k`` modules carry positive importance.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(normalized):
        warnings.warn(f"top_k={k} clamped to {len(normalized)} modules", stacklevel=2)
        k = len(normalized)
    live = [mid for mid, s in normalized.items() if s > 0]
    order = sorted(live, key=lambda mid: (-normalized[mid], mid.layer, int(mid.kind)))
    return order[:k]


@dataclass(frozen=True)
class ImportanceTable:
    event_index: int
    iteration: int
    raw: Mapping[ModuleId, float]
    normalized: Mapping[ModuleId, float]
    selected: tuple[ModuleId, ...]

    def rows(self) -> list[tuple]:
        chosen = set(self.selected)
        return [
            (
                self.event_index,
                self.iteration,
                mid.layer,
                mid.kind.label,
                self.raw[mid],
                self.normalized[mid],
                int(mid in chosen),
            )
            for mid in sorted(self.raw)
        ]

    def to_dict(self) -> dict:
        return {
            "event_index": self.event_index,
            "iteration": self.iteration,
            "scores": [
                [mid.layer, mid.kind.label, self.raw[mid], self.normalized[mid]]
                for mid in sorted(self.raw)
            ],
            "selected": [[mid.layer, mid.kind.label] for mid in self.selected],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ImportanceTable":
        raw, norm = {}, {}
        for layer, kind, r, n in d["scores"]:
            mid = ModuleId(int(layer), ModuleKind.parse(kind))
            raw[mid], norm[mid] = float(r), float(n)
        selected = tuple(ModuleId(int(l), ModuleKind.parse(k)) for l, k in d["selected"])
        return cls(int(d["event_index"]), int(d["iteration"]), raw, norm, selected)


def gating_step(
    model,
    sample_fn: Callable[[], object],
    cfg: GateConfig,
    acc: FisherAccumulator,
    iteration: int,
    event_index: int,
) -> ImportanceTable:
    """One selection event: measure Fisher over M fresh samples, then re-gate.

    ``model`` must expose ``toolbox`` (a :class:`~earthgate.toolbox.Toolbox`),
    ``sample_loss(sample)`` and ``parameters()``.
    """
    box = model.toolbox
    acc.reset()
    box.set_active(box.ids())
    samples = [sample_fn() for _ in range(cfg.accumulation_steps)]
    accumulate_fisher(
        model.sample_loss,
        box.module_parameters(),
        samples,
        acc,
        extra_params=model.parameters().values(),
    )
    raw = aggregate_module_scores(acc)
    normalized = normalize_scores(raw)
    selected = tuple(select_top_k(normalized, cfg.top_k))
    box.set_active(selected)
    log.debug("gate event %d at iteration %d selected %s", event_index, iteration,
              ", ".join(map(str, selected)))
    return ImportanceTable(event_index, iteration, raw, normalized, selected)


@dataclass
class FisherGate:
    """Selection schedule plus the history of importance tables."""

    cfg: GateConfig
    acc: FisherAccumulator = field(default_factory=FisherAccumulator)
    history: list[ImportanceTable] = field(default_factory=list)

    def maybe_step(self, model, sample_fn, iteration: int) -> ImportanceTable | None:
        if not self.cfg.is_event(iteration):
            return None
        table = gating_step(model, sample_fn, self.cfg, self.acc, iteration, len(self.history))
        self.history.append(table)
        return table

    @property
    def active(self) -> tuple[ModuleId, ...]:
        return self.history[-1].selected if self.history else ()

    def ever_selected(self) -> set[ModuleId]:
        return {mid for t in self.history for mid in t.selected}


def kl_categorical(p, q) -> float:
    """``sum p log(p/q)`` with the convention ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"support mismatch: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ArithmeticError("negative probability")
    live = p > 0
    if np.any(q[live] <= 0):
        raise ArithmeticError("q has zero mass where p is positive")
    return float(np.sum(p[live] * np.log(p[live] / q[live])))


def write_importance_csv(history: Iterable[ImportanceTable], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(IMPORTANCE_COLUMNS)
        for table in history:
            for row in table.rows():
                writer.writerow([*row[:4], repr(float(row[4])), repr(float(row[5])), row[6]])


def cumulative_kind_share(
    history: Sequence[ImportanceTable], selected_only: bool = False
) -> dict[ModuleKind, float]:
    """Normalised-score mass per kind summed over events, as a fraction of the total.

    Every kind with positive mass contributes exactly 1 per event, so over
    all modules the shares only differ through dead kinds; ``selected_only``
    restricts the sum to modules that won a slot at each event.
    """
    mass: dict[ModuleKind, float] = {}
    for table in history:
        chosen = set(table.selected)
        for mid, s in table.normalized.items():
            if selected_only and mid not in chosen:
                s = 0.0
            mass[mid.kind] = mass.get(mid.kind, 0.0) + s
    total = sum(mass.values())
    return {k: (v / total if total > 0 else 0.0) for k, v in mass.items()}


def selected_kind_counts(history: Sequence[ImportanceTable]) -> dict[ModuleKind, int]:
    counts: dict[ModuleKind, int] = {}
    for table in history:
        for mid in table.selected:
            counts[mid.kind] = counts.get(mid.kind, 0) + 1
    return counts
