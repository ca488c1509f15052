import io
import math
from pathlib import Path

import numpy as np
import pytest

import earthgate
from earthgate.backbone import ConfigError
from earthgate.checkpoint import (
    CheckpointIntegrityError,
    CheckpointVersionError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
)
from earthgate.config import Mode, config_to_dict, dump_config, load_config, parse_config
from earthgate.fisher import FisherAccumulator, gating_step
from earthgate.metrics import MetricsRecord, mean_iou, write_metrics
from earthgate.optim import AdamW
from earthgate.synth import DatasetConfig, make_benchmark, toy_casid_domains
from earthgate.tensor import Tensor
from earthgate.toolbox import ModuleKind
from earthgate.trainer import Trainer, model_from_checkpoint

from helpers import tiny_bench, tiny_config
from oracles import s_confusion_miou

CONFIG_DIR = Path(earthgate.__file__).parent / "configs"


def _snapshot(params):
    return {k: p.data.tobytes() for k, p in params.items()}


def _metrics_bytes(trainer):
    buf = io.StringIO()
    write_metrics(trainer.metrics, buf, 5)
    return buf.getvalue()


# modes ---------------------------------------------------------------------------

def test_frozen_leaves_backbone_bytes_unchanged():
    t = Trainer(tiny_config(Mode.FROZEN, T=6), tiny_bench())
    before = _snapshot(t.model.backbone.parameters())
    head_before = _snapshot(t.model.head.parameters())
    t.run()
    assert t.model.toolbox is None
    assert _snapshot(t.model.backbone.parameters()) == before
    assert _snapshot(t.model.head.parameters()) != head_before


def test_full_tuning_updates_backbone():
    t = Trainer(tiny_config(Mode.FULL_TUNING, T=4), tiny_bench())
    before = _snapshot(t.model.backbone.parameters())
    t.run()
    assert _snapshot(t.model.backbone.parameters()) != before


@pytest.mark.parametrize("selection_count", [1, 2])
def test_saturated_gate_equals_all_modules(selection_count):
    gate = Trainer(tiny_config(Mode.GATE, T=8, top_k=6, selection_count=selection_count, eval_interval=4),
                   tiny_bench())
    allm = Trainer(tiny_config(Mode.ALL_MODULES, T=8, eval_interval=4), tiny_bench())
    gate.run()
    allm.run()
    assert gate.losses == allm.losses
    assert _metrics_bytes(gate) == _metrics_bytes(allm)
    for k, p in allm.model.parameters().items():
        assert p.data.tobytes() == gate.model.parameters()[k].data.tobytes(), k


@pytest.mark.parametrize("mode,missing", [
    (Mode.WITHOUT_SPATIAL, ModuleKind.SPATIAL),
    (Mode.WITHOUT_SEMANTIC, ModuleKind.SEMANTIC),
    (Mode.WITHOUT_FREQUENCY, ModuleKind.FREQUENCY),
])
def test_without_modes_register_two_kinds(mode, missing):
    t = Trainer(tiny_config(mode, T=2, top_k=2), tiny_bench())
    assert len(t.model.toolbox) == 2 * 2
    assert missing not in t.model.toolbox.kinds
    t.run()


def test_trainable_count_audit():
    cfg = tiny_config(Mode.GATE, T=12, top_k=2, selection_count=3)
    t = Trainer(cfg, tiny_bench())
    head = t.model.head.num_parameters()
    sizes = sorted((t.model.toolbox.module_size(m) for m in t.model.toolbox.ids()), reverse=True)
    bound = head + sum(sizes[: cfg.gate.top_k])
    t.run()
    assert len(t.trainable_trace) == 12
    assert max(t.trainable_trace) <= bound
    for table in t.gate.history:
        assert len(table.selected) == 2
    s = t.summary()
    assert s["max_trainable_per_step"] <= bound
    assert s["ever_active_parameters"] >= s["trainable_now"]


def test_gating_isolation_per_segment():
    cfg = tiny_config(Mode.GATE, T=12, top_k=2, selection_count=3)
    t = Trainer(cfg, tiny_bench())
    box = t.model.toolbox
    for start in cfg.gate.schedule():
        t.step()  # gate event plus first update of the segment
        frozen = {m: _snapshot(p) for m, p in box.module_parameters().items() if m not in box.active}
        t.run(until=start + cfg.gate.interval)
        for m, snap in frozen.items():
            assert _snapshot(box.module_parameters()[m]) == snap, m


def test_gating_step_is_measurement_only():
    cfg = tiny_config(Mode.GATE, T=10, top_k=2)
    t = Trainer(cfg, tiny_bench())
    before = _snapshot(t.model.parameters())
    table = gating_step(t.model, t._fisher_sample, cfg.gate, FisherAccumulator(), 0, 0)
    assert _snapshot(t.model.parameters()) == before
    assert all(p.grad is None for p in t.model.parameters().values())
    assert set(t.model.toolbox.active) == set(table.selected)
    assert all(v >= 0 for v in table.raw.values())


def test_optimizer_moments_persist_across_events():
    cfg = tiny_config(Mode.GATE, T=12, top_k=3, selection_count=3)
    t = Trainer(cfg, tiny_bench())
    t.run()
    head_steps = t.optimizer.t["head.weight"]
    assert head_steps == 12
    counts = [v for k, v in t.optimizer.t.items() if k.startswith("toolbox.")]
    assert counts and max(counts) <= 12


def test_dataset_mismatch_rejected_before_training():
    pretrain, source, targets = toy_casid_domains()
    bench = make_benchmark(source, targets, DatasetConfig(image_size=32, train_count=2, test_count=1,
                                                          pretrain_count=0))
    with pytest.raises(ConfigError, match="image_size"):
        Trainer(tiny_config(), bench)


def test_top_k_larger_than_registry_rejected():
    with pytest.raises(ConfigError):
        Trainer(tiny_config(Mode.WITHOUT_FREQUENCY, top_k=5), tiny_bench())


# determinism and persistence ----------------------------------------------------------

def test_same_seed_same_metrics_bytes():
    runs = [Trainer(tiny_config(T=8), tiny_bench()) for _ in range(2)]
    for r in runs:
        r.run()
    assert _metrics_bytes(runs[0]) == _metrics_bytes(runs[1])
    other = Trainer(tiny_config(T=8, seed=1), tiny_bench())
    other.run()
    assert other.losses != runs[0].losses


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tiny_config(T=20, selection_count=4)
    full = Trainer(cfg, tiny_bench())
    full.run()
    part = Trainer(tiny_config(T=20, selection_count=4), tiny_bench())
    part.run(until=7)
    part.save(tmp_path / "mid.ckpt")
    resumed = Trainer.restore(tmp_path / "mid.ckpt", tiny_bench())
    resumed.run()
    assert resumed.losses == full.losses
    assert _metrics_bytes(resumed) == _metrics_bytes(full)
    assert [t.to_dict() for t in resumed.gate.history] == [t.to_dict() for t in full.gate.history]


def test_save_load_save_byte_identical(tmp_path):
    t = Trainer(tiny_config(T=6), tiny_bench())
    t.run(until=4)
    t.save(tmp_path / "a.ckpt")
    again = Trainer.restore(tmp_path / "a.ckpt", tiny_bench())
    again.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    meta, arrays = load_checkpoint(tmp_path / "a.ckpt")
    for k, p in t.model.parameters().items():
        assert arrays[k].tobytes() == p.data.tobytes()


def test_model_from_checkpoint_predicts_identically(tmp_path):
    t = Trainer(tiny_config(T=4), tiny_bench())
    t.run()
    t.save(tmp_path / "c.ckpt")
    model, cfg, meta = model_from_checkpoint(tmp_path / "c.ckpt")
    images = np.stack([s.image for s in tiny_bench().test["semantic"]])
    np.testing.assert_array_equal(model.predict(images), t.model.predict(images))


def test_checkpoint_errors():
    blob = encode_checkpoint({"a": 1}, {"x": np.arange(3.0)})
    meta, arrays = decode_checkpoint(blob)
    assert meta == {"a": 1} and arrays["x"].tolist() == [0.0, 1.0, 2.0]
    corrupt = bytearray(blob)
    corrupt[-3] ^= 0x01
    with pytest.raises(CheckpointIntegrityError):
        decode_checkpoint(bytes(corrupt))
    with pytest.raises(CheckpointIntegrityError):
        decode_checkpoint(blob[:-5])
    with pytest.raises(CheckpointIntegrityError):
        decode_checkpoint(blob[:10])
    bumped = bytearray(blob)
    bumped[8:12] = (2).to_bytes(4, "little")
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(bytes(bumped))


# metrics ------------------------------------------------------------------------------

def test_miou_perfect_and_disjoint():
    y = np.array([0, 1, 2, 2, 1])
    assert mean_iou(y, y, 3) == 1.0
    assert mean_iou(np.zeros(4, int), np.ones(4, int), 3) == 0.0


def test_miou_matches_confusion_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pred = rng.integers(0, 2, size=50)
        lab = rng.integers(0, 2, size=50)
        oracle, ious = s_confusion_miou(pred.tolist(), lab.tolist(), 4)
        assert abs(mean_iou(pred, lab, 4) - oracle) < 1e-12
        rec = MetricsRecord.from_predictions(0, "d", pred, lab, 4)
        assert all(math.isnan(v) for v in rec.per_class_iou[2:])
        assert all(0.0 <= v <= 1.0 for v in rec.per_class_iou[:2])


def test_metrics_csv_header():
    buf = io.StringIO()
    write_metrics([MetricsRecord(3, "x", (1.0, float("nan")), 1.0)], buf, 2)
    assert buf.getvalue() == "iteration,domain,iou_0,iou_1,miou\n3,x,1.0,nan,1.0\n"


# optimizer ------------------------------------------------------------------------------

def test_adamw_first_step_oracle():
    w = Tensor(np.array([2.0]), requires_grad=True)
    w.grad = np.array([0.5])
    opt = AdamW({"w": w}, lr=0.1, weight_decay=0.01)
    opt.step()
    # bias-corrected first step moves by lr * g/|g| (plus eps), decay applied decoupled
    expected = 2.0 - 0.1 * 0.01 * 2.0 - 0.1 * 0.5 / (0.5 + 1e-8)
    assert w.data[0] == pytest.approx(expected, abs=1e-15)
    frozen = Tensor(np.array([1.0]))
    AdamW({"f": frozen}, lr=0.1).step()
    assert frozen.data[0] == 1.0


# config -------------------------------------------------------------------------------------

def test_config_round_trip():
    cfg = tiny_config(T=30, seed=4)
    again = parse_config(dump_config(cfg))
    assert config_to_dict(again) == config_to_dict(cfg)
    assert "# iterations" in dump_config(cfg)


def test_shipped_config_loads():
    cfg = load_config(CONFIG_DIR / "toy-casid.ini")
    assert cfg.gate.top_k == 3 * cfg.backbone.depth // 4
    assert (cfg.gate.accumulation_steps, cfg.gate.selection_count, cfg.total_iterations) == (100, 10, 3000)
    assert cfg.dataset.endswith("toy-casid.json")
    assert cfg.backbone.num_classes == 5


@pytest.mark.parametrize("text", [
    "[gate]\ntop_k = 3\nbogus = 1\n",
    "[nonsense]\na = 1\n",
    "[train]\nmode = Sideways\n",
])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)
