"""Command-line entry point: ``earthgate <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from pathlib import Path

from .backbone import ConfigError
from .checkpoint import CheckpointError, load_checkpoint
from .config import Mode, TrainConfig, dump_config, load_config
from .fisher import ImportanceTable, write_importance_csv
from .metrics import write_metrics, write_metrics_csv
from .synth import DatasetError, Benchmark, benchmark_from_manifest, dump_benchmark, load_benchmark
from .trainer import Trainer, evaluate_model, model_from_checkpoint

log = logging.getLogger("earthgate")

CHECKPOINT_NAME = "checkpoint.ckpt"
ABLATION_MODES = (
    Mode.FROZEN,
    Mode.FULL_TUNING,
    Mode.GATE,
    Mode.ALL_MODULES,
    Mode.WITHOUT_SPATIAL,
    Mode.WITHOUT_SEMANTIC,
    Mode.WITHOUT_FREQUENCY,
)

_TOOLBOX_FLAGS = {
    "spatial_rank": ("toolbox", "spatial_rank"),
    "semantic_dim": ("toolbox", "semantic_dim"),
    "frequency_dim": ("toolbox", "frequency_dim"),
    "cutoff": ("toolbox", "cutoff"),
    "top_k": ("gate", "top_k"),
}


def load_dataset(path) -> Benchmark:
    path = Path(path)
    if path.is_dir():
        return load_benchmark(path)
    return benchmark_from_manifest(path)


def _apply_overrides(cfg: TrainConfig, args) -> TrainConfig:
    if args.mode:
        cfg.mode = Mode.parse(args.mode)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.gate.total_iterations = args.iterations
        cfg.gate.__post_init__()
    given = [flag for flag in _TOOLBOX_FLAGS if getattr(args, flag, None) is not None]
    if given and not cfg.mode.uses_toolbox:
        names = ", ".join("--" + f.replace("_", "-") for f in given)
        raise ConfigError(f"mode {cfg.mode.value} has no toolbox; remove {names}")
    for flag in given:
        section, key = _TOOLBOX_FLAGS[flag]
        setattr(getattr(cfg, section), key, getattr(args, flag))
    cfg.validate()
    return cfg


def write_run_dir(trainer: Trainer, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = trainer.cfg
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    write_metrics_csv(trainer.metrics, out / "metrics.csv", cfg.backbone.num_classes)
    with open(out / "losses.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(trainer.losses))
    if trainer.gate is not None:
        write_importance_csv(trainer.gate.history, out / "importance.csv")
    (out / "summary.json").write_text(json.dumps(trainer.summary(), indent=2, sort_keys=True) + "\n")
    trainer.save(out / CHECKPOINT_NAME)


def final_target_miou(trainer: Trainer) -> float:
    last = [m.miou for m in trainer.metrics if m.iteration == trainer.iteration]
    return statistics.fmean(last) if last else float("nan")


def cmd_gen_data(args) -> int:
    bench = benchmark_from_manifest(args.manifest)
    digests = dump_benchmark(bench, args.out_dir)
    print(f"wrote {len(digests)} sample files to {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    bench = load_dataset(cfg.dataset)
    out = Path(args.out or f"runs/{cfg.mode.value}-seed{cfg.seed}")
    trainer = Trainer(cfg, bench)
    trainer.run()
    write_run_dir(trainer, out)
    print(f"{cfg.mode.value} seed={cfg.seed} mean target mIoU={final_target_miou(trainer):.4f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    model, cfg, meta = model_from_checkpoint(args.checkpoint)
    bench = load_dataset(args.dataset)
    splits = dict(bench.test)
    if args.domain:
        if args.domain == bench.source.name:
            splits = {args.domain: bench.train}
        elif args.domain not in splits:
            raise DatasetError(f"unknown domain {args.domain!r}; have {sorted(splits)}")
        else:
            splits = {args.domain: splits[args.domain]}
    records = [evaluate_model(model, s, name, int(meta["iteration"])) for name, s in splits.items()]
    if args.out is None:
        write_metrics(records, sys.stdout, cfg.backbone.num_classes)
    else:
        write_metrics_csv(records, args.out, cfg.backbone.num_classes)
    return 0


def cmd_export_importance(args) -> int:
    run = Path(args.run_dir)
    meta, _ = load_checkpoint(run / CHECKPOINT_NAME if run.is_dir() else run)
    history = [ImportanceTable.from_dict(d) for d in meta.get("gate_history", [])]
    if not history:
        raise ConfigError(f"{run} has no gating history (mode {meta['config']['train']['mode']})")
    write_importance_csv(history, args.csv)
    print(f"wrote {len(history)} gating events to {args.csv}")
    return 0


def cmd_ablate(args) -> int:
    base = load_config(args.config)
    bench = load_dataset(base.dataset)
    modes = [Mode.parse(m) for m in args.modes.split(",")] if args.modes else list(ABLATION_MODES)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out) if args.out else None
    rows = []
    for mode in modes:
        scores = []
        for seed in seeds:
            cfg = load_config(args.config)
            cfg.mode, cfg.seed = mode, seed
            if args.iterations is not None:
                cfg.gate.total_iterations = args.iterations
                cfg.gate.__post_init__()
            trainer = Trainer(cfg, bench)
            trainer.run()
            scores.append(final_target_miou(trainer))
            if out is not None:
                write_run_dir(trainer, out / f"{mode.value}-seed{seed}")
        sd = statistics.stdev(scores) if len(scores) > 1 else 0.0
        rows.append((mode.value, statistics.fmean(scores), sd, trainer.summary()["max_trainable_per_step"]))
    print(f"{'mode':<24}{'mIoU':>8}{'std':>8}{'trainable':>11}")
    for name, mean, sd, n in rows:
        print(f"{name:<24}{mean:>8.4f}{sd:>8.4f}{n:>11d}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="earthgate", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate and dump a dataset from a manifest")
    g.add_argument("manifest")
    g.add_argument("out_dir")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("config")
    t.add_argument("--mode")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--iterations", type=int)
    t.add_argument("--spatial-rank", dest="spatial_rank", type=int)
    t.add_argument("--semantic-dim", dest="semantic_dim", type=int)
    t.add_argument("--frequency-dim", dest="frequency_dim", type=int)
    t.add_argument("--cutoff", type=float)
    t.add_argument("--top-k", dest="top_k", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--domain")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-importance", help="write the gating history as CSV")
    x.add_argument("run_dir")
    x.add_argument("csv")
    x.set_defaults(func=cmd_export_importance)

    a = sub.add_parser("ablate", help="run the mode matrix and print a comparison")
    a.add_argument("config")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--modes")
    a.add_argument("--iterations", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"earthgate: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
