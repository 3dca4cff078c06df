"""Command-line interface: dataset generation, training, evaluation, and the
dispatch benchmark.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 file I/O error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import report, scenes
from .config import config_hash, load_config
from .model import load_checkpoint, save_checkpoint
from .moe import REFERENCE_SPEEDUPS, ConfigError, bench_dispatch
from .training import TrainingDiverged, evaluate, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

SPEEDUP_GATE_BATCH = 128
SPEEDUP_GATE = 3.0


def _write_csv(path, fieldnames, rows, chash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    dataset = scenes.generate_dataset(cfg.data.n_scenes, cfg.data.seed,
                                      mismatch_rate=cfg.data.mismatch_rate)
    scenes.save_dataset(dataset, args.out)
    print(f"wrote {cfg.data.n_scenes} scenes to {args.out} "
          f"(config_hash={config_hash(cfg)})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    chash = config_hash(cfg)
    dataset = scenes.load_dataset(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_params, rep, _ = train(dataset, cfg.train, cfg.model)
    save_checkpoint(out_dir / "checkpoint.ckpt", best_params, cfg.model,
                    chash, rep.best_epoch, cfg.train.seed)
    _write_csv(out_dir / "train_report.csv",
               ["epoch", "stage", "train_loss", "train_l1", "val_l1",
                "samples_per_sec"],
               [vars(r) for r in rep.records], chash)
    report.render_training_curves(rep.records,
                                  out_dir / "training_curves.png")
    print(f"best epoch {rep.best_epoch} "
          f"(val L1 {rep.best_val_l1:.4f}); outputs in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    chash = config_hash(cfg)
    params, mcfg, _ = load_checkpoint(args.checkpoint)
    dataset = scenes.load_dataset(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, summary, baseline, mean_l1 = evaluate(
        params, mcfg, dataset, cfg.score, batch_size=cfg.train.batch_size)
    out_rows = [dict(row, kind="scene") for row in rows]
    out_rows.append(dict(summary, scene_id="", kind="summary_model"))
    out_rows.append(dict(baseline, scene_id="", kind="summary_baseline"))
    _write_csv(out_dir / "eval_report.csv",
               ["kind", "scene_id", "nc", "dac", "ep", "ttc", "c", "pdms"],
               out_rows, chash)
    report.render_score_bars(summary, baseline, out_dir / "scores.png")
    print(f"scored {len(rows)} scenes: model pdms {summary['pdms']:.4f}, "
          f"baseline pdms {baseline['pdms']:.4f}, mean L1 {mean_l1:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    chash = config_hash(cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sizes = [int(s) for s in args.batch_sizes.split(",")]
    rows = bench_dispatch(cfg.model.moe_cfg(), sizes, repeats=args.repeats)
    _write_csv(out_dir / "bench_report.csv",
               ["batch_size", "mode", "samples_per_sec", "speedup"],
               rows, chash)
    report.render_bench(rows, out_dir / "bench_throughput.png")
    for size in sizes:
        speedup = next(r["speedup"] for r in rows
                       if r["batch_size"] == size and r["mode"] == "grouped")
        verdict = ""
        if size == SPEEDUP_GATE_BATCH:
            ok = speedup >= SPEEDUP_GATE
            verdict = (f"  [{'PASS' if ok else 'FAIL'} "
                       f">= {SPEEDUP_GATE:.1f}x gate]")
        print(f"batch {size}: grouped/naive speedup {speedup:.2f}x{verdict}")
    refs = ", ".join(f"{b}->{s:.2f}x" for b, s in REFERENCE_SPEEDUPS)
    print(f"reference factors on large-GPU hardware: {refs}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arplan",
        description="Autoregressive mixture-of-experts trajectory planner")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the planner")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench-dispatch",
                       help="benchmark grouped vs naive expert dispatch")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--batch-sizes", default="16,64,128")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, scenes.DatasetFormatError,
            scenes.DatasetVersionError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
