"""Command line entry point: ``ompn <subcommand> [options]``.

Every subcommand writes CSV to stdout (or ``--out``) and exits nonzero on
failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import craft
from .harness import (
    DETECTIONS,
    ExperimentConfig,
    ablation_suite,
    evaluate_bc,
    k_sweep,
    run_experiment,
    segment_trajectory,
    score_trajectory,
    _load_seed,
)
from .model import OMPN, VARIANTS, read_trace_jsonl
from .plots import expansion_svg, threshold_svg
from .segmentation import (
    DegenerateSignalError,
    auto_threshold,
    boundary_signal,
    standardize,
    threshold_boundaries,
    topk_boundaries,
)

log = logging.getLogger("ompn")


def _emit(rows, out=None) -> None:
    rows = list(rows)
    buf = io.StringIO() if out is None else open(out, "w", newline="")
    try:
        if rows:
            writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            for r in rows:
                writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
        if out is None:
            sys.stdout.write(buf.getvalue())
    finally:
        if out is not None:
            buf.close()


def _config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    top, model, training = {}, {}, {}
    for name in ("mode", "supervision", "detection", "k", "episodes_per_task", "data_seed"):
        if getattr(args, name, None) is not None:
            top[name] = getattr(args, name)
    if getattr(args, "seeds", None):
        top["seeds"] = args.seeds
    if getattr(args, "tasks", None):
        top["tasks"] = args.tasks
    for name in ("n_slots", "mem_dim", "variant"):
        if getattr(args, name, None) is not None:
            model[name] = getattr(args, name)
    for name in ("epochs", "batch_size", "learning_rate", "bptt_len"):
        if getattr(args, name, None) is not None:
            training[name] = getattr(args, name)
    return cfg.replace(
        **top,
        model=dataclasses.replace(cfg.model, **model),
        training=dataclasses.replace(cfg.training, **training),
    )


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file (INI); flags override it")
    p.add_argument("--mode", choices=["full", "partial"])
    p.add_argument("--supervision", choices=["nosketch", "sketch"])
    p.add_argument("--tasks", nargs="+", choices=sorted(craft.TASKS))
    p.add_argument("--episodes-per-task", dest="episodes_per_task", type=int)
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--n-slots", dest="n_slots", type=int)
    p.add_argument("--mem-dim", dest="mem_dim", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--bptt-len", dest="bptt_len", type=int)
    p.add_argument("--detection", choices=DETECTIONS)
    p.add_argument("--k", type=int)


# -- subcommands ---------------------------------------------------------
def cmd_gen_data(args) -> None:
    demos = craft.generate_dataset(args.tasks or sorted(craft.TASKS), args.episodes_per_task, args.mode, seed=args.seed)
    craft.write_dataset_jsonl(args.output, demos, encoding=args.encoding)
    _emit(
        [{"task": d.task, "seed": d.seed, "length": len(d.actions), "boundaries": " ".join(map(str, d.gt_boundaries))} for d in demos],
        args.out,
    )


def cmd_train(args) -> None:
    cfg = _config_from_args(args)
    res = run_experiment(cfg, args.run_dir)
    rows = [r.row() for r in res.seeds]
    _emit(rows + [{"seed": "summary", **{k: res.summary()[f"{k}_mean"] for k in ("alignment", "precision", "recall", "f1")}, "wall_time": ""}], args.out)


def _load_run(run_dir: Path):
    cfg = ExperimentConfig.load(run_dir / "config.ini")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    seeds = [_load_seed(run_dir / f"seed{s}") for s in sorted(manifest["completed_seeds"])]
    if not seeds:
        raise RuntimeError(f"{run_dir} has no completed seeds")
    return cfg, seeds


def cmd_segment(args) -> None:
    run_dir = Path(args.run_dir)
    cfg, seeds = _load_run(run_dir)
    cfg = cfg.replace(**{k: v for k, v in (("detection", args.detection), ("k", args.k)) if v is not None})
    rows = []
    for res in seeds:
        for t in res.trajectories:
            preds = segment_trajectory(cfg, t["pi_avg"], t["length"])
            row = {"seed": res.seed, "index": t["index"], "task": t["task"], "pred": " ".join(map(str, preds)), "gt": " ".join(map(str, t["gt"]))}
            row.update(score_trajectory(preds, t["gt"], t["length"], cfg.tol))
            rows.append(row)
    _emit(rows, args.out)


def cmd_sweep_k(args) -> None:
    cfg, seeds = _load_run(Path(args.run_dir))
    _emit(k_sweep(cfg, seeds, args.ks), args.out)


def cmd_ablate(args) -> None:
    cfg = _config_from_args(args)
    _emit(ablation_suite(cfg, args.run_dir, args.variants), args.out)


def cmd_eval_bc(args) -> None:
    model = OMPN.load(args.checkpoint)
    sketch = model.config.sketch_dim > 0
    res = evaluate_bc(model, args.mode, sketch, args.episodes, args.seed)
    rows = res["episodes"] + [{"episode": "summary", "task": "", "world_seed": "", "success": res["success_rate"], "steps": "", "limit": ""}]
    _emit(rows, args.out)


def cmd_plot(args) -> None:
    records = read_trace_jsonl(args.trace) if args.trace.endswith(".jsonl") and not args.run_trace else None
    if records is not None:
        pi = np.array([r.pi for r in records])
        pi_avg = [r.pi_avg for r in records]
        actions = [r.action for r in records if r.action is not None] or None
        gt, length = [], len(records) - 1
    else:
        lines = Path(args.trace).read_text().splitlines()
        rec = json.loads(lines[args.index])
        pi, pi_avg, actions, gt, length = np.array(rec["pi"]), rec["pi_avg"], rec["actions"], rec["gt"], len(rec["actions"]) - 1
    sig = boundary_signal(pi_avg, length)
    if args.style == "threshold":
        std = standardize(sig)
        try:
            upper, lower, final = auto_threshold(std)
        except DegenerateSignalError:
            upper = lower = final = 0.5
        preds, _ = threshold_boundaries(std, args.k, final)
        svg = threshold_svg(std, upper, lower, final, gt, preds)
    else:
        preds = topk_boundaries(sig, min(args.k, length))
        svg = expansion_svg(pi, actions, gt, preds)
    Path(args.output).write_text(svg)
    _emit([{"output": args.output, "steps": len(pi), "pred": " ".join(map(str, preds))}], args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ompn", description="Ordered memory policy network experiments on Craft")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate expert demonstrations as JSON lines")
    p.add_argument("output")
    p.add_argument("--mode", choices=["full", "partial"], default="full")
    p.add_argument("--tasks", nargs="+", choices=sorted(craft.TASKS))
    p.add_argument("--episodes-per-task", dest="episodes_per_task", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--encoding", choices=["b64", "array"], default="b64")
    p.add_argument("--out", help="CSV destination (default stdout)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and score every seed of an experiment")
    p.add_argument("run_dir")
    _add_config_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="re-segment the stored traces of a run")
    p.add_argument("run_dir")
    p.add_argument("--detection", choices=DETECTIONS)
    p.add_argument("--k", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("sweep-k", help="precision/recall/F1 for several K from stored traces")
    p.add_argument("run_dir")
    p.add_argument("--ks", type=int, nargs="+", default=[2, 3, 4, 5, 6])
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("ablate", help="run the ablation variants with shared seeds")
    p.add_argument("run_dir")
    _add_config_flags(p)
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval-bc", help="greedy success rate of a checkpoint in fresh worlds")
    p.add_argument("checkpoint")
    p.add_argument("--mode", choices=["full", "partial"], default="full")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=10_000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_bc)

    p = sub.add_parser("plot", help="SVG of one expansion trace")
    p.add_argument("trace", help="trace JSONL written by a run (seedN/traces.jsonl) or by write_trace_jsonl")
    p.add_argument("output")
    p.add_argument("--index", type=int, default=0, help="line of a run trace file")
    p.add_argument("--run-trace", action="store_true", help="treat the input as a run trace file")
    p.add_argument("--style", choices=["expansion", "threshold"], default="expansion")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # report and fail with a nonzero exit
        log.error("%s failed: %s", args.command, exc)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
