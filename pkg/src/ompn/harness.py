"""Experiment orchestration: data -> train -> trace -> segment -> score.

A run directory holds ``config.ini`` (the experiment config), ``manifest.json``
(every artifact written, plus the config fingerprint), one subdirectory per
seed and CSV summaries.  Re-running against an existing directory resumes
the seeds already finished when the config matches and refuses otherwise.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import craft
from .craft import DONE, TASKS, CraftWorld, generate_dataset, generate_world, sketch_vector
from .model import OMPN, VARIANTS, OmpnConfig, trace
from .segmentation import alignment_accuracy, boundary_signal, detect, f1_tolerance
from .training import TrainConfig, Trajectory, augment_demo, train

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CONFIG_FILE = "config.ini"
DETECTIONS = ("topk", "threshold", "auto")


class ManifestMismatch(RuntimeError):
    """An existing run directory was produced by a different config."""


class StageError(RuntimeError):
    def __init__(self, stage: str, seed: int | None, cause: BaseException):
        super().__init__(f"stage {stage!r} failed for seed {seed}: {cause}")
        self.stage, self.seed = stage, seed


@dataclass
class ExperimentConfig:
    name: str = "craft"
    mode: str = "full"
    supervision: str = "nosketch"
    tasks: list[str] = field(default_factory=lambda: sorted(TASKS))
    episodes_per_task: int = 150
    data_seed: int = 0
    holdout: float = 0.1
    model: OmpnConfig = field(default_factory=lambda: OmpnConfig(mem_dim=64))
    training: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=2e-3, epochs=16, batch_size=8, lr_schedule="linear"))
    detection: str = "topk"
    k: int = 4
    threshold: float = 0.5
    tol: int = 1
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def __post_init__(self):
        if self.mode not in ("full", "partial"):
            raise ValueError(f"mode must be full or partial, got {self.mode!r}")
        if self.supervision not in ("nosketch", "sketch"):
            raise ValueError(f"supervision must be nosketch or sketch, got {self.supervision!r}")
        if self.detection not in DETECTIONS:
            raise ValueError(f"detection must be one of {DETECTIONS}")
        if not 0 < self.holdout < 1:
            raise ValueError("holdout must be in (0, 1)")
        if not self.seeds:
            raise ValueError("need at least one seed")
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")

    @property
    def sketch(self) -> bool:
        return self.supervision == "sketch"

    def resolved_model(self) -> OmpnConfig:
        """Model config with the input sizes implied by the environment."""
        sketch_dim = len(sketch_vector(TASKS[self.tasks[0]])) if self.sketch else 0
        return dataclasses.replace(
            self.model, obs_dim=craft.obs_dim(self.mode), act_dim=craft.N_ACTIONS + 1, sketch_dim=sketch_dim
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- INI round trip ---------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        top = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name not in ("model", "training")}
        cp["experiment"] = {k: json.dumps(v) for k, v in top.items()}
        cp["model"] = {k: json.dumps(v) for k, v in dataclasses.asdict(self.model).items()}
        cp["training"] = {k: json.dumps(v) for k, v in dataclasses.asdict(self.training).items()}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp[section].items()]
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        load = lambda sec: {k: json.loads(v) for k, v in cp[sec].items()} if cp.has_section(sec) else {}
        return cls(**load("experiment"), model=OmpnConfig(**load("model")), training=TrainConfig(**load("training")))

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]


# -- data ----------------------------------------------------------------
def build_dataset(cfg: ExperimentConfig) -> tuple[list[Trajectory], list[Trajectory]]:
    """Generate demonstrations and split them into (train, held-out) by a seeded shuffle."""
    demos = generate_dataset(cfg.tasks, cfg.episodes_per_task, cfg.mode, seed=cfg.data_seed)
    trajs = [augment_demo(d, DONE, with_sketch=cfg.sketch) for d in demos]
    order = np.random.default_rng(cfg.data_seed).permutation(len(trajs))
    n_hold = max(1, int(round(cfg.holdout * len(trajs))))
    return [trajs[i] for i in order[n_hold:]], [trajs[i] for i in order[:n_hold]]


# -- scoring -------------------------------------------------------------
def segment_trajectory(cfg: ExperimentConfig, pi_avg: Sequence[float], length: int, k: int | None = None) -> list[int]:
    sig = boundary_signal(pi_avg, length)
    return detect(sig, min(k or cfg.k, length), method=cfg.detection, thres=cfg.threshold)


def score_trajectory(preds: Sequence[int], gts: Sequence[int], length: int, tol: int) -> dict:
    f1 = f1_tolerance(preds, gts, tol)
    return {
        "alignment": alignment_accuracy(preds, gts, length),
        "precision": f1.precision,
        "recall": f1.recall,
        "f1": f1.f1,
    }


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=0))


def format_cell(values: Sequence[float]) -> str:
    """Percent mean with the standard deviation in parentheses, e.g. ``93(1.7)``."""
    m, s = mean_std(values)
    return f"{100 * m:.0f}({100 * s:.1f})"


# -- single seed ---------------------------------------------------------
@dataclass
class SeedResult:
    seed: int
    alignment: float
    precision: float
    recall: float
    f1: float
    wall_time: float
    trajectories: list[dict]

    def row(self) -> dict:
        return {
            "seed": self.seed,
            "alignment": self.alignment,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "wall_time": self.wall_time,
        }


def evaluate_segmentation(cfg: ExperimentConfig, model: OMPN, held_out: Sequence[Trajectory]) -> list[dict]:
    out = []
    for i, tr in enumerate(held_out):
        records = trace(model, tr.observations, tr.actions, tr.sketch)
        pi_avg = [r.pi_avg for r in records]
        preds = segment_trajectory(cfg, pi_avg, tr.length)
        rec = {"index": i, "task": tr.task, "seed": tr.seed, "length": tr.length, "gt": list(tr.gt_boundaries)}
        rec.update(pred=preds, pi_avg=pi_avg, pi=[r.pi for r in records], actions=tr.actions.tolist())
        rec.update(score_trajectory(preds, tr.gt_boundaries, tr.length, cfg.tol))
        out.append(rec)
    return out


def train_seed(cfg: ExperimentConfig, seed: int, train_set: Sequence[Trajectory], log_csv=None) -> OMPN:
    model = OMPN(cfg.resolved_model(), seed=seed)
    train(train_set, model, dataclasses.replace(cfg.training, seed=seed), log_csv=log_csv)
    return model


def run_seed(cfg: ExperimentConfig, seed: int, data, seed_dir: Path | None = None) -> tuple[SeedResult, OMPN]:
    train_set, held_out = data
    t0 = time.perf_counter()
    stage = "train"
    try:
        model = train_seed(cfg, seed, train_set, None if seed_dir is None else seed_dir / "train_log.csv")
        stage = "segment"
        trajs = evaluate_segmentation(cfg, model, held_out)
    except Exception as exc:
        raise StageError(stage, seed, exc) from exc
    agg = {k: float(np.mean([t[k] for t in trajs])) for k in ("alignment", "precision", "recall", "f1")}
    return SeedResult(seed, wall_time=time.perf_counter() - t0, trajectories=trajs, **agg), model


# -- manifest ------------------------------------------------------------
class Manifest:
    def __init__(self, run_dir: Path, cfg: ExperimentConfig):
        self.path = run_dir / MANIFEST
        self.run_dir = run_dir
        if self.path.exists():
            data = json.loads(self.path.read_text())
            if data.get("fingerprint") != cfg.fingerprint():
                raise ManifestMismatch(
                    f"{run_dir} holds results for a different config ({data.get('fingerprint')} != {cfg.fingerprint()}); "
                    "use a fresh directory"
                )
            self.data = data
        else:
            self.data = {"fingerprint": cfg.fingerprint(), "files": [], "completed_seeds": [], "failures": []}

    @property
    def completed(self) -> list[int]:
        return list(self.data["completed_seeds"])

    def add_files(self, *paths: Path) -> None:
        for p in paths:
            rel = str(Path(p).relative_to(self.run_dir))
            if rel not in self.data["files"]:
                self.data["files"].append(rel)
        self.write()

    def mark_done(self, seed: int) -> None:
        if seed not in self.data["completed_seeds"]:
            self.data["completed_seeds"].append(seed)
        self.write()

    def record_failure(self, err: StageError) -> None:
        self.data["failures"].append({"seed": err.seed, "stage": err.stage, "error": str(err)})
        self.write()

    def write(self) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True))
        tmp.replace(self.path)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    seeds: list[SeedResult]
    run_dir: Path | None = None

    def summary(self) -> dict:
        row = {"name": self.config.name, "mode": self.config.mode, "supervision": self.config.supervision}
        row["variant"] = self.config.model.variant
        for key in ("alignment", "f1", "precision", "recall"):
            m, s = mean_std([getattr(r, key) for r in self.seeds])
            row[f"{key}_mean"], row[f"{key}_std"] = m, s
        row["align_cell"] = format_cell([r.alignment for r in self.seeds])
        row["f1_cell"] = format_cell([r.f1 for r in self.seeds])
        row["n_seeds"] = len(self.seeds)
        return row

    def k_sweep(self, ks: Sequence[int] = (2, 3, 4, 5, 6)) -> list[dict]:
        return k_sweep(self.config, self.seeds, ks)


def write_csv(path, rows: Sequence[dict]) -> None:
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def _load_seed(seed_dir: Path) -> SeedResult:
    data = json.loads((seed_dir / "result.json").read_text())
    return SeedResult(**data)


def run_experiment(cfg: ExperimentConfig, run_dir=None, data=None) -> ExperimentResult:
    """Train and score every seed; with ``run_dir`` write artifacts and resume finished seeds."""
    run_dir = None if run_dir is None else Path(run_dir)
    manifest = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = Manifest(run_dir, cfg)
        cfg.save(run_dir / CONFIG_FILE)
        manifest.add_files(run_dir / CONFIG_FILE)
    results: list[SeedResult] = []
    for seed in cfg.seeds:
        seed_dir = None if run_dir is None else run_dir / f"seed{seed}"
        if manifest is not None and seed in manifest.completed:
            log.info("seed %d already complete, loading", seed)
            results.append(_load_seed(seed_dir))
            continue
        if data is None:
            data = build_dataset(cfg)
        if seed_dir is not None:
            seed_dir.mkdir(exist_ok=True)
        try:
            res, model = run_seed(cfg, seed, data, seed_dir)
        except StageError as err:
            if manifest is not None:
                manifest.record_failure(err)
            raise
        log.info("seed %d: alignment %.3f f1 %.3f (%.0fs)", seed, res.alignment, res.f1, res.wall_time)
        results.append(res)
        if seed_dir is not None:
            model.save(seed_dir / "model.ckpt")
            (seed_dir / "result.json").write_text(json.dumps(dataclasses.asdict(res)))
            with open(seed_dir / "traces.jsonl", "w") as fh:
                for t in res.trajectories:
                    fh.write(json.dumps({k: t[k] for k in ("index", "task", "seed", "gt", "pred", "actions", "pi_avg", "pi")}) + "\n")
            manifest.add_files(*(seed_dir / n for n in ("train_log.csv", "model.ckpt", "result.json", "traces.jsonl")))
            manifest.mark_done(seed)
    result = ExperimentResult(cfg, results, run_dir)
    if run_dir is not None:
        write_csv(run_dir / "metrics.csv", [r.row() for r in results])
        write_csv(run_dir / "summary.csv", [result.summary()])
        write_csv(run_dir / "ksweep.csv", result.k_sweep())
        manifest.add_files(run_dir / "metrics.csv", run_dir / "summary.csv", run_dir / "ksweep.csv")
    return result


# -- sweeps --------------------------------------------------------------
def k_sweep(cfg: ExperimentConfig, seeds: Sequence[SeedResult], ks: Sequence[int] = (2, 3, 4, 5, 6)) -> list[dict]:
    """Re-segment stored traces for each K; one row per (seed, K) with trajectory means."""
    rows = []
    for res in seeds:
        for k in ks:
            scores = [
                score_trajectory(segment_trajectory(cfg, t["pi_avg"], t["length"], k), t["gt"], t["length"], cfg.tol)
                for t in res.trajectories
            ]
            row = {"seed": res.seed, "k": k}
            row.update({m: float(np.mean([s[m] for s in scores])) for m in ("precision", "recall", "f1", "alignment")})
            rows.append(row)
    return rows


def ablation_suite(cfg: ExperimentConfig, run_dir=None, variants: Sequence[str] = VARIANTS, data=None) -> list[dict]:
    """One row per variant: per-seed alignment, then mean and std."""
    data = data if data is not None else build_dataset(cfg)
    rows = []
    for v in variants:
        sub = cfg.replace(name=f"{cfg.name}-{v}", model=dataclasses.replace(cfg.model, variant=v))
        res = run_experiment(sub, None if run_dir is None else Path(run_dir) / v, data=data)
        row = {"variant": v}
        row.update({f"seed{r.seed}": r.alignment for r in res.seeds})
        row["mean"], row["std"] = mean_std([r.alignment for r in res.seeds])
        rows.append(row)
    if run_dir is not None:
        write_csv(Path(run_dir) / "ablation.csv", rows)
    return rows


# -- behaviour cloning ---------------------------------------------------
def expert_length(world: CraftWorld, mode: str) -> int:
    return len(craft.rollout_expert(world.copy(), mode).actions)


def play(model: OMPN, world: CraftWorld, mode: str, max_steps: int, sketch=None) -> tuple[bool, int]:
    """Greedy rollout over the augmented action set; returns (success, steps).

    The episode stops when the task completes, when ``done`` is the most
    likely action, or after ``max_steps``.
    """
    from . import autodiff as ad

    with ad.no_grad():
        memory = model.init_memory(sketch)
        for t in range(max_steps):
            out = model.step(world.observe(mode), memory, t, sketch)
            memory = out.memory
            logits = out.logits.data[0]
            if model.config.variant == "no_done":
                probs = np.exp(ad.log_softmax(logits))
            else:
                pe = float(out.pi_end.data[0, 0])
                probs = np.append(np.exp(ad.log_softmax(logits[:-1])) * (1 - pe), pe)
            action = int(np.argmax(probs))
            if action == model.config.done_index:
                return False, t
            done, _ = world.step(action)
            if done:
                return True, t + 1
    return False, max_steps


def evaluate_bc(model: OMPN, mode: str = "full", sketch: bool = False, episodes: int = 100, seed: int = 10_000,
                tasks: Sequence[str] | None = None, budget: int = 8) -> dict:
    """Success rate of greedy play in fresh worlds; success = task done within ``budget`` x expert length."""
    tasks = sorted(TASKS) if tasks is None else list(tasks)
    rows = []
    for i in range(episodes):
        task = tasks[i % len(tasks)]
        world = generate_world(task, seed + i)
        limit = budget * expert_length(world, mode)
        sk = sketch_vector(TASKS[task]) if sketch else None
        ok, steps = play(model, world, mode, limit, sk)
        rows.append({"episode": i, "task": task, "world_seed": seed + i, "success": int(ok), "steps": steps, "limit": limit})
    return {"success_rate": float(np.mean([r["success"] for r in rows])), "episodes": rows}
