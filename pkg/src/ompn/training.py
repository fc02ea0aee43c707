"""Behaviour cloning with the done-augmented likelihood.

Every demonstration gets one extra step carrying the special ``done`` action.
For an ordinary action the model's probability is ``p(a|s) * (1 - pi_end)``;
for ``done`` it is ``pi_end``.  Training is truncated BPTT over fixed windows
with Adam and global-norm gradient clipping.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import OMPN

log = logging.getLogger(__name__)

PI_END_CLAMP = 1e-7


@dataclass
class Trajectory:
    observations: np.ndarray  # (T + 1, obs_dim), last row is the post-terminal state
    actions: np.ndarray  # (T + 1,), last entry is done
    gt_boundaries: list[int]
    sketch: np.ndarray | None = None  # encoded sketch vector
    task: str = ""
    seed: int | None = None
    repeated_terminal: bool = False

    @property
    def length(self) -> int:
        """Number of real (pre-done) steps."""
        return len(self.actions) - 1


def augment(observations, actions, done_action: int, terminal_obs=None, gt_boundaries=None, **extra) -> Trajectory:
    """Append ``(terminal_obs, done)`` to a demonstration.

    Without ``terminal_obs`` the last observation is repeated, which is a poor
    substitute in Craft where the final ``use`` changes the state.
    """
    observations = np.asarray(observations, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    if len(actions) == 0 or len(observations) != len(actions):
        raise ValueError("augment: need a nonempty demonstration with one observation per action")
    repeated = terminal_obs is None
    if repeated:
        log.warning("no terminal observation; repeating the last one")
        terminal_obs = observations[-1]
    obs = np.vstack([observations, np.asarray(terminal_obs, dtype=np.float64)[None]])
    acts = np.append(actions, done_action)
    bounds = list(gt_boundaries) if gt_boundaries is not None else [len(actions) - 1]
    return Trajectory(obs, acts, bounds, repeated_terminal=repeated, **extra)


def augment_demo(demo, done_action: int, with_sketch: bool = False) -> Trajectory:
    from .craft import sketch_vector

    return augment(
        demo.observations,
        demo.actions,
        done_action,
        demo.terminal_obs,
        demo.gt_boundaries,
        sketch=sketch_vector(demo.sketch) if with_sketch else None,
        task=demo.task,
        seed=demo.seed,
    )


LR_SCHEDULES = ("constant", "linear")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    bptt_len: int = 64
    grad_clip_l2: float = 0.2
    epochs: int = 60
    batch_size: int = 1
    seed: int = 0
    lr_schedule: str = "constant"  # or "linear": decays to zero over the epochs

    def __post_init__(self):
        if self.bptt_len < 1:
            raise ValueError("bptt_len must be >= 1")
        if self.grad_clip_l2 <= 0:
            raise ValueError("grad_clip_l2 must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")

    def epoch_lr(self, epoch: int) -> float:
        if self.lr_schedule == "linear":
            return self.learning_rate * (1.0 - epoch / self.epochs)
        return self.learning_rate


# -- batching ------------------------------------------------------------
@dataclass
class Batch:
    obs: np.ndarray  # (S, B, d)
    actions: np.ndarray  # (S, B)
    mask: np.ndarray  # (S, B) 1 where the step exists
    sketch: np.ndarray | None  # (B, sketch_dim)
    ids: list

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory]) -> "Batch":
        steps = max(len(t.actions) for t in trajs)
        d = trajs[0].observations.shape[1]
        obs = np.zeros((steps, len(trajs), d))
        actions = np.zeros((steps, len(trajs)), dtype=np.int64)
        mask = np.zeros((steps, len(trajs)))
        for b, t in enumerate(trajs):
            n = len(t.actions)
            obs[:n, b] = t.observations
            actions[:n, b] = t.actions
            mask[:n, b] = 1.0
        sketch = None if trajs[0].sketch is None else np.stack([t.sketch for t in trajs])
        return cls(obs, actions, mask, sketch, [(t.task, t.seed) for t in trajs])


def step_nll(model: OMPN, out, actions: np.ndarray, mask: np.ndarray, t: int):
    """Masked per-step negative log p'; returns (sum Tensor, #saturated)."""
    cfg = model.config
    done_idx = cfg.done_index
    is_done = actions == done_idx
    if cfg.variant == "no_done":
        nll = ad.logsoftmax_nll(out.logits, actions)
        return ad.reduce_sum(nll * mask), 0
    env_logits = ad.take(out.logits, 0, done_idx, axis=1)
    safe_targets = np.where(is_done, 0, actions)
    nll_act = ad.logsoftmax_nll(env_logits, safe_targets)
    w_act = mask * (~is_done)
    w_done = mask * is_done
    total = ad.reduce_sum(nll_act * w_act)
    saturated = 0
    if not out.first_step:
        raw = out.pi_end.data[:, 0]
        saturated = int(np.sum(((raw < PI_END_CLAMP) | (raw > 1 - PI_END_CLAMP)) & (mask > 0)))
        pe = ad.reshape(ad.clip(out.pi_end, PI_END_CLAMP, 1 - PI_END_CLAMP, straight_through=True), (len(actions),))
        stay = ad.log(1.0 - pe)
        end = ad.log(pe)
        total = total - ad.reduce_sum(stay * w_act) - ad.reduce_sum(end * w_done)
    return total, saturated


def sequence_nll(model: OMPN, batch: Batch, memory, start: int, stop: int):
    """Sum of -log p' over steps ``[start, stop)`` starting from ``memory``."""
    total, saturated = None, 0
    for t in range(start, stop):
        out = model.step(batch.obs[t], memory, t, batch.sketch)
        memory = out.memory
        s, sat = step_nll(model, out, batch.actions[t], batch.mask[t], t)
        total = s if total is None else total + s
        saturated += sat
    return total, saturated, memory


def bc_loss(model: OMPN, traj: Trajectory) -> Tensor:
    """Mean over all T+1 steps of -log p'(a|s)."""
    batch = Batch.from_trajectories([traj])
    memory = model.init_memory(batch.sketch)
    total, _, _ = sequence_nll(model, batch, memory, 0, len(traj.actions))
    return total / float(len(traj.actions))


# -- optimisation --------------------------------------------------------
def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            p.data -= adam_step(g, self.m[i], self.v[i], self.t, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(grad, m, v, t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """Update the moment buffers ``m``/``v`` in place and return the step to subtract."""
    if grad.shape != m.shape:
        raise ValueError(f"adam_step: gradient shape {grad.shape} != parameter shape {m.shape}")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return lr * m_hat / (np.sqrt(v_hat) + eps)


def grads_of(params: Sequence[Tensor]) -> list[np.ndarray]:
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    saturated: int
    wall_time: float


@dataclass
class TrainResult:
    model: OMPN
    history: list[EpochStats] = field(default_factory=list)


def batch_gradients(model: OMPN, batch: Batch, bptt_len: int):
    """Truncated-BPTT pass over one batch; yields (grads, loss_sum, saturated) per window.

    Memory values flow across window boundaries but gradients do not.  Each
    window's loss is divided by the batch's total step count, so with a single
    window the gradient is that of the batch-mean loss.
    """
    steps = batch.obs.shape[0]
    n_valid = float(batch.mask.sum())
    params = model.parameters()
    memory = model.init_memory(batch.sketch, batch=batch.obs.shape[1])
    for start in range(0, steps, bptt_len):
        stop = min(start + bptt_len, steps)
        if start > 0:
            memory = [m.detach() for m in memory]
        for p in params:
            p.grad = None
        total, sat, memory = sequence_nll(model, batch, memory, start, stop)
        if not np.isfinite(total.item()):
            raise ad.NumericError(f"non-finite loss in window starting at step {start} for trajectories {batch.ids}")
        (total / n_valid).backward()
        yield [g.copy() for g in grads_of(params)], total.item(), sat


def train(
    dataset: Sequence[Trajectory],
    model: OMPN,
    config: TrainConfig,
    log_csv=None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> TrainResult:
    """Shuffled mini-batch training; ``on_epoch`` is called after every epoch."""
    if not dataset:
        raise ValueError("train: empty dataset")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2)
    result = TrainResult(model)
    writer = None
    if log_csv is not None:
        fh = open(log_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "saturated", "wall_time"])
    t0 = time.perf_counter()
    try:
        for epoch in range(config.epochs):
            opt.lr = config.epoch_lr(epoch)
            order = rng.permutation(len(dataset))
            loss_sum, n_steps, saturated = 0.0, 0, 0
            for lo in range(0, len(order), config.batch_size):
                batch = Batch.from_trajectories([dataset[i] for i in order[lo : lo + config.batch_size]])
                for grads, loss, sat in batch_gradients(model, batch, config.bptt_len):
                    clip_grad_norm(grads, config.grad_clip_l2)
                    opt.step(grads)
                    loss_sum += loss
                    saturated += sat
                n_steps += int(batch.mask.sum())
            stats = EpochStats(epoch, loss_sum / n_steps, saturated, time.perf_counter() - t0)
            result.history.append(stats)
            log.info("epoch %d loss %.4f saturated %d (%.1fs)", epoch, stats.mean_loss, saturated, stats.wall_time)
            if writer is not None:
                writer.writerow([epoch, f"{stats.mean_loss:.6f}", saturated, f"{stats.wall_time:.2f}"])
                fh.flush()
            if on_epoch is not None:
                on_epoch(stats)
    finally:
        if writer is not None:
            fh.close()
    return result
