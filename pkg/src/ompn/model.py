"""Ordered Memory Policy Network.

The memory bank is a list of ``n_slots`` tensors of shape (B, mem_dim); slot
index 0 is the lowest level.  Everything is batched over B trajectories that
advance in lock step, so a single episode is just B == 1.

Per step the module runs a bottom-up pass (refresh every slot with the new
observation and score whether its subtask is finished), turns the scores into
an expansion distribution with a stick-breaking process, runs a top-down pass
that writes fresh sub-task representations below the expansion point, and
blends the three into the next memory.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VARIANTS = ("full", "no_bottomup", "no_topdown", "no_bottomup_recurr", "no_done")
CELLS = ("gated", "om")
PI_EPS = 1e-8


@dataclass
class OmpnConfig:
    n_slots: int = 3
    mem_dim: int = 128
    obs_dim: int = 2539
    act_dim: int = 6  # environment actions + done
    variant: str = "full"
    sketch_dim: int = 0
    cell: str = "gated"
    cell_hidden: int = 4  # hidden width multiplier of the "om" cell

    def __post_init__(self):
        if not 1 <= self.n_slots <= 8:
            raise ValueError(f"n_slots must be in [1, 8], got {self.n_slots}")
        if self.mem_dim < 1 or self.obs_dim < 1:
            raise ValueError("mem_dim and obs_dim must be positive")
        if self.act_dim < 2:
            raise ValueError("act_dim counts the done action and needs at least one other")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.sketch_dim < 0:
            raise ValueError("sketch_dim must be >= 0")
        if self.cell not in CELLS:
            raise ValueError(f"unknown cell {self.cell!r}; expected one of {CELLS}")

    @property
    def done_index(self) -> int:
        return self.act_dim - 1


@dataclass
class ExpansionState:
    """Routing record of one step, as plain arrays with a leading batch axis."""

    f: np.ndarray  # (B, n)
    pi_hat: np.ndarray  # (B, n)
    pi: np.ndarray  # (B, n)
    pi_end: np.ndarray  # (B,)

    @property
    def pi_avg(self) -> np.ndarray:
        levels = np.arange(1, self.pi.shape[1] + 1)
        return self.pi @ levels


@dataclass
class StepOutput:
    memory: list[Tensor]
    logits: Tensor
    f: list[Tensor]
    pi_hat: list[Tensor]
    pi: list[Tensor]
    pi_end: Tensor
    first_step: bool = False

    def expansion(self) -> ExpansionState:
        def stack(ts):
            return np.concatenate([t.data for t in ts], axis=1)

        return ExpansionState(
            f=stack(self.f), pi_hat=stack(self.pi_hat), pi=stack(self.pi), pi_end=self.pi_end.data[:, 0].copy()
        )


# -- parameters ----------------------------------------------------------
def init_params(config: OmpnConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; no sharing across levels."""
    rng = np.random.default_rng(seed)
    m, n = config.mem_dim, config.n_slots
    shapes: dict[str, tuple[int, ...]] = {}

    def dense(name, fan_in, fan_out):
        shapes[f"{name}.w"] = (fan_in, fan_out)
        shapes[f"{name}.b"] = (fan_out,)

    dense("enc", config.obs_dim + config.sketch_dim, m)
    if config.sketch_dim:
        dense("env", config.sketch_dim, m)
    norms = []

    def add_cell(name, k):
        if config.cell == "gated":
            dense(name, k * m, 2 * m)
        else:
            hidden = config.cell_hidden * m
            dense(f"{name}.l1", k * m, hidden)
            dense(f"{name}.l2", hidden, (k + 2) * m)
            norms.append(f"{name}.ln")

    for i in range(n):
        add_cell(f"up{i}", 3)
        dense(f"score{i}.l1", 3 * m, m)
        dense(f"score{i}.l2", m, 1)
    for i in range(n - 1):
        add_cell(f"down{i}", 2)
    dense("act", 2 * m, config.act_dim)

    params = {}
    for name, shape in shapes.items():
        fan_in = shape[0] if len(shape) == 2 else shapes[name[:-2] + ".w"][0]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
    for name in norms:
        params[f"{name}.g"] = Tensor(np.ones(m), requires_grad=True, name=f"{name}.g")
        params[f"{name}.b"] = Tensor(np.zeros(m), requires_grad=True, name=f"{name}.b")
    return params


# -- building blocks -----------------------------------------------------
def gated_cell(parts: Sequence[Tensor], carry: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``g * carry + (1 - g) * tanh(W_c z + b_c)`` with ``g = sigmoid(W_g z + b_g)``."""
    m = carry.shape[1]
    z = ad.linear(ad.concat(parts, axis=1), w, b)
    pre_c, pre_g = ad.split(z, [m, m], axis=1)
    cand = ad.tanh(pre_c)
    gate = ad.sigmoid(pre_g)
    return cand + gate * (carry - cand)


def cell(prev_state: Tensor, inp: Tensor, memory: Tensor, w: Tensor, b: Tensor) -> Tensor:
    m = memory.shape[1]
    for v in (prev_state, inp):
        if v.shape != memory.shape:
            raise ad.ShapeError(f"cell: expected inputs of shape {memory.shape}, got {v.shape}")
    if w.shape != (3 * m, 2 * m):
        raise ad.ShapeError(f"cell: weight shape {w.shape} does not fit mem_dim {m}")
    return gated_cell([prev_state, inp, memory], memory, w, b)


def om_cell(parts: Sequence[Tensor], params, prefix: str) -> Tensor:
    """Ordered-memory style cell: an MLP over the concatenated inputs emits one
    sigmoid gate per input plus a gated candidate; the gated sum is layer-normed."""
    k, m = len(parts), parts[0].shape[1]
    h = ad.relu(ad.linear(ad.concat(parts, axis=1), params[f"{prefix}.l1.w"], params[f"{prefix}.l1.b"]))
    out = ad.split(ad.linear(h, params[f"{prefix}.l2.w"], params[f"{prefix}.l2.b"]), [m] * (k + 2), axis=1)
    acc = ad.sigmoid(out[k]) * out[k + 1]
    for p, g in zip(parts, out[:k]):
        acc = acc + ad.sigmoid(g) * p
    return ad.layer_norm(acc, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])


def apply_cell(params, prefix: str, parts: Sequence[Tensor], carry: Tensor) -> Tensor:
    """Dispatch on the parameter layout: ``prefix.w`` is the single-gate cell,
    ``prefix.l1.w`` the ordered-memory cell."""
    if f"{prefix}.w" in params:
        return gated_cell(parts, carry, params[f"{prefix}.w"], params[f"{prefix}.b"])
    return om_cell(parts, params, prefix)


def score(params, level: int, x: Tensor, c: Tensor, mem: Tensor) -> Tensor:
    h = ad.tanh(ad.linear(ad.concat([x, c, mem], axis=1), params[f"score{level}.l1.w"], params[f"score{level}.l1.b"]))
    return ad.sigmoid(ad.linear(h, params[f"score{level}.l2.w"], params[f"score{level}.l2.b"]))


def _check_finite(t: Tensor, what: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise ad.NumericError(f"non-finite {what}")


def bottom_up(x: Tensor, memory: Sequence[Tensor], params, variant: str = "full"):
    """Horizontal update of every slot; returns (C, f) as per-level lists."""
    C, f = [], []
    prev = x
    zeros = None
    for i, mem in enumerate(memory):
        if variant == "no_bottomup":
            c = mem
        elif variant == "no_bottomup_recurr":
            if zeros is None:
                zeros = Tensor(np.zeros_like(x.data))
            c = apply_cell(params, f"up{i}", [zeros, x, mem], mem)
        else:
            c = apply_cell(params, f"up{i}", [prev, x, mem], mem)
        fi = score(params, i, x, c, mem)
        _check_finite(c, f"bottom-up state at level {i + 1}")
        _check_finite(fi, f"termination score at level {i + 1}")
        C.append(c)
        f.append(fi)
        prev = c
    return C, f


def stick_break(f: Sequence[Tensor]):
    """Termination scores -> (pi_hat, pi, pi_end).

    ``pi_hat[i] = (1 - f[i]) * prod(f[:i])`` and ``pi_end = prod(f)``; ``pi``
    normalises ``pi_hat`` by ``max(sum(pi_hat), PI_EPS)``.
    """
    pi_hat = []
    running = None
    for fi in f:
        stay = 1.0 - fi
        pi_hat.append(stay if running is None else stay * running)
        running = fi if running is None else running * fi
    total = pi_hat[0]
    for p in pi_hat[1:]:
        total = total + p
    denom = ad.maximum(total, PI_EPS)
    pi = [p / denom for p in pi_hat]
    return pi_hat, pi, running


def cumulative(pi: Sequence[Tensor]) -> tuple[list[Tensor], list[Tensor]]:
    """(from_below, from_above): sums over j <= i and over j >= i."""
    below, acc = [], None
    for p in pi:
        acc = p if acc is None else acc + p
        below.append(acc)
    above, acc = [], None
    for p in reversed(pi):
        acc = p if acc is None else acc + p
        above.append(acc)
    return below, above[::-1]


def top_down(x: Tensor, C: Sequence[Tensor], pi: Sequence[Tensor], params, variant: str = "full") -> list[Tensor]:
    n = len(C)
    zero = Tensor(np.zeros_like(C[0].data))
    if variant == "no_topdown":
        return [zero] * n
    below, _ = cumulative(pi)
    m_hat: list[Tensor] = [zero] * n
    for i in range(n - 2, -1, -1):
        w = below[i + 1]
        u = ad.scale_rows(w, C[i + 1])
        if i + 1 != n - 1:
            u = u + ad.scale_rows(1.0 - w, m_hat[i + 1])
        m_hat[i] = apply_cell(params, f"down{i}", [u, x], u)
    return m_hat


def memory_update(memory, C, m_hat, pi, skip_m_hat: bool = False) -> list[Tensor]:
    below, above = cumulative(pi)
    out = []
    for i in range(len(memory)):
        row = ad.scale_rows(1.0 - above[i], memory[i]) + ad.scale_rows(pi[i], C[i])
        if not skip_m_hat:
            row = row + ad.scale_rows(1.0 - below[i], m_hat[i])
        out.append(row)
    return out


def init_memory(config: OmpnConfig, params, env_info: np.ndarray | None = None, batch: int = 1) -> list[Tensor]:
    """Zero memory; with ``env_info`` the top slot holds its linear embedding."""
    n, m = config.n_slots, config.mem_dim
    if env_info is None:
        return [Tensor(np.zeros((batch, m))) for _ in range(n)]
    env_info = np.atleast_2d(np.asarray(env_info, dtype=np.float64))
    if env_info.shape[1] != config.sketch_dim or config.sketch_dim == 0:
        raise ad.ShapeError(f"init_memory: env_info has dim {env_info.shape[1]}, model expects {config.sketch_dim}")
    top = ad.linear(Tensor(env_info), params["env.w"], params["env.b"])
    return [Tensor(np.zeros((env_info.shape[0], m))) for _ in range(n - 1)] + [top]


def encode(config: OmpnConfig, params, obs, sketch=None) -> Tensor:
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if config.sketch_dim:
        if sketch is None:
            raise ad.ShapeError("model was built with a sketch input but none was given")
        obs = np.concatenate([obs, np.atleast_2d(sketch)], axis=1)
    if obs.shape[1] != config.obs_dim + config.sketch_dim:
        raise ad.ShapeError(f"observation dim {obs.shape[1]} != {config.obs_dim + config.sketch_dim}")
    return ad.linear(Tensor(obs), params["enc.w"], params["enc.b"])


def step(config: OmpnConfig, params, obs, memory: Sequence[Tensor], t: int, sketch=None) -> StepOutput:
    """One OMPN step.  At ``t == 0`` the bottom-up pass is skipped and the
    expansion is forced to the top slot so the root task unfolds downward."""
    n = config.n_slots
    x = encode(config, params, obs, sketch)
    batch = x.shape[0]
    variant = config.variant
    if t == 0:
        C = list(memory)
        ones, zeros = np.ones((batch, 1)), np.zeros((batch, 1))
        f = [Tensor(ones) for _ in range(n - 1)] + [Tensor(zeros)]
        pi_hat = [Tensor(zeros) for _ in range(n - 1)] + [Tensor(ones)]
        pi = pi_hat
        pi_end = Tensor(zeros)
    else:
        try:
            C, f = bottom_up(x, memory, params, variant)
        except ad.NumericError as exc:
            raise ad.NumericError(f"{exc} at time step {t}") from exc
        pi_hat, pi, pi_end = stick_break(f)
    m_hat = top_down(x, C, pi, params, variant)
    new_memory = memory_update(memory, C, m_hat, pi, skip_m_hat=variant == "no_topdown")
    logits = ad.linear(ad.concat([new_memory[0], x], axis=1), params["act.w"], params["act.b"])
    return StepOutput(new_memory, logits, f, pi_hat, pi, pi_end, first_step=t == 0)


class OMPN:
    """Parameter container with convenience wrappers around :func:`step`."""

    def __init__(self, config: OmpnConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def init_memory(self, env_info=None, batch: int = 1) -> list[Tensor]:
        return init_memory(self.config, self.params, env_info, batch)

    def step(self, obs, memory, t: int, sketch=None) -> StepOutput:
        return step(self.config, self.params, obs, memory, t, sketch)

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.params, {"ompn_config": asdict(self.config)})

    @classmethod
    def load(cls, path) -> "OMPN":
        arrays, meta = ad.load_checkpoint(path)
        config = OmpnConfig(**meta["ompn_config"])
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
        return cls(config, params=params)

    def clone(self) -> "OMPN":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return OMPN(self.config, params=params)


# -- traces --------------------------------------------------------------
@dataclass
class TraceRecord:
    t: int
    f: list[float]
    pi: list[float]
    pi_end: float
    pi_avg: float
    action: int | None = None


def trace(model: OMPN, observations: np.ndarray, actions: Sequence[int] | None = None, sketch=None) -> list[TraceRecord]:
    """Run the model over one trajectory (no gradients) and record routing."""
    records = []
    with ad.no_grad():
        memory = model.init_memory(sketch)
        for t, obs in enumerate(observations):
            out = model.step(obs, memory, t, sketch)
            memory = out.memory
            es = out.expansion()
            records.append(
                TraceRecord(
                    t=t,
                    f=es.f[0].tolist(),
                    pi=es.pi[0].tolist(),
                    pi_end=float(es.pi_end[0]),
                    pi_avg=float(es.pi_avg[0]),
                    action=None if actions is None else int(actions[t]),
                )
            )
    return records


def write_trace_jsonl(path, records: Sequence[TraceRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


def read_trace_jsonl(path) -> list[TraceRecord]:
    with open(path) as fh:
        return [TraceRecord(**json.loads(line)) for line in fh if line.strip()]
