"""Minimal reverse-mode autodiff over float64 numpy arrays.

The graph is built on the fly (define-by-run): every op returns a new
:class:`Tensor` holding references to its parents and a closure that pushes
the output gradient back to them.  :meth:`Tensor.backward` walks the graph in
reverse topological order.

Shapes are static and small, so only scalar<->matrix broadcasting is
supported in the elementwise ops.  Per-row scaling of a batch, which OMPN
needs for its routing weights, goes through the explicit :func:`scale_rows`.
"""
from __future__ import annotations

import contextlib
import struct
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.data.shape)
        else:
            self.grad += g.reshape(self.data.shape)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | float | None = None) -> "ComputeGraph":
        """Backpropagate from this tensor; returns the graph that was walked."""
        graph = ComputeGraph.from_root(self)
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        self._accum(np.asarray(grad, dtype=DTYPE))
        for node in reversed(graph.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        return graph

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class ComputeGraph:
    """Topologically ordered view of the graph reachable from a root."""

    nodes: list[Tensor] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        leaves = [n for n in order if not n._parents]
        return cls(nodes=order, leaves=leaves)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled:
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward
    return out


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.asarray(g.sum()).reshape(like.shape)


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "div")
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / b.data, b))

    return _make(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accum(g * c)

    return _make(a.data * c, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        a._accum(g * out * (1.0 - out))

    return _make(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out * out))

    return _make(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a._accum(g * mask)

    return _make(a.data * mask, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def clip(a: Tensor, lo: float, hi: float, straight_through: bool = False) -> Tensor:
    """Clamp values.

    The gradient is passed only where no clamping happened, or everywhere
    with ``straight_through`` (keeps a saturated log-probability trainable).
    """
    inside = np.ones(a.shape, dtype=bool) if straight_through else (a.data >= lo) & (a.data <= hi)

    def backward(g):
        a._accum(g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


def maximum(a: Tensor, floor: float) -> Tensor:
    keep = a.data >= floor

    def backward(g):
        a._accum(g * keep)

    return _make(np.maximum(a.data, floor), (a,), backward)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name (``add``, ``mul``, ``sigmoid`` ...)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- linear algebra ------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with the bias shared across rows (fused for speed)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape}")
        out = out + b.data

    def backward(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            w._accum(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def scale_rows(w: Tensor, x: Tensor) -> Tensor:
    """Multiply each row of ``x`` (B, m) by the matching entry of ``w`` (B, 1)."""
    if w.data.ndim != 2 or x.data.ndim != 2 or w.shape != (x.shape[0], 1):
        raise ShapeError(f"scale_rows: weights {w.shape} do not fit rows of {x.shape}")

    def backward(g):
        if w.requires_grad:
            w._accum((g * x.data).sum(axis=1, keepdims=True))
        if x.requires_grad:
            x._accum(g * w.data)

    return _make(w.data * x.data, (w, x), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row of ``x`` (B, m) to zero mean and unit variance, then
    apply the per-feature affine map ``gain * z + bias``."""
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: cannot normalise {x.shape} with gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(x.data.var(axis=1, keepdims=True) + eps)
    z = (x.data - mu) * inv

    def backward(g):
        if gain.requires_grad:
            gain._accum((g * z).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.sum(axis=0))
        if x.requires_grad:
            gz = g * gain.data
            x._accum(inv * (gz - gz.mean(axis=1, keepdims=True) - z * (gz * z).mean(axis=1, keepdims=True)))

    return _make(z * gain.data + bias.data, (x, gain, bias), backward)


# -- structural ----------------------------------------------------------
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input")
    ndim = tensors[0].data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} out of range for {ndim}-d tensors")
    if len(tensors) == 1:
        return tensors[0]
    axis = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != axis
        ):
            raise ShapeError(f"concat: mismatched shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    ndim = a.data.ndim
    idx = [slice(None)] * ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accum(full)

    return _make(a.data[idx], (a,), backward)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Adjoint of :func:`concat`: cut ``a`` into pieces of the given sizes."""
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    out, lo = [], 0
    for s in sizes:
        out.append(take(a, lo, lo + s, axis))
        lo += s
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        a._accum(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), backward)


# -- losses --------------------------------------------------------------
def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def logsoftmax_nll(logits: Tensor, target) -> Tensor:
    """Negative log-likelihood of ``target`` under ``softmax(logits)``.

    ``logits`` is either a vector (k,) with an int target, giving a scalar, or a
    batch (B, k) with B targets, giving a (B,) vector of per-row losses.
    """
    k = logits.shape[-1]
    tgt = np.asarray(target, dtype=np.int64)
    if k < 1:
        raise ShapeError("logsoftmax_nll: need at least one class")
    if np.any(tgt < 0) or np.any(tgt >= k):
        raise IndexError(f"logsoftmax_nll: target {target} out of range for {k} classes")
    if logits.data.ndim == 1:
        if tgt.ndim != 0:
            raise ShapeError("logsoftmax_nll: vector logits need a scalar target")
        lp = log_softmax(logits.data)
        out = -lp[tgt]

        def backward(g):
            d = np.exp(lp)
            d[tgt] -= 1.0
            logits._accum(g * d)

        return _make(np.asarray(out), (logits,), backward)
    if tgt.shape != (logits.shape[0],):
        raise ShapeError(f"logsoftmax_nll: {tgt.shape} targets for logits {logits.shape}")
    lp = log_softmax(logits.data)
    rows = np.arange(logits.shape[0])
    out = -lp[rows, tgt]

    def backward(g):
        d = np.exp(lp)
        d[rows, tgt] -= 1.0
        logits._accum(g[:, None] * d)

    return _make(out, (logits,), backward)


# -- verification --------------------------------------------------------
def grad_check(f: Callable[[], Tensor], params: Tensor | Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the graph from the current parameter values and returns a
    scalar.  Errors are scaled by ``max(1, |analytic|, |numeric|)``.
    """
    params = [params] if isinstance(params, Tensor) else list(params)
    for p in params:
        p.requires_grad = True
        p.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("grad_check: non-finite loss")
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = f().item()
            flat[i] = orig - eps
            with no_grad():
                down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"grad_check: non-finite loss perturbing {p.name or 'param'}[{i}]")
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
        p.grad = None
    return worst


# -- checkpoints ---------------------------------------------------------
CHECKPOINT_MAGIC = b"OMPNCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor | np.ndarray], meta: dict | None = None) -> None:
    """Write parameters to ``path``.

    Layout (little endian): 8-byte magic ``OMPNCKPT``, u32 version, u32 length
    + UTF-8 JSON metadata, u32 parameter count, then per parameter: u32 name
    length, name bytes, u32 ndim, ndim x u64 dims, row-major float64 values.
    """
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an OMPN checkpoint")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(buf[pos : pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * n
    return params, meta
