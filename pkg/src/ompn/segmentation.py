"""Boundary detection from expected expansion positions, and its metrics.

A boundary is the index of the last step of a subtask.  All functions are
pure and work on plain sequences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment


class DegenerateSignalError(ValueError):
    """The signal has no interior peak or no interior valley."""


def boundary_signal(pi_avg: Sequence[float], length: int) -> np.ndarray:
    """Per-step detection signal for a trajectory of ``length`` real steps.

    ``pi_avg`` is the trace of the done-augmented rollout (``length + 1``
    entries).  The expansion chosen while facing the target at step ``t``
    marks ``t`` as the end of a subtask, so the signal is ``pi_avg[:length]``.
    Step 0 is hard-wired to expand at the top slot and carries no learned
    information; it is replaced by the smallest learned value.
    """
    x = np.asarray(pi_avg, dtype=np.float64)
    if length < 1 or len(x) < length:
        raise ValueError(f"boundary_signal: trace of {len(x)} steps cannot cover {length}")
    sig = x[:length].copy()
    if length > 1:
        sig[0] = sig[1:].min()
    return sig


def standardize(pi_avg: Sequence[float]) -> np.ndarray:
    x = np.asarray(pi_avg, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi > lo:
        return (x - lo) / (hi - lo)
    return np.zeros_like(x)


def topk_boundaries(pi_avg: Sequence[float], k: int) -> list[int]:
    """Indices of the ``k`` largest values, ascending; ties go to earlier indices."""
    x = np.asarray(pi_avg, dtype=np.float64)
    if not 1 <= k <= len(x):
        raise ValueError(f"K={k} out of range for a signal of length {len(x)}")
    order = np.lexsort((np.arange(len(x)), -x))
    return sorted(int(i) for i in order[:k])


def threshold_boundaries(standardized: Sequence[float], k: int, thres: float) -> tuple[list[int], bool]:
    """Falling edges of ``standardized > thres`` plus the final step.

    Returns the last ``k`` boundaries and whether fewer than ``k`` were found.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    if not 0.0 <= thres <= 1.0:
        raise ValueError(f"threshold {thres} outside [0, 1]")
    preds = []
    prev = False
    for t, v in enumerate(standardized):
        curr = bool(v > thres)
        if prev == curr:
            continue
        if prev and not curr:
            preds.append(t - 1)
        prev = curr
    preds.append(len(standardized) - 1)
    return preds[::-1][:k][::-1], len(preds) < k


def auto_threshold(standardized: Sequence[float]) -> tuple[float, float, float]:
    """(upper, lower, final): highest peak, lowest valley and their midpoint."""
    x = np.asarray(standardized, dtype=np.float64)
    if len(x) < 3:
        raise DegenerateSignalError("need at least 3 points")
    diff = x[1:] - x[:-1]
    peaks = [i for i in range(1, len(diff)) if diff[i] < 0 and diff[i - 1] > 0]
    valleys = [i for i in range(1, len(diff)) if diff[i] > 0 and diff[i - 1] < 0]
    if not peaks or not valleys:
        raise DegenerateSignalError(f"{len(peaks)} peaks and {len(valleys)} valleys")
    upper = float(x[peaks].max())
    lower = float(x[valleys].min())
    return upper, lower, (upper + lower) / 2


def detect(pi_avg: Sequence[float], k: int, method: str = "topk", thres: float = 0.5) -> list[int]:
    """Dispatch to a detection method: ``topk``, ``threshold`` or ``auto``.

    Every method ends with the last step.  For ``topk`` that step is fixed
    and the other ``k - 1`` boundaries are the largest earlier values.
    """
    if method == "topk":
        x = np.asarray(pi_avg, dtype=np.float64)
        if not 1 <= k <= len(x):
            raise ValueError(f"K={k} out of range for a signal of length {len(x)}")
        head = topk_boundaries(x[:-1], k - 1) if k > 1 else []
        return head + [len(x) - 1]
    std = standardize(pi_avg)
    if method == "auto":
        try:
            thres = auto_threshold(std)[2]
        except DegenerateSignalError:
            thres = 0.5
    elif method != "threshold":
        raise ValueError(f"unknown detection method {method!r}")
    return threshold_boundaries(std, k, thres)[0]


@dataclass
class F1Result:
    precision: float
    recall: float
    f1: float
    empty: bool = False


def _match_count(preds: Sequence[int], gts: Sequence[int], tol: int) -> int:
    ok = np.abs(np.subtract.outer(np.asarray(preds), np.asarray(gts))) <= tol
    rows, cols = linear_sum_assignment(-ok.astype(float))
    return int(ok[rows, cols].sum())


def f1_tolerance(preds: Sequence[int], gts: Sequence[int], tol: int = 1) -> F1Result:
    """Boundary precision/recall/F1 where a match is ``|pred - gt| <= tol``.

    Each prediction and each ground-truth boundary takes part in at most one
    match (maximum one-to-one matching).
    """
    if tol < 0:
        raise ValueError("tol must be >= 0")
    if len(preds) == 0 or len(gts) == 0:
        return F1Result(0.0, 0.0, 0.0, empty=True)
    hits = _match_count(preds, gts, tol)
    p, r = hits / len(preds), hits / len(gts)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return F1Result(p, r, f1)


def alignment(boundaries: Sequence[int], length: int) -> np.ndarray:
    """Segment ordinal of every step: the number of boundaries strictly before it."""
    b = np.asarray(boundaries, dtype=np.int64)
    if len(b) and (np.any(np.diff(b) <= 0) or b[0] < 0 or b[-1] > length - 1):
        raise ValueError(f"malformed boundaries {list(boundaries)} for length {length}")
    return np.searchsorted(b, np.arange(length), side="left")


def alignment_accuracy(pred_boundaries: Sequence[int], gt_boundaries: Sequence[int], length: int) -> float:
    """Fraction of steps whose predicted segment ordinal equals the true one."""
    if not gt_boundaries or gt_boundaries[-1] != length - 1:
        raise ValueError("ground-truth boundaries must end at the last step")
    return float(np.mean(alignment(pred_boundaries, length) == alignment(gt_boundaries, length)))


@dataclass
class SegmentationResult:
    boundaries: list[int]
    alignment: np.ndarray

    @classmethod
    def from_boundaries(cls, boundaries: Sequence[int], length: int) -> "SegmentationResult":
        return cls(list(boundaries), alignment(boundaries, length))
