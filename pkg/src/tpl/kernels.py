"""Deterministic numeric primitives shared by every pruning strategy.

Every tie-break and normalization rule is fixed here so downstream results
are bit-reproducible: ties go to the smaller index, constant vectors
min-max normalize to 0.5, and zero-norm vectors have cosine similarity 0.
All functions are pure and operate on float64 internally.
"""

from __future__ import annotations

import numpy as np

from .errors import BoundsError, DegenerateInputError, ShapeError


def topk_stable(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ascending, ties to the smaller index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ShapeError(f"expected a 1-d score vector, got shape {scores.shape}")
    if k < 0 or k > scores.size:
        raise BoundsError(f"k={k} outside [0, {scores.size}]")
    # Stable argsort of the negated scores keeps original order within ties,
    # which is exactly the smaller-index-wins rule.
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def bottomk_stable(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest scores, ascending, ties to the smaller index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ShapeError(f"expected a 1-d score vector, got shape {scores.shape}")
    if k < 0 or k > scores.size:
        raise BoundsError(f"k={k} outside [0, {scores.size}]")
    order = np.argsort(scores, kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def minmax_normalize(v) -> np.ndarray:
    """Affine map of ``v`` onto [0, 1]; a constant vector maps to all 0.5."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise BoundsError("cannot normalize an empty vector")
    lo = v.min()
    hi = v.max()
    if hi == lo:
        return np.full_like(v, 0.5)
    return (v - lo) / (hi - lo)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; 0.0 if either has zero norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def row_softmax(v) -> np.ndarray:
    """Numerically stable softmax (max-subtraction) of a single row."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise BoundsError("cannot softmax an empty vector")
    e = np.exp(v - v.max())
    return e / e.sum()


def rank_average(v) -> np.ndarray:
    """1-based ranks of ``v``; tied values receive the average of their ranks."""
    v = np.asarray(v, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    sv = v[order]
    new_group = np.concatenate(([True], sv[1:] != sv[:-1]))
    gid = np.cumsum(new_group) - 1
    counts = np.bincount(gid)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    avg = starts + (counts - 1) / 2.0 + 1.0
    ranks = np.empty(v.size, dtype=np.float64)
    ranks[order] = avg[gid]
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties, in [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DegenerateInputError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise DegenerateInputError("need at least two observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateInputError("constant input has no rank correlation")
    rx = rank_average(x)
    ry = rank_average(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    return float(np.clip((rx @ ry) / denom, -1.0, 1.0))
