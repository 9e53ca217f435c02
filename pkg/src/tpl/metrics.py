"""Position-bias and spatial-uniformity diagnostics over pruning results.

Retention frequency and mean attention per visual position quantify the
late-position favoritism of attention-based selection; normalized
cell-occupancy entropy quantifies how evenly retained tokens cover the grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .kernels import spearman
from .strategies import PruneResult, fastv_scores, grid_windows
from .trace import AttentionTrace, TokenLayout


@dataclass
class PositionHistogram:
    """Per-visual-position retention frequency over a batch of results."""

    frequencies: np.ndarray
    samples: int


@dataclass
class UniformityReport:
    """Cell-occupancy summary: counts, normalized entropy, peak occupancy."""

    cell_shape: tuple[int, int]
    counts: np.ndarray
    areas: np.ndarray
    entropy: float
    max_occupancy_ratio: float


def retention_frequency(results: Sequence[PruneResult], layout: TokenLayout) -> PositionHistogram:
    """Fraction of results retaining each visual position."""
    if not results:
        raise DegenerateInputError("empty result batch")
    hits = np.zeros(layout.num_visual, dtype=np.int64)
    for r in results:
        if r.layout != layout:
            raise ShapeError(f"result layout {r.layout} does not match {layout}")
        hits += r.retained_mask()
    return PositionHistogram(frequencies=hits / len(results), samples=len(results))


def attention_by_position(traces: Sequence[AttentionTrace], layout: TokenLayout,
                          layer: int, guidance: str = "last_text") -> np.ndarray:
    """Elementwise mean of the layer-(K-1) guidance row over the visual span."""
    if not traces:
        raise DegenerateInputError("empty trace batch")
    rows = []
    for t in traces:
        if t.layout != layout:
            raise ShapeError(f"trace layout {t.layout} does not match {layout}")
        rows.append(fastv_scores(t, layer, guidance))
    return np.mean(rows, axis=0)


def uniformity_entropy(result: PruneResult, layout: TokenLayout,
                       cell: tuple[int, int]) -> UniformityReport:
    """Normalized entropy of retained-token density over a cell partition.

    Densities are counts per cell divided by cell area, so the score is 1.0
    exactly when counts are proportional to cell areas and 0.0 when every
    retained token sits in one cell.  Edge cells of a non-dividing partition
    are smaller and weighted by their true area.
    """
    if result.layout != layout:
        raise ShapeError(f"result layout {result.layout} does not match {layout}")
    ch, cw = cell
    cells = grid_windows(layout.grid_h, layout.grid_w, ch, cw)
    if len(cells) < 2:
        raise DegenerateInputError("partition must have at least two cells")
    visual = result.retained_visual - layout.image_start
    total = visual.size
    if total == 0:
        raise DegenerateInputError("no retained visual tokens to bin")

    mask = np.zeros(layout.num_visual, dtype=bool)
    mask[visual] = True
    counts = np.asarray([int(mask[c].sum()) for c in cells], dtype=np.int64)
    areas = np.asarray([len(c) for c in cells], dtype=np.int64)

    density = counts / areas
    if np.all(density == density[0]):
        entropy = 1.0
    elif np.count_nonzero(counts) == 1:
        entropy = 0.0
    else:
        p = density / density.sum()
        nz = p[p > 0]
        entropy = float(-(nz * np.log(nz)).sum() / np.log(len(cells)))

    expected = total * areas / areas.sum()
    return UniformityReport(
        cell_shape=(ch, cw),
        counts=counts,
        areas=areas,
        entropy=entropy,
        max_occupancy_ratio=float((counts / expected).max()),
    )


def position_bias_correlation(hist: PositionHistogram) -> float:
    """Spearman correlation of retention frequency with position index.

    Positive values mean late positions are favored.
    """
    freq = np.asarray(hist.frequencies, dtype=np.float64)
    if freq.size < 2 or np.all(freq == freq[0]):
        raise DegenerateInputError("constant histogram has no positional trend")
    return spearman(freq, np.arange(freq.size, dtype=np.float64))
