"""Pruning strategies: scoring, selection, and the config-driven dispatcher.

Layer indices are 1-based throughout, following the usual algorithm
statement: a strategy pruning "at layer K" reads its attention scores from
layer K-1 and compresses the sequence entering layer K.  All selection is
deterministic; ties break toward the smaller token index, window quotas
round down with the remainder handed out in row-major window order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import BoundsError, ConfigError, ContractError, DataError
from .kernels import bottomk_stable, cosine_similarity, minmax_normalize, topk_stable
from .trace import AttentionTrace, TokenLayout

STRATEGIES = ("random", "pooling", "fastv", "reverse_fastv", "window_fastv", "alpha_balance")
GUIDANCE_ROWS = ("last_text", "last_visual")


@dataclass(frozen=True)
class PruneConfig:
    """Strategy selector plus every knob a strategy can consume.

    ``retain`` is ignored by ``pooling``, whose kept count is the number of
    pool windows.  ``layer`` is the 1-based pruning layer K.  ``seed`` is
    only consumed by ``random``.
    """

    strategy: str
    retain: Optional[int] = None
    layer: int = 2
    guidance: str = "last_text"
    window: tuple[int, int] = (4, 4)
    pool: int = 2
    pool_substitute: bool = False
    alpha: float = 0.5
    seed: Optional[int] = None

    def validate(self, layout: TokenLayout) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.guidance not in GUIDANCE_ROWS:
            raise ConfigError(f"unknown guidance {self.guidance!r}, expected one of {GUIDANCE_ROWS}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.window[0] < 1 or self.window[1] < 1 or self.pool < 1:
            raise ConfigError("window and pool dimensions must be >= 1")
        if self.strategy != "pooling":
            if self.retain is None:
                raise ConfigError(f"strategy {self.strategy!r} requires a retain count")
            if not (0 <= self.retain <= layout.num_visual):
                raise BoundsError(
                    f"retain={self.retain} outside [0, {layout.num_visual}] visual tokens"
                )
        if self.strategy == "random" and self.seed is None:
            raise ConfigError("random strategy requires a seed")


@dataclass(eq=False)
class PruneResult:
    """Retained global indices plus the per-visual-token scores behind them."""

    retained: np.ndarray
    visual_scores: Optional[np.ndarray]
    config: PruneConfig
    layout: TokenLayout

    @property
    def retained_visual(self) -> np.ndarray:
        s, e = self.layout.image_start, self.layout.image_end
        return self.retained[(self.retained >= s) & (self.retained < e)]

    def retained_mask(self) -> np.ndarray:
        """Boolean mask over the visual span, True where a token survives."""
        mask = np.zeros(self.layout.num_visual, dtype=bool)
        mask[self.retained_visual - self.layout.image_start] = True
        return mask


def _build_result(visual_idx: np.ndarray, layout: TokenLayout, config: PruneConfig,
                  scores: Optional[np.ndarray]) -> PruneResult:
    s, e, L = layout.image_start, layout.image_end, layout.seq_len
    non_visual = np.concatenate([np.arange(0, s), np.arange(e, L)])
    retained = np.sort(np.concatenate([non_visual, np.asarray(visual_idx, dtype=np.int64)]))
    if retained.size != np.unique(retained).size:
        raise ContractError("duplicate indices in retention set")
    if config.retain is not None and len(visual_idx) != config.retain:
        raise ContractError(
            f"selected {len(visual_idx)} visual tokens but the config retains {config.retain}"
        )
    return PruneResult(
        retained=retained.astype(np.int64),
        visual_scores=None if scores is None else np.asarray(scores, dtype=np.float64),
        config=config,
        layout=layout,
    )


def fastv_scores(trace: AttentionTrace, layer: int, guidance: str = "last_text") -> np.ndarray:
    """Guidance attention row at layer ``layer - 1``, restricted to the visual span.

    ``last_text`` realizes text-guided scoring, ``last_visual`` the
    vision-guided variant.
    """
    if guidance not in GUIDANCE_ROWS:
        raise ConfigError(f"unknown guidance {guidance!r}")
    row_idx = layer - 2  # 1-based layer K-1 lives at array index K-2
    if not (0 <= row_idx < trace.num_layers):
        raise DataError(
            f"trace holds layers 1..{trace.num_layers}; no attention recorded for layer {layer - 1}"
        )
    rows = trace.last_text_rows if guidance == "last_text" else trace.last_visual_rows
    s, e = trace.layout.image_start, trace.layout.image_end
    return np.asarray(rows[row_idx][s:e], dtype=np.float64)


def select_top(scores, layout: TokenLayout, retain: int,
               config: Optional[PruneConfig] = None) -> PruneResult:
    """Keep the ``retain`` highest-scored visual tokens plus all non-visual ones."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size != layout.num_visual:
        raise BoundsError(f"{scores.size} scores for {layout.num_visual} visual tokens")
    if retain > layout.num_visual or retain < 0:
        raise BoundsError(f"retain={retain} outside [0, {layout.num_visual}]")
    visual = topk_stable(scores, retain) + layout.image_start
    cfg = config or PruneConfig(strategy="fastv", retain=retain)
    return _build_result(visual, layout, cfg, scores)


def select_bottom(scores, layout: TokenLayout, retain: int,
                  config: Optional[PruneConfig] = None) -> PruneResult:
    """Keep the ``retain`` lowest-scored visual tokens (the diagnostic inversion)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size != layout.num_visual:
        raise BoundsError(f"{scores.size} scores for {layout.num_visual} visual tokens")
    if retain > layout.num_visual or retain < 0:
        raise BoundsError(f"retain={retain} outside [0, {layout.num_visual}]")
    visual = bottomk_stable(scores, retain) + layout.image_start
    cfg = config or PruneConfig(strategy="reverse_fastv", retain=retain)
    return _build_result(visual, layout, cfg, scores)


def grid_windows(grid_h: int, grid_w: int, win_h: int, win_w: int) -> list[np.ndarray]:
    """Row-major tiling of the grid by win_h x win_w windows (edges smaller).

    Each entry lists the window's visual-span positions in ascending order.
    """
    windows = []
    for r0 in range(0, grid_h, win_h):
        r1 = min(r0 + win_h, grid_h)
        for c0 in range(0, grid_w, win_w):
            c1 = min(c0 + win_w, grid_w)
            rows = np.arange(r0, r1)
            cols = np.arange(c0, c1)
            cells = (rows[:, None] * grid_w + cols[None, :]).ravel()
            windows.append(np.sort(cells))
    return windows


def window_quotas(windows: list[np.ndarray], retain: int, total: int) -> list[int]:
    """Per-window retain counts: floor(R * area / V) plus row-major remainders."""
    quotas = [int(retain * len(w)) // total for w in windows]
    remainder = retain - sum(quotas)
    for i in range(remainder):
        quotas[i] += 1
    for q, w in zip(quotas, windows):
        if q > len(w):
            raise ConfigError(f"window of {len(w)} tokens cannot satisfy quota {q}")
    return quotas


def select_window(scores, layout: TokenLayout, window: tuple[int, int], retain: int,
                  config: Optional[PruneConfig] = None) -> PruneResult:
    """Top scores under exact per-window quotas, enforcing spatial uniformity."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size != layout.num_visual:
        raise BoundsError(f"{scores.size} scores for {layout.num_visual} visual tokens")
    wh, ww = window
    if wh < 1 or ww < 1 or wh > layout.grid_h or ww > layout.grid_w:
        raise ConfigError(
            f"window {wh}x{ww} does not fit the {layout.grid_h}x{layout.grid_w} grid"
        )
    if retain > layout.num_visual or retain < 0:
        raise BoundsError(f"retain={retain} outside [0, {layout.num_visual}]")

    windows = grid_windows(layout.grid_h, layout.grid_w, wh, ww)
    quotas = window_quotas(windows, retain, layout.num_visual)
    kept = []
    for cells, quota in zip(windows, quotas):
        local = topk_stable(scores[cells], quota)
        kept.append(cells[local])
    visual = np.sort(np.concatenate(kept)) + layout.image_start if kept else np.empty(0, np.int64)
    cfg = config or PruneConfig(strategy="window_fastv", retain=retain, window=window)
    return _build_result(visual, layout, cfg, scores)


def pooling_representatives(hidden, layout: TokenLayout, pool: int) -> np.ndarray:
    """Span-local representative of each pool window (row-major window order).

    The representative maximizes the hidden-state L1 norm within its window;
    np.argmax returns the first maximum and cells ascend, so ties go to the
    smaller index.
    """
    if hidden is None:
        raise DataError("pooling requires hidden states")
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[0] < layout.image_end:
        raise DataError(
            f"hidden states of shape {hidden.shape} do not cover the visual span "
            f"[{layout.image_start}, {layout.image_end})"
        )
    if pool < 1:
        raise ConfigError(f"pool size must be >= 1, got {pool}")
    norms = np.abs(hidden[layout.image_start:layout.image_end]).sum(axis=1)
    windows = grid_windows(layout.grid_h, layout.grid_w, pool, pool)
    return np.asarray([cells[int(np.argmax(norms[cells]))] for cells in windows],
                      dtype=np.int64)


def select_pooling(hidden, layout: TokenLayout, pool: int,
                   config: Optional[PruneConfig] = None) -> PruneResult:
    """One representative per pool x pool grid window, by maximal hidden-state L1 norm."""
    reps = pooling_representatives(hidden, layout, pool)
    visual = np.sort(reps) + layout.image_start
    cfg = config or PruneConfig(strategy="pooling", pool=pool)
    cfg = replace(cfg, retain=len(reps))
    return _build_result(visual, layout, cfg, None)


def pool_embeddings(hidden, layout: TokenLayout, pool: int) -> np.ndarray:
    """Mean-pooled window embeddings, one row per pool window (row-major).

    Off-by-default companion to :func:`select_pooling` for runs that replace
    each representative's embedding with its window mean.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    vis = hidden[layout.image_start:layout.image_end]
    windows = grid_windows(layout.grid_h, layout.grid_w, pool, pool)
    return np.stack([vis[cells].mean(axis=0) for cells in windows])


def select_random(layout: TokenLayout, retain: int, seed: int,
                  config: Optional[PruneConfig] = None) -> PruneResult:
    """Uniform sample of the visual span without replacement, seed-deterministic."""
    if retain > layout.num_visual or retain < 0:
        raise BoundsError(f"retain={retain} outside [0, {layout.num_visual}]")
    if seed is None:
        raise ConfigError("random selection requires a seed")
    rng = np.random.default_rng(seed)
    visual = np.sort(rng.choice(layout.num_visual, size=retain, replace=False)) + layout.image_start
    cfg = config or PruneConfig(strategy="random", retain=retain, seed=seed)
    return _build_result(visual, layout, cfg, None)


def alpha_scores(attention, hidden, layout: TokenLayout, alpha: float,
                 reference: Optional[int] = None) -> np.ndarray:
    """Blend of normalized attention importance and hidden-state uniqueness.

    importance  = minmax(attention)
    uniqueness  = 1 - minmax(cosine(hidden_i, hidden_reference))
    score_i     = alpha * importance_i + (1 - alpha) * uniqueness_i

    ``reference`` defaults to the last sequence token.
    """
    if hidden is None:
        raise DataError("alpha-balanced scoring requires hidden states")
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    attention = np.asarray(attention, dtype=np.float64)
    if attention.size != layout.num_visual:
        raise BoundsError(f"{attention.size} scores for {layout.num_visual} visual tokens")
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[0] != layout.seq_len:
        raise DataError(f"hidden states of shape {hidden.shape} do not match seq_len {layout.seq_len}")
    ref = layout.seq_len - 1 if reference is None else reference
    if not (0 <= ref < layout.seq_len):
        raise BoundsError(f"reference index {ref} outside the sequence")

    vis = hidden[layout.image_start:layout.image_end]
    similarity = np.asarray(
        [cosine_similarity(vis[i], hidden[ref]) for i in range(vis.shape[0])]
    )
    importance = minmax_normalize(attention)
    uniqueness = 1.0 - minmax_normalize(similarity)
    return alpha * importance + (1.0 - alpha) * uniqueness


def prune(trace: AttentionTrace, config: PruneConfig) -> PruneResult:
    """Dispatch ``config`` against an offline trace."""
    layout = trace.layout
    config.validate(layout)
    if config.strategy == "random":
        return select_random(layout, config.retain, config.seed, config)
    if config.strategy == "pooling":
        return select_pooling(trace.hidden_states, layout, config.pool, config)

    scores = fastv_scores(trace, config.layer, config.guidance)
    if config.strategy == "fastv":
        return select_top(scores, layout, config.retain, config)
    if config.strategy == "reverse_fastv":
        return select_bottom(scores, layout, config.retain, config)
    if config.strategy == "window_fastv":
        return select_window(scores, layout, config.window, config.retain, config)
    blended = alpha_scores(scores, trace.hidden_states, layout, config.alpha)
    return select_top(blended, layout, config.retain, config)


def make_live_hook(config: PruneConfig):
    """Build a mid-forward hook applying ``config`` at each schedule stage.

    The hook receives a :class:`tpl.model.HookContext` and returns the global
    indices to keep -- or, when ``config.pool_substitute`` is set, a pair of
    (indices, (visual indices, replacement rows)) so the forward pass swaps
    each pooling representative's embedding for its window mean.  Rank-based
    strategies apply to whatever visual tokens are still alive, so they
    compose across multi-stage schedules; window and pooling quotas are
    defined on the full grid and therefore only accept a first-stage
    (all-visual-alive) context.
    """

    def hook(ctx):
        layout = ctx.layout
        retain = ctx.stage.retain
        cfg = replace(config, retain=retain)
        cfg.validate(layout)
        idx = ctx.index_map
        alive_vis = np.nonzero((idx >= layout.image_start) & (idx < layout.image_end))[0]
        non_visual = idx[(idx < layout.image_start) | (idx >= layout.image_end)]

        if cfg.strategy in ("window_fastv", "pooling"):
            if alive_vis.size != layout.num_visual:
                raise ConfigError(
                    f"{cfg.strategy} hooks require a full visual span (single-stage schedules)"
                )
        elif retain > alive_vis.size:
            raise BoundsError(
                f"stage at layer {ctx.stage.layer} retains {retain} of "
                f"{alive_vis.size} alive visual tokens"
            )

        if cfg.strategy == "random":
            rng = np.random.default_rng((cfg.seed, ctx.stage.layer))
            chosen = rng.choice(alive_vis.size, size=retain, replace=False)
            keep_vis = idx[alive_vis[np.sort(chosen)]]
        elif cfg.strategy == "pooling":
            reps = pooling_representatives(ctx.hidden, layout, cfg.pool)
            keep_vis = np.sort(reps) + layout.image_start
            if cfg.pool_substitute:
                pooled = pool_embeddings(ctx.hidden, layout, cfg.pool)
                order = np.argsort(reps)
                retained = np.sort(np.concatenate([non_visual, keep_vis]))
                return retained, (reps[order] + layout.image_start, pooled[order])
        elif cfg.strategy == "window_fastv":
            row = ctx.last_text_row if cfg.guidance == "last_text" else ctx.last_visual_row
            result = select_window(row[alive_vis], layout, cfg.window, retain, cfg)
            keep_vis = result.retained_visual
        else:
            row = ctx.last_text_row if cfg.guidance == "last_text" else ctx.last_visual_row
            scores = np.asarray(row, dtype=np.float64)[alive_vis]
            if cfg.strategy == "alpha_balance":
                importance = minmax_normalize(scores)
                ref = ctx.hidden[-1]
                similarity = np.asarray(
                    [cosine_similarity(ctx.hidden[p], ref) for p in alive_vis]
                )
                scores = cfg.alpha * importance + (1.0 - cfg.alpha) * (
                    1.0 - minmax_normalize(similarity)
                )
            if cfg.strategy == "reverse_fastv":
                local = bottomk_stable(scores, retain)
            else:
                local = topk_stable(scores, retain)
            keep_vis = idx[alive_vis[local]]

        return np.sort(np.concatenate([non_visual, keep_vis]))

    return hook


def keep_all_hook(ctx) -> np.ndarray:
    """Hook that retains every token (useful for identity checks)."""
    return np.asarray(ctx.index_map)
