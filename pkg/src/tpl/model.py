"""A small deterministic decoder-only transformer with a mid-forward pruning hook.

The model is the execution substrate for latency experiments and live
attention capture: weights are pseudorandom (never trained), computation is
float64 numpy, and a :class:`PruneSchedule` compresses the sequence at
configured layers.  Two attention execution paths exist: a fused path that
processes queries in blocks and never materializes the full attention map,
and a materializing path that allocates the complete per-head map -- the
extra cost paid by selection rules that need full attention rows.

Layer indices are 1-based: a stage at layer K reads scores captured at layer
K-1 and compresses the sequence entering layer K, so layers 1..K-1 run at
full length.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .cost import ModelDims
from .errors import ConfigError, ContractError
from .trace import AttentionTrace, TokenLayout

QUERY_BLOCK = 64


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    hidden: int = 256
    heads: int = 8
    intermediate: int = 1024
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_layers", "hidden", "heads", "intermediate"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden={self.hidden} is not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def default_layout(text_tokens: int = 32, grid: tuple[int, int] = (24, 24)) -> TokenLayout:
    """Desk-scale default: a 24x24 visual grid flanked by text tokens."""
    h, w = grid
    before = text_tokens // 2
    return TokenLayout(
        seq_len=text_tokens + h * w,
        image_start=before,
        image_end=before + h * w,
        grid_h=h,
        grid_w=w,
    )


@dataclass(frozen=True)
class PruneStage:
    """One schedule stage: compress entering 1-based ``layer``, keep ``retain``
    visual tokens; ``materialize`` forces the score layer (K-1) to build the
    full attention map."""

    layer: int
    retain: int
    materialize: bool = False


@dataclass(frozen=True)
class PruneSchedule:
    stages: tuple[PruneStage, ...] = ()

    def validate(self, num_layers: int, layout: TokenLayout) -> None:
        prev_layer = 1  # live stages need scores from layer K-1 >= 1
        prev_retain = layout.num_visual
        for st in self.stages:
            if not (prev_layer < st.layer <= num_layers):
                raise ConfigError(
                    f"stage layers must be strictly increasing in (1, {num_layers}], got {st.layer}"
                )
            if not (0 <= st.retain <= prev_retain):
                raise ConfigError(
                    f"stage retain counts must be non-increasing within [0, {prev_retain}], got {st.retain}"
                )
            prev_layer = st.layer
            prev_retain = st.retain

    @property
    def materializes(self) -> bool:
        return any(st.materialize for st in self.stages)

    @staticmethod
    def single(layer: int, retain: int, materialize: bool = False) -> "PruneSchedule":
        return PruneSchedule((PruneStage(layer, retain, materialize),))


@dataclass
class ForwardState:
    """Mid-forward sequence state: rows of ``x`` map to original positions."""

    x: np.ndarray
    index_map: np.ndarray
    layer: int
    layout: TokenLayout


@dataclass
class HookContext:
    """What a pruning hook sees at its stage: attention rows from layer K-1
    (over the current sequence), the current hidden states, and the
    current-to-original index map."""

    stage: PruneStage
    layout: TokenLayout
    index_map: np.ndarray
    last_text_row: np.ndarray
    last_visual_row: np.ndarray
    hidden: np.ndarray


@dataclass
class ForwardResult:
    output: np.ndarray
    trace: AttentionTrace
    index_map: np.ndarray
    tokens_per_layer: tuple[int, ...] = ()


@dataclass
class LatencyReport:
    median_s: float
    p10_s: float
    p90_s: float
    repeats: int
    materialized: bool
    tokens_per_layer: tuple[int, ...]
    hook_overhead_s: float


@dataclass
class _LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


class ToyTransformer:
    """Immutable after init; forwards own their state and may run in parallel."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, m = config.hidden, config.intermediate
        scale = d ** -0.5
        self.layers = [
            _LayerWeights(
                wq=rng.standard_normal((d, d)) * scale,
                wk=rng.standard_normal((d, d)) * scale,
                wv=rng.standard_normal((d, d)) * scale,
                wo=rng.standard_normal((d, d)) * scale,
                w1=rng.standard_normal((d, m)) * scale,
                w2=rng.standard_normal((m, d)) * (m ** -0.5),
            )
            for _ in range(config.num_layers)
        ]


def init_model(config: ModelConfig) -> ToyTransformer:
    """Build a model whose weights are a pure function of ``config.seed``."""
    return ToyTransformer(config)


def make_embeddings(layout: TokenLayout, hidden: int, seed: int) -> np.ndarray:
    """Deterministic input embeddings for a layout."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((layout.seq_len, hidden))


def compress_sequence(state: ForwardState, retained) -> ForwardState:
    """Gather the retained rows in ascending original order.

    ``retained`` must be a subset of the current index map and must keep
    every non-visual token.
    """
    retained = np.unique(np.asarray(retained, dtype=np.int64))
    current = state.index_map
    pos = np.searchsorted(current, retained)
    if pos.size and (pos >= current.size).any() or not np.array_equal(current[pos], retained):
        raise IndexError("retained indices outside the current index map")
    s, e = state.layout.image_start, state.layout.image_end
    non_visual = current[(current < s) | (current >= e)]
    if not np.isin(non_visual, retained).all():
        raise ContractError("non-visual tokens must never be pruned")
    return ForwardState(
        x=state.x[pos],
        index_map=retained,
        layer=state.layer,
        layout=state.layout,
    )


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x ** 3)))


def _attention(h: np.ndarray, w: _LayerWeights, heads: int, materialize: bool,
               mean_rows: bool):
    """One causal multi-head attention pass.

    Returns ``(out, row_of_query, full_map_or_None, mean_row_or_None)`` where
    ``row_of_query(q)`` yields the head-averaged attention row of query q.
    The fused path walks query blocks and keeps only the rows it was asked
    for; the materializing path allocates the full (H, L, L) map.
    """
    L, d = h.shape
    dh = d // heads
    q = (h @ w.wq).reshape(L, heads, dh).transpose(1, 0, 2)
    k = (h @ w.wk).reshape(L, heads, dh).transpose(1, 0, 2)
    v = (h @ w.wv).reshape(L, heads, dh).transpose(1, 0, 2)
    scale = dh ** -0.5
    cols = np.arange(L)

    if materialize:
        scores = np.einsum("hqd,hkd->hqk", q, k) * scale
        scores = np.where(cols[None, None, :] > cols[None, :, None], -np.inf, scores)
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        ctx = np.einsum("hqk,hkd->hqd", weights, v)
        out = ctx.transpose(1, 0, 2).reshape(L, d) @ w.wo
        head_mean = weights.mean(axis=0)
        mean_row = head_mean.mean(axis=0) if mean_rows else None
        return out, (lambda qi: head_mean[qi]), weights, mean_row

    out = np.empty((L, d))
    row_cache: dict[int, np.ndarray] = {}
    mean_acc = np.zeros(L) if mean_rows else None
    wanted = {L - 1}

    def run_block(b0: int, b1: int, keep_rows: bool):
        blk = np.einsum("hqd,hkd->hqk", q[:, b0:b1], k) * scale
        rows_idx = np.arange(b0, b1)
        blk = np.where(cols[None, None, :] > rows_idx[None, :, None], -np.inf, blk)
        blk -= blk.max(axis=-1, keepdims=True)
        wts = np.exp(blk)
        wts /= wts.sum(axis=-1, keepdims=True)
        out[b0:b1] = np.einsum("hqk,hkd->hqd", wts, v).transpose(1, 0, 2).reshape(b1 - b0, d) @ w.wo
        if keep_rows:
            hm = wts.mean(axis=0)
            if mean_acc is not None:
                mean_acc[:] += hm.sum(axis=0)
            for qi in wanted:
                if b0 <= qi < b1:
                    row_cache[qi] = hm[qi - b0]

    def row_of(qi: int) -> np.ndarray:
        if qi not in row_cache:
            # Recompute just this query's row; cheap relative to a block.
            sc = np.einsum("hd,hkd->hk", q[:, qi], k) * scale
            sc[:, qi + 1:] = -np.inf
            sc -= sc.max(axis=-1, keepdims=True)
            wt = np.exp(sc)
            wt /= wt.sum(axis=-1, keepdims=True)
            row_cache[qi] = wt.mean(axis=0)
        return row_cache[qi]

    for b0 in range(0, L, QUERY_BLOCK):
        run_block(b0, min(b0 + QUERY_BLOCK, L), keep_rows=True)
    mean_row = mean_acc / L if mean_acc is not None else None
    return out, row_of, None, mean_row


def forward(model: ToyTransformer, embeddings: np.ndarray, layout: TokenLayout,
            schedule: PruneSchedule = PruneSchedule(),
            hook: Optional[Callable[[HookContext], np.ndarray]] = None,
            capture_hidden_at: Optional[int] = None,
            guidance_reduction: str = "last") -> ForwardResult:
    """Prefill-style forward pass with mid-forward compression.

    At each schedule stage the hook receives the rows captured at layer K-1
    and returns the global indices to keep; the sequence is compressed before
    layer K runs.  The captured trace holds, per layer, the attention row of
    the current last token and of the last alive visual token, scattered back
    to original coordinates.  ``guidance_reduction="mean_rows"`` stores the
    mean over all query rows in place of the last-token row.
    """
    cfg = model.config
    if embeddings.shape != (layout.seq_len, cfg.hidden):
        raise ConfigError(
            f"embeddings of shape {embeddings.shape} do not match layout/model "
            f"({layout.seq_len}, {cfg.hidden})"
        )
    if guidance_reduction not in ("last", "mean_rows"):
        raise ConfigError(f"unknown guidance reduction {guidance_reduction!r}")
    schedule.validate(cfg.num_layers, layout)
    if schedule.stages and hook is None:
        raise ConfigError("a schedule with stages requires a pruning hook")

    L = layout.seq_len
    state = ForwardState(
        x=np.asarray(embeddings, dtype=np.float64).copy(),
        index_map=np.arange(L, dtype=np.int64),
        layer=1,
        layout=layout,
    )
    stages = {st.layer: st for st in schedule.stages}
    materialize_layers = {st.layer - 1 for st in schedule.stages if st.materialize}
    text_rows = np.zeros((cfg.num_layers, L), dtype=np.float32)
    visual_rows = np.zeros((cfg.num_layers, L), dtype=np.float32)
    hidden_capture: Optional[np.ndarray] = None
    pending: Optional[HookContext] = None

    def last_visual_position(index_map: np.ndarray) -> Optional[int]:
        vis = np.nonzero((index_map >= layout.image_start) & (index_map < layout.image_end))[0]
        return int(vis[-1]) if vis.size else None

    layer_tokens = []
    for layer in range(1, cfg.num_layers + 1):
        if capture_hidden_at == layer:
            hidden_capture = np.zeros((L, cfg.hidden), dtype=np.float32)
            hidden_capture[state.index_map] = state.x.astype(np.float32)
        if layer in stages:
            response = hook(pending)
            replacements = None
            if isinstance(response, tuple):
                response, replacements = response
            state = compress_sequence(state, np.asarray(response, dtype=np.int64))
            if replacements is not None:
                target_idx, rows = replacements
                pos = np.searchsorted(state.index_map, np.asarray(target_idx, dtype=np.int64))
                state.x[pos] = np.asarray(rows, dtype=np.float64)
        layer_tokens.append(state.index_map.size)

        weights = model.layers[layer - 1]
        h = _layer_norm(state.x)
        out, row_of, _, mean_row = _attention(
            h, weights, cfg.heads,
            materialize=layer in materialize_layers,
            mean_rows=guidance_reduction == "mean_rows",
        )
        state.x = state.x + out
        h2 = _layer_norm(state.x)
        state.x = state.x + _gelu(h2 @ weights.w1) @ weights.w2
        state.layer = layer + 1

        cur_len = state.index_map.size
        text_row = mean_row if mean_row is not None else row_of(cur_len - 1)
        vis_pos = last_visual_position(state.index_map)
        vis_row = row_of(vis_pos) if vis_pos is not None else row_of(cur_len - 1)
        text_rows[layer - 1][state.index_map] = text_row.astype(np.float32)
        visual_rows[layer - 1][state.index_map] = vis_row.astype(np.float32)

        next_stage = stages.get(layer + 1)
        if next_stage is not None:
            pending = HookContext(
                stage=next_stage,
                layout=layout,
                index_map=state.index_map,
                last_text_row=np.asarray(row_of(cur_len - 1), dtype=np.float64),
                last_visual_row=np.asarray(vis_row, dtype=np.float64),
                hidden=state.x,
            )

    trace = AttentionTrace(
        layout=layout,
        num_layers=cfg.num_layers,
        num_heads=cfg.heads,
        last_text_rows=text_rows,
        last_visual_rows=visual_rows,
        model_dims=ModelDims(
            layers=cfg.num_layers,
            hidden=cfg.hidden,
            intermediate=cfg.intermediate,
            kv_bytes_per_elem=2,
            heads=cfg.heads,
        ),
        hidden_states=hidden_capture,
        hidden_layer=capture_hidden_at if hidden_capture is not None else None,
    )
    return ForwardResult(
        output=state.x,
        trace=trace,
        index_map=state.index_map,
        tokens_per_layer=tuple(layer_tokens),
    )


def time_forward(model: ToyTransformer, layout: TokenLayout, schedule: PruneSchedule,
                 hook: Optional[Callable] = None, repeats: int = 20,
                 seed: int = 0) -> LatencyReport:
    """Wall-clock latency of repeated forwards; robust statistics, serial runs.

    A warm-up pass precedes timing.  Token counts per layer are recorded from
    the last run (they are deterministic even though times are not).
    """
    if repeats < 3:
        raise ConfigError(f"repeats must be >= 3 for robust statistics, got {repeats}")
    embeddings = make_embeddings(layout, model.config.hidden, seed)

    hook_time = 0.0

    def timed_hook(ctx):
        nonlocal hook_time
        t0 = time.perf_counter()
        out = hook(ctx)
        hook_time += time.perf_counter() - t0
        return out

    wrapped = timed_hook if hook is not None else None
    forward(model, embeddings, layout, schedule, wrapped)  # warm-up

    times = []
    overheads = []
    tokens: tuple[int, ...] = ()
    for _ in range(repeats):
        hook_time = 0.0
        t0 = time.perf_counter()
        result = forward(model, embeddings, layout, schedule, wrapped)
        times.append(time.perf_counter() - t0)
        overheads.append(hook_time)
        tokens = result.tokens_per_layer
    times_arr = np.asarray(times)
    return LatencyReport(
        median_s=float(np.median(times_arr)),
        p10_s=float(np.percentile(times_arr, 10)),
        p90_s=float(np.percentile(times_arr, 90)),
        repeats=repeats,
        materialized=schedule.materializes,
        tokens_per_layer=tokens,
        hook_overhead_s=float(np.median(overheads)),
    )
