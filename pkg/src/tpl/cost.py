"""Analytic inference-cost accounting: FLOPs, KV-cache bytes, reduction factors.

The per-layer FLOPs count is fixed to ``4*n*d^2 + 2*n^2*d + 2*n*d*m``
(attention projections, score/weighted-sum, feed-forward).  The unstated
knobs behind published percentages -- text-token count and the KV bytes
per element -- are explicit parameters with documented defaults.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

from .errors import ConfigError

if TYPE_CHECKING:  # pragma: no cover - import cycle guard
    from .model import PruneSchedule
    from .trace import TokenLayout


@dataclass(frozen=True)
class ModelDims:
    """Dimensions that drive the cost arithmetic."""

    layers: int
    hidden: int
    intermediate: int
    kv_bytes_per_elem: int = 2
    heads: int = 32

    def validate(self) -> None:
        for name in ("layers", "hidden", "intermediate", "kv_bytes_per_elem", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model dimension {name} must be >= 1")


# 7B-class decoder dims (32 layers, 4096 hidden, 11008 intermediate, fp16 KV).
LLAVA_7B_DIMS = ModelDims(layers=32, hidden=4096, intermediate=11008, kv_bytes_per_elem=2, heads=32)


@dataclass
class CostReport:
    """Cost summary for one pruning schedule."""

    flops_total: int
    flops_ratio: float
    kv_bytes: int
    final_tokens: int
    trr_factor: Optional[float] = None
    latency_s: Optional[float] = None


def layer_flops(n: int, dims: ModelDims) -> int:
    """FLOPs of one decoder layer over ``n`` tokens, exact integer arithmetic."""
    if n < 1:
        raise ConfigError(f"token count must be >= 1, got {n}")
    d = dims.hidden
    m = dims.intermediate
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * m


def tokens_per_layer(schedule: "PruneSchedule", num_layers: int, visual_tokens: int,
                     text_tokens: int) -> list[int]:
    """Live token count at each layer (1-based layers 1..N) under ``schedule``.

    A stage at layer K compresses the sequence entering layer K, so layers
    1..K-1 see the pre-stage count and layers K..N the post-stage count.
    """
    stages = list(getattr(schedule, "stages", schedule))
    counts = []
    visual = visual_tokens
    stage_i = 0
    for layer in range(1, num_layers + 1):
        while stage_i < len(stages) and stages[stage_i].layer <= layer:
            visual = stages[stage_i].retain
            stage_i += 1
        counts.append(text_tokens + visual)
    return counts


def schedule_flops_ratio(schedule: "PruneSchedule", dims: ModelDims,
                         layout: "TokenLayout", text_tokens: int) -> float:
    """Total schedule FLOPs divided by the unpruned total, in (0, 1]."""
    dims.validate()
    if text_tokens < 0:
        raise ConfigError("text_tokens must be >= 0")
    stages = list(getattr(schedule, "stages", schedule))
    if any(st.layer > dims.layers for st in stages):
        raise ConfigError("schedule stage beyond the last model layer")
    visual = layout.image_end - layout.image_start
    counts = tokens_per_layer(schedule, dims.layers, visual, text_tokens)
    total = sum(layer_flops(n, dims) for n in counts)
    full = dims.layers * layer_flops(text_tokens + visual, dims)
    return total / full


def kv_cache_bytes(n: int, dims: ModelDims) -> int:
    """KV-cache footprint of ``n`` tokens: keys and values at every layer."""
    if n < 0:
        raise ConfigError(f"token count must be >= 0, got {n}")
    return n * dims.layers * 2 * dims.hidden * dims.kv_bytes_per_elem


def trr(tacr: float, tfrr: float) -> float:
    """Total token reduction rate: training-aware times training-free factor."""
    if tacr < 1 or tfrr < 1:
        raise ConfigError("reduction factors must be >= 1")
    return tacr * tfrr


def visual_tokens_after_merge(patches: int, tacr: float) -> float:
    """Visual tokens surviving training-aware patch merging: patches / tacr."""
    if tacr < 1:
        raise ConfigError("reduction factors must be >= 1")
    if patches < 0:
        raise ConfigError("patch count must be >= 0")
    return patches / tacr
