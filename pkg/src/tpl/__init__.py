"""tpl: a desk-scale token-pruning laboratory for multimodal-transformer inference."""

from .cost import (
    LLAVA_7B_DIMS,
    CostReport,
    ModelDims,
    kv_cache_bytes,
    layer_flops,
    schedule_flops_ratio,
    tokens_per_layer,
    trr,
    visual_tokens_after_merge,
)
from .errors import (
    BoundsError,
    ConfigError,
    ContractError,
    DataError,
    DegenerateInputError,
    ShapeError,
    TplError,
    TraceError,
    TraceTruncatedError,
    TraceValidationError,
    TraceVersionError,
)
from .kernels import (
    bottomk_stable,
    cosine_similarity,
    minmax_normalize,
    row_softmax,
    spearman,
    topk_stable,
)
from .metrics import (
    PositionHistogram,
    UniformityReport,
    attention_by_position,
    position_bias_correlation,
    retention_frequency,
    uniformity_entropy,
)
from .model import (
    ForwardResult,
    ForwardState,
    HookContext,
    LatencyReport,
    ModelConfig,
    PruneSchedule,
    PruneStage,
    ToyTransformer,
    compress_sequence,
    default_layout,
    forward,
    init_model,
    make_embeddings,
    time_forward,
)
from .strategies import (
    PruneConfig,
    PruneResult,
    alpha_scores,
    fastv_scores,
    keep_all_hook,
    make_live_hook,
    pool_embeddings,
    pooling_representatives,
    prune,
    select_bottom,
    select_pooling,
    select_random,
    select_top,
    select_window,
)
from .trace import (
    AttentionTrace,
    SynthConfig,
    TokenLayout,
    read_trace,
    synthesize_trace,
    traces_equal,
    validate_trace,
    write_trace,
)

__version__ = "0.1.0"
