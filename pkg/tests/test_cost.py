import numpy as np
import pytest

from tpl import (
    LLAVA_7B_DIMS,
    ConfigError,
    ModelDims,
    PruneSchedule,
    PruneStage,
    TokenLayout,
    kv_cache_bytes,
    layer_flops,
    schedule_flops_ratio,
    tokens_per_layer,
    trr,
    visual_tokens_after_merge,
)


def flat_layout(visual, text=64):
    return TokenLayout(seq_len=text + visual, image_start=0, image_end=visual,
                       grid_h=1, grid_w=visual)


class TestLayerFlops:
    def test_unit_dims(self):
        dims = ModelDims(layers=1, hidden=1, intermediate=1, kv_bytes_per_elem=1, heads=1)
        assert layer_flops(1, dims) == 8  # 4 + 2 + 2

    def test_doubling_tokens_more_than_doubles(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            dims = ModelDims(layers=1, hidden=int(rng.integers(1, 512)),
                             intermediate=int(rng.integers(1, 2048)))
            n = int(rng.integers(1, 4096))
            assert layer_flops(2 * n, dims) > 2 * layer_flops(n, dims)

    def test_seven_b_single_layer_ratio(self):
        # f(320)/f(2880) with d=4096, m=11008; plug-in arithmetic gives ~0.098.
        dims = LLAVA_7B_DIMS
        ratio = layer_flops(320, dims) / layer_flops(2880, dims)
        assert round(ratio, 3) == 0.098

    def test_monotone_in_tokens(self):
        dims = LLAVA_7B_DIMS
        values = [layer_flops(n, dims) for n in range(1, 200)]
        assert all(b > a for a, b in zip(values, values[1:]))


class TestScheduleRatio:
    def test_empty_schedule_is_exactly_one(self):
        assert schedule_flops_ratio(PruneSchedule(), LLAVA_7B_DIMS, flat_layout(2880), 64) == 1.0

    def test_prune_everything_at_layer_zero(self):
        # Limiting case: all layers run at the text-only count.
        dims = LLAVA_7B_DIMS
        sched = PruneSchedule((PruneStage(0, 0),))
        ratio = schedule_flops_ratio(sched, dims, flat_layout(2880), 64)
        assert ratio == layer_flops(64, dims) / layer_flops(2944, dims)

    def test_fastv_single_stage_lands_near_published_percentage(self):
        sched = PruneSchedule((PruneStage(2, 320),))
        ratio = schedule_flops_ratio(sched, LLAVA_7B_DIMS, flat_layout(2880), 64)
        assert ratio == pytest.approx(0.128, abs=0.03)
        # Frozen plug-in arithmetic: 1 full layer + 31 layers at 384 tokens.
        full = layer_flops(2944, LLAVA_7B_DIMS)
        reduced = layer_flops(384, LLAVA_7B_DIMS)
        assert ratio == (full + 31 * reduced) / (32 * full)

    def test_tokens_per_layer_timeline(self):
        sched = PruneSchedule((PruneStage(2, 8), PruneStage(4, 2)))
        counts = tokens_per_layer(sched, 6, visual_tokens=16, text_tokens=4)
        assert counts == [20, 12, 12, 6, 6, 6]

    def test_monotone_in_retain_and_layer(self):
        dims = ModelDims(layers=8, hidden=64, intermediate=128)
        layout = flat_layout(64, text=8)
        base = schedule_flops_ratio(PruneSchedule((PruneStage(4, 32),)), dims, layout, 8)
        fewer = schedule_flops_ratio(PruneSchedule((PruneStage(4, 16),)), dims, layout, 8)
        earlier = schedule_flops_ratio(PruneSchedule((PruneStage(2, 32),)), dims, layout, 8)
        assert fewer < base and earlier < base

    def test_single_early_stage_never_costs_more_than_deeper_multi_stage(self):
        rng = np.random.default_rng(7)
        dims = ModelDims(layers=12, hidden=32, intermediate=64)
        layout = flat_layout(100, text=10)
        for _ in range(200):
            final = int(rng.integers(1, 50))
            k1 = int(rng.integers(1, 6))
            mid = int(rng.integers(final, 101))
            k2 = int(rng.integers(k1 + 1, 13))
            single = PruneSchedule((PruneStage(k1, final),))
            multi = PruneSchedule((PruneStage(k1, mid), PruneStage(k2, final)))
            assert (
                schedule_flops_ratio(single, dims, layout, 10)
                <= schedule_flops_ratio(multi, dims, layout, 10)
            )

    def test_stage_beyond_model_depth_rejected(self):
        with pytest.raises(ConfigError):
            schedule_flops_ratio(
                PruneSchedule((PruneStage(33, 10),)), LLAVA_7B_DIMS, flat_layout(2880), 64
            )


class TestKvCache:
    def test_zero_tokens(self):
        assert kv_cache_bytes(0, LLAVA_7B_DIMS) == 0

    def test_seven_b_footprint_at_full_length(self):
        mb = kv_cache_bytes(2880, LLAVA_7B_DIMS) / 2**20
        assert mb == 1440.0
        assert abs(mb - 1512.1) / 1512.1 < 0.05

    def test_ratio_is_exactly_linear(self):
        a = kv_cache_bytes(320, LLAVA_7B_DIMS)
        b = kv_cache_bytes(2880, LLAVA_7B_DIMS)
        assert a * 2880 == b * 320
        assert round(a / b, 4) == round(168.0 / 1512.1, 4)

    def test_additivity(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            x, y = int(rng.integers(0, 10_000)), int(rng.integers(0, 10_000))
            assert kv_cache_bytes(x + y, LLAVA_7B_DIMS) == (
                kv_cache_bytes(x, LLAVA_7B_DIMS) + kv_cache_bytes(y, LLAVA_7B_DIMS)
            )


class TestReductionRates:
    def test_product(self):
        assert trr(4, 2) == 8

    def test_patch_merge_mapping(self):
        assert visual_tokens_after_merge(2304, 4) == 576

    def test_factors_below_one_rejected(self):
        with pytest.raises(ConfigError):
            trr(0.5, 2)
        with pytest.raises(ConfigError):
            trr(4, 0.9)
