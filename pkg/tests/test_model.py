import numpy as np
import pytest

from tpl import (
    ConfigError,
    ContractError,
    ForwardState,
    ModelConfig,
    PruneConfig,
    PruneSchedule,
    PruneStage,
    TokenLayout,
    compress_sequence,
    default_layout,
    forward,
    init_model,
    keep_all_hook,
    make_embeddings,
    make_live_hook,
    time_forward,
    validate_trace,
)

SMALL = ModelConfig(num_layers=4, hidden=32, heads=4, intermediate=64, seed=7)


@pytest.fixture(scope="module")
def small_model():
    return init_model(SMALL)


@pytest.fixture
def layout():
    return TokenLayout(seq_len=24, image_start=4, image_end=20, grid_h=4, grid_w=4)


def embeddings_for(layout, seed=11):
    return make_embeddings(layout, SMALL.hidden, seed)


class TestInit:
    def test_same_config_gives_identical_weights(self):
        a, b = init_model(SMALL), init_model(SMALL)
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.wq, lb.wq)
            assert np.array_equal(la.w2, lb.w2)

    def test_per_head_dim(self):
        assert ModelConfig(hidden=8, heads=2).head_dim == 4

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            init_model(ModelConfig(hidden=8, heads=3))

    def test_default_layout_geometry(self):
        lay = default_layout()
        assert (lay.seq_len, lay.num_visual, lay.grid_h, lay.grid_w) == (608, 576, 24, 24)
        assert lay.violations() == []


class TestForward:
    def test_empty_schedule_shapes(self, small_model, layout):
        res = forward(small_model, embeddings_for(layout), layout)
        assert res.output.shape == (24, 32)
        assert res.trace.num_layers == SMALL.num_layers
        assert res.index_map.tolist() == list(range(24))
        assert validate_trace(res.trace) == []

    def test_captured_rows_are_causal(self, small_model, layout):
        res = forward(small_model, embeddings_for(layout), layout)
        visual_rows = np.asarray(res.trace.last_visual_rows)
        assert np.all(visual_rows[:, layout.image_end:] == 0.0)
        text_rows = np.asarray(res.trace.last_text_rows, dtype=np.float64)
        assert np.allclose(text_rows.sum(axis=1), 1.0, atol=1e-6)

    def test_single_stage_cardinality(self, small_model, layout):
        hook = make_live_hook(PruneConfig(strategy="fastv"))
        res = forward(small_model, embeddings_for(layout), layout,
                      PruneSchedule.single(2, 6), hook)
        assert res.output.shape[0] == 24 - (16 - 6)
        assert res.tokens_per_layer == (24, 14, 14, 14)

    def test_two_stage_cardinality_at_desk_scale(self):
        # 576 -> 144 -> 64 visual tokens: final rows = L - 512.
        model = init_model(ModelConfig(num_layers=4, hidden=64, heads=4,
                                       intermediate=128, seed=0))
        lay = default_layout()
        hook = make_live_hook(PruneConfig(strategy="fastv"))
        sched = PruneSchedule((PruneStage(2, 144), PruneStage(3, 64)))
        res = forward(model, make_embeddings(lay, 64, 1), lay, sched, hook)
        assert res.output.shape[0] == lay.seq_len - 512

    def test_all_retained_hook_is_bit_identical(self, small_model, layout):
        emb = embeddings_for(layout)
        plain = forward(small_model, emb, layout)
        hooked = forward(small_model, emb, layout, PruneSchedule.single(3, 16), keep_all_hook)
        assert np.array_equal(plain.output, hooked.output)

    def test_fused_and_materializing_paths_agree(self, small_model, layout):
        emb = embeddings_for(layout)
        hook = make_live_hook(PruneConfig(strategy="fastv"))
        fused = forward(small_model, emb, layout, PruneSchedule.single(2, 6), hook)
        mat = forward(small_model, emb, layout,
                      PruneSchedule.single(2, 6, materialize=True), hook)
        assert np.allclose(fused.output, mat.output, rtol=1e-10, atol=1e-12)
        assert np.array_equal(fused.index_map, mat.index_map)

    def test_hook_returning_foreign_indices(self, small_model, layout):
        def bad_hook(ctx):
            return np.arange(30)

        with pytest.raises(IndexError):
            forward(small_model, embeddings_for(layout), layout,
                    PruneSchedule.single(2, 6), bad_hook)

    def test_hidden_capture(self, small_model, layout):
        res = forward(small_model, embeddings_for(layout), layout, capture_hidden_at=2)
        assert res.trace.hidden_states is not None
        assert res.trace.hidden_states.shape == (24, 32)
        assert res.trace.hidden_layer == 2
        assert validate_trace(res.trace) == []

    def test_mean_rows_reduction(self, small_model, layout):
        emb = embeddings_for(layout)
        last = forward(small_model, emb, layout, guidance_reduction="last")
        mean = forward(small_model, emb, layout, guidance_reduction="mean_rows")
        assert not np.array_equal(last.trace.last_text_rows, mean.trace.last_text_rows)
        sums = np.asarray(mean.trace.last_text_rows, dtype=np.float64).sum(axis=1)
        assert np.allclose(sums, 1.0, atol=1e-6)

    def test_embeddings_shape_mismatch(self, small_model, layout):
        with pytest.raises(ConfigError):
            forward(small_model, np.zeros((10, 32)), layout)

    def test_pooled_embedding_substitution_is_off_by_default(self, small_model, layout):
        emb = embeddings_for(layout)
        plain = make_live_hook(PruneConfig(strategy="pooling", pool=2))
        substituted = make_live_hook(PruneConfig(strategy="pooling", pool=2,
                                                 pool_substitute=True))
        a = forward(small_model, emb, layout, PruneSchedule.single(2, 4), plain)
        b = forward(small_model, emb, layout, PruneSchedule.single(2, 4), substituted)
        assert np.array_equal(a.index_map, b.index_map)
        assert a.output.shape == b.output.shape
        assert not np.array_equal(a.output, b.output)

    def test_schedule_validation(self, small_model, layout):
        emb = embeddings_for(layout)
        hook = make_live_hook(PruneConfig(strategy="fastv"))
        with pytest.raises(ConfigError):  # stage layer 1 has no prior attention
            forward(small_model, emb, layout, PruneSchedule.single(1, 6), hook)
        with pytest.raises(ConfigError):  # beyond depth
            forward(small_model, emb, layout, PruneSchedule.single(9, 6), hook)
        with pytest.raises(ConfigError):  # retain counts must not increase
            forward(small_model, emb, layout,
                    PruneSchedule((PruneStage(2, 4), PruneStage(3, 8))), hook)


class TestCompress:
    def state(self):
        lay = TokenLayout(seq_len=6, image_start=1, image_end=5, grid_h=2, grid_w=2)
        x = np.arange(12, dtype=float).reshape(6, 2)
        return ForwardState(x=x, index_map=np.arange(6), layer=1, layout=lay)

    def test_retain_all_is_identity(self):
        st = self.state()
        out = compress_sequence(st, np.arange(6))
        assert np.array_equal(out.x, st.x)
        assert np.array_equal(out.index_map, st.index_map)

    def test_hand_gather(self):
        out = compress_sequence(self.state(), [0, 1, 3, 5])
        assert out.index_map.tolist() == [0, 1, 3, 5]
        assert out.x.shape == (4, 2)
        assert np.array_equal(out.x, self.state().x[[0, 1, 3, 5]])

    def test_dropping_non_visual_token_rejected(self):
        with pytest.raises(ContractError):
            compress_sequence(self.state(), [1, 2, 3, 4, 5])  # drops token 0

    def test_foreign_index_rejected(self):
        st = compress_sequence(self.state(), [0, 1, 3, 5])
        with pytest.raises(IndexError):
            compress_sequence(st, [0, 1, 2, 3, 5])  # 2 was already pruned

    def test_double_compression_composes(self):
        rng = np.random.default_rng(0)
        lay = TokenLayout(seq_len=10, image_start=2, image_end=8, grid_h=2, grid_w=3)
        non_visual = [0, 1, 8, 9]
        for _ in range(100):
            x = rng.standard_normal((10, 3))
            st = ForwardState(x=x, index_map=np.arange(10), layer=1, layout=lay)
            visual_a = rng.choice(np.arange(2, 8), size=4, replace=False)
            a = np.sort(np.concatenate([non_visual, visual_a]))
            visual_b = rng.choice(visual_a, size=2, replace=False)
            b = np.sort(np.concatenate([non_visual, visual_b]))
            once = compress_sequence(st, b)
            twice = compress_sequence(compress_sequence(st, a), b)
            assert np.array_equal(once.x, twice.x)
            assert np.array_equal(once.index_map, twice.index_map)


class TestTiming:
    def test_repeats_precondition(self, small_model, layout):
        with pytest.raises(ConfigError):
            time_forward(small_model, layout, PruneSchedule(), None, repeats=1)

    def test_deterministic_token_counts(self, small_model, layout):
        hook = make_live_hook(PruneConfig(strategy="fastv"))
        sched = PruneSchedule.single(2, 6)
        a = time_forward(small_model, layout, sched, hook, repeats=3, seed=5)
        b = time_forward(small_model, layout, sched, hook, repeats=3, seed=5)
        assert a.tokens_per_layer == b.tokens_per_layer == (24, 14, 14, 14)
        assert a.median_s > 0 and a.p10_s <= a.median_s <= a.p90_s

    def test_materialization_flagged(self, small_model, layout):
        hook = make_live_hook(PruneConfig(strategy="fastv"))
        rep = time_forward(small_model, layout,
                           PruneSchedule.single(2, 6, materialize=True), hook, repeats=3)
        assert rep.materialized
        assert rep.hook_overhead_s >= 0
