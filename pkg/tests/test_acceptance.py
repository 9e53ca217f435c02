"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line and enforcing its runtime budget.

Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import time
from contextlib import contextmanager
from itertools import combinations

import numpy as np
import pytest

from tpl import (
    LLAVA_7B_DIMS,
    AttentionTrace,
    ModelConfig,
    PruneConfig,
    PruneSchedule,
    PruneStage,
    SynthConfig,
    TokenLayout,
    TraceError,
    default_layout,
    forward,
    init_model,
    keep_all_hook,
    kv_cache_bytes,
    make_embeddings,
    make_live_hook,
    position_bias_correlation,
    prune,
    read_trace,
    retention_frequency,
    schedule_flops_ratio,
    select_bottom,
    select_pooling,
    select_top,
    select_window,
    synthesize_trace,
    time_forward,
    traces_equal,
    trr,
    uniformity_entropy,
    visual_tokens_after_merge,
    write_trace,
)
from tpl.strategies import alpha_scores, fastv_scores, grid_windows, window_quotas


@contextmanager
def criterion(name: str, budget_s: float):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE {name}: FAIL ({time.perf_counter() - t0:.2f}s)")
        raise
    elapsed = time.perf_counter() - t0
    if elapsed >= budget_s:
        print(f"\nACCEPTANCE {name}: FAIL (runtime {elapsed:.2f}s over budget {budget_s}s)")
        pytest.fail(f"{name} exceeded its {budget_s}s budget: {elapsed:.2f}s")
    print(f"\nACCEPTANCE {name}: PASS ({elapsed:.2f}s)")


def test_kv_cache_linearity_vs_published_scale():
    with criterion("kv-cache linearity", budget_s=1.0):
        dims = LLAVA_7B_DIMS
        mb = kv_cache_bytes(2880, dims) / 2**20
        assert mb == 1440.0
        assert abs(mb - 1512.1) / 1512.1 < 0.05
        ratio = kv_cache_bytes(320, dims) / kv_cache_bytes(2880, dims)
        assert kv_cache_bytes(320, dims) * 2880 == kv_cache_bytes(2880, dims) * 320
        assert round(ratio, 4) == round(168.0 / 1512.1, 4)


def test_flops_schedule_check():
    with criterion("FLOPs schedule ratio", budget_s=1.0):
        layout = TokenLayout(seq_len=2944, image_start=0, image_end=2880,
                             grid_h=48, grid_w=60)
        single = PruneSchedule((PruneStage(2, 320),))
        ratio = schedule_flops_ratio(single, LLAVA_7B_DIMS, layout, text_tokens=64)
        assert abs(ratio - 0.128) <= 0.03
        assert schedule_flops_ratio(PruneSchedule(), LLAVA_7B_DIMS, layout, 64) == 1.0


def test_training_aware_reduction_arithmetic():
    with criterion("TRR arithmetic", budget_s=1.0):
        assert trr(4, 2) == 8
        assert trr(4, 2880 / 320) == 36
        assert visual_tokens_after_merge(2304, 4) == 576


def test_position_bias_mechanism():
    with criterion("position-bias mechanism", budget_s=30.0):
        layout = default_layout()  # 576 visual tokens, 24x24
        traces = [
            synthesize_trace(SynthConfig(
                layout=layout, bias_kind="monotone-positional", bias_strength=2.0,
                noise_sigma=2.0, seed=seed, include_hidden=False,
            ))
            for seed in range(1000)
        ]

        fastv_results = [prune(t, PruneConfig(strategy="fastv", retain=144)) for t in traces]
        hist = retention_frequency(fastv_results, layout)
        assert position_bias_correlation(hist) >= 0.9

        random_results = [
            prune(traces[0], PruneConfig(strategy="random", retain=144, seed=seed))
            for seed in range(1000)
        ]
        random_hist = retention_frequency(random_results, layout)
        assert abs(position_bias_correlation(random_hist)) < 0.1

        windows = grid_windows(24, 24, 4, 4)
        quotas = window_quotas(windows, 144, 576)
        assert quotas == [4] * 36
        for t in traces[:200]:
            scores = fastv_scores(t, 2)
            result = prune(t, PruneConfig(strategy="window_fastv", retain=144, window=(4, 4)))
            local = result.retained_visual - layout.image_start
            for cells, quota in zip(windows, quotas):
                assert np.isin(local, cells).sum() == quota
            assert uniformity_entropy(result, layout, (4, 4)).entropy == 1.0


# ---------------------------------------------------------------------------
# Brute-force oracles for the strategy sweep: independent of the library's
# argsort path, they enumerate or count per the stated selection criterion.
# ---------------------------------------------------------------------------

def oracle_rank_select(scores, k, largest=True):
    """Counting oracle: i wins iff fewer than k indices rank ahead of it."""
    def beats(j, i):
        if largest:
            return scores[j] > scores[i] or (scores[j] == scores[i] and j < i)
        return scores[j] < scores[i] or (scores[j] == scores[i] and j < i)

    n = len(scores)
    return sorted(i for i in range(n) if sum(beats(j, i) for j in range(n)) < k)


def oracle_subset_top(scores, k):
    """Enumerate every k-subset and take the score-sum maximizer (distinct scores)."""
    best, best_sum = None, -np.inf
    for subset in combinations(range(len(scores)), k):
        total = sum(scores[i] for i in subset)
        if total > best_sum:
            best, best_sum = subset, total
    return list(best)


def oracle_window(scores, layout, window, retain):
    windows = []
    wh, ww = window
    for r0 in range(0, layout.grid_h, wh):
        for c0 in range(0, layout.grid_w, ww):
            cells = [
                r * layout.grid_w + c
                for r in range(r0, min(r0 + wh, layout.grid_h))
                for c in range(c0, min(c0 + ww, layout.grid_w))
            ]
            windows.append(cells)
    total = layout.num_visual
    quotas = [retain * len(w) // total for w in windows]
    for i in range(retain - sum(quotas)):
        quotas[i] += 1
    kept = []
    for cells, quota in zip(windows, quotas):
        local = oracle_rank_select([scores[c] for c in cells], quota)
        kept.extend(cells[i] for i in local)
    return sorted(kept)


def oracle_pooling(norms, layout, a):
    kept = []
    for r0 in range(0, layout.grid_h, a):
        for c0 in range(0, layout.grid_w, a):
            cells = [
                r * layout.grid_w + c
                for r in range(r0, min(r0 + a, layout.grid_h))
                for c in range(c0, min(c0 + a, layout.grid_w))
            ]
            best = cells[0]
            for c in cells[1:]:
                if norms[c] > norms[best]:
                    best = c
            kept.append(best)
    return sorted(kept)


def all_small_layouts(max_visual=12):
    layouts = []
    for h in range(1, max_visual + 1):
        for w in range(1, max_visual // h + 1):
            layouts.append(TokenLayout(seq_len=h * w + 4, image_start=2,
                                       image_end=2 + h * w, grid_h=h, grid_w=w))
    return layouts


def test_strategy_selection_matches_brute_force():
    with criterion("strategy brute-force oracles", budget_s=60.0):
        rng = np.random.default_rng(2024)
        layouts = all_small_layouts()
        cases = 0
        subset_checked = 0
        while cases < 10_000:
            layout = layouts[int(rng.integers(len(layouts)))]
            V = layout.num_visual
            scores = rng.permutation(V).astype(np.float64) + rng.random(V) * 0.25
            kind = cases % 4
            if kind == 0:
                k = int(rng.integers(0, V + 1))
                got = (select_top(scores, layout, k).retained_visual - 2).tolist()
                assert got == oracle_rank_select(scores.tolist(), k)
                if subset_checked < 300:
                    assert got == oracle_subset_top(scores.tolist(), k)
                    subset_checked += 1
            elif kind == 1:
                k = int(rng.integers(0, V + 1))
                got = (select_bottom(scores, layout, k).retained_visual - 2).tolist()
                assert got == oracle_rank_select(scores.tolist(), k, largest=False)
            elif kind == 2:
                wh = int(rng.integers(1, layout.grid_h + 1))
                ww = int(rng.integers(1, layout.grid_w + 1))
                k = int(rng.integers(0, V + 1))
                got = (select_window(scores, layout, (wh, ww), k).retained_visual - 2).tolist()
                assert got == oracle_window(scores.tolist(), layout, (wh, ww), k)
            else:
                a = int(rng.integers(1, max(layout.grid_h, layout.grid_w) + 1))
                hidden = rng.standard_normal((layout.seq_len, 3))
                got = (select_pooling(hidden, layout, a).retained_visual - 2).tolist()
                norms = np.abs(hidden[2:2 + V]).sum(axis=1).tolist()
                assert got == oracle_pooling(norms, layout, a)
            cases += 1
        assert cases == 10_000 and subset_checked == 300


def test_alpha_endpoint_equivalences(tmp_path):
    with criterion("alpha endpoint equivalences", budget_s=30.0):
        layout = TokenLayout(seq_len=20, image_start=2, image_end=18, grid_h=4, grid_w=4)
        for seed in range(500):
            t = synthesize_trace(SynthConfig(
                layout=layout, bias_kind="monotone-positional", bias_strength=1.0,
                noise_sigma=0.8, seed=seed, hidden_dim=8,
            ))
            attention = fastv_scores(t, 2)
            at_one = alpha_scores(attention, t.hidden_states, layout, alpha=1.0)
            assert np.array_equal(np.argsort(at_one), np.argsort(attention))
            at_zero = alpha_scores(attention, t.hidden_states, layout, alpha=0.0)
            hidden = np.asarray(t.hidden_states, dtype=np.float64)
            ref = hidden[-1]
            sims = hidden[2:18] @ ref / (
                np.linalg.norm(hidden[2:18], axis=1) * np.linalg.norm(ref)
            )
            assert np.array_equal(np.argsort(at_zero), np.argsort(-sims))

        from tpl.cli import main

        out = tmp_path / "sweep"
        code = main([
            "sweep-alpha", "--synth", "monotone-positional", "--noise", "0.8",
            "--grid", "4x4", "--text-tokens", "4", "--seed", "7",
            "--retain", "4", "--alphas", "0.0:1.0:0.1",
            "--out", str(out), "--no-figures",
        ])
        assert code == 0
        lines = (out / "alpha_sweep.csv").read_text().splitlines()
        assert len(lines) == 1 + 11
        alphas = [float(line.split(",")[0]) for line in lines[1:]]
        assert alphas == [round(0.1 * i, 10) for i in range(11)]


def test_mid_forward_compression_correctness():
    with criterion("mid-forward compression", budget_s=60.0):
        config = ModelConfig(num_layers=6, hidden=32, heads=4, intermediate=64, seed=5)
        model = init_model(config)
        layout = TokenLayout(seq_len=24, image_start=4, image_end=20, grid_h=4, grid_w=4)
        emb = make_embeddings(layout, 32, 9)

        plain = forward(model, emb, layout)
        hooked = forward(model, emb, layout, PruneSchedule.single(3, 16), keep_all_hook)
        assert np.array_equal(plain.output, hooked.output)

        hook = make_live_hook(PruneConfig(strategy="fastv"))
        rng = np.random.default_rng(0)
        for _ in range(200):
            n_stages = int(rng.integers(1, 4))
            layers = np.sort(rng.choice(np.arange(2, 7), size=n_stages, replace=False))
            retains = np.sort(rng.integers(0, 17, size=n_stages))[::-1]
            schedule = PruneSchedule(tuple(
                PruneStage(int(k), int(r)) for k, r in zip(layers, retains)
            ))
            result = forward(model, emb, layout, schedule, hook)
            pruned = 16 - int(retains[-1])
            assert result.output.shape[0] == layout.seq_len - pruned
            assert result.index_map.size == layout.seq_len - pruned


def test_latency_ordering_single_early_vs_materializing_multi_stage():
    with criterion("latency ordering", budget_s=300.0):
        config = ModelConfig()  # desk defaults: 8 layers, 256 hidden, 8 heads, 1024 mlp
        model = init_model(config)
        layout = default_layout()
        hook = make_live_hook(PruneConfig(strategy="fastv"))

        single = PruneSchedule((PruneStage(2, 144),))
        multi = PruneSchedule((
            PruneStage(2, 468, materialize=True),
            PruneStage(4, 360, materialize=True),
            PruneStage(6, 252, materialize=True),
            PruneStage(8, 144, materialize=True),
        ))
        fast = time_forward(model, layout, single, hook, repeats=20, seed=1)
        slow = time_forward(model, layout, multi, hook, repeats=20, seed=1)
        assert fast.tokens_per_layer[-1] == slow.tokens_per_layer[-1] == 144 + 32
        assert not fast.materialized and slow.materialized
        assert fast.median_s <= slow.median_s


def test_trace_round_trip_and_rejection(tmp_path):
    with criterion("trace round-trip", budget_s=60.0):
        rng = np.random.default_rng(99)
        survivors = 0
        for i in range(1000):
            h = int(rng.integers(1, 5))
            w = int(rng.integers(1, 5))
            before = int(rng.integers(1, 4))
            after = int(rng.integers(1, 4))
            layout = TokenLayout(seq_len=before + h * w + after, image_start=before,
                                 image_end=before + h * w, grid_h=h, grid_w=w)
            t = synthesize_trace(SynthConfig(
                layout=layout, bias_kind="monotone-positional",
                bias_strength=float(rng.random() * 3), noise_sigma=float(rng.random()),
                seed=i, include_hidden=bool(i % 2), hidden_dim=4,
                num_layers=int(rng.integers(1, 4)),
            ))
            path = tmp_path / "t.trace"
            write_trace(t, path)
            assert traces_equal(t, read_trace(path))
            survivors += 1

            if i % 10 == 0:
                blob = path.read_bytes()
                corrupted = [
                    blob[:3] + bytes([blob[3] ^ 0xFF]) + blob[4:],  # version flip
                    blob[:-3],                                      # truncated payload
                    blob[: len(b"tpl-trace/1\n") + 2],              # truncated header
                    blob + b"\0",                                   # trailing bytes
                    blob.replace(b"grid_h: ", b"grid_h: 9", 1),     # layout mismatch
                    blob.replace(b"num_layers: ", b"num_layers: 9", 1),
                ]
                for bad in corrupted:
                    with pytest.raises(TraceError):
                        read_trace(bad)
        assert survivors == 1000
