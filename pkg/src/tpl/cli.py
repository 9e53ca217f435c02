"""Batch front-end: run strategies over traces or the toy model, sweep
parameters, and emit CSV/JSON artifacts (plus PNG figures on report paths).

Exit codes: 0 ok, 2 configuration error, 3 data/validation error, 4 I/O
error.  Failures print a single machine-readable JSON line to stderr.  All
randomness flows from ``--seed``; an unset seed on a path that needs one is
an error, never wall-clock seeding.  Run specs may come from ``--spec FILE``
(JSON); explicit flags win on conflict.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import cost, metrics, reports, strategies, trace
from .errors import ConfigError, DataError, TplError
from .model import (
    ModelConfig,
    PruneSchedule,
    PruneStage,
    default_layout,
    forward,
    init_model,
    make_embeddings,
    time_forward,
)

TOY_DIMS_PRESET = {"layers": 8, "hidden": 256, "heads": 8, "intermediate": 1024}


# ---------------------------------------------------------------------------
# Flag parsing helpers
# ---------------------------------------------------------------------------

def parse_pair(text: str, what: str) -> tuple[int, int]:
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise ConfigError(f"{what} must look like '4x4', got {text!r}") from None


def parse_alphas(text: str) -> list[float]:
    """Inclusive start:stop:step grid, e.g. '0.0:1.0:0.1' -> 11 values."""
    try:
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise ConfigError(f"alpha grid must look like '0.0:1.0:0.1', got {text!r}") from None
    if step <= 0 or stop < start:
        raise ConfigError(f"bad alpha grid {text!r}")
    count = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 10) for i in range(count)]


def parse_schedule(text: str) -> tuple[str, PruneSchedule]:
    """'label=2:468m,4:360' -> labeled schedule; 'm' marks a materializing stage."""
    label, sep, body = text.partition("=")
    if not sep:
        label, body = text, text
    stages = []
    if body.strip() not in ("", "none"):
        for part in body.split(","):
            try:
                layer_s, retain_s = part.split(":")
                materialize = retain_s.endswith("m")
                stages.append(
                    PruneStage(int(layer_s), int(retain_s.rstrip("m")), materialize)
                )
            except ValueError:
                raise ConfigError(
                    f"schedule stage must look like 'LAYER:RETAIN[m]', got {part!r}"
                ) from None
    return label, PruneSchedule(tuple(stages))


def require_seed(args) -> int:
    if args.seed is None:
        raise ConfigError("--seed is required on this path; wall-clock seeding is never used")
    return args.seed


# ---------------------------------------------------------------------------
# Input sources
# ---------------------------------------------------------------------------

def add_layout_options(p):
    p.add_argument("--grid", default="24x24", help="visual grid, e.g. 24x24")
    p.add_argument("--text-tokens", type=int, default=32, help="text tokens around the image span")


def add_synth_options(p):
    p.add_argument("--synth", choices=trace.BIAS_KINDS, help="synthesize the input trace")
    p.add_argument("--bias-strength", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.0, help="gaussian noise sigma on visual weights")
    p.add_argument("--synth-layers", type=int, default=2)
    p.add_argument("--hidden-dim", type=int, default=16, help="hidden size of synthetic traces")


def add_toy_options(p):
    p.add_argument("--toy", action="store_true", help="capture the input trace from a toy-model forward")
    p.add_argument("--toy-layers", type=int, default=TOY_DIMS_PRESET["layers"])
    p.add_argument("--toy-hidden", type=int, default=TOY_DIMS_PRESET["hidden"])
    p.add_argument("--toy-heads", type=int, default=TOY_DIMS_PRESET["heads"])
    p.add_argument("--toy-intermediate", type=int, default=TOY_DIMS_PRESET["intermediate"])


def add_strategy_options(p):
    p.add_argument("--strategy", choices=strategies.STRATEGIES, default="fastv")
    p.add_argument("--retain", type=int, default=None, help="visual tokens to keep")
    p.add_argument("--layer", type=int, default=2, help="1-based pruning layer K")
    p.add_argument("--guidance", choices=strategies.GUIDANCE_ROWS, default="last_text")
    p.add_argument("--window", default="4x4", help="window for window_fastv, e.g. 4x4")
    p.add_argument("--pool", type=int, default=2, help="pool size for pooling")
    p.add_argument("--alpha", type=float, default=0.5)


def make_layout(args) -> trace.TokenLayout:
    grid = parse_pair(args.grid, "--grid")
    return default_layout(text_tokens=args.text_tokens, grid=grid)


def prune_config(args, seed=None) -> strategies.PruneConfig:
    return strategies.PruneConfig(
        strategy=args.strategy,
        retain=args.retain,
        layer=args.layer,
        guidance=args.guidance,
        window=parse_pair(args.window, "--window"),
        pool=args.pool,
        alpha=args.alpha,
        seed=seed,
    )


def synth_trace(args, layout, seed) -> trace.AttentionTrace:
    cfg = trace.SynthConfig(
        layout=layout,
        bias_kind=args.synth,
        bias_strength=args.bias_strength,
        noise_sigma=args.noise,
        seed=seed,
        num_layers=max(args.synth_layers, args.layer - 1),
        hidden_dim=args.hidden_dim,
        hidden_layer=args.layer,
    )
    return trace.synthesize_trace(cfg)


def toy_trace(args, layout, seed) -> trace.AttentionTrace:
    model = init_model(ModelConfig(
        num_layers=args.toy_layers,
        hidden=args.toy_hidden,
        heads=args.toy_heads,
        intermediate=args.toy_intermediate,
        seed=seed,
    ))
    emb = make_embeddings(layout, args.toy_hidden, seed + 1)
    result = forward(model, emb, layout, capture_hidden_at=args.layer)
    return result.trace


def load_input_traces(args, batch: int = 1) -> tuple[trace.TokenLayout, list[trace.AttentionTrace]]:
    """Resolve the exactly-one input source into a batch of traces."""
    sources = [bool(args.trace), args.synth is not None, args.toy]
    if sum(sources) != 1:
        raise ConfigError("exactly one input source required: --trace, --synth, or --toy")
    if args.trace:
        traces = [trace.read_trace(p) for p in args.trace]
        layouts = {t.layout for t in traces}
        if len(layouts) != 1:
            raise DataError("input traces disagree on token layout")
        return traces[0].layout, traces
    layout = make_layout(args)
    seed = require_seed(args)
    if args.synth:
        return layout, [synth_trace(args, layout, seed + i) for i in range(batch)]
    if batch != 1:
        raise ConfigError("--toy capture supports a single trace per run")
    return layout, [toy_trace(args, layout, seed)]


def out_dir(args) -> Path:
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def result_payload(result: strategies.PruneResult) -> dict:
    return {
        "config": asdict(result.config),
        "layout": asdict(result.layout),
        "retained": result.retained.tolist(),
        "retained_visual": result.retained_visual.tolist(),
        "visual_scores": None if result.visual_scores is None else [
            float(f"{v:.9g}") for v in result.visual_scores
        ],
    }


def write_json(payload, path: Path) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def mask_rows(result: strategies.PruneResult):
    layout = result.layout
    mask = result.retained_mask()
    scores = result.visual_scores
    for i in range(layout.num_visual):
        yield (
            i,
            i // layout.grid_w,
            i % layout.grid_w,
            float(scores[i]) if scores is not None else "",
            int(mask[i]),
        )


def cmd_prune(args) -> int:
    layout, traces = load_input_traces(args)
    config = prune_config(args, seed=args.seed)
    result = strategies.prune(traces[0], config)
    out = out_dir(args)
    write_json(result_payload(result), out / "result.json")
    reports.emit_csv(
        ["position", "grid_row", "grid_col", "score", "retained"],
        mask_rows(result),
        out / "mask.csv",
    )
    print(f"retained {result.retained_visual.size} of {layout.num_visual} visual tokens -> {out}")
    return 0


def cmd_sweep_alpha(args) -> int:
    layout, traces = load_input_traces(args)
    tr = traces[0]
    if tr.hidden_states is None:
        raise DataError("alpha sweep requires a trace with hidden states")
    alphas = parse_alphas(args.alphas)
    retain = args.retain if args.retain is not None else layout.num_visual // 4
    attention = strategies.fastv_scores(tr, args.layer, args.guidance)

    def run(alpha: float):
        scores = strategies.alpha_scores(attention, tr.hidden_states, layout, alpha)
        result = strategies.select_top(scores, layout, retain)
        return scores, set(result.retained_visual.tolist())

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        outputs = list(pool.map(run, alphas))

    scores_1, set_1 = outputs[-1] if alphas[-1] == 1.0 else run(1.0)
    scores_0, set_0 = outputs[0] if alphas[0] == 0.0 else run(0.0)
    rows = []
    records = []
    from .kernels import spearman

    for alpha, (scores, kept) in zip(alphas, outputs):
        rows.append((
            alpha,
            spearman(scores, scores_1),
            spearman(scores, scores_0),
            len(kept & set_1) / retain if retain else 1.0,
            len(kept & set_0) / retain if retain else 1.0,
            len(kept),
        ))
        records.append({"alpha": alpha, "retained_visual": sorted(kept)})

    out = out_dir(args)
    reports.emit_csv(
        ["alpha", "rank_agreement_importance", "rank_agreement_uniqueness",
         "overlap_importance_set", "overlap_uniqueness_set", "retained"],
        rows,
        out / "alpha_sweep.csv",
    )
    write_json(records, out / "alpha_sweep.json")
    if args.figures:
        from . import figures

        figures.save_alpha_figure(
            alphas, [r[3] for r in rows], [r[4] for r in rows], out / "alpha_sweep.png"
        )
    print(f"swept {len(alphas)} alpha values -> {out}")
    return 0


def cmd_bias_report(args) -> int:
    layout, traces = load_input_traces(args, batch=args.batch)
    seed = args.seed
    results = []
    for i, tr in enumerate(traces):
        config = prune_config(args, seed=None if seed is None else seed + i)
        results.append(strategies.prune(tr, config))

    hist = metrics.retention_frequency(results, layout)
    correlation = metrics.position_bias_correlation(hist)
    mean_attention = None
    if args.strategy not in ("random",):
        mean_attention = metrics.attention_by_position(traces, layout, args.layer, args.guidance)

    cell = parse_pair(args.cell, "--cell") if args.cell else (
        -(-layout.grid_h // 4), -(-layout.grid_w // 4)
    )
    cells = strategies.grid_windows(layout.grid_h, layout.grid_w, cell[0], cell[1])
    entropies = [metrics.uniformity_entropy(r, layout, cell) for r in results]
    agg_counts = np.sum([rep.counts for rep in entropies], axis=0)

    out = out_dir(args)
    reports.emit_csv(
        ["position", "grid_row", "grid_col", "frequency", "mean_attention"],
        (
            (i, i // layout.grid_w, i % layout.grid_w, hist.frequencies[i],
             mean_attention[i] if mean_attention is not None else "")
            for i in range(layout.num_visual)
        ),
        out / "positions.csv",
    )
    reports.emit_csv(
        ["cell_index", "count", "area", "expected_count"],
        (
            (i, int(agg_counts[i]), len(cells[i]),
             hist.samples * entropies[0].areas[i] / layout.num_visual * results[0].retained_visual.size)
            for i in range(len(cells))
        ),
        out / "cells.csv",
    )
    reports.emit_csv(
        ["metric", "value"],
        [
            ("samples", hist.samples),
            ("position_bias_spearman", correlation),
            ("mean_uniformity_entropy", float(np.mean([e.entropy for e in entropies]))),
            ("max_occupancy_ratio", float(np.max([e.max_occupancy_ratio for e in entropies]))),
        ],
        out / "summary.csv",
    )
    if args.figures:
        from . import figures

        figures.save_bias_figure(hist.frequencies, mean_attention, layout, out / "bias_report.png")
    print(
        f"bias report over {hist.samples} runs: spearman={correlation:.4f}, "
        f"mean entropy={float(np.mean([e.entropy for e in entropies])):.4f} -> {out}"
    )
    return 0


def cmd_cost_report(args) -> int:
    if args.dims == "7b":
        dims = cost.LLAVA_7B_DIMS
    elif args.dims == "toy":
        dims = cost.ModelDims(**TOY_DIMS_PRESET, kv_bytes_per_elem=2)
    else:
        raise ConfigError(f"unknown dims preset {args.dims!r}")
    if args.model_layers:
        dims = cost.ModelDims(
            layers=args.model_layers,
            hidden=args.hidden_size or dims.hidden,
            intermediate=args.intermediate_size or dims.intermediate,
            kv_bytes_per_elem=args.kv_bytes or dims.kv_bytes_per_elem,
            heads=args.heads or dims.heads,
        )
    visual = args.visual_tokens
    grid = int(round(visual ** 0.5))
    layout = trace.TokenLayout(
        seq_len=args.text_tokens + visual,
        image_start=0,
        image_end=visual,
        grid_h=grid if grid * grid == visual else 1,
        grid_w=visual // grid if grid * grid == visual else visual,
    )

    schedules = [parse_schedule(s) for s in args.schedule] or [("none", PruneSchedule())]
    if all(label != "none" for label, _ in schedules):
        schedules.insert(0, ("none", PruneSchedule()))

    rows = []
    for label, sched in schedules:
        counts = cost.tokens_per_layer(sched, dims.layers, visual, args.text_tokens)
        final = counts[-1]
        flops_total = sum(cost.layer_flops(n, dims) for n in counts)
        ratio = cost.schedule_flops_ratio(sched, dims, layout, args.text_tokens)
        kv = cost.kv_cache_bytes(final, dims)
        final_visual = final - args.text_tokens
        tfrr = visual / final_visual if final_visual else float(visual)
        rows.append((
            label, len(sched.stages), final, flops_total, ratio, kv, kv / 2**20,
            cost.trr(args.tacr, max(tfrr, 1.0)),
        ))

    out = out_dir(args)
    reports.emit_csv(
        ["schedule", "stages", "final_tokens", "flops_total", "flops_ratio",
         "kv_bytes", "kv_mb", "trr"],
        rows,
        out / "cost.csv",
    )
    if args.figures:
        from . import figures

        figures.save_cost_figure(
            [r[0] for r in rows], [r[4] for r in rows], [r[6] for r in rows],
            out / "cost_report.png",
        )
    print(f"cost report over {len(rows)} schedules -> {out}")
    return 0


def cmd_simulate(args) -> int:
    layout = make_layout(args)
    seed = require_seed(args)
    model = init_model(ModelConfig(
        num_layers=args.toy_layers,
        hidden=args.toy_hidden,
        heads=args.toy_heads,
        intermediate=args.toy_intermediate,
        seed=seed,
    ))
    config = prune_config(args, seed=seed)
    schedules = [parse_schedule(s) for s in args.schedule] or [("none", PruneSchedule())]

    rows = []
    payload = []
    for label, sched in schedules:  # latency measurement always runs serially
        hook = strategies.make_live_hook(config) if sched.stages else None
        report = time_forward(model, layout, sched, hook, repeats=args.repeats, seed=seed)
        rows.append((
            label, report.repeats, report.median_s, report.p10_s, report.p90_s,
            report.materialized, report.hook_overhead_s, report.tokens_per_layer[-1],
        ))
        payload.append({
            "schedule": label,
            "median_s": report.median_s,
            "p10_s": report.p10_s,
            "p90_s": report.p90_s,
            "materialized": report.materialized,
            "hook_overhead_s": report.hook_overhead_s,
            "tokens_per_layer": list(report.tokens_per_layer),
        })

    out = out_dir(args)
    reports.emit_csv(
        ["schedule", "repeats", "median_s", "p10_s", "p90_s", "materialized",
         "hook_overhead_s", "final_tokens"],
        rows,
        out / "latency.csv",
    )
    write_json(payload, out / "latency.json")
    if args.figures:
        from . import figures

        figures.save_latency_figure(
            [r[0] for r in rows], [r[2] for r in rows], [r[3] for r in rows],
            [r[4] for r in rows], out / "latency.png",
        )
    for row in rows:
        print(f"{row[0]}: median {row[2]*1e3:.1f} ms (p10 {row[3]*1e3:.1f}, p90 {row[4]*1e3:.1f})")
    return 0


def cmd_validate_trace(args) -> int:
    try:
        parsed = trace.read_trace(args.path)
    except TplError as exc:
        print(str(exc))
        return 3
    violations = trace.validate_trace(parsed)
    for v in violations:
        print(v)
    if violations:
        return 3
    print(f"ok: {args.path}")
    return 0


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tpl",
        description="Token-pruning laboratory: strategies, bias diagnostics, cost accounting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--trace", nargs="+", default=None, help="input trace file(s)")
        add_synth_options(p)
        add_toy_options(p)
        add_layout_options(p)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--spec", default=None, help="JSON run spec; explicit flags win")
        p.add_argument("--jobs", type=int, default=int(os.environ.get("TPL_JOBS", "1")))

    p = sub.add_parser("prune", help="run one strategy, emit result JSON + mask CSV")
    common(p)
    add_strategy_options(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("sweep-alpha", help="sweep the importance/uniqueness balance")
    common(p)
    add_strategy_options(p)
    p.add_argument("--alphas", default="0.0:1.0:0.1", help="start:stop:step inclusive grid")
    p.add_argument("--no-figures", dest="figures", action="store_false")
    p.set_defaults(func=cmd_sweep_alpha, figures=True)

    p = sub.add_parser("bias-report", help="retention-frequency and uniformity diagnostics")
    common(p)
    add_strategy_options(p)
    p.add_argument("--batch", type=int, default=100, help="number of runs (synthetic seeds)")
    p.add_argument("--cell", default=None, help="uniformity cell shape, e.g. 6x6")
    p.add_argument("--no-figures", dest="figures", action="store_false")
    p.set_defaults(func=cmd_bias_report, figures=True)

    p = sub.add_parser("cost-report", help="FLOPs / KV-cache / TRR accounting for schedules")
    p.add_argument("--dims", default="7b", help="dims preset: 7b or toy")
    p.add_argument("--model-layers", type=int, default=None)
    p.add_argument("--hidden-size", type=int, default=None)
    p.add_argument("--intermediate-size", type=int, default=None)
    p.add_argument("--kv-bytes", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--text-tokens", type=int, default=64)
    p.add_argument("--visual-tokens", type=int, default=2880)
    p.add_argument("--tacr", type=float, default=1.0, help="training-aware compression ratio")
    p.add_argument("--schedule", action="append", default=[],
                   help="label=K:R[m],K:R[m]...; repeatable; 'm' materializes the stage")
    p.add_argument("--out", default="out")
    p.add_argument("--spec", default=None)
    p.add_argument("--no-figures", dest="figures", action="store_false")
    p.set_defaults(func=cmd_cost_report, figures=True)

    p = sub.add_parser("simulate", help="toy-model forward + latency measurement")
    add_toy_options(p)
    add_layout_options(p)
    add_strategy_options(p)
    p.add_argument("--schedule", action="append", default=[],
                   help="label=K:R[m],...; repeatable for comparison")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out")
    p.add_argument("--spec", default=None)
    p.add_argument("--no-figures", dest="figures", action="store_false")
    p.set_defaults(func=cmd_simulate, figures=True)

    p = sub.add_parser("validate-trace", help="check a trace file against every invariant")
    p.add_argument("path")
    p.set_defaults(func=cmd_validate_trace)

    return parser


def apply_spec_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Load --spec JSON as parser defaults so explicit flags win on conflict."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--spec", default=None)
    known, _ = probe.parse_known_args(argv)
    if not known.spec:
        return argv
    try:
        doc = json.loads(Path(known.spec).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"spec file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("spec file must hold a JSON object")
    for action in parser._subparsers._group_actions:  # noqa: SLF001 - argparse offers no public walk
        for sp in action.choices.values():
            known_dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in doc.items() if k in known_dests})
    unknown = [k for k in doc if k not in {"command"} and not any(
        k in {a.dest for a in sp._actions}
        for action in parser._subparsers._group_actions
        for sp in action.choices.values()
    )]
    if unknown:
        raise ConfigError(f"spec file has unknown keys: {', '.join(sorted(unknown))}")
    return argv


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = apply_spec_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except TplError as exc:
        print(json.dumps({"error": type(exc).__name__, "exit": exc.exit_code,
                          "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(json.dumps({"error": "IOError", "exit": 4, "message": str(exc)}),
              file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
