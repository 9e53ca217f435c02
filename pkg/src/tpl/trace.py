"""The "tpl-trace/1" attention-trace format: read, write, validate, synthesize.

A trace decouples pruning strategies from any particular model runtime.  Per
transformer layer it stores two head-averaged attention rows -- the row of
the final sequence token and the row of the final visual token -- plus an
optional hidden-state matrix captured entering one designated layer.

On-disk layout::

    tpl-trace/1\\n            magic line, doubles as the format version
    <8-byte LE u64>           byte length of the header document
    key: value\\n ...          UTF-8 header, one field per line
    <payload>                 little-endian float32 arrays, declared order:
                              last_text_rows   (num_layers x seq_len)
                              last_visual_rows (num_layers x seq_len)
                              hidden_states    (seq_len x hidden_size), optional

Arrays are stored and held in memory as float32, so write -> read round-trips
bit-exactly; derived computation upcasts to float64.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional, Union

import numpy as np

from .cost import ModelDims
from .errors import (
    ConfigError,
    TraceTruncatedError,
    TraceValidationError,
    TraceVersionError,
)

MAGIC = b"tpl-trace/1\n"
ROW_SUM_TOL = 1e-4

BIAS_KINDS = ("uniform", "monotone-positional", "blocked")

_HEADER_KEYS = (
    "seq_len",
    "image_start",
    "image_end",
    "grid_h",
    "grid_w",
    "num_layers",
    "num_heads",
    "hidden_size",
    "intermediate_size",
    "model_layers",
    "kv_bytes_per_elem",
    "model_heads",
)


@dataclass(frozen=True)
class TokenLayout:
    """Sequence geometry: total length, visual span [s, e), and its 2-d grid."""

    seq_len: int
    image_start: int
    image_end: int
    grid_h: int
    grid_w: int

    @property
    def num_visual(self) -> int:
        return self.image_end - self.image_start

    def violations(self) -> list[str]:
        out = []
        if not (0 <= self.image_start < self.image_end <= self.seq_len):
            out.append(
                f"layout: visual span [{self.image_start}, {self.image_end}) does not "
                f"fit in sequence of length {self.seq_len}"
            )
        if self.grid_h < 1 or self.grid_w < 1:
            out.append(f"layout: grid {self.grid_h}x{self.grid_w} has an empty axis")
        elif self.num_visual != self.grid_h * self.grid_w:
            out.append(
                f"layout: grid {self.grid_h}x{self.grid_w} covers {self.grid_h * self.grid_w} "
                f"cells but the visual span holds {self.num_visual} tokens"
            )
        return out


@dataclass
class AttentionTrace:
    """Per-layer guidance attention rows plus optional hidden states.

    ``last_text_rows[j]`` and ``last_visual_rows[j]`` hold the 1-based layer
    ``j + 1``'s head-averaged attention row of the final sequence token and of
    the final visual token respectively, each of length ``layout.seq_len``.
    ``hidden_states``, when present, is the residual stream entering 1-based
    layer ``hidden_layer``.
    """

    layout: TokenLayout
    num_layers: int
    num_heads: int
    last_text_rows: np.ndarray
    last_visual_rows: np.ndarray
    model_dims: ModelDims
    hidden_states: Optional[np.ndarray] = None
    hidden_layer: Optional[int] = None


@dataclass(frozen=True)
class SynthConfig:
    """Recipe for a synthetic trace with a controlled attention bias.

    ``monotone-positional`` gives visual-token weight exp(bias_strength * i / V)
    at span position i; ``uniform`` gives equal weight; ``blocked`` elevates the
    top-left grid quadrant by a factor exp(bias_strength).  Gaussian noise of
    scale ``noise_sigma`` is added to the visual weights (clipped at zero)
    before renormalization.  Fixing ``seed`` fixes the trace bit-for-bit.
    """

    layout: TokenLayout
    bias_kind: str = "uniform"
    bias_strength: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    num_layers: int = 2
    num_heads: int = 1
    include_hidden: bool = True
    hidden_dim: int = 16
    hidden_layer: int = 2


def validate_trace(trace: AttentionTrace) -> list[str]:
    """Check every structural invariant; returns violations (empty = valid)."""
    out = list(trace.layout.violations())
    L = trace.layout.seq_len
    if trace.num_layers < 1:
        out.append(f"num_layers must be >= 1, got {trace.num_layers}")
    if trace.num_heads < 1:
        out.append(f"num_heads must be >= 1, got {trace.num_heads}")

    for name, rows, prefix in (
        ("last_text_row", trace.last_text_rows, L),
        ("last_visual_row", trace.last_visual_rows, min(trace.layout.image_end, L)),
    ):
        rows = np.asarray(rows)
        if rows.shape != (trace.num_layers, L):
            out.append(f"{name}s: expected shape {(trace.num_layers, L)}, got {rows.shape}")
            continue
        if not np.all(np.isfinite(rows)):
            out.append(f"{name}s: non-finite entries")
            continue
        for j in range(trace.num_layers):
            row = rows[j].astype(np.float64)
            if row.min() < 0.0:
                out.append(f"{name} at layer {j + 1}: negative attention mass")
            s = row[:prefix].sum()
            if abs(s - 1.0) > ROW_SUM_TOL:
                out.append(
                    f"{name} at layer {j + 1}: causal-prefix sum {s:.6f} outside 1 +/- {ROW_SUM_TOL}"
                )

    if trace.hidden_states is not None:
        hs = np.asarray(trace.hidden_states)
        expected = (L, trace.model_dims.hidden)
        if hs.shape != expected:
            out.append(f"hidden_states: expected shape {expected}, got {hs.shape}")
        elif not np.all(np.isfinite(hs)):
            out.append("hidden_states: non-finite entries")
        if trace.hidden_layer is None or trace.hidden_layer < 1:
            out.append("hidden_states present but hidden_layer is not a layer index >= 1")
    return out


def _as_f32(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a), dtype=np.float32)


def _header_text(trace: AttentionTrace) -> str:
    d = trace.model_dims
    lines = [
        f"seq_len: {trace.layout.seq_len}",
        f"image_start: {trace.layout.image_start}",
        f"image_end: {trace.layout.image_end}",
        f"grid_h: {trace.layout.grid_h}",
        f"grid_w: {trace.layout.grid_w}",
        f"num_layers: {trace.num_layers}",
        f"num_heads: {trace.num_heads}",
        f"hidden_size: {d.hidden}",
        f"intermediate_size: {d.intermediate}",
        f"model_layers: {d.layers}",
        f"kv_bytes_per_elem: {d.kv_bytes_per_elem}",
        f"model_heads: {d.heads}",
    ]
    if trace.hidden_states is not None:
        lines.append(f"hidden_states_layer: {trace.hidden_layer}")
    return "\n".join(lines) + "\n"


def write_trace(trace: AttentionTrace, destination: Union[str, Path, BinaryIO]) -> int:
    """Serialize a valid trace; returns the number of bytes written."""
    violations = validate_trace(trace)
    if violations:
        raise TraceValidationError("refusing to write an invalid trace: " + "; ".join(violations))

    header = _header_text(trace).encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(header)), header]
    parts.append(_as_f32(trace.last_text_rows).tobytes())
    parts.append(_as_f32(trace.last_visual_rows).tobytes())
    if trace.hidden_states is not None:
        parts.append(_as_f32(trace.hidden_states).tobytes())
    blob = b"".join(parts)

    if hasattr(destination, "write"):
        destination.write(blob)
    else:
        Path(destination).write_bytes(blob)
    return len(blob)


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    data = stream.read(n)
    if data is None or len(data) != n:
        raise TraceTruncatedError(f"stream ended while reading {what} ({len(data or b'')} of {n} bytes)")
    return data


def read_trace(source: Union[str, Path, bytes, BinaryIO]) -> AttentionTrace:
    """Parse a trace; raises instead of ever returning a partially valid one."""
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return read_trace(fh)
    if isinstance(source, bytes):
        return read_trace(io.BytesIO(source))

    magic = source.read(len(MAGIC))
    if magic != MAGIC:
        raise TraceVersionError(f"unknown trace format version {magic!r}, expected {MAGIC!r}")
    (header_len,) = struct.unpack("<Q", _read_exact(source, 8, "header length"))
    try:
        header = _read_exact(source, header_len, "header").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TraceValidationError(f"header is not valid UTF-8: {exc}") from None

    fields: dict[str, int] = {}
    for line in header.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        if not sep or key not in _HEADER_KEYS + ("hidden_states_layer",):
            raise TraceValidationError(f"unrecognized header line {line!r}")
        try:
            fields[key] = int(value.strip())
        except ValueError:
            raise TraceValidationError(f"header field {key!r} is not an integer: {value.strip()!r}") from None
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise TraceValidationError(f"header missing fields: {', '.join(missing)}")

    layout = TokenLayout(
        seq_len=fields["seq_len"],
        image_start=fields["image_start"],
        image_end=fields["image_end"],
        grid_h=fields["grid_h"],
        grid_w=fields["grid_w"],
    )
    dims = ModelDims(
        layers=fields["model_layers"],
        hidden=fields["hidden_size"],
        intermediate=fields["intermediate_size"],
        kv_bytes_per_elem=fields["kv_bytes_per_elem"],
        heads=fields["model_heads"],
    )
    num_layers = fields["num_layers"]
    L = fields["seq_len"]
    if num_layers < 1 or L < 1:
        raise TraceValidationError(f"degenerate header: num_layers={num_layers}, seq_len={L}")

    def read_array(shape: tuple[int, ...], what: str) -> np.ndarray:
        count = int(np.prod(shape))
        raw = _read_exact(source, count * 4, what)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    last_text = read_array((num_layers, L), "last-text rows")
    last_visual = read_array((num_layers, L), "last-visual rows")
    hidden = None
    hidden_layer = None
    if "hidden_states_layer" in fields:
        hidden_layer = fields["hidden_states_layer"]
        hidden = read_array((L, dims.hidden), "hidden states")
    trailing = source.read(1)
    if trailing:
        raise TraceValidationError("trailing bytes after declared payload")

    trace = AttentionTrace(
        layout=layout,
        num_layers=num_layers,
        num_heads=fields["num_heads"],
        last_text_rows=last_text,
        last_visual_rows=last_visual,
        model_dims=dims,
        hidden_states=hidden,
        hidden_layer=hidden_layer,
    )
    violations = validate_trace(trace)
    if violations:
        raise TraceValidationError("; ".join(violations))
    return trace


def _visual_weights(cfg: SynthConfig) -> np.ndarray:
    layout = cfg.layout
    V = layout.num_visual
    if cfg.bias_kind == "uniform":
        return np.ones(V)
    if cfg.bias_kind == "monotone-positional":
        return np.exp(cfg.bias_strength * np.arange(V) / V)
    if cfg.bias_kind == "blocked":
        rows = np.arange(V) // layout.grid_w
        cols = np.arange(V) % layout.grid_w
        block = (rows < layout.grid_h / 2) & (cols < layout.grid_w / 2)
        return np.where(block, np.exp(cfg.bias_strength), 1.0)
    raise ConfigError(f"unknown bias kind {cfg.bias_kind!r}, expected one of {BIAS_KINDS}")


def synthesize_trace(cfg: SynthConfig) -> AttentionTrace:
    """Generate a valid trace with the configured positional bias, seed-deterministic."""
    bad = cfg.layout.violations()
    if bad:
        raise TraceValidationError("; ".join(bad))
    if not np.isfinite(cfg.bias_strength) or cfg.bias_strength < 0:
        raise ConfigError(f"bias_strength must be finite and >= 0, got {cfg.bias_strength}")
    if not np.isfinite(cfg.noise_sigma) or cfg.noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be finite and >= 0, got {cfg.noise_sigma}")
    if cfg.num_layers < 1 or cfg.num_heads < 1:
        raise ConfigError("num_layers and num_heads must be >= 1")
    _visual_weights(cfg)  # reject unknown kinds before consuming randomness

    layout = cfg.layout
    L, s, e = layout.seq_len, layout.image_start, layout.image_end
    rng = np.random.default_rng(cfg.seed)

    def make_row(prefix: int) -> np.ndarray:
        # Non-visual positions share the uniform base weight 1.0.
        w = np.ones(prefix)
        vis_hi = min(e, prefix)
        w[s:vis_hi] = _visual_weights(cfg)[: vis_hi - s]
        if cfg.noise_sigma > 0:
            w[s:vis_hi] = w[s:vis_hi] + rng.normal(0.0, cfg.noise_sigma, size=vis_hi - s)
            w = np.maximum(w, 0.0)
        total = w.sum()
        if total <= 0:
            raise ConfigError("noise clipped the whole attention row to zero")
        row = np.zeros(L)
        row[:prefix] = w / total
        return row

    text_rows = np.empty((cfg.num_layers, L), dtype=np.float32)
    visual_rows = np.empty((cfg.num_layers, L), dtype=np.float32)
    for j in range(cfg.num_layers):
        # Fixed draw order per layer: text row first, then visual row.
        text_rows[j] = make_row(L).astype(np.float32)
        visual_rows[j] = make_row(e).astype(np.float32)

    hidden = None
    hidden_layer = None
    if cfg.include_hidden:
        hidden = rng.standard_normal((L, cfg.hidden_dim)).astype(np.float32)
        hidden_layer = cfg.hidden_layer

    return AttentionTrace(
        layout=layout,
        num_layers=cfg.num_layers,
        num_heads=cfg.num_heads,
        last_text_rows=text_rows,
        last_visual_rows=visual_rows,
        model_dims=ModelDims(
            layers=cfg.num_layers,
            hidden=cfg.hidden_dim,
            intermediate=4 * cfg.hidden_dim,
            kv_bytes_per_elem=2,
            heads=cfg.num_heads,
        ),
        hidden_states=hidden,
        hidden_layer=hidden_layer,
    )


def traces_equal(a: AttentionTrace, b: AttentionTrace) -> bool:
    """Bit-exact equality, used by round-trip checks."""
    if (a.layout, a.num_layers, a.num_heads, a.model_dims, a.hidden_layer) != (
        b.layout,
        b.num_layers,
        b.num_heads,
        b.model_dims,
        b.hidden_layer,
    ):
        return False
    if not np.array_equal(_as_f32(a.last_text_rows), _as_f32(b.last_text_rows)):
        return False
    if not np.array_equal(_as_f32(a.last_visual_rows), _as_f32(b.last_visual_rows)):
        return False
    if (a.hidden_states is None) != (b.hidden_states is None):
        return False
    if a.hidden_states is not None and not np.array_equal(
        _as_f32(a.hidden_states), _as_f32(b.hidden_states)
    ):
        return False
    return True
