"""Standalone writer for the "tpl-trace/1" file format.

This is the extractor's half of the cross-component contract; it shares no
code with the consumer.  Layout: a ``tpl-trace/1`` magic line, an 8-byte
little-endian header length, a UTF-8 key/value header, then little-endian
float32 payload arrays in declared order (last-text rows, last-visual rows,
optional hidden states).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

MAGIC = b"tpl-trace/1\n"


@dataclass
class TraceCapture:
    """Everything a model adapter must deliver for one input."""

    seq_len: int
    image_start: int
    image_end: int
    grid_h: int
    grid_w: int
    num_heads: int
    last_text_rows: np.ndarray    # (num_layers, seq_len), head-averaged
    last_visual_rows: np.ndarray  # (num_layers, seq_len), head-averaged
    hidden_size: int
    intermediate_size: int
    model_layers: int
    kv_bytes_per_elem: int = 2
    hidden_states: Optional[np.ndarray] = None  # (seq_len, hidden_size)
    hidden_layer: Optional[int] = None


def pack_trace(capture: TraceCapture) -> bytes:
    rows = np.ascontiguousarray(capture.last_text_rows, dtype="<f4")
    num_layers = rows.shape[0]
    header = (
        f"seq_len: {capture.seq_len}\n"
        f"image_start: {capture.image_start}\n"
        f"image_end: {capture.image_end}\n"
        f"grid_h: {capture.grid_h}\n"
        f"grid_w: {capture.grid_w}\n"
        f"num_layers: {num_layers}\n"
        f"num_heads: {capture.num_heads}\n"
        f"hidden_size: {capture.hidden_size}\n"
        f"intermediate_size: {capture.intermediate_size}\n"
        f"model_layers: {capture.model_layers}\n"
        f"kv_bytes_per_elem: {capture.kv_bytes_per_elem}\n"
        f"model_heads: {capture.num_heads}\n"
    )
    if capture.hidden_states is not None:
        header += f"hidden_states_layer: {capture.hidden_layer}\n"
    head = header.encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(head)), head, rows.tobytes()]
    parts.append(np.ascontiguousarray(capture.last_visual_rows, dtype="<f4").tobytes())
    if capture.hidden_states is not None:
        parts.append(np.ascontiguousarray(capture.hidden_states, dtype="<f4").tobytes())
    return b"".join(parts)
