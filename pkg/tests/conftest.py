import numpy as np
import pytest

from tpl import SynthConfig, TokenLayout, synthesize_trace


@pytest.fixture
def small_layout():
    # 16 visual tokens in a 4x4 grid, 2 text tokens on each side.
    return TokenLayout(seq_len=20, image_start=2, image_end=18, grid_h=4, grid_w=4)


@pytest.fixture
def monotone_trace(small_layout):
    return synthesize_trace(SynthConfig(
        layout=small_layout,
        bias_kind="monotone-positional",
        bias_strength=2.0,
        seed=42,
    ))


@pytest.fixture
def uniform_trace(small_layout):
    return synthesize_trace(SynthConfig(layout=small_layout, bias_kind="uniform", seed=42))


def make_valid_rows(rng, num_layers, layout):
    """Random valid attention rows (float32, causal prefixes normalized)."""
    L, e = layout.seq_len, layout.image_end
    text = rng.random((num_layers, L)) + 1e-3
    text /= text.sum(axis=1, keepdims=True)
    visual = np.zeros((num_layers, L))
    vis = rng.random((num_layers, e)) + 1e-3
    visual[:, :e] = vis / vis.sum(axis=1, keepdims=True)
    return text.astype(np.float32), visual.astype(np.float32)
