"""Per-model capture adapters.

Each adapter knows one model family well enough to locate its visual-token
span explicitly -- there is no heuristic token-type sniffing.  Adapters only
capture; every pruning decision lives in the consumer.
"""

from __future__ import annotations

import numpy as np

from .format import TraceCapture


class ExtractionError(RuntimeError):
    pass


class StubAdapter:
    """Deterministic miniature attention model for CI and plumbing tests.

    Runs a real (if tiny) causal attention stack over random embeddings and
    records exactly what a production adapter would: head-averaged rows of
    the final token and of the final visual token, plus the hidden states
    entering the designated layer.
    """

    name = "stub"

    def run(self, spec) -> TraceCapture:
        rng = np.random.default_rng(spec.seed)
        grid_h, grid_w = spec.grid
        visual = grid_h * grid_w
        before = max(spec.text_tokens // 2, 1)
        after = max(spec.text_tokens - before, 1)
        L = before + visual + after
        d, heads = spec.hidden_size, spec.heads
        dh = d // heads
        layers = spec.layers

        x = rng.standard_normal((L, d))
        wq = rng.standard_normal((layers, d, d)) * d ** -0.5
        wk = rng.standard_normal((layers, d, d)) * d ** -0.5
        wv = rng.standard_normal((layers, d, d)) * d ** -0.5

        text_rows = np.zeros((layers, L), dtype=np.float32)
        visual_rows = np.zeros((layers, L), dtype=np.float32)
        hidden_states = None
        image_end = before + visual
        for layer in range(layers):
            if spec.hidden_layer == layer + 1:
                hidden_states = x.astype(np.float32)
            q = (x @ wq[layer]).reshape(L, heads, dh).transpose(1, 0, 2)
            k = (x @ wk[layer]).reshape(L, heads, dh).transpose(1, 0, 2)
            v = (x @ wv[layer]).reshape(L, heads, dh).transpose(1, 0, 2)
            scores = np.einsum("hqd,hkd->hqk", q, k) * dh ** -0.5
            cols = np.arange(L)
            scores = np.where(cols[None, None, :] > cols[None, :, None], -np.inf, scores)
            scores -= scores.max(axis=-1, keepdims=True)
            attn = np.exp(scores)
            attn /= attn.sum(axis=-1, keepdims=True)
            head_mean = attn.mean(axis=0)
            text_rows[layer] = head_mean[L - 1].astype(np.float32)
            visual_rows[layer] = head_mean[image_end - 1].astype(np.float32)
            x = x + np.einsum("hqk,hkd->hqd", attn, v).transpose(1, 0, 2).reshape(L, d)
        if spec.hidden_layer == layers + 1:
            hidden_states = x.astype(np.float32)

        return TraceCapture(
            seq_len=L,
            image_start=before,
            image_end=image_end,
            grid_h=grid_h,
            grid_w=grid_w,
            num_heads=heads,
            last_text_rows=text_rows,
            last_visual_rows=visual_rows,
            hidden_size=d,
            intermediate_size=4 * d,
            model_layers=layers,
            hidden_states=hidden_states,
            hidden_layer=spec.hidden_layer if hidden_states is not None else None,
        )


class LlavaHfAdapter:
    """LLaVA-1.5-style capture through the huggingface transformers runtime.

    The visual span is located from the expanded image-token id run in
    ``input_ids`` and the grid from the vision tower's image/patch size;
    any ambiguity is an explicit error, never a guessed layout.  Model and
    framework failures surface verbatim.
    """

    name = "llava-hf"

    def __init__(self, model_id: str):
        self.model_id = model_id

    def run(self, spec) -> TraceCapture:
        if spec.image is None:
            raise ExtractionError("llava extraction requires --image")
        try:
            import torch
            from PIL import Image
            from transformers import AutoProcessor, LlavaForConditionalGeneration
        except ImportError as exc:
            raise ExtractionError(
                f"llava extraction needs the [llava] extra (torch/transformers/pillow): {exc}"
            ) from exc

        processor = AutoProcessor.from_pretrained(self.model_id)
        model = LlavaForConditionalGeneration.from_pretrained(
            self.model_id, torch_dtype=torch.float32
        )
        model.eval()

        image = Image.open(spec.image).convert("RGB")
        prompt = spec.prompt or "USER: <image>\nDescribe the image. ASSISTANT:"
        inputs = processor(images=image, text=prompt, return_tensors="pt")

        with torch.no_grad():
            out = model(
                **inputs,
                output_attentions=True,
                output_hidden_states=spec.hidden_layer is not None,
                use_cache=False,
            )

        input_ids = inputs["input_ids"][0].tolist()
        image_token = model.config.image_token_index
        positions = [i for i, t in enumerate(input_ids) if t == image_token]
        if not positions:
            raise ExtractionError("no image tokens in the processed sequence")
        start, end = positions[0], positions[-1] + 1
        if positions != list(range(start, end)):
            raise ExtractionError("image-token span is not contiguous; unsupported layout")

        vision_cfg = model.config.vision_config
        grid = vision_cfg.image_size // vision_cfg.patch_size
        if grid * grid != end - start:
            raise ExtractionError(
                f"vision grid {grid}x{grid} does not cover the {end - start}-token image span"
            )

        layers = min(spec.layers, len(out.attentions))
        L = len(input_ids)
        text_rows = np.zeros((layers, L), dtype=np.float32)
        visual_rows = np.zeros((layers, L), dtype=np.float32)
        for layer in range(layers):
            attn = out.attentions[layer][0].float().numpy()  # (heads, L, L)
            head_mean = attn.mean(axis=0)
            text_rows[layer] = head_mean[L - 1]
            visual_rows[layer] = head_mean[end - 1]

        hidden_states = None
        if spec.hidden_layer is not None:
            # hidden_states[k] is the input to layer k (0-indexed by hf).
            hidden_states = out.hidden_states[spec.hidden_layer - 1][0].float().numpy()
            hidden_states = hidden_states.astype(np.float32)

        text_cfg = model.config.text_config
        return TraceCapture(
            seq_len=L,
            image_start=start,
            image_end=end,
            grid_h=grid,
            grid_w=grid,
            num_heads=text_cfg.num_attention_heads,
            last_text_rows=text_rows,
            last_visual_rows=visual_rows,
            hidden_size=text_cfg.hidden_size,
            intermediate_size=text_cfg.intermediate_size,
            model_layers=text_cfg.num_hidden_layers,
            hidden_states=hidden_states,
            hidden_layer=spec.hidden_layer,
        )


def resolve_adapter(model: str):
    if model == "stub":
        return StubAdapter()
    if model.startswith("llava-hf/") or model.startswith("llava:"):
        return LlavaHfAdapter(model.removeprefix("llava:"))
    raise ExtractionError(
        f"no adapter for model {model!r}; known: 'stub', 'llava-hf/<id>' or 'llava:<id>'"
    )
