"""Extraction driver: capture, write to a temp path, validate, rename.

A file only ever lands at its final path after the consumer's own validator
has accepted it (write-to-temp, validate, rename).
"""

from __future__ import annotations

import os
import shutil
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .adapters import ExtractionError, resolve_adapter
from .format import pack_trace


@dataclass
class ExtractionSpec:
    model: str = "stub"
    output: Path = Path("capture.trace")
    prompt: Optional[str] = None
    image: Optional[Path] = None
    layers: int = 2                  # leading decoder layers to record
    hidden_layer: Optional[int] = 2  # residual stream entering this layer
    seed: int = 0
    # stub-model knobs
    grid: tuple[int, int] = (8, 8)
    text_tokens: int = 8
    hidden_size: int = 32
    heads: int = 4


def validator_command() -> list[str]:
    """The consumer CLI used to vet captures; TPL_CLI overrides discovery."""
    override = os.environ.get("TPL_CLI")
    if override:
        return override.split()
    binary = shutil.which("tpl")
    if binary:
        return [binary]
    return [sys.executable, "-m", "tpl.cli"]


def extract(spec: ExtractionSpec) -> Path:
    """Capture one trace and return its validated final path."""
    adapter = resolve_adapter(spec.model)
    capture = adapter.run(spec)
    blob = pack_trace(capture)

    output = Path(spec.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    tmp = output.with_name(output.name + ".tmp")
    tmp.write_bytes(blob)
    try:
        proc = subprocess.run(
            [*validator_command(), "validate-trace", str(tmp)],
            capture_output=True, text=True,
        )
        if proc.returncode != 0:
            raise ExtractionError(
                "capture failed consumer validation:\n"
                + proc.stdout.strip() + proc.stderr.strip()
            )
        os.replace(tmp, output)
    finally:
        tmp.unlink(missing_ok=True)
    return output
