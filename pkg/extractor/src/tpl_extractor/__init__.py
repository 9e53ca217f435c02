"""tpl-extractor: capture-only client writing tpl-trace/1 files."""

from .adapters import ExtractionError, LlavaHfAdapter, StubAdapter, resolve_adapter
from .extract import ExtractionSpec, extract
from .format import TraceCapture, pack_trace

__version__ = "0.1.0"
