"""Embedding exporter: user-supplied vision encoders to EMB1 + manifest files."""

__version__ = "0.1.0"

from .adapters import (
    Adapter,
    AdapterError,
    available_adapters,
    register_adapter,
    resolve_adapter,
)
from .export import (
    ExportError,
    ExportJob,
    ExportResult,
    PatchEntry,
    export_embeddings,
    read_patch_list,
)

__all__ = [
    "Adapter",
    "AdapterError",
    "ExportError",
    "ExportJob",
    "ExportResult",
    "PatchEntry",
    "available_adapters",
    "export_embeddings",
    "read_patch_list",
    "register_adapter",
    "resolve_adapter",
]
