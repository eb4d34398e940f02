"""Adapter registry: the bridge between patch images and embedding vectors.

An adapter owns its model's entire preprocessing; the exporter core never
touches pixels. The interface is two callables:

    preprocess(image: PIL.Image.Image) -> numpy array (any model-specific shape)
    embed(batch: numpy array, stacked preprocessed inputs) -> (B, d) float array

Adapters resolve either from the built-in registry by name or from a
``module:attribute`` spec, where the attribute is a factory called as
``factory(device=...)``. Model weights are always user-supplied; nothing here
downloads or vendors them.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from PIL import Image


class Adapter(Protocol):
    def preprocess(self, image: Image.Image) -> np.ndarray: ...

    def embed(self, batch: np.ndarray) -> np.ndarray: ...


class AdapterError(Exception):
    """Adapter resolution or invocation failure."""


@dataclass
class IdentityFlattenAdapter:
    """Test fixture: the embedding is the raw RGB pixel values, flattened."""

    def preprocess(self, image: Image.Image) -> np.ndarray:
        return np.asarray(image.convert("RGB"), dtype=np.float32)

    def embed(self, batch: np.ndarray) -> np.ndarray:
        return batch.reshape(batch.shape[0], -1).astype(np.float32)


@dataclass
class ConstantAdapter:
    """Test fixture: every patch maps to the same constant d-vector."""

    dim: int = 8
    value: float = 1.0

    def preprocess(self, image: Image.Image) -> np.ndarray:
        return np.zeros(1, dtype=np.float32)

    def embed(self, batch: np.ndarray) -> np.ndarray:
        return np.full((batch.shape[0], self.dim), self.value, dtype=np.float32)


_REGISTRY: dict[str, Callable[..., Adapter]] = {
    "identity-flatten": lambda device=None: IdentityFlattenAdapter(),
    "constant-d8": lambda device=None: ConstantAdapter(dim=8),
}


def register_adapter(name: str, factory: Callable[..., Adapter]) -> None:
    _REGISTRY[name] = factory


def available_adapters() -> list[str]:
    return sorted(_REGISTRY)


def resolve_adapter(name: str, device: str | None = None) -> Adapter:
    """Look up a built-in adapter or import a ``module:attribute`` factory."""
    if name in _REGISTRY:
        return _REGISTRY[name](device=device)
    if ":" in name:
        module_name, attr = name.split(":", 1)
        try:
            module = importlib.import_module(module_name)
            factory = getattr(module, attr)
        except (ImportError, AttributeError) as exc:
            raise AdapterError(f"cannot load adapter {name!r}: {exc}") from exc
        return factory(device=device)
    raise AdapterError(
        f"unknown adapter {name!r}; built-ins: {', '.join(available_adapters())}"
    )
