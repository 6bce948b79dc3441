"""Linear projections with optional low-rank adapters.

``LoraLinear`` keeps the pretrained weight ``W`` frozen and learns a rank-``r``
correction ``B @ C``. Training always uses the factored form
``x @ W + (x @ B) @ C``; :func:`merge` folds the correction back into a single
matrix once training is over.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ShapeError
from .rng import make_rng
from .tensor import Tensor, matmul, no_grad


class Linear:
    """Bias-free projection ``x @ W`` with a trainable weight."""

    def __init__(self, W: Tensor):
        if W.ndim != 2:
            raise ShapeError(f"weight must be a matrix, got {W.shape}")
        self.W = W

    @classmethod
    def init(cls, d_in: int, d_out: int, seed: int, *path) -> "Linear":
        rng = make_rng(seed, *path)
        return cls(Tensor(rng.normal(scale=1.0 / np.sqrt(d_in), size=(d_in, d_out)), requires_grad=True))

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.W)

    def parameters(self) -> list[Tensor]:
        return [self.W] if self.W.requires_grad else []

    def weight(self) -> np.ndarray:
        return self.W.data


@dataclass(eq=False)
class LoraLinear:
    W: Tensor
    B: Tensor
    C: Tensor

    def __post_init__(self):
        d, h = self.W.shape
        if self.B.shape[0] != d or self.C.shape[1] != h or self.B.shape[1] != self.C.shape[0]:
            raise ShapeError(f"LoRA factors {self.B.shape}, {self.C.shape} do not fit W {self.W.shape}")
        self.W.requires_grad = False

    @classmethod
    def wrap(cls, W: Tensor, r: int, seed: int, *path) -> "LoraLinear":
        """Adapter around ``W`` that initially computes exactly ``x @ W``."""
        d, h = W.shape
        if r < 1:
            raise ValueError(f"rank must be >= 1, got {r}")
        rng = make_rng(seed, "lora", *path)
        B = Tensor(rng.normal(scale=1.0 / np.sqrt(d), size=(d, r)), requires_grad=True, dtype=W.dtype)
        C = Tensor(np.zeros((r, h)), requires_grad=True, dtype=W.dtype)
        return cls(W, B, C)

    @property
    def r(self) -> int:
        return self.B.shape[1]

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return lora_forward(x, self)

    def parameters(self) -> list[Tensor]:
        return [self.B, self.C]

    def weight(self) -> np.ndarray:
        return merge(self)


def lora_forward(x: Tensor, layer: LoraLinear) -> Tensor:
    """``x @ W + (x @ B) @ C`` without materialising ``W + B @ C``."""
    if x.shape[-1] != layer.d_in:
        raise ShapeError(f"input width {x.shape[-1]} != {layer.d_in}")
    return matmul(x, layer.W) + matmul(matmul(x, layer.B), layer.C)


def merge(layer: LoraLinear) -> np.ndarray:
    """The merged weight ``W + B @ C``."""
    with no_grad():
        return layer.W.data + layer.B.data @ layer.C.data


def trainable_count(d_in: int, d_out: int, r: int) -> int:
    return r * (d_in + d_out)


def save_adapters(path: str | Path, layers: Mapping[str, LoraLinear], extra: Mapping[str, np.ndarray] | None = None) -> None:
    """Write only the adapter factors (and any extra small state) to ``path``."""
    arrays: dict[str, np.ndarray] = {}
    for name, layer in layers.items():
        arrays[f"{name}.B"] = layer.B.data
        arrays[f"{name}.C"] = layer.C.data
    for name, arr in (extra or {}).items():
        arrays[name] = np.asarray(arr)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_adapters(path: str | Path, layers: Mapping[str, LoraLinear]) -> dict[str, np.ndarray]:
    """Restore factors into ``layers`` in place; returns the unmatched arrays."""
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    for name, layer in layers.items():
        b, c = arrays.pop(f"{name}.B"), arrays.pop(f"{name}.C")
        if b.shape != layer.B.shape or c.shape != layer.C.shape:
            raise ShapeError(f"adapter {name} has shapes {b.shape}, {c.shape}")
        layer.B.data[...] = b
        layer.C.data[...] = c
    return arrays
