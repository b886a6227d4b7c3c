"""Dense numeric primitives with multiply-accumulate accounting.

Every matrix product in the package goes through :func:`matmul` or
:func:`masked_matmul` so that a :class:`MacCounter` sees the exact amount of
arithmetic a block-sparse kernel would have to perform.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

ROPE_BASE = 10000.0

SCOPES = (
    "attention_selected",
    "attention_local",
    "attention_dense",
    "ffn_vision",
    "ffn_text",
    "projection",
    "overhead",
)


@dataclass
class MacCounter:
    """Multiply-accumulate tallies, one per cost category.

    ``attention_selected`` holds the QK/AV work against keys of selected
    cubes, ``attention_local`` the always-attended local prefix (own cube for
    vision queries, preceding text for text queries) and ``attention_dense``
    the full causal attention of the dense path.
    """

    attention_selected: int = 0
    attention_local: int = 0
    attention_dense: int = 0
    ffn_vision: int = 0
    ffn_text: int = 0
    projection: int = 0
    overhead: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, scope: str, macs: int) -> None:
        if scope not in SCOPES:
            raise ConfigError(f"unknown MAC scope {scope!r}")
        if macs < 0:
            raise ValueError("MAC increments must be non-negative")
        with self._lock:
            setattr(self, scope, getattr(self, scope) + int(macs))

    def merge(self, other: "MacCounter") -> None:
        for name in SCOPES:
            self.add(name, getattr(other, name))

    @property
    def attention_macs(self) -> int:
        return self.attention_selected + self.attention_local + self.attention_dense

    @property
    def ffn_macs(self) -> int:
        return self.ffn_vision + self.ffn_text

    @property
    def projection_macs(self) -> int:
        return self.projection

    @property
    def overhead_macs(self) -> int:
        return self.overhead

    @property
    def total(self) -> int:
        return sum(getattr(self, name) for name in SCOPES)

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self) if not f.name.startswith("_")}


def _count(counter: Optional[MacCounter], scope: str, macs: int) -> None:
    if counter is not None:
        counter.add(scope, macs)


def matmul(
    a: np.ndarray,
    b: np.ndarray,
    scope: str = "projection",
    counter: Optional[MacCounter] = None,
) -> np.ndarray:
    """Plain matrix product; charges ``rows(a) * cols(a) * cols(b)`` MACs to ``scope``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    _count(counter, scope, a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def masked_matmul(
    a: np.ndarray,
    b: np.ndarray,
    mask: np.ndarray,
    scope: str,
    counter: Optional[MacCounter] = None,
    mask_on: str = "out",
) -> np.ndarray:
    """Matrix product restricted to a sparsity pattern.

    ``mask_on="out"``: ``mask`` has the output's shape; only those output
    entries are produced (others are zero) and each costs ``cols(a)`` MACs.
    ``mask_on="lhs"``: ``mask`` has ``a``'s shape; entries of ``a`` outside it
    are treated as structural zeros and each kept entry costs ``cols(b)`` MACs.

    The numpy evaluation may touch masked entries; the counter charges only
    the work a sparse kernel would do.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if mask_on == "out":
        if mask.shape != (a.shape[0], b.shape[1]):
            raise ShapeError(f"output mask {mask.shape} does not match {(a.shape[0], b.shape[1])}")
        _count(counter, scope, int(mask.sum()) * a.shape[1])
        return np.where(mask, a @ b, 0.0)
    if mask_on == "lhs":
        if mask.shape != a.shape:
            raise ShapeError(f"lhs mask {mask.shape} does not match {a.shape}")
        _count(counter, scope, int(mask.sum()) * b.shape[1])
        return np.where(mask, a, 0.0) @ b
    raise ConfigError(f"mask_on must be 'out' or 'lhs', got {mask_on!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over the last axis.

    ``-inf`` entries receive exactly zero probability. An empty last axis gives
    an empty result.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.shape[-1] == 0:
        return x.copy()
    peak = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - peak)
    return e / np.sum(e, axis=-1, keepdims=True)


def l2_norm(x: np.ndarray, axis: int = -1, counter: Optional[MacCounter] = None) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    _count(counter, "overhead", x.size)
    out = np.sqrt(np.sum(x * x, axis=axis))
    return float(out) if np.ndim(out) == 0 else out


def rope_angles(positions: Sequence[int], dim: int, base: float = ROPE_BASE) -> np.ndarray:
    if dim % 2:
        raise ConfigError(f"rotary encoding needs an even head dimension, got {dim}")
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def apply_rope(x: np.ndarray, positions: Sequence[int], base: float = ROPE_BASE) -> np.ndarray:
    """Rotate interleaved feature pairs ``(2i, 2i+1)`` of each row by ``pos * base**(-2i/d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise ConfigError(f"rotary encoding needs an even head dimension, got {x.shape[-1]}")
    if len(positions) != x.shape[-2]:
        raise ShapeError(f"{len(positions)} positions for {x.shape[-2]} rows")
    theta = rope_angles(positions, x.shape[-1], base)
    cos, sin = np.cos(theta), np.sin(theta)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out
