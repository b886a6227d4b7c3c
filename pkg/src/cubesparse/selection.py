"""Nucleus (top-p) selection plus the fixed Top-K and uniform baselines.

Selection is deterministic: candidates are ranked by descending
probability with ties broken by ascending index. Top-p keeps the shortest
ranked prefix whose cumulative mass reaches ``p`` (the crossing element is
kept), so any non-empty distribution yields at least one index. At
``p = 1`` that prefix is every entry with positive probability.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ConfigError

# absorbs summation rounding when deciding whether a prefix reached p
MASS_TOL = 1e-12


@dataclass(frozen=True)
class TopP:
    p: float

    def __post_init__(self):
        if not (0.0 < float(self.p) <= 1.0):
            raise ConfigError(f"top-p threshold must lie in (0, 1], got {self.p}")

    def __str__(self) -> str:
        return f"topp:{self.p:g}"


@dataclass(frozen=True)
class TopK:
    k: int

    def __post_init__(self):
        if int(self.k) < 1 or int(self.k) != self.k:
            raise ConfigError(f"top-k needs an integer k >= 1, got {self.k}")

    def __str__(self) -> str:
        return f"topk:{self.k}"


@dataclass(frozen=True)
class Uniform:
    ratio: float

    def __post_init__(self):
        if not (0.0 < float(self.ratio) <= 1.0):
            raise ConfigError(f"uniform ratio must lie in (0, 1], got {self.ratio}")

    def __str__(self) -> str:
        return f"uniform:{self.ratio:g}"


Strategy = Union[TopP, TopK, Uniform]


def parse_strategy(text: str) -> Strategy:
    """Parse ``topp:0.7``, ``topk:3`` or ``uniform:0.5``."""
    kind, _, value = text.strip().partition(":")
    kind = kind.lower().replace("-", "").replace("_", "")
    try:
        if kind == "topp":
            return TopP(float(value))
        if kind == "topk":
            return TopK(int(value))
        if kind == "uniform":
            return Uniform(float(value))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad strategy parameter in {text!r}") from exc
    raise ConfigError(f"unknown selection strategy {text!r}")


@dataclass(frozen=True)
class SelectionDistribution:
    probs: np.ndarray
    source: str = "cube-relevance"


@dataclass(frozen=True)
class SelectedSet:
    indices: tuple[int, ...]
    mass: float

    def __len__(self) -> int:
        return len(self.indices)


def _probs(dist) -> np.ndarray:
    return np.asarray(getattr(dist, "probs", dist), dtype=np.float64)


def _ceil_count(fraction: float, n: int) -> int:
    # ceil(fraction * n), robust to 0.7 * 10 style representation error
    return max(1, min(n, math.ceil(fraction * n - 1e-9))) if n else 0


def _rank(probs: np.ndarray) -> np.ndarray:
    return np.argsort(-probs, axis=-1, kind="stable")


def _prefix_mask(order: np.ndarray, keep: np.ndarray) -> np.ndarray:
    n = order.shape[-1]
    ranked = np.arange(n) < keep[..., None]
    mask = np.zeros(order.shape, dtype=bool)
    np.put_along_axis(mask, order, ranked, axis=-1)
    return mask


def top_p_mask(probs: np.ndarray, p: float) -> np.ndarray:
    """Row-wise top-p membership for a ``(..., n)`` stack of distributions."""
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[-1]
    if n == 0:
        return np.zeros(probs.shape, dtype=bool)
    order = _rank(probs)
    if p >= 1.0:
        # full mass: every positive entry, or the top-ranked one if all are zero
        keep = np.maximum((probs > 0).sum(axis=-1), 1)
        return _prefix_mask(order, keep)
    cum = np.cumsum(np.take_along_axis(probs, order, axis=-1), axis=-1)
    keep = np.minimum((cum < p - MASS_TOL).sum(axis=-1) + 1, n)
    return _prefix_mask(order, keep)


def top_k_mask(probs: np.ndarray, k: int) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[-1]
    if n == 0:
        return np.zeros(probs.shape, dtype=bool)
    keep = np.full(probs.shape[:-1], min(int(k), n))
    return _prefix_mask(_rank(probs), keep)


def uniform_indices(n: int, ratio: float) -> np.ndarray:
    m = _ceil_count(ratio, n)
    return (np.arange(m) * n) // m if m else np.zeros(0, dtype=int)


def uniform_mask(shape: tuple[int, ...], ratio: float) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[..., uniform_indices(shape[-1], ratio)] = True
    return mask


def select_mask(probs: np.ndarray, strategy: Strategy) -> np.ndarray:
    """Apply ``strategy`` to every row of ``probs``; returns boolean membership."""
    if isinstance(strategy, TopP):
        return top_p_mask(probs, strategy.p)
    if isinstance(strategy, TopK):
        return top_k_mask(probs, strategy.k)
    if isinstance(strategy, Uniform):
        return uniform_mask(np.shape(probs), strategy.ratio)
    raise ConfigError(f"unsupported strategy {strategy!r}")


def _as_set(probs: np.ndarray, mask: np.ndarray) -> SelectedSet:
    idx = np.flatnonzero(mask)
    return SelectedSet(tuple(int(i) for i in idx), float(probs[idx].sum()))


def top_p(dist, p: float) -> SelectedSet:
    if not (0.0 < p <= 1.0):
        raise ConfigError(f"top-p threshold must lie in (0, 1], got {p}")
    probs = _probs(dist)
    return _as_set(probs, top_p_mask(probs, p))


def top_k(dist, k: int) -> SelectedSet:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    probs = _probs(dist)
    return _as_set(probs, top_k_mask(probs, k))


def uniform_sample(n: int, ratio: float) -> SelectedSet:
    if not (0.0 < ratio <= 1.0):
        raise ConfigError(f"uniform ratio must lie in (0, 1], got {ratio}")
    idx = uniform_indices(n, ratio)
    return SelectedSet(tuple(int(i) for i in idx), len(idx) / n if n else 0.0)


def select(dist, strategy: Strategy) -> SelectedSet:
    probs = _probs(dist)
    return _as_set(probs, select_mask(probs, strategy))
