"""Cube-selective causal attention.

A vision query in cube ``i`` scores the mean keys of cubes ``0..i-1``,
selects a subset of them with the configured strategy, and attends to the
full keys of the selected cubes plus the causal prefix of its own cube
(itself included). A text query scores every vision cube the same way and
attends densely to the preceding text tokens. Selection happens
independently for each head and each query.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dense import causal_mask
from .kernels import MacCounter, masked_matmul, matmul, softmax
from .layout import CubeLayout
from .model import AttentionConfig, LayerWeights, SequenceState, merge_heads, project_heads
from .selection import SelectionDistribution, Strategy, select_mask


@dataclass
class AttnLayerStats:
    selected_counts: np.ndarray  # (heads, S) cubes selected by each query
    attended_tokens: np.ndarray  # (heads, S) keys attended by each query
    text_cube_hits: np.ndarray  # (cubes,) (text query, head) pairs that picked each cube
    num_text: int

    @property
    def mean_selected(self) -> float:
        return float(self.selected_counts.mean())

    @property
    def text_cube_frequency(self) -> np.ndarray:
        pairs = self.num_text * self.selected_counts.shape[0]
        return self.text_cube_hits / pairs if pairs else np.zeros_like(self.text_cube_hits, dtype=float)


@dataclass
class AttnTrace:
    layers: list[AttnLayerStats] = field(default_factory=list)


def mean_keys(keys: np.ndarray, layout: CubeLayout) -> np.ndarray:
    """Per-cube mean of the vision key rows; ``(..., S, d)`` -> ``(..., N, d)``."""
    keys = np.asarray(keys, dtype=np.float64)
    nv, C = layout.num_tokens, layout.tokens_per_cube
    vis = keys[..., :nv, :]
    return vis.reshape(*vis.shape[:-2], layout.num_cubes, C, vis.shape[-1]).mean(axis=-2)


def cube_relevance(q: np.ndarray, preceding_mean_keys: np.ndarray, d_k: int) -> SelectionDistribution:
    """Softmax of scaled dot products between one query and the preceding cubes' mean keys."""
    mk = np.asarray(preceding_mean_keys, dtype=np.float64).reshape(-1, d_k)
    return SelectionDistribution(softmax(mk @ np.asarray(q, dtype=np.float64) / math.sqrt(d_k)))


def _attend_block(q, k_prev, v_prev, cube_sel, C, k_loc, v_loc, loc_mask, counter):
    key_mask = np.repeat(cube_sel, C, axis=1)
    scale = 1.0 / math.sqrt(q.shape[-1])
    s_sel = masked_matmul(q, k_prev.T, key_mask, "attention_selected", counter) * scale
    s_loc = masked_matmul(q, k_loc.T, loc_mask, "attention_local", counter) * scale
    probs = softmax(np.concatenate([np.where(key_mask, s_sel, -np.inf),
                                    np.where(loc_mask, s_loc, -np.inf)], axis=1))
    n_prev = k_prev.shape[0]
    out = masked_matmul(probs[:, :n_prev], v_prev, key_mask, "attention_selected", counter, mask_on="lhs")
    out += masked_matmul(probs[:, n_prev:], v_loc, loc_mask, "attention_local", counter, mask_on="lhs")
    return out, key_mask.sum(axis=1) + loc_mask.sum(axis=1)


def _select(q, kbar, strategy: Strategy, counter):
    logits = matmul(q, kbar.T, "overhead", counter) / math.sqrt(q.shape[-1])
    return select_mask(softmax(logits), strategy)


def sparse_attend_heads(state: SequenceState, weights: LayerWeights, config: AttentionConfig,
                        counter: Optional[MacCounter] = None,
                        trace: Optional[AttnTrace] = None) -> np.ndarray:
    """Per-head sparse attention output, shape ``(heads, S, d_k)``."""
    q, k, v = project_heads(state, weights, config, counter)
    layout = state.layout
    H, S, dk = q.shape
    C, N, nv, nt = layout.tokens_per_cube, layout.num_cubes, state.num_vision, state.num_text
    out = np.empty_like(q)
    counts = np.zeros((H, S), dtype=np.int64)
    attended = np.zeros((H, S), dtype=np.int64)
    text_hits = np.zeros(N, dtype=np.int64)
    local = causal_mask(C)
    text_local = causal_mask(nt)
    kbar_all = mean_keys(k, layout)

    for h in range(H):
        kbar = kbar_all[h]
        for i in range(N):
            rows = slice(i * C, (i + 1) * C)
            if i == 0:
                sel = np.zeros((C, 0), dtype=bool)
            else:
                sel = _select(q[h, rows], kbar[:i], config.strategy, counter)
            out[h, rows], attended[h, rows] = _attend_block(
                q[h, rows], k[h, :i * C], v[h, :i * C], sel, C, k[h, rows], v[h, rows], local, counter)
            counts[h, rows] = sel.sum(axis=1)
        if nt:
            sel = _select(q[h, nv:], kbar, config.strategy, counter)
            out[h, nv:], attended[h, nv:] = _attend_block(
                q[h, nv:], k[h, :nv], v[h, :nv], sel, C, k[h, nv:], v[h, nv:], text_local, counter)
            counts[h, nv:] = sel.sum(axis=1)
            text_hits += sel.sum(axis=0)

    if trace is not None:
        trace.layers.append(AttnLayerStats(counts, attended, text_hits, nt))
    return out


def sparse_attend(state: SequenceState, weights: LayerWeights, config: AttentionConfig,
                  counter: Optional[MacCounter] = None,
                  trace: Optional[AttnTrace] = None) -> np.ndarray:
    """Sparse attention sublayer output (before the residual add), shape ``(S, d_model)``."""
    return merge_heads(sparse_attend_heads(state, weights, config, counter, trace), weights, counter)
