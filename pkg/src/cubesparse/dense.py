"""Reference dense causal layer: full attention and full FFN."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .kernels import MacCounter, masked_matmul, softmax
from .model import (AttentionConfig, FfnConfig, LayerWeights, SequenceState,
                    ffn_transform, merge_heads, project_heads, rms_norm)
from .selection import MASS_TOL


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def dense_attention_probs(q: np.ndarray, k: np.ndarray, mask: np.ndarray,
                          counter: Optional[MacCounter] = None) -> np.ndarray:
    scores = masked_matmul(q, k.T, mask, "attention_dense", counter) / math.sqrt(q.shape[-1])
    return softmax(np.where(mask, scores, -np.inf))


def dense_attend_heads(state: SequenceState, weights: LayerWeights, config: AttentionConfig,
                       counter: Optional[MacCounter] = None) -> np.ndarray:
    """Per-head causal attention output, shape ``(heads, S, d_k)``."""
    q, k, v = project_heads(state, weights, config, counter)
    mask = causal_mask(state.num_tokens)
    out = np.empty_like(q)
    for h in range(config.num_heads):
        probs = dense_attention_probs(q[h], k[h], mask, counter)
        out[h] = masked_matmul(probs, v[h], mask, "attention_dense", counter, mask_on="lhs")
    return out


def dense_attend(state: SequenceState, weights: LayerWeights, config: AttentionConfig,
                 counter: Optional[MacCounter] = None) -> np.ndarray:
    """Full causal multi-head attention sublayer output (before the residual add)."""
    return merge_heads(dense_attend_heads(state, weights, config, counter), weights, counter)


def ffn_rows(x: np.ndarray, weights: LayerWeights, config: FfnConfig, scope: str,
             counter: Optional[MacCounter] = None) -> np.ndarray:
    """Residual FFN update ``x + FFN(norm(x))`` for a block of rows."""
    if x.shape[0] == 0:
        return x.copy()
    return x + ffn_transform(rms_norm(x, weights.ffn_gain), weights, config.activation, scope, counter)


def dense_ffn(state: SequenceState, weights: LayerWeights, config: FfnConfig,
              counter: Optional[MacCounter] = None) -> np.ndarray:
    """Dense FFN sublayer including its residual.

    Vision and text rows are evaluated as separate blocks so text rows are
    bit-identical to the sparse sublayer's dense text path.
    """
    x = state.embeddings
    nv = state.num_vision
    return np.concatenate([
        ffn_rows(x[:nv], weights, config, "ffn_vision", counter),
        ffn_rows(x[nv:], weights, config, "ffn_text", counter),
    ])


def mass_count(weights: np.ndarray, threshold: float) -> np.ndarray:
    """Smallest number of top-ranked entries per row whose cumulative share reaches ``threshold``."""
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum(axis=-1, keepdims=True)
    cum = np.cumsum(-np.sort(-w, axis=-1), axis=-1)
    return np.minimum((cum < threshold - MASS_TOL).sum(axis=-1) + 1, w.shape[-1])


def cumulative_attention_profile(state: SequenceState, weights: LayerWeights,
                                 config: AttentionConfig, threshold: float = 0.7) -> Optional[float]:
    """Mean count of vision keys holding ``threshold`` of each text query's vision attention.

    Attention weights of a text query over the vision keys are renormalized to
    sum to one before ranking; the count is averaged over text queries and
    heads. Returns ``None`` when the sequence has no text tokens.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if state.num_text == 0:
        return None
    q, k, _ = project_heads(state, weights, config)
    nv, S = state.num_vision, state.num_tokens
    mask = causal_mask(S)[nv:]
    counts = []
    for h in range(config.num_heads):
        probs = dense_attention_probs(q[h, nv:], k[h], mask)
        counts.append(mass_count(probs[:, :nv], threshold))
    return float(np.mean(counts))
