"""Pre-norm transformer layers built from the sparse or dense sublayers."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .attention import AttnTrace, sparse_attend
from .dense import dense_attend, dense_ffn
from .ffn import FfnTrace, sparse_ffn
from .kernels import MacCounter
from .model import AttentionConfig, FfnConfig, LayerWeights, SequenceState


def layer_forward(state: SequenceState, weights: LayerWeights, attn: AttentionConfig, ffn: FfnConfig,
                  sparse: bool = True, counter: Optional[MacCounter] = None,
                  attn_trace: Optional[AttnTrace] = None,
                  ffn_trace: Optional[FfnTrace] = None) -> np.ndarray:
    x = state.embeddings
    if sparse:
        h = x + sparse_attend(state, weights, attn, counter, attn_trace)
        return sparse_ffn(state.with_embeddings(h), weights, ffn, counter, ffn_trace)
    h = x + dense_attend(state, weights, attn, counter)
    return dense_ffn(state.with_embeddings(h), weights, ffn, counter)


def stack_forward(state: SequenceState, layers: Sequence[LayerWeights], attn: AttentionConfig,
                  ffn: FfnConfig, sparse: bool = True, counter: Optional[MacCounter] = None,
                  attn_trace: Optional[AttnTrace] = None,
                  ffn_trace: Optional[FfnTrace] = None) -> list[np.ndarray]:
    """Run every layer in turn; returns the output of each layer."""
    outputs = []
    x = state.embeddings
    for weights in layers:
        x = layer_forward(state.with_embeddings(x), weights, attn, ffn, sparse, counter, attn_trace, ffn_trace)
        outputs.append(x)
    return outputs


def max_relative_error(actual: np.ndarray, reference: np.ndarray) -> float:
    """``max |actual - reference| / max |reference|``."""
    scale = float(np.max(np.abs(reference)))
    diff = float(np.max(np.abs(np.asarray(actual) - np.asarray(reference))))
    return diff / scale if scale > 0 else diff
