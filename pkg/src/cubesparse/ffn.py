"""Token-selective FFN with mean compensation.

Within each vision cube, tokens are scored by their share of the cube's
total L2 norm; the selected tokens run through the FFN and every bypassed
token receives the mean FFN transformation of its cube's selected tokens.
Text tokens always take the dense path.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dense import ffn_rows
from .kernels import MacCounter, l2_norm
from .model import FfnConfig, LayerWeights, SequenceState, ffn_transform, rms_norm
from .selection import SelectionDistribution, select_mask


@dataclass
class FfnLayerStats:
    activated: np.ndarray  # (cubes,) tokens sent through the FFN per cube
    tokens_per_cube: int
    norm_ratio: np.ndarray  # (S,) ||y|| / ||x||
    num_vision: int

    @property
    def keep_ratio(self) -> np.ndarray:
        return self.activated / self.tokens_per_cube

    @property
    def mean_keep_ratio(self) -> float:
        return float(self.activated.sum() / (self.activated.size * self.tokens_per_cube))


@dataclass
class FfnTrace:
    layers: list[FfnLayerStats] = field(default_factory=list)


def importance_scores(norms: np.ndarray, epsilon: float) -> np.ndarray:
    norms = np.asarray(norms, dtype=np.float64)
    return norms / (norms.sum(axis=-1, keepdims=True) + epsilon)


def _renormalize(scores: np.ndarray) -> np.ndarray:
    total = scores.sum(axis=-1, keepdims=True)
    # an all-zero cube has no preferred token; fall back to uniform
    flat = np.full_like(scores, 1.0 / scores.shape[-1])
    return np.divide(scores, total, out=flat, where=total > 0)


def importance(cube_embeddings: np.ndarray, epsilon: float = 1e-6) -> SelectionDistribution:
    """Norm-share scores ``||x_j|| / (sum_k ||x_k|| + eps)`` for one cube (not renormalized)."""
    return SelectionDistribution(importance_scores(l2_norm(cube_embeddings, axis=-1), epsilon),
                                 "token-importance")


def norm_ratio(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    pre, post = l2_norm(x, axis=-1), l2_norm(y, axis=-1)
    return np.divide(post, pre, out=np.ones_like(pre), where=pre > 0)


def sparse_ffn(state: SequenceState, weights: LayerWeights, config: FfnConfig,
               counter: Optional[MacCounter] = None,
               trace: Optional[FfnTrace] = None) -> np.ndarray:
    """Token-selective FFN sublayer including its residual, shape ``(S, d_model)``."""
    x = state.embeddings
    layout = state.layout
    nv, N, C = state.num_vision, layout.num_cubes, layout.tokens_per_cube
    xv = x[:nv]
    normed = rms_norm(xv, weights.ffn_gain)
    scored = normed if config.score_normalized else xv
    norms = l2_norm(scored, axis=-1, counter=counter).reshape(N, C)
    probs = _renormalize(importance_scores(norms, config.epsilon))
    active = select_mask(probs, config.strategy).reshape(-1)
    idx = np.flatnonzero(active)

    transformed = ffn_transform(normed[idx], weights, config.activation, "ffn_vision", counter)
    yv = xv.copy()
    yv[idx] += transformed
    activated = active.reshape(N, C).sum(axis=1)
    if config.mean_compensation:
        scattered = np.zeros_like(xv)
        scattered[idx] = transformed
        cube_mean = scattered.reshape(N, C, -1).sum(axis=1) / activated[:, None]
        bypassed = np.flatnonzero(~active)
        yv[bypassed] += cube_mean[bypassed // C]

    y = np.concatenate([yv, ffn_rows(x[nv:], weights, config, "ffn_text", counter)])
    if trace is not None:
        trace.layers.append(FfnLayerStats(activated, C, norm_ratio(y, x), nv))
    return y
