"""Layer weights, sequence state and the pieces shared by sparse and dense sublayers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .kernels import MacCounter, apply_rope, matmul
from .layout import CubeLayout
from .selection import Strategy, TopP

NORM_EPS = 1e-6


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int
    d_model: int
    strategy: Strategy = field(default_factory=lambda: TopP(0.7))

    def __post_init__(self):
        if self.num_heads < 1 or self.d_model < 1:
            raise ConfigError("num_heads and d_model must be >= 1")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.d_k % 2:
            raise ConfigError(f"head dimension {self.d_k} must be even for rotary encoding")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads


@dataclass(frozen=True)
class FfnConfig:
    d_model: int
    d_ff: int
    strategy: Strategy = field(default_factory=lambda: TopP(0.7))
    mean_compensation: bool = True
    epsilon: float = 1e-6
    activation: str = "gelu"
    # score tokens on the normalized sublayer input instead of the residual stream
    score_normalized: bool = False

    def __post_init__(self):
        if self.d_ff < 1 or self.d_model < 1:
            raise ConfigError("d_model and d_ff must be >= 1")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    attn_gain: np.ndarray
    ffn_gain: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator, d_model: int, d_ff: int) -> "LayerWeights":
        """Gaussian init with 1/sqrt(fan_in) scale; unit norm gains."""
        def gauss(rows, cols):
            return rng.standard_normal((rows, cols)) / math.sqrt(rows)

        return cls(
            wq=gauss(d_model, d_model), wk=gauss(d_model, d_model),
            wv=gauss(d_model, d_model), wo=gauss(d_model, d_model),
            w_up=gauss(d_model, d_ff), w_down=gauss(d_ff, d_model),
            attn_gain=np.ones(d_model), ffn_gain=np.ones(d_model),
        )

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_ff(self) -> int:
        return self.w_up.shape[1]

    def with_head_zeroed(self, head: int, num_heads: int) -> "LayerWeights":
        """Copy with the query/key/value columns of one head set to zero."""
        d_k = self.d_model // num_heads
        cols = slice(head * d_k, (head + 1) * d_k)
        out = {}
        for name in ("wq", "wk", "wv"):
            w = getattr(self, name).copy()
            w[:, cols] = 0.0
            out[name] = w
        return replace(self, **out)


@dataclass(frozen=True)
class SequenceState:
    """Cube-major vision tokens followed by text tokens."""

    embeddings: np.ndarray
    layout: CubeLayout

    def __post_init__(self):
        x = self.embeddings
        if x.ndim != 2:
            raise ShapeError(f"embeddings must be 2-D, got shape {x.shape}")
        if x.shape[0] < self.layout.num_tokens:
            raise ShapeError(f"{x.shape[0]} rows cannot hold {self.layout.num_tokens} vision tokens")

    @property
    def num_tokens(self) -> int:
        return self.embeddings.shape[0]

    @property
    def num_vision(self) -> int:
        return self.layout.num_tokens

    @property
    def num_text(self) -> int:
        return self.num_tokens - self.num_vision

    @property
    def is_text(self) -> np.ndarray:
        return np.arange(self.num_tokens) >= self.num_vision

    @property
    def modality(self) -> list[str]:
        return ["vision"] * self.num_vision + ["text"] * self.num_text

    def with_embeddings(self, x: np.ndarray) -> "SequenceState":
        return SequenceState(np.asarray(x, dtype=np.float64), self.layout)


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    scale = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * scale * gain


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


ACTIVATIONS = {"gelu": gelu, "identity": lambda x: x}


def ffn_transform(h: np.ndarray, weights: LayerWeights, activation: str = "gelu",
                  scope: str = "ffn_vision", counter: Optional[MacCounter] = None) -> np.ndarray:
    """``act(h W_up) W_down`` on already-normalized rows (no residual)."""
    up = matmul(h, weights.w_up, scope, counter)
    return matmul(ACTIVATIONS[activation](up), weights.w_down, scope, counter)


def project_heads(state: SequenceState, weights: LayerWeights, config: AttentionConfig,
                  counter: Optional[MacCounter] = None):
    """Normalize, project and rotate; returns ``(q, k, v)`` each shaped ``(heads, S, d_k)``."""
    h = rms_norm(state.embeddings, weights.attn_gain)
    S, H, dk = state.num_tokens, config.num_heads, config.d_k
    positions = np.arange(S)
    split = lambda m: m.reshape(S, H, dk).transpose(1, 0, 2)
    q = apply_rope(split(matmul(h, weights.wq, "projection", counter)), positions)
    k = apply_rope(split(matmul(h, weights.wk, "projection", counter)), positions)
    v = split(matmul(h, weights.wv, "projection", counter))
    return q, k, v


def merge_heads(heads_out: np.ndarray, weights: LayerWeights,
                counter: Optional[MacCounter] = None) -> np.ndarray:
    H, S, dk = heads_out.shape
    return matmul(heads_out.transpose(1, 0, 2).reshape(S, H * dk), weights.wo, "projection", counter)
