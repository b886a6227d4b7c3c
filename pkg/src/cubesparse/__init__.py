"""Cube-selective sparse attention and token-selective FFN for video token grids."""

from .attention import AttnTrace, cube_relevance, mean_keys, sparse_attend
from .cost import (FlopsReport, dense_attn_flops, dense_ffn_flops, reconcile, sparse_attn_flops,
                   sparse_ffn_flops)
from .dense import cumulative_attention_profile, dense_attend, dense_ffn
from .errors import ConfigError, ReportError, ShapeError
from .ffn import FfnTrace, importance, sparse_ffn
from .harness import RunConfig, diagnostics, run, sweep
from .kernels import MacCounter, apply_rope, l2_norm, matmul, softmax
from .layout import CubeLayout, CubeShape, GridShape, partition, token_index
from .model import AttentionConfig, FfnConfig, LayerWeights, SequenceState
from .selection import TopK, TopP, Uniform, select, top_k, top_p, uniform_sample

__version__ = "0.1.0"
