import math
from dataclasses import replace

import numpy as np
import pytest

from cubesparse.dense import (cumulative_attention_profile, dense_attend, dense_attend_heads,
                              dense_attention_probs, dense_ffn, causal_mask, mass_count)
from cubesparse.harness import make_workload
from cubesparse.layout import CubeShape, GridShape, partition
from cubesparse.model import (AttentionConfig, FfnConfig, LayerWeights, SequenceState, gelu,
                              project_heads)

from conftest import small_config


def state_of(x, cube_tokens=None):
    n = cube_tokens if cube_tokens is not None else x.shape[0]
    return SequenceState(np.asarray(x, dtype=np.float64), partition(GridShape(1, 1, n), CubeShape(1, n, 1)))


def naive_dense(state, weights, config):
    """Per-query, per-head scalar loop over the causal prefix."""
    q, k, v = project_heads(state, weights, config)
    H, S, dk = q.shape
    heads = np.zeros_like(q)
    for h in range(H):
        for i in range(S):
            logits = [sum(q[h, i, c] * k[h, j, c] for c in range(dk)) / math.sqrt(dk) for j in range(i + 1)]
            top = max(logits)
            e = [math.exp(s - top) for s in logits]
            z = sum(e)
            for c in range(dk):
                heads[h, i, c] = sum(e[j] / z * v[h, j, c] for j in range(i + 1))
    return heads.transpose(1, 0, 2).reshape(S, H * dk) @ weights.wo


def test_single_token_is_value_projection(rng):
    weights = LayerWeights.random(rng, 8, 16)
    state = state_of(rng.standard_normal((1, 8)))
    cfg = AttentionConfig(2, 8)
    x = state.embeddings
    h = x / np.sqrt(np.mean(x * x) + 1e-6)
    np.testing.assert_allclose(dense_attend(state, weights, cfg), h @ weights.wv @ weights.wo, atol=1e-12)


def test_identical_tokens_give_identical_head_outputs(rng):
    weights = LayerWeights.random(rng, 8, 16)
    state = state_of(np.tile(rng.standard_normal((1, 8)), (6, 1)))
    heads = dense_attend_heads(state, weights, AttentionConfig(2, 8))
    np.testing.assert_allclose(heads, np.broadcast_to(heads[:, :1], heads.shape), atol=1e-12)


def test_matches_naive_loop_at_64(rng):
    weights = LayerWeights.random(rng, 8, 16)
    state = state_of(rng.standard_normal((64, 8)), cube_tokens=60)
    cfg = AttentionConfig(2, 8)
    np.testing.assert_allclose(dense_attend(state, weights, cfg), naive_dense(state, weights, cfg),
                               rtol=0, atol=1e-10)


def test_rows_sum_to_one_and_are_causal(rng):
    q, k = rng.standard_normal((20, 4)), rng.standard_normal((20, 4))
    probs = dense_attention_probs(q, k, causal_mask(20))
    assert np.all(np.abs(probs.sum(axis=1) - 1) <= 1e-12)
    assert np.all(probs[np.triu_indices(20, 1)] == 0)


def test_exact_future_independence(rng):
    cfg = small_config()
    state, layers = make_workload(cfg)
    attn = cfg.attention_config()
    base = dense_attend(state, layers[0], attn)
    for g in (1, 40, state.num_tokens - 1):
        x = state.embeddings.copy()
        x[g:] += 5.0
        np.testing.assert_array_equal(dense_attend(state.with_embeddings(x), layers[0], attn)[:g], base[:g])


def test_heads_permutation_covariant(rng):
    d, H = 8, 2
    weights = LayerWeights.random(rng, d, 16)
    state = state_of(rng.standard_normal((10, d)))
    dk = d // H
    perm = np.concatenate([np.arange(dk, 2 * dk), np.arange(dk)])
    swapped = replace(weights, wq=weights.wq[:, perm], wk=weights.wk[:, perm], wv=weights.wv[:, perm])
    a = dense_attend_heads(state, weights, AttentionConfig(H, d))
    b = dense_attend_heads(state, swapped, AttentionConfig(H, d))
    np.testing.assert_allclose(b, a[::-1], atol=1e-12)


def test_ffn_zero_input_zero_gain(rng):
    weights = replace(LayerWeights.random(rng, 8, 16), ffn_gain=np.zeros(8))
    state = state_of(np.zeros((4, 8)))
    np.testing.assert_array_equal(dense_ffn(state, weights, FfnConfig(8, 16)), state.embeddings)


def test_ffn_single_token_scalar_loop(rng):
    d, f = 6, 10
    weights = replace(LayerWeights.random(rng, d, f), ffn_gain=rng.uniform(0.5, 1.5, d))
    x = rng.standard_normal(d)
    ms = sum(v * v for v in x) / d
    h = [x[i] / math.sqrt(ms + 1e-6) * weights.ffn_gain[i] for i in range(d)]
    up = [sum(h[i] * weights.w_up[i, j] for i in range(d)) for j in range(f)]
    act = [float(gelu(np.array(u))) for u in up]
    y = [x[c] + sum(act[j] * weights.w_down[j, c] for j in range(f)) for c in range(d)]
    out = dense_ffn(state_of(x[None, :]), weights, FfnConfig(d, f))
    np.testing.assert_allclose(out[0], y, rtol=0, atol=1e-12)


def test_identity_activation_is_linear_in_normed_input(rng):
    d, f = 8, 16
    weights = LayerWeights.random(rng, d, f)
    cfg = FfnConfig(d, f, activation="identity")
    x = rng.standard_normal((5, d))
    normed = x / np.sqrt(np.mean(x * x, axis=1, keepdims=True) + 1e-6)
    delta = dense_ffn(state_of(x), weights, cfg) - x
    np.testing.assert_allclose(delta, normed @ (weights.w_up @ weights.w_down), atol=1e-12)


def test_ffn_tokens_independent(rng):
    weights = LayerWeights.random(rng, 8, 16)
    x = rng.standard_normal((12, 8))
    perm = rng.permutation(12)
    cfg = FfnConfig(8, 16)
    np.testing.assert_allclose(dense_ffn(state_of(x[perm]), weights, cfg),
                               dense_ffn(state_of(x), weights, cfg)[perm], atol=1e-13)


def test_mass_count_examples():
    assert mass_count(np.full((1, 10), 0.1), 0.7).tolist() == [7]
    assert mass_count(np.array([[0.0, 1.0, 0.0]]), 0.7).tolist() == [1]
    assert mass_count(np.array([[1.0, 1.0, 6.0]]), 0.7).tolist() == [1]


def test_profile_uniform_attention(rng):
    weights = replace(LayerWeights.random(rng, 8, 16), wq=np.zeros((8, 8)))
    layout = partition(GridShape(1, 4, 5), CubeShape(4, 5, 1))
    state = SequenceState(rng.standard_normal((23, 8)), layout)
    # zero queries give every causal key the same weight
    assert cumulative_attention_profile(state, weights, AttentionConfig(2, 8), 0.7) == math.ceil(0.7 * 20)


def test_profile_without_text_is_none(rng):
    weights = LayerWeights.random(rng, 8, 16)
    assert cumulative_attention_profile(state_of(rng.standard_normal((4, 8))), weights, AttentionConfig(2, 8)) is None
    with pytest.raises(ValueError):
        cumulative_attention_profile(state_of(rng.standard_normal((4, 8))), weights, AttentionConfig(2, 8), 1.0)


def test_profile_sort_and_scan_oracle(rng):
    d, H = 8, 2
    weights = LayerWeights.random(rng, d, 16)
    layout = partition(GridShape(2, 8, 6), CubeShape(8, 6, 2))
    state = SequenceState(rng.standard_normal((128, d)) * 2, layout)
    nv = layout.num_tokens
    q, k, _ = project_heads(state, weights, AttentionConfig(H, d))
    counts = []
    for h in range(H):
        for i in range(nv, 128):
            logits = [float(q[h, i] @ k[h, j]) / math.sqrt(d // H) for j in range(i + 1)]
            top = max(logits)
            w = [math.exp(s - top) for s in logits[:nv]]
            z = sum(w)
            mass, n = 0.0, 0
            for share in sorted((x / z for x in w), reverse=True):
                mass += share
                n += 1
                if mass >= 0.7 - 1e-12:
                    break
            counts.append(n)
    assert cumulative_attention_profile(state, weights, AttentionConfig(H, d), 0.7) == sum(counts) / len(counts)
