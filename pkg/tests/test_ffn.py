import math

import numpy as np
import pytest

from cubesparse.dense import dense_ffn
from cubesparse.ffn import FfnTrace, importance, sparse_ffn
from cubesparse.kernels import MacCounter
from cubesparse.layer import max_relative_error
from cubesparse.layout import CubeShape, GridShape, partition
from cubesparse.model import FfnConfig, LayerWeights, SequenceState, gelu, rms_norm
from cubesparse.selection import TopK, TopP, Uniform


def one_token_ffn(x, weights, gain):
    h = rms_norm(x[None, :], gain)[0]
    return gelu(h @ weights.w_up) @ weights.w_down


def brute_force_ffn(x, weights, C, p, score_normalized=False):
    """Score, select and compensate one cube at a time with plain Python lists."""
    out = x.copy()
    for start in range(0, x.shape[0], C):
        rows = list(range(start, start + C))
        vecs = [rms_norm(x[r][None, :], weights.ffn_gain)[0] if score_normalized else x[r] for r in rows]
        norms = [math.sqrt(sum(float(t) ** 2 for t in v)) for v in vecs]
        raw = [n / (sum(norms) + 1e-6) for n in norms]
        probs = [s / sum(raw) for s in raw]
        ranked = sorted(range(C), key=lambda i: (-probs[i], i))
        mass, chosen = 0.0, []
        for i in ranked:
            chosen.append(i)
            mass += probs[i]
            if mass >= p - 1e-12:
                break
        delta = {i: one_token_ffn(x[rows[i]], weights, weights.ffn_gain) for i in chosen}
        mean = sum(delta.values()) / len(delta)
        for i in range(C):
            out[rows[i]] = x[rows[i]] + delta.get(i, mean)
    return out


def cube_state(rng, grid=(4, 4, 4), cube=(4, 4, 4), d=16, text=0):
    layout = partition(GridShape(*grid), CubeShape(*cube))
    n = layout.num_tokens
    x = rng.standard_normal((n + text, d)) * rng.lognormal(0, 0.7, size=(n + text, 1))
    return SequenceState(x, layout)


def test_importance_examples(rng):
    x = rng.standard_normal((6, 4))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    np.testing.assert_allclose(importance(x).probs, np.full(6, 1 / 6), rtol=1e-5)
    x[2] = 0.0
    assert importance(x).probs[2] == 0.0


def test_importance_scalar_reimplementation(rng):
    x = rng.standard_normal((8, 16))
    norms = [math.sqrt(sum(v * v for v in row)) for row in x.tolist()]
    expected = [n / (sum(norms) + 1e-6) for n in norms]
    np.testing.assert_allclose(importance(x, 1e-6).probs, expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("score_normalized", [False, True])
def test_matches_brute_force_oracle_seed_7(score_normalized):
    rng = np.random.default_rng(7)
    state = cube_state(rng)
    assert state.layout.tokens_per_cube == 64
    weights = LayerWeights.random(rng, 16, 32)
    cfg = FfnConfig(16, 32, TopP(0.7), score_normalized=score_normalized)
    got = sparse_ffn(state, weights, cfg)
    expected = brute_force_ffn(state.embeddings, weights, 64, 0.7, score_normalized)
    assert max_relative_error(got, expected) < 1e-9


def test_multi_cube_brute_force(rng):
    state = cube_state(rng, grid=(4, 8, 8), cube=(4, 4, 2))
    weights = LayerWeights.random(rng, 16, 32)
    got = sparse_ffn(state, weights, FfnConfig(16, 32, TopP(0.5)))
    expected = brute_force_ffn(state.embeddings, weights, 32, 0.5)
    assert max_relative_error(got, expected) < 1e-9


def test_p_one_equals_dense_exactly(rng):
    state = cube_state(rng, text=5)
    weights = LayerWeights.random(rng, 16, 32)
    cfg = FfnConfig(16, 32, TopP(1.0))
    np.testing.assert_array_equal(sparse_ffn(state, weights, cfg), dense_ffn(state, weights, cfg))


@pytest.mark.parametrize("p", [0.3, 0.5, 0.7, 1.0])
def test_homogeneous_cubes_match_dense(rng, p):
    layout = partition(GridShape(4, 8, 8), CubeShape(4, 4, 4))
    cube_rows = rng.standard_normal((layout.num_cubes, 1, 16))
    x = np.repeat(cube_rows, layout.tokens_per_cube, axis=1).reshape(-1, 16)
    state = SequenceState(x, layout)
    weights = LayerWeights.random(rng, 16, 32)
    cfg = FfnConfig(16, 32, TopP(p))
    assert max_relative_error(sparse_ffn(state, weights, cfg), dense_ffn(state, weights, cfg)) < 1e-9


def test_without_compensation_bypassed_rows_pass_through(rng):
    state = cube_state(rng)
    weights = LayerWeights.random(rng, 16, 32)
    trace = FfnTrace()
    y = sparse_ffn(state, weights, FfnConfig(16, 32, TopP(0.5), mean_compensation=False), trace=trace)
    unchanged = np.all(y == state.embeddings, axis=1)
    assert unchanged.sum() == 64 - trace.layers[0].activated.sum() > 0


def test_ffn_cost_is_per_activated_token(rng):
    state = cube_state(rng, grid=(4, 8, 8), cube=(4, 4, 2), text=3)
    weights = LayerWeights.random(rng, 16, 32)
    for strategy in (TopP(0.4), TopK(5), Uniform(0.25)):
        counter, trace = MacCounter(), FfnTrace()
        sparse_ffn(state, weights, FfnConfig(16, 32, strategy), counter, trace)
        activated = trace.layers[0].activated
        assert counter.ffn_vision == activated.sum() * 2 * 16 * 32
        assert counter.ffn_text == 3 * 2 * 16 * 32
        assert np.all(activated >= 1)


def test_text_rows_bit_identical(rng):
    state = cube_state(rng, text=7)
    weights = LayerWeights.random(rng, 16, 32)
    cfg = FfnConfig(16, 32, TopP(0.3))
    nv = state.num_vision
    np.testing.assert_array_equal(sparse_ffn(state, weights, cfg)[nv:], dense_ffn(state, weights, cfg)[nv:])


def test_every_token_reconstructs_from_own_or_mean_transform(rng):
    state = cube_state(rng, grid=(4, 8, 8), cube=(4, 4, 4))
    weights = LayerWeights.random(rng, 16, 32)
    cfg = FfnConfig(16, 32, TopP(0.6))
    x = state.embeddings
    delta = sparse_ffn(state, weights, cfg) - x
    own = dense_ffn(state, weights, cfg) - x
    C = 64
    for c in range(x.shape[0] // C):
        rows = slice(c * C, (c + 1) * C)
        is_own = np.all(np.abs(delta[rows] - own[rows]) < 1e-12, axis=1)
        mean = own[rows][is_own].mean(axis=0)
        assert is_own.any()
        np.testing.assert_allclose(delta[rows][~is_own], np.broadcast_to(mean, delta[rows][~is_own].shape),
                                   rtol=0, atol=1e-12)
