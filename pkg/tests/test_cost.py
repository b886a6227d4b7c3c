from fractions import Fraction

import pytest

from cubesparse.cost import (CostInputs, FlopsReport, dense_attn_flops, dense_ffn_flops,
                             exact_causal_attn_flops, reconcile, sparse_attn_flops, sparse_ffn_flops)
from cubesparse.errors import ConfigError, ReportError
from cubesparse.harness import execute
from cubesparse.selection import TopP

from conftest import small_config


def test_dense_attention_examples():
    assert dense_attn_flops(256, 64) == 8_388_608
    assert dense_attn_flops(1, 64) == 128
    assert dense_attn_flops(512, 64) == 4 * dense_attn_flops(256, 64)


def test_exact_causal_count():
    # each query q attends q + 1 keys: 2 FLOPs per MAC, QK^T and AV
    assert exact_causal_attn_flops(256, 64) == 2 * 2 * 64 * sum(q + 1 for q in range(256)) == 8_421_376
    for S in (1, 7, 256, 4096):
        assert Fraction(dense_attn_flops(S, 64), exact_causal_attn_flops(S, 64)) == Fraction(S, S + 1)


def test_sparse_attention_examples():
    assert sparse_attn_flops(1024, 2, 64, 64) == 33_554_432
    assert sparse_attn_flops(1024, 0, 64, 64) == 0
    with pytest.raises(ConfigError):
        sparse_attn_flops(100, 2, 64, 64)


def test_ffn_examples():
    assert dense_ffn_flops(1, 2, 4) == 32
    assert dense_ffn_flops(10, 2, 4) == 10 * 32
    assert sparse_ffn_flops(1, 128, 16, 32) == dense_ffn_flops(128, 16, 32)
    assert sparse_ffn_flops(Fraction(1, 4), 128, 16, 32) * 2 == sparse_ffn_flops(Fraction(1, 2), 128, 16, 32)
    with pytest.raises(ConfigError):
        sparse_ffn_flops(0, 128, 16, 32)


def test_dense_run_reconciles_exactly():
    result = execute(small_config(mode="dense"))
    report = result.dense_flops()
    rec = reconcile(report, 0.0)
    assert rec.passed
    terms = {t.name: t for t in rec.terms}
    assert terms["ffn"].rel_error == 0.0 and terms["attention_dense_exact"].rel_error == 0.0
    assert not terms["attention_dense_approx"].checked


def test_sparse_run_reconciles():
    result = execute(small_config(strategy=TopP(0.7)))
    rec = reconcile(result.sparse_flops(), 0.05)
    terms = {t.name: t for t in rec.terms}
    assert rec.passed
    assert terms["ffn_vision"].rel_error == 0.0 and terms["ffn_text"].rel_error == 0.0
    assert terms["attention_selected"].rel_error <= 0.05


def test_p_one_sparse_attention_equals_dense_measured():
    result = execute(small_config(strategy=TopP(1.0), mode="both"))
    sparse, dense = result.sparse_counter, result.dense_counter
    assert sparse.attention_selected + sparse.attention_local == dense.attention_dense
    assert sparse.ffn_macs == dense.ffn_macs


def test_missing_fields():
    inputs = CostInputs(S=10, d_model=4, d_ff=8, C=5, num_vision=10, num_text=0)
    with pytest.raises(ReportError):
        reconcile(FlopsReport("sparse", inputs, {}))
    with pytest.raises(ReportError):
        reconcile(FlopsReport("dense", inputs, {}))
    with pytest.raises(ReportError):
        reconcile(FlopsReport("other", inputs, {}))


def test_reduction_ratio_definition():
    result = execute(small_config(mode="both"))
    report = result.sparse_flops()
    assert report.reduction_ratio == pytest.approx(1 - report.measured_total_flops / report.dense_reference_flops)
    assert result.dense_flops().measured_total_flops == report.dense_reference_flops
