"""Self-contained property suite behind ``cubesparse verify``.

Each check returns a :class:`CheckResult`. The selection checks take the
selector under test as an argument so a deliberately broken rule can be
injected to confirm the suite catches it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .attention import sparse_attend
from .cost import reconcile
from .dense import dense_attend, dense_ffn
from .ffn import sparse_ffn
from .harness import RunConfig, dump_json, execute, make_workload, run
from .layer import max_relative_error
from .layout import CubeShape, GridShape
from .model import SequenceState
from .selection import MASS_TOL, TopP, top_p_mask

Selector = Callable[[np.ndarray, float], np.ndarray]
FAULTS = ("boundary",)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}" + (f"  ({self.detail})" if self.detail else "")


def overshooting_selector(probs: np.ndarray, p: float) -> np.ndarray:
    """Top-p with the boundary rule broken: keeps one element past the crossing point."""
    probs = np.asarray(probs, dtype=np.float64)
    mask = top_p_mask(probs, p)
    order = np.argsort(-probs, kind="stable")
    extra = order[min(int(mask.sum()), len(order) - 1)]
    mask = mask.copy()
    mask[extra] = True
    return mask


def _selector_for(fault: Optional[str]) -> Selector:
    if fault is None:
        return top_p_mask
    if fault == "boundary":
        return overshooting_selector
    raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")


def brute_force_top_p(probs, p: float) -> set[int]:
    ranked = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
    if p >= 1.0:
        return set(ranked[:max(1, sum(1 for x in probs if x > 0))])
    for k in range(1, len(ranked) + 1):
        mass = 0.0
        for j in ranked[:k]:
            mass += probs[j]
        if mass >= p - MASS_TOL:
            return set(ranked[:k])
    return set(ranked)


def _random_dist(rng: np.random.Generator) -> np.ndarray:
    n = int(rng.integers(1, 33))
    w = rng.exponential(size=n) ** rng.uniform(0.5, 4.0)
    return w / w.sum()


def check_topp_oracle(select: Selector, trials: int = 2000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        d = _random_dist(rng)
        p = float(rng.uniform(0.05, 1.0))
        got = set(np.flatnonzero(select(d, p)).tolist())
        if got != brute_force_top_p(d.tolist(), p):
            return CheckResult("topp_bruteforce_oracle", False, f"n={len(d)} p={p:.4f}")
    return CheckResult("topp_bruteforce_oracle", True, f"{trials} distributions")


def check_topp_minimality(select: Selector, trials: int = 2000, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        d = _random_dist(rng)
        p = float(rng.uniform(0.05, 0.99))
        mask = select(d, p)
        mass = d[mask].sum()
        if mass < p - MASS_TOL or (mask.sum() > 1 and mass - d[mask].min() >= p - MASS_TOL):
            return CheckResult("topp_minimality", False, f"n={len(d)} p={p:.4f} size={int(mask.sum())}")
    return CheckResult("topp_minimality", True)


def check_topp_monotonic(select: Selector, trials: int = 1000, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        d = _random_dist(rng)
        p1, p2 = sorted(rng.uniform(0.05, 1.0, size=2))
        if np.any(select(d, p1) & ~select(d, p2)):
            return CheckResult("topp_monotonic", False, f"p1={p1:.4f} p2={p2:.4f}")
    return CheckResult("topp_monotonic", True)


def check_topp_permutation(select: Selector, trials: int = 1000, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        d = _random_dist(rng)
        p = float(rng.uniform(0.05, 1.0))
        perm = rng.permutation(len(d))
        if not np.array_equal(select(d[perm], p), select(d, p)[perm]):
            return CheckResult("topp_permutation", False, f"n={len(d)}")
    return CheckResult("topp_permutation", True)


def check_topp_uniform(select: Selector) -> CheckResult:
    for n in range(1, 33):
        for p in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0):
            want = max(1, math.ceil(round(p * n, 9)))
            got = int(select(np.full(n, 1.0 / n), p).sum())
            if got != want:
                return CheckResult("topp_uniform_ceil", False, f"n={n} p={p} got {got} want {want}")
    return CheckResult("topp_uniform_ceil", True)


def check_attention_equivalence(base: RunConfig, seeds=(0, 1)) -> CheckResult:
    worst = 0.0
    for seed in seeds:
        cfg = replace(base, seed=seed, strategy=TopP(1.0), ffn_strategy=None)
        state, layers = make_workload(cfg)
        attn = cfg.attention_config()
        worst = max(worst, max_relative_error(sparse_attend(state, layers[0], attn),
                                              dense_attend(state, layers[0], attn)))
    return CheckResult("attention_dense_equivalence_p1", worst < 1e-9, f"max rel err {worst:.2e}")


def check_ffn_equivalence(base: RunConfig) -> CheckResult:
    cfg = replace(base, strategy=TopP(1.0), ffn_strategy=None)
    state, layers = make_workload(cfg)
    worst = max_relative_error(sparse_ffn(state, layers[0], cfg.ffn_config()),
                               dense_ffn(state, layers[0], cfg.ffn_config()))
    C = state.layout.tokens_per_cube
    x = state.embeddings.copy()
    nv = state.num_vision
    x[:nv] = np.repeat(x[:nv:C], C, axis=0)
    homog = state.with_embeddings(x)
    for p in (0.3, 0.5, 0.7, 1.0):
        f = replace(cfg, strategy=TopP(p)).ffn_config()
        worst = max(worst, max_relative_error(sparse_ffn(homog, layers[0], f), dense_ffn(homog, layers[0], f)))
    return CheckResult("ffn_dense_equivalence", worst < 1e-9, f"max rel err {worst:.2e}")


def check_causality(base: RunConfig, pairs: int = 20, seed: int = 5) -> CheckResult:
    state, layers = make_workload(base)
    attn = base.attention_config()
    reference = sparse_attend(state, layers[0], attn)
    rng = np.random.default_rng(seed)
    S = state.num_tokens
    for _ in range(pairs):
        g = int(rng.integers(1, S))
        x = state.embeddings.copy()
        x[g] += rng.standard_normal(x.shape[1]) * 3.0
        out = sparse_attend(SequenceState(x, state.layout), layers[0], attn)
        if not np.array_equal(out[:g], reference[:g]):
            return CheckResult("attention_causality", False, f"perturbing {g} changed an earlier output")
    return CheckResult("attention_causality", True, f"{pairs} perturbations")


def check_reconciliation(base: RunConfig) -> CheckResult:
    fr = execute(replace(base, mode="sparse")).sparse_flops()
    rec = reconcile(fr, 0.05)
    ffn_exact = all(t.rel_error == 0.0 for t in rec.terms if t.name.startswith("ffn"))
    worst = max(t.rel_error for t in rec.terms if t.checked)
    return CheckResult("flops_reconciliation", rec.passed and ffn_exact, f"worst checked rel err {worst:.2e}")


def check_flops_monotonic(base: RunConfig) -> CheckResult:
    totals = []
    for p in (1.0, 0.9, 0.7, 0.5, 0.3):
        res = execute(replace(base, strategy=TopP(p), ffn_strategy=None, mode="sparse"))
        fr = res.sparse_flops()
        dense_attn = fr.analytical_dense_attn_exact // 2
        sparse_attn = fr.measured_macs["attention_selected"] + fr.measured_macs["attention_local"]
        if sparse_attn > dense_attn:
            return CheckResult("flops_monotonic", False, f"sparse attention exceeds dense at p={p}")
        totals.append(fr.measured_total_flops)
    ok = all(a >= b for a, b in zip(totals, totals[1:]))
    return CheckResult("flops_monotonic", ok, " >= ".join(f"{t:.3e}" for t in totals))


def check_determinism(base: RunConfig) -> CheckResult:
    a, b = dump_json(run(base)), dump_json(run(base))
    return CheckResult("report_determinism", a == b)


def verify_config(base: Optional[RunConfig] = None) -> RunConfig:
    """Small default workload for the suite; overrides must still validate."""
    cfg = base or RunConfig(grid=GridShape(4, 8, 8), cube=CubeShape(4, 4, 2), num_text_tokens=8,
                            num_layers=2, num_heads=2, d_model=32, d_ff=64)
    return cfg.validate()


def run_suite(base: Optional[RunConfig] = None, fault: Optional[str] = None,
              echo: Callable[[str], None] = print) -> list[CheckResult]:
    cfg = verify_config(base)
    select = _selector_for(fault)
    checks = [
        lambda: check_topp_oracle(select),
        lambda: check_topp_minimality(select),
        lambda: check_topp_monotonic(select),
        lambda: check_topp_permutation(select),
        lambda: check_topp_uniform(select),
        lambda: check_attention_equivalence(cfg),
        lambda: check_ffn_equivalence(cfg),
        lambda: check_causality(cfg),
        lambda: check_reconciliation(cfg),
        lambda: check_flops_monotonic(cfg),
        lambda: check_determinism(cfg),
    ]
    results = []
    for check in checks:
        result = check()
        echo(result.line())
        results.append(result)
    return results
