"""Analytical FLOPs formulas and reconciliation against measured MAC counts.

One multiply-accumulate is two FLOPs. The formulas cover the QK^T / AV
products of attention and the up/down projections of the FFN; Q/K/V/O
projections and selection overhead are measured and reported but are not
part of any formula.

Observed averages (selected cubes per query, activation ratio) are carried
as :class:`fractions.Fraction` so that formula evaluation is exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Real
from typing import Optional

from .errors import ConfigError, ReportError
from .kernels import MacCounter


def dense_attn_flops(S: int, d_model: int) -> Real:
    """Causal-average approximation ``2 S^2 d_model``."""
    if S < 1:
        raise ConfigError("S must be >= 1")
    return 2 * S * S * d_model


def exact_causal_attn_flops(S: int, d_model: int) -> int:
    """QK^T plus AV over the literal causal set: each query ``q`` sees ``q + 1`` keys."""
    return 2 * 2 * d_model * (S * (S + 1) // 2)


def sparse_attn_flops(S: int, n_bar: Real, C: int, d_model: int) -> Real:
    """``4 S n_bar C d_model``; the always-attended local prefix is not included."""
    if n_bar < 0:
        raise ConfigError("average selected cubes must be >= 0")
    if n_bar * C > S:
        raise ConfigError(f"n_bar * C = {float(n_bar * C):g} exceeds S = {S}")
    return 4 * S * n_bar * C * d_model


def dense_ffn_flops(S: int, d_model: int, d_ff: int) -> int:
    if S < 0:
        raise ConfigError("S must be >= 0")
    return 4 * S * d_model * d_ff


def sparse_ffn_flops(r_bar: Real, S: int, d_model: int, d_ff: int) -> Real:
    if not 0 < r_bar <= 1:
        raise ConfigError(f"activation ratio must lie in (0, 1], got {float(r_bar)}")
    return 4 * r_bar * S * d_model * d_ff


def projection_flops(S: int, d_model: int) -> int:
    return 2 * 4 * S * d_model * d_model


@dataclass
class CostInputs:
    S: int
    d_model: int
    d_ff: int
    C: int
    num_vision: int
    num_text: int
    num_layers: int = 1
    n_bar: Optional[Fraction] = None
    r_bar: Optional[Fraction] = None
    local_avg: Optional[Fraction] = None

    def dense_total_flops(self) -> int:
        """Exact FLOPs of the dense stack, projections included."""
        per_layer = (exact_causal_attn_flops(self.S, self.d_model)
                     + dense_ffn_flops(self.S, self.d_model, self.d_ff)
                     + projection_flops(self.S, self.d_model))
        return self.num_layers * per_layer


@dataclass
class FlopsReport:
    mode: str
    inputs: CostInputs
    measured_macs: dict[str, int] = field(default_factory=dict)

    def measured_flops(self, scope: str) -> int:
        try:
            return 2 * self.measured_macs[scope]
        except KeyError:
            raise ReportError(f"report has no measured {scope!r} MACs") from None

    @property
    def measured_total_flops(self) -> int:
        return 2 * sum(self.measured_macs.values())

    @property
    def measured_attn_ffn_flops(self) -> int:
        m = self.measured_macs
        return 2 * sum(m.get(k, 0) for k in ("attention_selected", "attention_local", "attention_dense",
                                               "ffn_vision", "ffn_text"))

    # analytical values are summed over layers
    @property
    def analytical_dense_attn(self) -> Real:
        i = self.inputs
        return i.num_layers * dense_attn_flops(i.S, i.d_model)

    @property
    def analytical_dense_attn_exact(self) -> int:
        i = self.inputs
        return i.num_layers * exact_causal_attn_flops(i.S, i.d_model)

    @property
    def analytical_sparse_attn(self) -> Optional[Real]:
        i = self.inputs
        if i.n_bar is None:
            return None
        return i.num_layers * sparse_attn_flops(i.S, i.n_bar, i.C, i.d_model)

    @property
    def analytical_dense_ffn(self) -> int:
        i = self.inputs
        return i.num_layers * dense_ffn_flops(i.S, i.d_model, i.d_ff)

    @property
    def analytical_sparse_ffn(self) -> Optional[Real]:
        """Vision rows at the observed activation ratio; text rows dense."""
        i = self.inputs
        if i.r_bar is None:
            return None
        return i.num_layers * (sparse_ffn_flops(i.r_bar, i.num_vision, i.d_model, i.d_ff)
                               + dense_ffn_flops(i.num_text, i.d_model, i.d_ff))

    @property
    def dense_reference_flops(self) -> int:
        return self.inputs.dense_total_flops()

    @property
    def dense_reference_attn_ffn_flops(self) -> int:
        i = self.inputs
        return self.analytical_dense_attn_exact + self.analytical_dense_ffn

    @property
    def reduction_ratio(self) -> float:
        """``1 - sparse / dense`` over every counted MAC (projections and overhead included)."""
        return 1.0 - self.measured_total_flops / self.dense_reference_flops

    @property
    def attn_ffn_reduction_ratio(self) -> float:
        return 1.0 - self.measured_attn_ffn_flops / self.dense_reference_attn_ffn_flops

    def to_dict(self) -> dict:
        i = self.inputs
        opt = lambda v: None if v is None else float(v)
        return {
            "mode": self.mode,
            "inputs": {
                "S": i.S, "num_vision": i.num_vision, "num_text": i.num_text,
                "d_model": i.d_model, "d_ff": i.d_ff, "C": i.C, "num_layers": i.num_layers,
                "n_bar": opt(i.n_bar), "r_bar": opt(i.r_bar), "local_avg": opt(i.local_avg),
            },
            "measured_macs": dict(sorted(self.measured_macs.items())),
            "measured_total_flops": self.measured_total_flops,
            "analytical": {
                "dense_attn": float(self.analytical_dense_attn),
                "dense_attn_exact": self.analytical_dense_attn_exact,
                "sparse_attn": opt(self.analytical_sparse_attn),
                "dense_ffn": self.analytical_dense_ffn,
                "sparse_ffn": opt(self.analytical_sparse_ffn),
            },
            "dense_reference_flops": self.dense_reference_flops,
            "reduction_ratio": self.reduction_ratio,
            "attn_ffn_reduction_ratio": self.attn_ffn_reduction_ratio,
        }


def build_flops_report(mode: str, inputs: CostInputs, counter: MacCounter,
                       attn_layers=(), ffn_layers=()) -> FlopsReport:
    """Attach measured counters and, for sparse runs, the observed averages taken from traces."""
    if mode == "sparse":
        heads = attn_layers[0].selected_counts.shape[0]
        pairs = inputs.num_layers * heads * inputs.S
        selected = sum(int(a.selected_counts.sum()) for a in attn_layers)
        local = sum(int(a.attended_tokens.sum()) for a in attn_layers) - selected * inputs.C
        inputs.n_bar = Fraction(selected, pairs)
        inputs.local_avg = Fraction(local, pairs)
        if inputs.num_vision:
            activated = sum(int(f.activated.sum()) for f in ffn_layers)
            inputs.r_bar = Fraction(activated, inputs.num_layers * inputs.num_vision)
    return FlopsReport(mode, inputs, counter.as_dict())


@dataclass
class TermCheck:
    name: str
    analytical: float
    measured: float
    rel_error: float
    checked: bool
    passed: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Reconciliation:
    passed: bool
    terms: list[TermCheck]

    def as_dict(self) -> dict:
        return {"passed": self.passed, "terms": [t.as_dict() for t in self.terms]}


def _rel(analytical, measured) -> float:
    diff = abs(Fraction(analytical) - Fraction(measured))
    if diff == 0:
        return 0.0
    return float(diff / abs(Fraction(measured))) if measured else float("inf")


def _term(name, analytical, measured, tolerance, checked=True) -> TermCheck:
    err = _rel(analytical, measured)
    return TermCheck(name, float(analytical), float(measured), err, checked,
                     (err <= tolerance) if checked else True)


def reconcile(report: FlopsReport, tolerance: float = 0.0) -> Reconciliation:
    """Compare each formula with its measured counterpart at relative ``tolerance``.

    Informational terms (local prefix, causal approximation) are listed with
    ``checked=False`` and never fail the result.
    """
    i = report.inputs
    terms: list[TermCheck] = []
    if report.mode == "dense":
        measured = report.measured_flops("attention_dense")
        terms.append(_term("attention_dense_exact", report.analytical_dense_attn_exact, measured, tolerance))
        terms.append(_term("attention_dense_approx", report.analytical_dense_attn, measured, tolerance,
                           checked=False))
        terms.append(_term("ffn", report.analytical_dense_ffn,
                           report.measured_flops("ffn_vision") + report.measured_flops("ffn_text"), tolerance))
    elif report.mode == "sparse":
        if i.n_bar is None or i.local_avg is None or (i.num_vision and i.r_bar is None):
            raise ReportError("sparse report lacks observed n_bar / r_bar / local_avg")
        terms.append(_term("attention_selected", report.analytical_sparse_attn,
                           report.measured_flops("attention_selected"), tolerance))
        terms.append(_term("attention_local", i.num_layers * 4 * i.S * i.local_avg * i.d_model,
                           report.measured_flops("attention_local"), tolerance, checked=False))
        terms.append(_term("ffn_vision", i.num_layers * sparse_ffn_flops(i.r_bar, i.num_vision, i.d_model, i.d_ff),
                           report.measured_flops("ffn_vision"), tolerance))
        terms.append(_term("ffn_text", i.num_layers * dense_ffn_flops(i.num_text, i.d_model, i.d_ff),
                           report.measured_flops("ffn_text"), tolerance))
    else:
        raise ReportError(f"unknown report mode {report.mode!r}")
    return Reconciliation(all(t.passed for t in terms), terms)
