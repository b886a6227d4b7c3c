"""Seeded synthetic workloads, multi-layer runs, ablation sweeps and diagnostics.

Reports are plain dicts ready for :func:`dump_json`; with identical config
and seed they serialize to identical bytes (wall time is only included on
request).
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .attention import AttnTrace, sparse_attend
from .cost import (CostInputs, build_flops_report, dense_attn_flops, dense_ffn_flops,
                   exact_causal_attn_flops, reconcile, sparse_attn_flops, sparse_ffn_flops)
from .dense import cumulative_attention_profile, dense_attend, dense_ffn
from .errors import ConfigError
from .ffn import FfnTrace, norm_ratio, sparse_ffn
from .kernels import MacCounter
from .layer import max_relative_error, stack_forward
from .layout import CubeLayout, CubeShape, GridShape, partition
from .model import AttentionConfig, FfnConfig, LayerWeights, SequenceState
from .selection import Strategy, TopK, TopP, Uniform, _ceil_count, parse_strategy

SCHEMA_VERSION = 1
MODES = ("sparse", "dense", "both")
RECONCILE_TOLERANCE = 0.05
CUMULATIVE_THRESHOLD = 0.7
HISTOGRAM_BINS = 20

# cube shapes (h, w, t) used for the cube_size sweep axis
CUBE_SIZES = {64: (4, 4, 4), 128: (8, 4, 4), 256: (8, 8, 4), 512: (8, 8, 8), 1024: (16, 16, 4)}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    grid: GridShape = field(default_factory=lambda: GridShape(8, 16, 16))
    cube: CubeShape = field(default_factory=lambda: CubeShape(8, 8, 4))
    num_text_tokens: int = 32
    num_layers: int = 4
    num_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    strategy: Strategy = field(default_factory=lambda: TopP(0.7))
    # overrides the FFN token selection; None means "same as strategy"
    ffn_strategy: Optional[Strategy] = None
    mean_compensation: bool = True
    mode: str = "sparse"
    # weight of the shared per-cube component in the synthetic embeddings
    structure: float = 1.0

    def validate(self) -> "RunConfig":
        for name in ("num_layers", "num_heads", "d_model", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_text_tokens < 0:
            raise ConfigError("num_text_tokens must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.structure < 0:
            raise ConfigError("structure must be >= 0")
        partition(self.grid, self.cube)
        self.attention_config()
        self.ffn_config()
        return self

    @property
    def layout(self) -> CubeLayout:
        return partition(self.grid, self.cube)

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(self.num_heads, self.d_model, self.strategy)

    def ffn_config(self) -> FfnConfig:
        return FfnConfig(self.d_model, self.d_ff, self.ffn_strategy or self.strategy, self.mean_compensation)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "grid": str(self.grid), "cube": str(self.cube),
            "num_text_tokens": self.num_text_tokens, "num_layers": self.num_layers,
            "num_heads": self.num_heads, "d_model": self.d_model, "d_ff": self.d_ff,
            "strategy": str(self.strategy),
            "ffn_strategy": str(self.ffn_strategy or self.strategy),
            "mean_compensation": self.mean_compensation, "mode": self.mode,
            "structure": self.structure,
        }


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"cannot parse boolean {text!r}")


def _int(text) -> int:
    try:
        return int(text)
    except (TypeError, ValueError):
        raise ConfigError(f"expected an integer, got {text!r}") from None


def _float(text) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ConfigError(f"expected a number, got {text!r}") from None


_KEYS = {
    "seed": ("seed", _int),
    "grid": ("grid", GridShape.parse),
    "cube": ("cube", CubeShape.parse),
    "text_tokens": ("num_text_tokens", _int),
    "num_text_tokens": ("num_text_tokens", _int),
    "layers": ("num_layers", _int),
    "num_layers": ("num_layers", _int),
    "heads": ("num_heads", _int),
    "num_heads": ("num_heads", _int),
    "d_model": ("d_model", _int),
    "d_ff": ("d_ff", _int),
    "strategy": ("strategy", parse_strategy),
    "ffn_strategy": ("ffn_strategy", parse_strategy),
    "p": ("strategy", lambda v: TopP(_float(v))),
    "mean_compensation": ("mean_compensation", _parse_bool),
    "mode": ("mode", str),
    "structure": ("structure", _float),
}


def config_from_mapping(values: Mapping[str, object], base: Optional[RunConfig] = None) -> RunConfig:
    """Apply ``key -> value`` overrides (strings or already-typed values) to ``base``."""
    updates = {}
    for key, raw in values.items():
        norm = key.strip().lower().replace("-", "_")
        if norm not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        attr, parse = _KEYS[norm]
        updates[attr] = parse(raw) if isinstance(raw, str) else raw
    return replace(base or RunConfig(), **updates)


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | Path, base: Optional[RunConfig] = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return config_from_mapping(parse_config_text(text), base)


# --------------------------------------------------------------------------
# workload
# --------------------------------------------------------------------------

def make_workload(config: RunConfig) -> tuple[SequenceState, list[LayerWeights]]:
    """Seeded embeddings (cube-major vision tokens, then text) and per-layer weights.

    Each vision token is ``scale * (structure * cube_component + noise)`` with a
    shared Gaussian component per cube and a log-normal per-token scale, so
    both cube relevance and token norms vary.
    """
    layout = config.layout
    N, C, d = layout.num_cubes, layout.tokens_per_cube, config.d_model
    vision_seq, text_seq, weight_seq = np.random.SeedSequence(config.seed).spawn(3)
    rv = np.random.default_rng(vision_seq)
    shared = rv.standard_normal((N, 1, d)) * config.structure
    noise = rv.standard_normal((N, C, d))
    scale = rv.lognormal(0.0, 0.5, size=(N, C, 1))
    vision = (scale * (shared + noise)).reshape(N * C, d)
    text = np.random.default_rng(text_seq).standard_normal((config.num_text_tokens, d))
    layers = [LayerWeights.random(np.random.default_rng(s), d, config.d_ff)
              for s in weight_seq.spawn(config.num_layers)]
    return SequenceState(np.concatenate([vision, text]), layout), layers


def cost_inputs(config: RunConfig) -> CostInputs:
    layout = config.layout
    nv = layout.num_tokens
    return CostInputs(S=nv + config.num_text_tokens, d_model=config.d_model, d_ff=config.d_ff,
                      C=layout.tokens_per_cube, num_vision=nv, num_text=config.num_text_tokens,
                      num_layers=config.num_layers)


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    """In-memory outcome of :func:`execute`; :func:`run` turns it into a report dict."""

    config: RunConfig
    state: SequenceState
    sparse_outputs: Optional[list[np.ndarray]] = None
    dense_outputs: Optional[list[np.ndarray]] = None
    sparse_counter: Optional[MacCounter] = None
    dense_counter: Optional[MacCounter] = None
    attn_trace: Optional[AttnTrace] = None
    ffn_trace: Optional[FfnTrace] = None

    def sparse_flops(self):
        return build_flops_report("sparse", cost_inputs(self.config), self.sparse_counter,
                                  self.attn_trace.layers, self.ffn_trace.layers)

    def dense_flops(self):
        return build_flops_report("dense", cost_inputs(self.config), self.dense_counter)


def execute(config: RunConfig) -> RunResult:
    config.validate()
    state, layers = make_workload(config)
    attn, ffn = config.attention_config(), config.ffn_config()
    result = RunResult(config, state)
    if config.mode in ("sparse", "both"):
        result.sparse_counter, result.attn_trace, result.ffn_trace = MacCounter(), AttnTrace(), FfnTrace()
        result.sparse_outputs = stack_forward(state, layers, attn, ffn, True, result.sparse_counter,
                                              result.attn_trace, result.ffn_trace)
    if config.mode in ("dense", "both"):
        result.dense_counter = MacCounter()
        result.dense_outputs = stack_forward(state, layers, attn, ffn, False, result.dense_counter)
    return result


def _floats(values: Iterable) -> list[float]:
    return [float(v) for v in values]


def _layer_summary(result: RunResult) -> Optional[dict]:
    if result.attn_trace is None:
        return None
    layout = result.state.layout
    C = layout.tokens_per_cube
    nv = result.state.num_vision
    by_cube = []
    for a in result.attn_trace.layers:
        vis = a.selected_counts[:, :nv].reshape(a.selected_counts.shape[0], layout.num_cubes, C)
        by_cube.append(_floats(vis.mean(axis=(0, 2))))
    return {
        "cubes_selected": [a.mean_selected for a in result.attn_trace.layers],
        "cubes_selected_by_query_cube": by_cube,
        "text_cube_frequency": [_floats(a.text_cube_frequency) for a in result.attn_trace.layers],
        "keep_ratio": [f.mean_keep_ratio for f in result.ffn_trace.layers],
        "keep_ratio_per_cube": [_floats(f.keep_ratio) for f in result.ffn_trace.layers],
    }


def run(config: RunConfig, timing: bool = False) -> dict:
    start = time.perf_counter()
    result = execute(config)
    layout = result.state.layout
    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": "run",
        "config": config.to_dict(),
        "tokens": {"vision": result.state.num_vision, "text": result.state.num_text,
                   "total": result.state.num_tokens, "cubes": layout.num_cubes,
                   "tokens_per_cube": layout.tokens_per_cube},
        "layers": _layer_summary(result),
        "flops": {"sparse": None, "dense": None},
        "reconciliation": {"tolerance": RECONCILE_TOLERANCE, "sparse": None, "dense": None},
        "equivalence": None,
    }
    if result.sparse_counter is not None:
        fr = result.sparse_flops()
        report["flops"]["sparse"] = fr.to_dict()
        report["reconciliation"]["sparse"] = reconcile(fr, RECONCILE_TOLERANCE).as_dict()
    if result.dense_counter is not None:
        fr = result.dense_flops()
        report["flops"]["dense"] = fr.to_dict()
        report["reconciliation"]["dense"] = reconcile(fr, RECONCILE_TOLERANCE).as_dict()
    if config.mode == "both":
        per_layer = [max_relative_error(s, d) for s, d in zip(result.sparse_outputs, result.dense_outputs)]
        report["equivalence"] = {"max_relative_error": max(per_layer), "per_layer": per_layer}
    if timing:
        report["wall_time_s"] = time.perf_counter() - start
    return report


def report_schema() -> dict:
    """JSON schema of the ``run`` report, shipped alongside the package."""
    return json.loads(resources.files(__package__).joinpath("report_schema.json").read_text())


def dump_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def run_csv(report: dict) -> str:
    """Per-layer table of a run report."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "cubes_selected", "keep_ratio", "equivalence_error"])
    layers = report["layers"]
    eq = report["equivalence"]
    for i in range(report["config"]["num_layers"]):
        writer.writerow([
            i,
            "" if layers is None else repr(layers["cubes_selected"][i]),
            "" if layers is None else repr(layers["keep_ratio"][i]),
            "" if eq is None else repr(eq["per_layer"][i]),
        ])
    return buf.getvalue()


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------

SWEEP_AXES = ("cube_shape", "cube_size", "p", "strategy")
SWEEP_COLUMNS = ("axis", "value", "status", "error", "cube", "strategy", "ffn_strategy", "tokens",
                 "n_bar", "r_bar", "attn_flops", "ffn_flops", "total_flops", "dense_flops",
                 "reduction_ratio")


def _selected_mean(layout: CubeLayout, num_text: int, counts_for) -> float:
    """Mean selected-cube count over all queries when a query with ``n`` candidates selects ``counts_for(n)``."""
    C, N = layout.tokens_per_cube, layout.num_cubes
    total = sum(counts_for(i) * C for i in range(N)) + counts_for(N) * num_text
    return total / (N * C + num_text)


def calibrate(kind: str, pilot_n_bar: float, pilot_r_bar: float, layout: CubeLayout,
              num_text: int) -> tuple[Strategy, Strategy]:
    """Top-K or uniform (attention, FFN) strategies matching a pilot top-p run's sparsity."""
    N, C = layout.num_cubes, layout.tokens_per_cube
    k_ffn = max(1, min(C, round(pilot_r_bar * C)))
    if kind == "topk":
        best = min(range(1, N + 1), key=lambda k: (abs(_selected_mean(layout, num_text, lambda n: min(k, n))
                                                       - pilot_n_bar), k))
        return TopK(best), TopK(k_ffn)
    if kind == "uniform":
        candidates = sorted({j / n for n in range(1, N + 1) for j in range(1, n + 1)})
        best = min(candidates, key=lambda r: (abs(_selected_mean(layout, num_text, lambda n: _ceil_count(r, n))
                                                  - pilot_n_bar), r))
        return Uniform(best), Uniform(k_ffn / C)
    raise ConfigError(f"cannot calibrate strategy kind {kind!r}")


def _strategy_value(value: str, base: RunConfig):
    attn_text, _, ffn_text = value.partition("/")
    kind, _, param = attn_text.strip().partition(":")
    if param.strip().lower() == "auto":
        if not isinstance(base.strategy, TopP):
            raise ConfigError("auto calibration needs a top-p base strategy")
        pilot = execute(replace(base, mode="sparse")).sparse_flops().inputs
        return calibrate(kind.strip().lower(), float(pilot.n_bar), float(pilot.r_bar),
                         base.layout, base.num_text_tokens)
    attn = parse_strategy(attn_text)
    return attn, parse_strategy(ffn_text) if ffn_text else attn


def _sweep_config(axis: str, value: str, base: RunConfig) -> RunConfig:
    if axis == "cube_shape":
        return replace(base, cube=CubeShape.parse(value))
    if axis == "cube_size":
        size = int(value)
        if size not in CUBE_SIZES:
            raise ConfigError(f"no cube shape registered for size {size}; known: {sorted(CUBE_SIZES)}")
        return replace(base, cube=CubeShape(*CUBE_SIZES[size]))
    if axis == "p":
        return replace(base, strategy=TopP(float(value)), ffn_strategy=None)
    if axis == "strategy":
        attn, ffn = _strategy_value(value, base)
        return replace(base, strategy=attn, ffn_strategy=ffn)
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def sweep_row(axis: str, value: str, base: RunConfig) -> dict:
    row = dict.fromkeys(SWEEP_COLUMNS, "")
    row.update(axis=axis, value=str(value))
    try:
        config = _sweep_config(axis, str(value), base).validate()
        fr = execute(replace(config, mode="sparse")).sparse_flops()
    except (ConfigError, ValueError) as exc:
        row.update(status="error", error=str(exc))
        return row
    m = fr.measured_macs
    row.update(
        status="ok", cube=str(config.cube), strategy=str(config.strategy),
        ffn_strategy=str(config.ffn_strategy or config.strategy), tokens=fr.inputs.S,
        n_bar=float(fr.inputs.n_bar), r_bar=float(fr.inputs.r_bar),
        attn_flops=2 * (m["attention_selected"] + m["attention_local"]),
        ffn_flops=2 * (m["ffn_vision"] + m["ffn_text"]),
        total_flops=fr.measured_total_flops, dense_flops=fr.dense_reference_flops,
        reduction_ratio=fr.reduction_ratio,
    )
    return row


def sweep(axis: str, values: Iterable, base: RunConfig) -> list[dict]:
    """One independent sparse run per value; incompatible values become error rows."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    return [sweep_row(axis, str(v), base) for v in values]


def rows_csv(rows: list[dict], columns=SWEEP_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------

def _population(per_layer: list[np.ndarray], edges: np.ndarray) -> dict:
    return {
        "per_layer_mean": [float(r.mean()) if r.size else None for r in per_layer],
        "per_layer_std": [float(r.std()) if r.size else None for r in per_layer],
        "histogram_counts": [np.histogram(r, bins=edges)[0].tolist() for r in per_layer],
    }


def diagnostics(config: RunConfig) -> dict:
    """Per-layer cumulative text-to-vision attention counts and FFN norm ratios by modality.

    Follows the sparse trajectory unless ``mode`` is ``dense``.
    """
    config.validate()
    state, layers = make_workload(config)
    attn, ffn = config.attention_config(), config.ffn_config()
    sparse = config.mode != "dense"
    cumulative, ratios = [], []
    attn_trace, ffn_trace = AttnTrace(), FfnTrace()
    x = state.embeddings
    for weights in layers:
        s = state.with_embeddings(x)
        profile = cumulative_attention_profile(s, weights, attn, CUMULATIVE_THRESHOLD)
        if profile is not None:
            cumulative.append(profile)
        if sparse:
            h = x + sparse_attend(s, weights, attn, None, attn_trace)
            y = sparse_ffn(state.with_embeddings(h), weights, ffn, None, ffn_trace)
        else:
            h = x + dense_attend(s, weights, attn)
            y = dense_ffn(state.with_embeddings(h), weights, ffn)
        ratios.append(norm_ratio(y, h))
        x = y
    nv = state.num_vision
    vision = [r[:nv] for r in ratios]
    text = [r[nv:] for r in ratios]
    everything = np.concatenate(ratios)
    edges = np.linspace(everything.min(), everything.max(), HISTOGRAM_BINS + 1)
    if edges[0] == edges[-1]:
        edges = np.linspace(edges[0] - 0.5, edges[0] + 0.5, HISTOGRAM_BINS + 1)
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "diagnostics",
        "config": config.to_dict(),
        "cumulative_attention": {"threshold": CUMULATIVE_THRESHOLD, "per_layer": cumulative},
        "norm_ratio": {
            "bin_edges": _floats(edges),
            "vision": _population(vision, edges),
            "text": _population(text, edges),
        },
        "selection": {
            "cubes_selected": [a.mean_selected for a in attn_trace.layers] if sparse else None,
            "keep_ratio": [f.mean_keep_ratio for f in ffn_trace.layers] if sparse else None,
        },
    }


# --------------------------------------------------------------------------
# analytical table
# --------------------------------------------------------------------------

def flops_table(config: RunConfig, n_bars: Iterable[float], r_bars: Iterable[float]) -> list[dict]:
    """Analytical per-layer FLOPs for each (n_bar, r_bar) pair on the config's shapes."""
    config.validate()
    i = cost_inputs(config)
    rows = []
    for n_bar in n_bars:
        for r_bar in r_bars:
            sa = sparse_attn_flops(i.S, n_bar, i.C, i.d_model)
            sf = sparse_ffn_flops(r_bar, i.num_vision, i.d_model, i.d_ff) + dense_ffn_flops(i.num_text, i.d_model, i.d_ff)
            da = dense_attn_flops(i.S, i.d_model)
            df = dense_ffn_flops(i.S, i.d_model, i.d_ff)
            rows.append({
                "S": i.S, "d_model": i.d_model, "d_ff": i.d_ff, "C": i.C,
                "n_bar": float(n_bar), "r_bar": float(r_bar),
                "dense_attn": da, "dense_attn_exact": exact_causal_attn_flops(i.S, i.d_model),
                "sparse_attn": float(sa), "dense_ffn": df, "sparse_ffn": float(sf),
                "reduction_ratio": 1.0 - float(sa + sf) / (da + df),
            })
    return rows


FLOPS_COLUMNS = ("S", "d_model", "d_ff", "C", "n_bar", "r_bar", "dense_attn", "dense_attn_exact",
                 "sparse_attn", "dense_ffn", "sparse_ffn", "reduction_ratio")
