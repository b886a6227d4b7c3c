"""Command-line entry point: ``cubesparse {run,verify,sweep,diagnostics,flops}``.

Exit status: 0 success, 1 property failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .checks import FAULTS, run_suite
from .errors import ConfigError
from .harness import (FLOPS_COLUMNS, SWEEP_AXES, RunConfig, config_from_mapping, diagnostics,
                      dump_json, flops_table, load_config, rows_csv, run, run_csv, sweep)

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2

# flag dest -> config key
_OVERRIDES = {
    "seed": "seed", "mode": "mode", "p": "p", "strategy": "strategy", "ffn_strategy": "ffn_strategy",
    "cube": "cube", "grid": "grid", "layers": "layers", "heads": "heads", "d_model": "d_model",
    "d_ff": "d_ff", "text_tokens": "text_tokens", "structure": "structure",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("workload")
    g.add_argument("--config", metavar="PATH", help="flat key=value config file")
    g.add_argument("--seed", type=str)
    g.add_argument("--mode", choices=("sparse", "dense", "both"))
    g.add_argument("--p", type=str, metavar="REAL", help="top-p threshold for attention and FFN")
    g.add_argument("--strategy", help="topp:P | topk:K | uniform:R")
    g.add_argument("--ffn-strategy", dest="ffn_strategy", help="separate FFN token selection")
    g.add_argument("--cube", metavar="HxWxT")
    g.add_argument("--grid", metavar="TxHxW")
    g.add_argument("--layers", type=str)
    g.add_argument("--heads", type=str)
    g.add_argument("--d-model", dest="d_model", type=str)
    g.add_argument("--d-ff", dest="d_ff", type=str)
    g.add_argument("--text-tokens", dest="text_tokens", type=str)
    g.add_argument("--structure", type=str, help="strength of the shared per-cube component")
    g.add_argument("--no-mean-compensation", dest="mean_compensation", action="store_false", default=None)
    g.add_argument("--out", metavar="PATH", help="write output here instead of stdout")
    g.add_argument("--format", choices=("json", "csv"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cubesparse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="multi-layer forward pass with FLOPs accounting")
    _add_config_flags(p)
    p.add_argument("--timing", action="store_true", help="include wall time (breaks byte determinism)")

    p = sub.add_parser("verify", help="run the oracle-equivalence and property suite")
    _add_config_flags(p)
    p.add_argument("--inject-fault", choices=FAULTS, help="test-only: break the top-p boundary rule")

    p = sub.add_parser("sweep", help="ablation sweep over one axis")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True,
                   help="comma-separated, e.g. 1.0,0.9,0.7 or 1x1x64,4x4x4 or topp:0.7,topk:auto")

    p = sub.add_parser("diagnostics", help="cumulative-attention and norm-ratio profiles")
    _add_config_flags(p)

    p = sub.add_parser("flops", help="analytical FLOPs table only")
    _add_config_flags(p)
    p.add_argument("--nbar", default="1,2,4", help="comma-separated average selected cubes")
    p.add_argument("--rbar", default="0.5,0.7,1.0", help="comma-separated activation ratios")
    return parser


def resolve_config(args: argparse.Namespace, base: Optional[RunConfig] = None) -> RunConfig:
    config = base or RunConfig()
    if args.config:
        config = load_config(args.config, config)
    overrides = {key: getattr(args, dest) for dest, key in _OVERRIDES.items() if getattr(args, dest) is not None}
    config = config_from_mapping(overrides, config)
    if args.mean_compensation is not None:
        config = replace(config, mean_compensation=args.mean_compensation)
    return config.validate()


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            from .checks import verify_config
            using_defaults = not (args.config or any(getattr(args, d) is not None for d in _OVERRIDES))
            config = verify_config(None if using_defaults else resolve_config(args))
            results = run_suite(config, fault=args.inject_fault)
            failed = [r for r in results if not r.passed]
            print(f"{len(results) - len(failed)}/{len(results)} properties passed")
            return EXIT_FAILED if failed else EXIT_OK

        config = resolve_config(args)
        fmt = args.format
        if args.command == "run":
            report = run(config, timing=args.timing)
            _emit(run_csv(report) if fmt == "csv" else dump_json(report), args.out)
        elif args.command == "sweep":
            rows = sweep(args.axis, [v.strip() for v in args.values.split(",") if v.strip()], config)
            if fmt == "json":
                _emit(json.dumps({"schema_version": 1, "kind": "sweep", "axis": args.axis,
                                  "base": config.to_dict(), "rows": rows}, indent=2, sort_keys=True) + "\n",
                      args.out)
            else:
                _emit(rows_csv(rows), args.out)
        elif args.command == "diagnostics":
            report = diagnostics(config)
            if fmt == "csv":
                _emit(_diagnostics_csv(report), args.out)
            else:
                _emit(dump_json(report), args.out)
        elif args.command == "flops":
            rows = flops_table(config, _floats(args.nbar), _floats(args.rbar))
            if fmt == "json":
                _emit(json.dumps({"schema_version": 1, "kind": "flops", "rows": rows}, indent=2) + "\n", args.out)
            else:
                _emit(rows_csv(rows, FLOPS_COLUMNS), args.out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def _diagnostics_csv(report: dict) -> str:
    layers = report["config"]["num_layers"]
    cum = report["cumulative_attention"]["per_layer"]
    nr = report["norm_ratio"]
    rows = []
    for i in range(layers):
        rows.append({
            "layer": i,
            "cumulative_attention_count": cum[i] if cum else "",
            "vision_norm_ratio_mean": nr["vision"]["per_layer_mean"][i],
            "text_norm_ratio_mean": "" if nr["text"]["per_layer_mean"][i] is None else nr["text"]["per_layer_mean"][i],
        })
    return rows_csv(rows, ("layer", "cumulative_attention_count", "vision_norm_ratio_mean", "text_norm_ratio_mean"))


if __name__ == "__main__":
    sys.exit(main())
