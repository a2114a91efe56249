"""Command-line entry points: run, sweep, oracle-assoc."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import SystemConfig, load_config
from .fronthaul import FronthaulParams
from .harness import emit_outputs, oracle_comparison, run_experiment, sweep


def _load(args) -> tuple[SystemConfig, FronthaulParams]:
    if args.config:
        return load_config(args.config)
    return SystemConfig(), FronthaulParams()


def _parse_cs(raw: str, M: int):
    return [M if tok.strip().upper() == "M" else int(tok) for tok in raw.split(",")]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--drops", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--methods", default="epa,opa")
    p.add_argument("--cs", default=None,
                   help="comma list of CB cluster counts; 'M' = one per AP")
    p.add_argument("--opt-samples", type=int, default=500)
    p.add_argument("--eval-samples", type=int, default=2000)
    p.add_argument("--progress", action="store_true")


def cmd_run(args) -> int:
    config, fh = _load(args)
    cs = _parse_cs(args.cs, config.M) if args.cs else None
    result = run_experiment(config, fh, args.drops,
                            methods=tuple(args.methods.split(",")),
                            seed=args.seed, cs=cs,
                            n_samples_opt=args.opt_samples,
                            n_samples_eval=args.eval_samples,
                            progress=args.progress)
    for p in emit_outputs(result, args.out):
        print(p)
    return 0


def cmd_sweep(args) -> int:
    config, fh = _load(args)
    cs = _parse_cs(args.cs, config.M) if args.cs else None
    values = [float(v) for v in args.values.split(",")]
    entries = sweep(config, fh, args.axis, values, args.drops,
                    methods=tuple(args.methods.split(",")), seed=args.seed,
                    cs=cs, n_samples_opt=args.opt_samples,
                    n_samples_eval=args.eval_samples, progress=args.progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    overview = []
    failed = False
    for e in entries:
        if e.result is None:
            overview.append({"value": e.value, "error": e.error})
            failed = True
            continue
        sub = out / f"{args.axis}_{e.value:g}"
        emit_outputs(e.result, sub)
        overview.append({
            "value": e.value,
            "k_max": e.result.k_max,
            "mean_sum_se": {f"{m}_C{C}": e.result.curves[(m, C)].mean_sum_se
                            for (m, C) in e.result.curves},
        })
    (out / "sweep_summary.json").write_text(
        json.dumps({"axis": args.axis, "entries": overview}, indent=2, sort_keys=True)
        + "\n", encoding="utf-8")
    print(out / "sweep_summary.json")
    return 1 if failed else 0


def cmd_oracle(args) -> int:
    config, fh = _load(args)
    rows = oracle_comparison(config, fh, args.drops, seed=args.seed,
                             n_samples=args.samples, power=args.power)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": dataclasses.asdict(config),
        "fronthaul": dataclasses.asdict(fh),
        "seed": args.seed,
        "drops": rows,
        "mean_gap_pct": sum(r["gap_pct"] for r in rows) / len(rows) if rows else 0.0,
    }
    path = out / "oracle_assoc.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    print(path)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cfmimo",
        description="Cell-free massive MIMO sum-SE experiments under "
                    "fronthaul constraints")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="multi-drop experiment at fixed parameters")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="experiment per value of one axis")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=["L", "M", "FH_max", "Nbar", "C"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle-assoc",
                       help="heuristic vs exhaustive association (small scales)")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--drops", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=150)
    p.add_argument("--power", choices=["epa", "opa"], default="opa",
                   help="power allocation used by the common evaluator")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface hard errors with a nonzero exit code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
