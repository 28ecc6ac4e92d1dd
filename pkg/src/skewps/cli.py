"""Command-line harness: experiment runs and conformity verification.

    skewps run --workload mf --nodes 4 --workers 1 --technique heuristic \
        --epochs 5 --seed 1 --staleness-ms 40 --out results/
    skewps verify-conformity --scheme L2 --draws 1000000

``run`` writes report.csv / report.json / access_histogram.csv per setting;
``--staleness-ms`` accepts a comma list (with ``inf`` disabling syncing) and
produces one report directory per point.  Exit status is nonzero when a
conformity check fails or an experiment errors.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .core import ClusterConfig, _coerce_config_value, load_cluster_config
from .harness import ExperimentSpec, run_conformity_battery, run_experiment


def _parse_staleness(text: str) -> list[float | None]:
    out: list[float | None] = []
    for part in text.split(","):
        part = part.strip().lower()
        out.append(None if part in ("inf", "none", "off") else float(part))
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skewps", description="benchmark and verification harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a workload experiment")
    run.add_argument("--workload", choices=["mf", "embed"], required=True)
    run.add_argument("--config", help="ClusterConfig file (JSON or key=value)")
    run.add_argument("--nodes", type=int, default=4)
    run.add_argument("--workers", type=int, default=1)
    run.add_argument(
        "--technique",
        default="heuristic",
        help="relocate | heuristic | topk=K",
    )
    run.add_argument("--conformity", choices=["L1", "L2", "L3", "L4"], default="L2")
    run.add_argument("--epochs", type=int, default=3)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument(
        "--staleness-ms",
        default="40",
        help="replica staleness bound in ms; comma list sweeps; inf disables",
    )
    run.add_argument("--sync-disabled", action="store_true")
    run.add_argument("--clip-factor", type=float)
    run.add_argument("--threshold-factor", type=float)
    run.add_argument("--pool-size", type=int)
    run.add_argument("--use-frequency", type=int)
    run.add_argument(
        "--set",
        dest="set_fields",
        action="append",
        default=[],
        metavar="FIELD=VALUE",
        help="override any ClusterConfig field, repeatable",
    )
    run.add_argument("--out", help="output directory")
    # workload sizes
    run.add_argument("--rows", type=int)
    run.add_argument("--cols", type=int)
    run.add_argument("--rank", type=int)
    run.add_argument("--cells", type=int)
    run.add_argument("--heads", type=int)
    run.add_argument("--tails", type=int)
    run.add_argument("--pairs", type=int)
    run.add_argument("--dim", type=int)
    run.add_argument("--n-neg", type=int)
    run.add_argument("--lr", type=float)
    run.add_argument("--step-cost-us", type=float)
    run.add_argument("--exponent", type=float)

    verify = sub.add_parser("verify-conformity", help="run the statistical battery")
    verify.add_argument("--scheme", choices=["L1", "L2", "L3", "L4"], required=True)
    verify.add_argument("--draws", type=int, default=1_000_000)
    verify.add_argument("--seeds", type=int, default=100)
    verify.add_argument("--base-seed", type=int, default=0)
    verify.add_argument("--pool-size", type=int, default=250)
    verify.add_argument("--use-frequency", type=int, default=16)
    return parser


def _config_from_args(args) -> ClusterConfig:
    overrides = dict(
        num_nodes=args.nodes,
        workers_per_node=args.workers,
        clip_factor=args.clip_factor,
        replication_threshold_factor=args.threshold_factor,
        pool_size=args.pool_size,
        use_frequency=args.use_frequency,
        rng_seed=args.seed,
    )
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.clip_factor is not None:
        overrides["clip_enabled"] = True
    for item in args.set_fields:
        if "=" not in item:
            raise SystemExit(f"--set expects FIELD=VALUE, got {item!r}")
        name, raw = item.split("=", 1)
        overrides[name.strip()] = _coerce_config_value(name.strip(), raw)
    if args.config:
        return load_cluster_config(args.config, **overrides)
    return ClusterConfig(**overrides)


def _params_from_args(args) -> dict:
    names = [
        "rows",
        "cols",
        "rank",
        "cells",
        "heads",
        "tails",
        "pairs",
        "dim",
        "lr",
        "exponent",
    ]
    params = {n: getattr(args, n) for n in names if getattr(args, n) is not None}
    if args.n_neg is not None:
        params["n_neg"] = args.n_neg
    if args.step_cost_us is not None:
        params["step_cost_us"] = args.step_cost_us
    return params


def _cmd_run(args) -> int:
    config = _config_from_args(args)
    points = [None] if args.sync_disabled else _parse_staleness(args.staleness_ms)
    sweep = len(points) > 1
    status = 0
    for staleness in points:
        cfg = replace(config, staleness_ms=staleness)
        out_dir = args.out
        if out_dir and sweep:
            label = "inf" if staleness is None else f"{staleness:g}"
            out_dir = str(Path(args.out) / f"staleness_{label}ms")
        spec = ExperimentSpec(
            workload=args.workload,
            config=cfg,
            technique=args.technique,
            conformity=args.conformity,
            epochs=args.epochs,
            seed=args.seed,
            params=_params_from_args(args),
            out_dir=out_dir,
        )
        try:
            report = run_experiment(spec)
        except Exception as exc:  # surface workload failures with context
            print(f"error: {args.workload} run failed: {exc}", file=sys.stderr)
            return 2
        label = "disabled" if staleness is None else f"{staleness:g} ms"
        print(f"== staleness {label}: final metric {report.summary['final_metric']:.6g}")
        for row in report.rows:
            print(
                f"  epoch {row.epoch}: loss={row.train_loss:.6g} "
                f"metric={row.eval_metric:.6g} msgs={row.messages['total']}"
            )
        if out_dir:
            print(f"  report written to {out_dir}")
    return status


def _cmd_verify(args) -> int:
    checks = run_conformity_battery(
        args.scheme,
        draws=args.draws,
        n_seeds=args.seeds,
        base_seed=args.base_seed,
        pool_size=args.pool_size,
        use_frequency=args.use_frequency,
    )
    failed = 0
    for check in checks:
        print(check.line())
        if not check.passed:
            failed += 1
    return 1 if failed else 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "verify-conformity":
        return _cmd_verify(args)
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
