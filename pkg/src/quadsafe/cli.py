"""Command-line entry point: run / compare / sweep.

Exit codes: 0 success, 2 configuration error, 3 simulation failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import harness, mpc

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIM = 3


def _load(path: str) -> harness.ScenarioConfig:
    if not Path(path).exists():
        raise harness.ScenarioError([f"scenario file not found: {path}"])
    return harness.load_scenario(path)


def _apply_controller(cfg: harness.ScenarioConfig, kind: str | None,
                      p: float | None, lam: float | None) -> harness.ScenarioConfig:
    cfg = copy.deepcopy(cfg)
    if kind is not None:
        if kind not in mpc.KINDS:
            raise harness.ScenarioError(
                [f"unknown controller {kind!r}; valid: {', '.join(mpc.KINDS)}"])
        cfg.kind = kind
    if p is not None:
        cfg.barrier_gain = p
    if lam is not None:
        cfg.lam = lam
    if cfg.kind in ("dcbf", "dhocbf") and cfg.lam is None:
        raise harness.ScenarioError([f"{cfg.kind} requires --lam"])
    return cfg


def _run_one(cfg: harness.ScenarioConfig, outdir: str) -> harness.Metrics:
    log = harness.run_simulation(cfg)
    metrics = harness.compute_metrics(log, cfg)
    harness.write_logs(log, cfg, outdir)
    harness.write_metrics(metrics, outdir)
    return metrics


def _sweep_worker(args):
    cfg, outdir = args
    return _run_one(cfg, outdir).as_dict()


def cmd_run(args) -> int:
    cfg = _apply_controller(_load(args.scenario), args.controller, args.p, args.lam)
    metrics = _run_one(cfg, args.out)
    print(json.dumps(metrics.as_dict(), indent=2, sort_keys=True))
    return EXIT_SIM if metrics.failed else EXIT_OK


def cmd_compare(args) -> int:
    base = _load(args.scenario)
    rows = []
    failed = False
    for kind in args.controllers:
        cfg = _apply_controller(base, kind, args.p, args.lam)
        outdir = Path(args.out) / kind
        m = _run_one(cfg, outdir)
        rows.append((kind, m))
        failed = failed or m.failed
    header = f"{'controller':<14} {'min_h':>12} {'rms_err':>10} {'mean_ms':>9} {'gap':>5} {'infeas':>7}"
    print(header)
    for kind, m in rows:
        mh = min(m.min_h) if m.min_h else float("nan")
        print(f"{kind:<14} {mh:>12.6f} {m.rms_pos_err:>10.5f} "
              f"{1000 * m.mean_solve_time:>9.3f} {str(m.gap_passed):>5} "
              f"{m.infeasible_count:>7}")
    with open(Path(args.out) / "compare.json", "w") as fh:
        json.dump({k: m.as_dict() for k, m in rows}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_SIM if failed else EXIT_OK


def cmd_sweep(args) -> int:
    base = _load(args.scenario)
    values = [float(v) for v in args.values.split(",")]
    jobs = []
    for v in values:
        if args.param == "p":
            cfg = _apply_controller(base, args.controller, v, args.lam)
        elif args.param == "lam":
            cfg = _apply_controller(base, args.controller, args.p, v)
        else:
            raise harness.ScenarioError([f"unknown sweep parameter {args.param!r}"])
        jobs.append((cfg, str(Path(args.out) / f"{args.param}_{v:g}")))
    workers = int(os.environ.get("QUADSAFE_THREADS", "0")) or None
    if workers == 1 or len(jobs) == 1:
        results = [_sweep_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    summary = {f"{args.param}={v:g}": r for v, r in zip(values, results)}
    print(json.dumps(summary, indent=2, sort_keys=True))
    with open(Path(args.out) / "sweep.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_SIM if any(r["failed"] for r in results) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quadsafe",
                                 description="safe quadrotor tracking simulations")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario / controller")
    run.add_argument("--scenario", required=True)
    run.add_argument("--controller", default=None)
    run.add_argument("--p", type=float, default=None, help="barrier gain")
    run.add_argument("--lam", type=float, default=None, help="decay rate for dcbf/dhocbf")
    run.add_argument("--out", required=True)
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="run several controllers on one scenario")
    cmp_.add_argument("--scenario", required=True)
    cmp_.add_argument("--controllers", nargs="+", default=list(mpc.KINDS))
    cmp_.add_argument("--p", type=float, default=None)
    cmp_.add_argument("--lam", type=float, default=None)
    cmp_.add_argument("--out", required=True)
    cmp_.set_defaults(func=cmd_compare)

    sw = sub.add_parser("sweep", help="sweep p or lam over a value grid")
    sw.add_argument("--scenario", required=True)
    sw.add_argument("--controller", default=None)
    sw.add_argument("--param", required=True, choices=["p", "lam"])
    sw.add_argument("--values", required=True, help="comma-separated grid")
    sw.add_argument("--p", type=float, default=None)
    sw.add_argument("--lam", type=float, default=None)
    sw.add_argument("--out", required=True)
    sw.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except harness.ScenarioError as e:
        for p in e.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except mpc.InfeasibleRun as e:
        print(f"simulation failed: {e}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
