"""Command line entry point: ``bench run``, ``bench hop-audit`` and ``bench drain``."""

from __future__ import annotations

import argparse
import sys
import time

from ..background import DrainConfig, drain_until_done
from ..catalog import LAZY_STRATEGIES, STRATEGIES
from . import hopaudit, tpcc
from .runner import WorkloadConfig, export_report, loaded_database, run_benchmark


def _add_workload_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with WorkloadConfig fields; flags override it")
    p.add_argument("--scale", type=int)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--migration", choices=tpcc.MIGRATIONS)
    p.add_argument("--nodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--customers", type=int, help="customers per district (default 3000)")


def _config(args, **extra) -> WorkloadConfig:
    over = {k: getattr(args, k, None) for k in ("scale", "strategy", "migration", "nodes", "seed", "customers")}
    over.update(extra)
    if args.config:
        return WorkloadConfig.from_file(args.config, **over)
    return WorkloadConfig(**{k: v for k, v in over.items() if v is not None})


def cmd_run(args) -> int:
    cfg = _config(args, rtt=args.rtt, duration=args.duration, sessions=args.sessions, clock=args.clock)
    rep = run_benchmark(cfg)
    out = export_report(rep, args.out)
    sys.stdout.write(rep.summary())
    print(f"wrote {out}")
    return 0


def cmd_hop_audit(args) -> int:
    strategies = [args.strategy] if args.strategy else list(hopaudit.AUDIT_STRATEGIES)
    categories = [hopaudit.normalize_category(args.category)] if args.category else list(hopaudit.CATEGORIES)
    table = {c: {s: hopaudit.hop_audit(c, s) for s in strategies} for c in categories}
    sys.stdout.write(hopaudit.format_table(table))
    return 0


def cmd_drain(args) -> int:
    cfg = _config(args)
    if cfg.strategy not in LAZY_STRATEGIES:
        print("drain needs a lazy strategy", file=sys.stderr)
        return 2
    db = loaded_database(cfg.population, cfg.nodes, cfg.seed)
    h = db.register_migration(tpcc.migration_spec(cfg.migration, cfg.strategy))
    t0 = time.perf_counter()
    rep = drain_until_done(db, h, DrainConfig(args.batch, args.pace))
    print(f"strategy {cfg.strategy}  migration {cfg.migration}  batch {args.batch}  pace {args.pace}")
    print(f"steps {rep.steps}  migrated {sum(rep.migrated)}  scanned positions {rep.scanned_positions}  "
          f"done at {rep.done_at:.3f}ms virtual  ({time.perf_counter() - t0:.2f}s wall)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bench", description="Lazy schema migration benchmarks")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run the TPC-C-lite workload with a migration")
    _add_workload_args(p)
    p.add_argument("--rtt", type=float)
    p.add_argument("--duration", type=float, help="ms")
    p.add_argument("--sessions", type=int)
    p.add_argument("--clock", choices=("virtual", "wall"))
    p.add_argument("--out", help="output directory (SLSM_BENCH_OUT overrides)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("hop-audit", help="round trips of one lazy select per placement category")
    p.add_argument("--strategy", choices=LAZY_STRATEGIES)
    p.add_argument("--category", help=f"one of {', '.join(hopaudit.CATEGORIES)}")
    p.set_defaults(fn=cmd_hop_audit)

    p = sub.add_parser("drain", help="drain a migration with no foreground load")
    _add_workload_args(p)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--pace", type=float, default=1.0, help="idle ms between drain steps")
    p.set_defaults(fn=cmd_drain)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as e:
        print(f"bench: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
