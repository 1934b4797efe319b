"""Mean new-schema statement latency per strategy at each RTT preset (CSV on stdout)."""

import argparse
import csv
import sys

from slsm.bench.runner import RTT_PRESETS, WorkloadConfig, run_benchmark
from slsm.catalog import STRATEGIES


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--migration", default="split")
    ap.add_argument("--duration", type=float, default=20_000.0)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--strategies", default=",".join(STRATEGIES))
    args = ap.parse_args()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["rtt", "strategy", "committed", "new_schema_txns", "mean_latency", "mean_new_schema_statement"])
    for rtt in RTT_PRESETS:
        for s in args.strategies.split(","):
            rep = run_benchmark(WorkloadConfig(strategy=s, migration=args.migration, rtt=rtt,
                                               duration=args.duration, seed=args.seed))
            w.writerow([rtt, s, len(rep.records), len(rep.committed("new")), f"{rep.mean_latency():.3f}",
                        f"{rep.mean_new_schema_statement_latency():.3f}"])
            sys.stdout.flush()


if __name__ == "__main__":
    main()
