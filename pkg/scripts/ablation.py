"""Optimization ablation: basic, mig_opt, user_opt and full for each migration class."""

import argparse

from slsm.bench import tpcc
from slsm.bench.runner import RTT_PRESETS, WorkloadConfig, run_benchmark

ABLATION = ("slsm_basic", "slsm_mig_opt", "slsm_user_opt", "slsm_full")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rtt", type=float, default=RTT_PRESETS[2])
    ap.add_argument("--nodes", type=int, default=3)
    ap.add_argument("--migrations", default=",".join(tpcc.MIGRATIONS))
    args = ap.parse_args()
    for mig in args.migrations.split(","):
        lat = {}
        for s in ABLATION:
            rep = run_benchmark(WorkloadConfig(strategy=s, migration=mig, rtt=args.rtt, nodes=args.nodes))
            lat[s] = rep.mean_new_schema_statement_latency()
        base = lat["slsm_basic"]
        print(f"{mig} (rtt {args.rtt}ms, {args.nodes} nodes)")
        for s, v in lat.items():
            print(f"  {s:<14} {v:8.2f}ms  {v / base - 1:+.0%} vs basic")


if __name__ == "__main__":
    main()
