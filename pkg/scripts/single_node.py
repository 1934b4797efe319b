"""One-node cluster: colocation buys nothing, so prefixed keys only add overhead."""

import sys

from slsm.bench.runner import WorkloadConfig, run_benchmark


def main():
    mig = sys.argv[1] if len(sys.argv) > 1 else "split"
    for s in ("bullfrog", "slsm_basic", "slsm_user_opt", "slsm_mig_opt", "slsm_full"):
        rep = run_benchmark(WorkloadConfig(strategy=s, migration=mig, nodes=1))
        print(f"{s:<14} new-schema statement {rep.mean_new_schema_statement_latency():7.2f}ms  "
              f"txn {rep.mean_latency():7.2f}ms  committed {len(rep.records)}")


if __name__ == "__main__":
    main()
