"""Cursor drain vs whole-table sweep after users have already migrated part of the data."""

import argparse
import random

from slsm import DrainConfig, Predicate, Statement, drain_until_done
from slsm.bench import tpcc

NEW = {"split": ("customer_public", ("c_w_id", "c_d_id", "c_id")),
       "join": ("order_line_stock", ("ol_w_id", "ol_d_id", "ol_o_id")),
       "preaggregate": ("order_line_agg", ("ol_w_id", "ol_d_id", "ol_o_id"))}


def run(strategy, migration, pop, fraction, batch, seed):
    db = tpcc.load(pop, seed=seed)
    h = db.register_migration(tpcc.migration_spec(migration, strategy))
    table, cols = NEW[migration]
    rng = random.Random(seed)
    n = pop.customers if migration == "split" else pop.orders
    for d in range(1, pop.districts + 1):
        for i in rng.sample(range(1, n + 1), int(n * fraction)):
            db.run(Statement.select(table, Predicate.eq(**dict(zip(cols, (1, d, i))))))
    pre = sum(db.migration_counts.values())
    rep = drain_until_done(db, h, DrainConfig(batch, 0))
    return pre, rep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--migration", default="split", choices=tpcc.MIGRATIONS)
    ap.add_argument("--fraction", type=float, default=0.5, help="share migrated by users before the drain")
    ap.add_argument("--customers", type=int, default=300)
    ap.add_argument("--orders", type=int, default=300)
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    pop = tpcc.Population(customers=args.customers, items=1000, orders=args.orders,
                          new_orders=min(90, args.orders))
    print("strategy,premigrated,drain_steps,drained,scanned_positions")
    for s in ("bullfrog", "slsm_full"):
        pre, rep = run(s, args.migration, pop, args.fraction, args.batch, args.seed)
        print(f"{s},{pre},{rep.steps},{sum(rep.migrated)},{rep.scanned_positions}")


if __name__ == "__main__":
    main()
