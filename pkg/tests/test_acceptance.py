"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line.

    pytest tests/test_acceptance.py -s
"""

import random
import time

import pytest

from slsm import DrainConfig
from slsm import migration
from slsm.background import background_body, drain_step
from slsm.bench import hopaudit, tpcc
from slsm.bench.runner import RTT_PRESETS, WorkloadConfig, loaded_database, report_files, run_benchmark
from slsm.engine import CostModel
from slsm.sim import Session, Simulator, SysStep

import worlds

RESULTS = []
LAZY = ("bullfrog", "slsm_basic", "slsm_mig_opt", "slsm_user_opt", "slsm_full")


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def statement_latency(strategy, **kw):
    cfg = WorkloadConfig(strategy=strategy, **kw)
    return run_benchmark(cfg).mean_new_schema_statement_latency()


# 1 -------------------------------------------------------------------------------------------

TABLE = {  # category -> round trips for (slsm_basic, slsm_mig_opt, slsm_full); None = cannot occur
    "gateway,old,new": (0, 0, 0),
    "gateway,old": (1, None, None),
    "gateway,new": (1, None, None),
    "old,new": (1, 1, 1),
    "none": (3, None, None),
}


def test_1_hop_reproduction():
    t0 = time.perf_counter()
    got = hopaudit.hop_table()
    took = time.perf_counter() - t0
    bad = [(c, s) for c, want in TABLE.items() for s, w in zip(hopaudit.AUDIT_STRATEGIES, want) if got[c][s] != w]
    verdict(1, not bad and took < 1.0, f"15 cells, mismatches {bad}, {took:.2f}s")


# 2 -------------------------------------------------------------------------------------------


def test_2_latency_ordering_at_22ms():
    lat = {s: statement_latency(s, rtt=RTT_PRESETS[2]) for s in
           ("slsm_basic", "slsm_mig_opt", "slsm_user_opt", "slsm_full")}
    full, mig, usr, basic = lat["slsm_full"], lat["slsm_mig_opt"], lat["slsm_user_opt"], lat["slsm_basic"]

    def gap(a, b):  # a is more than 5% below b
        return a < 0.95 * b

    ok = gap(full, mig) and gap(mig, basic) and gap(full, usr) and gap(usr, basic)
    verdict(2, ok, "  ".join(f"{s}={v:.2f}ms" for s, v in lat.items()))


# 3 -------------------------------------------------------------------------------------------


def test_3_full_vs_bullfrog_at_12ms():
    full = statement_latency("slsm_full", rtt=RTT_PRESETS[1])
    bull = statement_latency("bullfrog", rtt=RTT_PRESETS[1])
    verdict(3, full <= 0.8 * bull, f"slsm_full={full:.2f}ms bullfrog={bull:.2f}ms ({1 - full / bull:.0%} lower)")


# 9 (shares the loaded population with 2 and 3) ---------------------------------------------------


def test_9_determinism():
    cfg = dict(strategy="slsm_full", migration="join", duration=6000.0, migration_start=1000.0)
    a = report_files(run_benchmark(WorkloadConfig(**cfg)))
    b = report_files(run_benchmark(WorkloadConfig(**cfg)))
    same = [k for k in a if a[k] == b[k]]
    verdict(9, a == b and len(a["txns.csv"].splitlines()) > 1, f"{len(same)}/{len(a)} report files identical")


# 4 -------------------------------------------------------------------------------------------


def test_4_availability_gap():
    lazy_ok = []
    for s in LAZY:
        db, h = worlds.make_db("split", s, size=50)
        lazy_ok.append(h.first_service_at == h.registered_at)
    db, h = worlds.make_db("split", "osc", size=10_000, pieces=4)
    reg = h.registered_at
    steps = backfill = 0
    while h.state.osc_state != "public":
        n = drain_step(db, h, DrainConfig(500))
        backfill += n > 0
        steps += 1
        db.now += 1.0
    ok = all(lazy_ok) and h.first_service_at == h.done_at and backfill >= 20 and h.first_service_at > reg
    verdict(4, ok, f"lazy first_service==registration for {sum(lazy_ok)}/{len(LAZY)}; "
                   f"osc public after {backfill} backfill steps ({steps} total)")


# 5 -------------------------------------------------------------------------------------------


def txn_program(stmts):
    def prog(info):
        info.schema = "new"
        for s in stmts:
            yield s
    return prog


def exclusivity_run(kind, strategy, n_txns, seed):
    rng = random.Random(seed)
    size = 12
    db, h = worlds.make_db(kind, strategy, size=size, seed=seed, cost=CostModel(rtt=1.0, part_overhead=0.5))
    sim = Simulator(db, seed)
    todo = [[worlds.random_statement(rng, kind, size) for _ in range(rng.randint(1, 3))] for _ in range(n_txns)]
    seen = []

    def check(rec):
        seen.extend(migration.exclusivity_violations(db, h))

    sim.on_record.append(check)

    def user_next(s):
        return ("user", txn_program(todo.pop())) if todo else None

    for i in range(1, 6):
        sim.add(Session(i, db.nodes[i % 3], user_next, start_at=rng.random()))
    body = background_body(db, h, DrainConfig(3, 2.0))

    def bg_next(s):
        if h.state.done or not todo:
            return None

        def prog(info):
            info.schema = "system"
            yield SysStep(body)
        return "background", prog

    sim.add(Session(0, db.nodes[0], bg_next, think=lambda s: 2.0, start_at=5.0, kind="system"))
    recs = sim.run()
    users = [r for r in recs if r.type == "user"]
    twice = [k for k, v in db.migration_counts.items() if v != 1]
    return len(users), seen, twice, sim.errors


def test_5_exclusivity():
    t0 = time.perf_counter()
    total, dual, twice, errors = 0, [], [], []
    runs = [(k, s) for k in tpcc.MIGRATIONS for s in LAZY]
    for i, (kind, strategy) in enumerate(runs):
        n = 1000 // len(runs) + (i < 1000 % len(runs))
        c, d, t, e = exclusivity_run(kind, strategy, n, seed=100 + i)
        total += c
        dual += d
        twice += t
        errors += e
    took = time.perf_counter() - t0
    ok = total >= 1000 and not dual and not twice and not errors
    verdict(5, ok, f"{total} committed txns, {len(dual)} dual-visible, {len(twice)} migrated twice, "
                   f"{len(errors)} errors, {took:.0f}s")


# 6 -------------------------------------------------------------------------------------------


def test_6_fusion_equivalence():
    t0 = time.perf_counter()
    rng = random.Random(6)
    bad = []
    n = 0
    for kind in tpcc.MIGRATIONS:
        for key_strategy in ("slsm_basic", "slsm_full"):
            for _ in range(90):
                size = rng.choice((4, 8, 16, 30))
                ok, detail = worlds.fusion_matches_lazy(kind, key_strategy, rng.randrange(2 ** 32), size=size)
                n += 1
                if not ok:
                    bad.append(detail)
    took = time.perf_counter() - t0
    verdict(6, n >= 500 and not bad, f"{n} instances, {len(bad)} mismatches, {took:.0f}s")


# 7 -------------------------------------------------------------------------------------------

NEW_TABLES = {"split": ("customer_private", "customer_public"), "join": ("order_line_stock",),
              "preaggregate": ("order_line_agg",)}
STRATEGIES = ("osc",) + LAZY


def test_7_confluence():
    t0 = time.perf_counter()
    differ = []
    for mig in tpcc.MIGRATIONS:
        dumps = {}
        for s in STRATEGIES:
            cfg = WorkloadConfig(strategy=s, migration=mig, sessions=1, max_txns=2000, run_to_completion=True,
                                 customers=40, items=500, orders=40, new_orders=12, migration_start=200.0,
                                 duration=0.0)
            db = loaded_database(cfg.population, cfg.nodes, cfg.seed)
            rep = run_benchmark(cfg, db)
            h = db.catalog.migrations[-1]
            assert len(rep.records) == 2000 and h.state.done and not rep.errors
            dumps[s] = "".join(db.dump_table(t) for t in NEW_TABLES[mig])
        if len(set(dumps.values())) != 1:
            differ.append(mig)
    took = time.perf_counter() - t0
    verdict(7, not differ and took < 180, f"{len(STRATEGIES)} strategies x 3 migrations, differing {differ}, "
                                          f"{took:.0f}s")


# 8 -------------------------------------------------------------------------------------------


def test_8_single_node():
    lat = {s: statement_latency(s, nodes=1, rtt=RTT_PRESETS[2]) for s in ("slsm_user_opt", "slsm_full", "bullfrog")}
    usr = lat["slsm_user_opt"]
    ok = usr <= lat["bullfrog"] and usr <= lat["slsm_full"]
    verdict(8, ok, "  ".join(f"{s}={v:.2f}ms" for s, v in lat.items()))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-q"]))
