import json
import random
from collections import Counter

import pytest

from slsm.bench import cli, hopaudit, tpcc
from slsm.bench.runner import TXN_HEADER, WorkloadConfig, export_report, loaded_database, report_files, run_benchmark

SMALL = dict(customers=30, items=200, orders=30, new_orders=9)


def small_cfg(**kw):
    base = dict(SMALL, duration=1500.0, migration_start=300.0, sessions=4, rtt=2.0)
    base.update(kw)
    return WorkloadConfig(**base)


def test_small_population_counts():
    pop = tpcc.Population(scale=2, districts=3, customers=7, items=50, orders=5, new_orders=2)
    db = tpcc.load(pop)
    n = tpcc.row_counts(db)
    assert n["warehouse"] == 2 and n["district"] == 6 and n["customer"] == 42
    assert n["stock"] == 100 and n["orders"] == 30 and n["new_order"] == 12
    assert n["order_line"] == sum(o["o_ol_cnt"] for o in db.table_rows("orders"))
    assert 5 * 30 <= n["order_line"] <= 15 * 30


def test_standard_cardinalities():
    db = loaded_database(tpcc.Population(), 3, 1)
    n = tpcc.row_counts(db)
    assert (n["warehouse"], n["district"], n["customer"], n["stock"]) == (1, 10, 30_000, 100_000)
    assert (n["orders"], n["new_order"]) == (30_000, 9_000)
    assert 150_000 <= n["order_line"] <= 450_000


def test_population_validation():
    with pytest.raises(ValueError):
        tpcc.Population(scale=0)
    with pytest.raises(ValueError):
        tpcc.Population(new_orders=5000)
    with pytest.raises(ValueError):
        WorkloadConfig(scale=0)
    with pytest.raises(ValueError):
        WorkloadConfig(strategy="eager")
    with pytest.raises(ValueError):
        WorkloadConfig(mix={"payment": 0.5})


def test_loader_is_deterministic():
    pop = tpcc.Population(districts=2, customers=5, items=20, orders=4, new_orders=1)
    assert tpcc.load(pop, seed=3).cluster.dump() == tpcc.load(pop, seed=3).cluster.dump()
    assert tpcc.load(pop, seed=3).cluster.dump() != tpcc.load(pop, seed=4).cluster.dump()


def test_mix_fidelity():
    pop = tpcc.Population(**SMALL)
    wl = tpcc.Workload(None, pop, "split", seed=5)
    rng = random.Random(9)
    draws = Counter(wl.next_txn(rng, 1)[0] for _ in range(20_000))
    for kind, weight in tpcc.MIX.items():
        assert abs(draws[kind] / 20_000 - weight) <= 0.02 * weight + 0.005, kind


def test_empty_run_gives_header_only_csvs():
    rep = run_benchmark(small_cfg(sessions=0, drain=False, duration=0.0, migration_start=10.0))
    files = report_files(rep)
    assert files["txns.csv"] == ",".join(TXN_HEADER) + "\n"
    assert files["hops.csv"] == "txn_id,strategy,category,round_trips\n"
    assert files["tps.csv"] == "window_start,commits,tps\n"
    assert files["progress.csv"] == "time,cursor,migrated,scanned_positions\n"


@pytest.mark.parametrize("migration", tpcc.MIGRATIONS)
def test_run_registers_at_start_and_switches_schema(migration):
    rep = run_benchmark(small_cfg(migration=migration))
    assert rep.timeline["start"] == 300.0 == rep.timeline["first_service"]
    assert not rep.errors
    before = [r for r in rep.records if r.end < 300.0]
    assert before and all(r.schema == "old" for r in before)
    assert rep.committed("new")
    # a txn begun before registration restarts on the new schema
    assert all(r.end >= 300.0 for r in rep.committed("new"))


def test_osc_switches_only_at_public():
    rep = run_benchmark(small_cfg(strategy="osc", duration=4000.0))
    pub = rep.timeline["first_service"]
    assert pub is not None and pub == rep.timeline["done"] > rep.timeline["start"]
    assert all(r.end >= pub for r in rep.committed("new"))


def test_timeline_and_progress_are_ordered():
    rep = run_benchmark(small_cfg(strategy="bullfrog", run_to_completion=True))
    t = rep.timeline
    assert t["start"] <= t["first_service"] <= t["done"]
    times = [p[0] for p in rep.progress]
    assert times == sorted(times)
    scanned = [p[3] for p in rep.progress]
    assert scanned == sorted(scanned)


def test_same_seed_same_files():
    a = report_files(run_benchmark(small_cfg(seed=4)))
    b = report_files(run_benchmark(small_cfg(seed=4)))
    c = report_files(run_benchmark(small_cfg(seed=5)))
    assert a == b and a["txns.csv"] != c["txns.csv"]


def test_max_txns_caps_user_transactions():
    rep = run_benchmark(small_cfg(sessions=1, max_txns=25, duration=0.0))
    assert len(rep.records) == 25


def test_config_from_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"strategy": "bullfrog", "migration": "join", "rtt": 1.15, "customers": 30}))
    cfg = WorkloadConfig.from_file(p, seed=9)
    assert (cfg.strategy, cfg.migration, cfg.rtt, cfg.customers, cfg.seed) == ("bullfrog", "join", 1.15, 30, 9)
    p.write_text(json.dumps({"strategi": "osc"}))
    with pytest.raises(ValueError, match="strategi"):
        WorkloadConfig.from_file(p)
    with pytest.raises(OSError):
        WorkloadConfig.from_file(tmp_path / "missing.json")


def test_export_honours_env(tmp_path, monkeypatch):
    rep = run_benchmark(small_cfg(sessions=1, duration=200.0))
    monkeypatch.setenv("SLSM_BENCH_OUT", str(tmp_path / "env"))
    out = export_report(rep, tmp_path / "arg")
    assert out == tmp_path / "env"
    assert sorted(x.name for x in out.iterdir()) == sorted(report_files(rep))


# -- hop audit ----------------------------------------------------------------------------


HOPS = {  # category -> (basic, mig_opt, full)
    "gateway,old,new": (0, 0, 0),
    "gateway,old": (1, None, None),
    "gateway,new": (1, None, None),
    "old,new": (1, 1, 1),
    "none": (3, None, None),
}


@pytest.mark.parametrize("category", list(HOPS))
def test_hop_audit_counts(category):
    got = tuple(hopaudit.hop_audit(category, s) for s in hopaudit.AUDIT_STRATEGIES)
    assert got == HOPS[category]


def test_hop_audit_aliases_and_rows():
    assert hopaudit.normalize_category("∅") == "none"
    with pytest.raises(ValueError):
        hopaudit.normalize_category("old")
    a = hopaudit.audit("none", "slsm_basic")
    assert a.rows == [{"id": 1001, "rights": "rw"}]
    assert {(h.src, h.dst) for h in a.ledger} <= {(1, 2), (1, 3), (2, 3), (2, 1), (3, 1), (3, 2)}


def test_hop_table_format():
    text = hopaudit.format_table(hopaudit.hop_table())
    assert text.splitlines()[0] == "category,slsm_basic,slsm_mig_opt,slsm_full"
    assert '"gateway,old",1,-,-' in text


# -- CLI ------------------------------------------------------------------------------------


def test_cli_hop_audit(capsys):
    assert cli.main(["hop-audit", "--strategy", "slsm_full", "--category", "old,new"]) == 0
    assert capsys.readouterr().out == 'category,slsm_full\n"old,new",1\n'


def test_cli_run(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("SLSM_BENCH_OUT", raising=False)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(dict(SMALL, migration_start=100.0)))
    rc = cli.main(["run", "--config", str(p), "--duration", "400", "--sessions", "2", "--rtt", "1.15",
                   "--out", str(tmp_path / "out")])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.startswith("strategy slsm_full  migration split  rtt 1.15ms")
    assert (tmp_path / "out" / "txns.csv").exists()


def test_cli_drain(tmp_path, capsys):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    assert cli.main(["drain", "--config", str(p), "--migration", "preaggregate", "--batch", "64"]) == 0
    assert "migrated" in capsys.readouterr().out


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "none.json")]) == 2
    assert cli.main(["drain", "--strategy", "osc", "--customers", "5"]) == 2
    assert cli.main(["run", "--scale", "0"]) == 2
    with pytest.raises(SystemExit):
        cli.main(["run", "--strategy", "eager"])
