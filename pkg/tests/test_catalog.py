import random
from dataclasses import replace
from decimal import Decimal

import pytest
from hypothesis import given, settings, strategies as st

from slsm import (
    TRUE,
    Agg,
    CatalogError,
    Cond,
    Database,
    MigrationSpec,
    Predicate,
    RewriteUnsupported,
    parse_migration_spec,
)
from slsm.bench import tpcc
from slsm.bench.hopaudit import example_database, user_split_spec
from slsm.catalog import MigrationState, PredicateFilter
from slsm.migration import migrate_scopes, relaxed_rewrite
from slsm.background import run_system_txn

import worlds


def test_split_rewrite_running_example():
    db = example_database(1)
    h = db.register_migration(user_split_spec("slsm_basic"))
    assert h.rewrite_predicate("user_rights", Predicate.eq(id=1001)) == {"user": Predicate.eq(id=1001)}


def test_tautology_rewrites_to_whole_table():
    db = example_database(1)
    h = db.register_migration(user_split_spec("slsm_basic"))
    assert h.rewrite_predicate("user_info", TRUE) == {"user": TRUE}


def test_aggregate_predicate_unrewritable():
    db, h = worlds.make_db("preaggregate")
    with pytest.raises(RewriteUnsupported):
        h.rewrite_predicate("line_total", Predicate.of(("total", ">", Decimal(1))))
    # the group-key part survives, widening to whole groups
    p = Predicate.of(("w", "=", 1), ("total", ">", Decimal(1)))
    assert relaxed_rewrite(h, "line_total", p) == {"line": Predicate.eq(w=1)}


def test_join_key_predicate_lands_on_both_sides():
    db, h = worlds.make_db("join")
    out = h.rewrite_predicate("line_stock", Predicate.of(("item", "<=", 3), ("o", "=", 2)))
    assert out["line"] == Predicate.of(("item", "<=", 3), ("o", "=", 2))
    assert out["stock"] == Predicate.of(("item", "<=", 3))
    out = h.rewrite_predicate("line_stock", Predicate.eq(w=2))
    assert out == {"line": Predicate.eq(w=2), "stock": Predicate.eq(sw=2)}


def test_split_registers_two_empty_tables_sharing_pk():
    db = tpcc.load(tpcc.Population(districts=1, customers=5, items=10, orders=3, new_orders=1))
    h = db.register_migration(tpcc.migration_spec("split", "slsm_full"))
    for name in ("customer_private", "customer_public"):
        t = db.catalog.table(name)
        assert tuple(t.pk) == ("c_w_id", "c_d_id", "c_id")
        assert t.prefixed
        assert db.table_rows(name) == []
    assert h.new_scope_cols["customer_public"] == ("c_w_id", "c_d_id", "c_id")


def test_join_registered_starts_empty():
    db, h = worlds.make_db("join")
    assert db.table_rows("line_stock") == []
    assert h.driving == "line" and h.dimension == "stock"


def test_key_mode_by_strategy():
    for strategy, prefixed in [("slsm_basic", False), ("slsm_user_opt", False), ("bullfrog", False),
                               ("osc", False), ("slsm_mig_opt", True), ("slsm_full", True)]:
        db, h = worlds.make_db("split", strategy)
        assert db.catalog.table("acct_money").prefixed is prefixed


def test_prefix_fallback_warns():
    spec = parse_migration_spec("""
        migration flip
        class split
        old line
        new by_item pk item,w,o,n
        cols line: w,o,n,item
        new rest pk w,o,n
        cols line: w,o,n,qty,amt
    """)
    db, _ = worlds.make_db("preaggregate", register=False)
    h = db.register_migration(spec)
    assert not db.catalog.table("by_item").prefixed
    assert db.catalog.table("rest").prefixed
    assert len(h.warnings) == 1 and "by_item" in h.warnings[0]


def test_registration_errors():
    db, h = worlds.make_db("split")
    money, info = worlds.split_spec().new_tables
    with pytest.raises(CatalogError, match="active migration"):
        db.register_migration(MigrationSpec("again", "split", ("acct",),
                                            (replace(money, name="m2"), replace(info, name="i2"))))
    with pytest.raises(CatalogError, match="no table"):
        db.register_migration(MigrationSpec("ghost", "preaggregate", ("nope",), worlds.agg_spec().new_tables,
                                             group_keys=("w",)))
    with pytest.raises(CatalogError, match="map 1 old"):
        MigrationSpec("bad", "split", ("acct",), worlds.agg_spec().new_tables)


def test_osc_state_only_moves_forward():
    s = MigrationState()
    for to in ("delete_only", "write_only", "write_only", "public"):
        s.advance(to)
    with pytest.raises(CatalogError):
        s.advance("delete_only")


def test_parser_round_trip_of_bench_specs():
    text = """
        # split the customer table
        migration split_customer
        class split
        strategy slsm_mig_opt
        old customer
        new customer_private pk c_w_id,c_d_id,c_id
        cols customer: c_w_id, c_d_id, c_id, c_credit, c_discount, c_balance, c_ytd_payment, c_payment_cnt, c_delivery_cnt
        new customer_public pk c_w_id,c_d_id,c_id
        cols customer: c_w_id, c_d_id, c_id, c_first, c_last, c_street, c_city, c_state
    """
    assert parse_migration_spec(text) == tpcc.migration_spec("split", "slsm_mig_opt")
    agg = parse_migration_spec("""
        migration preaggregate_order_line
        class preaggregate
        old order_line
        new order_line_agg pk ol_w_id,ol_d_id,ol_o_id
        cols order_line: ol_w_id,ol_d_id,ol_o_id
        col ol_total = sum(order_line.ol_amount)
        group ol_w_id,ol_d_id,ol_o_id
    """)
    assert agg == tpcc.migration_spec("preaggregate", "slsm_full")
    assert agg.new_tables[0].column_map["ol_total"] == Agg("sum", "order_line", "ol_amount")
    join = parse_migration_spec("""
        migration join_order_line_stock
        class join
        old order_line
        old stock
        new order_line_stock pk ol_w_id,ol_d_id,ol_o_id,ol_number
        cols order_line: ol_w_id, ol_d_id, ol_o_id, ol_number, ol_i_id, ol_supply_w_id, ol_delivery_d, ol_quantity, ol_amount, ol_dist_info
        cols stock: s_data, s_dist_info
        join order_line.ol_supply_w_id = stock.s_w_id
        join order_line.ol_i_id = stock.s_i_id
    """)
    assert join == tpcc.migration_spec("join", "slsm_full")


def test_parser_errors():
    with pytest.raises(CatalogError, match="line 2"):
        parse_migration_spec("migration x\nfrobnicate y\n")
    with pytest.raises(CatalogError):
        parse_migration_spec("class split\n")
    with pytest.raises(CatalogError, match="line 3"):
        parse_migration_spec("migration x\nclass split\nnew t id\n")


# -- rewrite soundness against brute force ---------------------------------------------

COLS = {"w": (1, 2), "o": (1, 6), "n": (1, 3), "item": (1, worlds.ITEMS), "qty": (1, 5)}
OPS = ("=", "<", "<=", ">", ">=", "in")


@st.composite
def conds(draw, cols=tuple(COLS)):
    col = draw(st.sampled_from(cols))
    lo, hi = COLS[col]
    op = draw(st.sampled_from(OPS))
    if op == "in":
        return Cond(col, op, draw(st.lists(st.integers(lo, hi), min_size=1, max_size=3)))
    return Cond(col, op, draw(st.integers(lo - 1, hi + 1)))


def join_state(seed, orders=6):
    rng = random.Random(seed)
    return worlds.line_rows(orders, rng), worlds.stock_rows(rng, missing={(1, 3), (2, worlds.ITEMS)})


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10 ** 6), st.lists(conds(), max_size=3))
def test_join_rewrite_selects_exactly_the_matching_rows(seed, cs):
    lines, stock = join_state(seed)
    pred = Predicate(tuple(cs))
    f = PredicateFilter(worlds.join_spec(), "line", "stock")
    rw = f.rewrite("line_stock", pred)
    got = worlds.brute_join([r for r in lines if rw["line"].matches(r)], [s for s in stock if rw["stock"].matches(s)])
    want = [r for r in worlds.brute_join(lines, stock) if pred.matches(r)]
    assert got == want


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.lists(conds(("w", "o", "item")), max_size=2))
def test_join_migration_matches_nested_loop_oracle(seed, cs):
    pred = Predicate(tuple(cs))
    db, h = worlds.make_db("join", seed=seed, size=6)
    lines, stock = db.table_rows("line"), db.table_rows("stock")
    run_system_txn(db, lambda ctx: migrate_scopes(db, ctx, h, h.rewrite_predicate("line_stock", pred)))
    migrated = db.table_rows("line_stock")
    # every joined row matching the predicate is present; nothing outside its scopes is
    want = [r for r in worlds.brute_join(lines, stock) if pred.matches(r)]
    assert all(r in migrated for r in want)
    touched = {(r["w"], r["o"], r["n"]) for r in lines if h.rewrite_predicate("line_stock", pred)["line"].matches(r)}
    assert {(r["w"], r["o"], r["n"]) for r in migrated} <= touched
    assert all(r in worlds.brute_join(lines, stock) for r in migrated)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.lists(conds(("w", "o")), max_size=2))
def test_preaggregate_rewrite_matches_grouped_oracle(seed, cs):
    pred = Predicate(tuple(cs))
    db, h = worlds.make_db("preaggregate", seed=seed, size=6)
    lines = db.table_rows("line")
    run_system_txn(db, lambda ctx: migrate_scopes(db, ctx, h, h.rewrite_predicate("line_total", pred)))
    want = [r for r in worlds.brute_totals(lines) if pred.matches(r)]
    assert db.table_rows("line_total") == want


def test_catalog_survives_deepcopy():
    db, h = worlds.make_db("split")
    twin = db.fork()
    assert twin.catalog.table("acct_money").table_id == db.catalog.table("acct_money").table_id
    assert isinstance(twin, Database)
