"""TPC-C-lite: schema, deterministic loader, the three migrations and five profiles.

Simplifications: no item or history tables (an item's price is a fixed
function of its id), one district-info column per stock row, logical
timestamps (the ordinal of the drawn transaction), and no terminal think/keying times.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from decimal import Decimal
from typing import Callable

from ..catalog import Agg, MigrationSpec, NewTableSpec, Predicate
from ..engine import Database
from ..sim import TxnInfo
from ..txn import Incr, Statement

MIX = {"new_order": 0.45, "payment": 0.43, "order_status": 0.04, "delivery": 0.04, "stock_level": 0.04}
MIGRATIONS = ("split", "join", "preaggregate")

CENT = Decimal("0.01")

SCHEMA = {
    "warehouse": ([("w_id", "int"), ("w_name", "text"), ("w_tax", "decimal"), ("w_ytd", "decimal")], ["w_id"]),
    "district": (
        [("d_w_id", "int"), ("d_id", "int"), ("d_name", "text"), ("d_tax", "decimal"), ("d_ytd", "decimal"),
         ("d_next_o_id", "int")],
        ["d_w_id", "d_id"],
    ),
    "customer": (
        [("c_w_id", "int"), ("c_d_id", "int"), ("c_id", "int"), ("c_first", "text"), ("c_last", "text"),
         ("c_street", "text"), ("c_city", "text"), ("c_state", "text"), ("c_credit", "text"),
         ("c_discount", "decimal"), ("c_balance", "decimal"), ("c_ytd_payment", "decimal"),
         ("c_payment_cnt", "int"), ("c_delivery_cnt", "int")],
        ["c_w_id", "c_d_id", "c_id"],
    ),
    "orders": (
        [("o_w_id", "int"), ("o_d_id", "int"), ("o_id", "int"), ("o_c_id", "int"), ("o_entry_d", "int"),
         ("o_carrier_id", "int"), ("o_ol_cnt", "int")],
        ["o_w_id", "o_d_id", "o_id"],
    ),
    "new_order": ([("no_w_id", "int"), ("no_d_id", "int"), ("no_o_id", "int")], ["no_w_id", "no_d_id", "no_o_id"]),
    "order_line": (
        [("ol_w_id", "int"), ("ol_d_id", "int"), ("ol_o_id", "int"), ("ol_number", "int"), ("ol_i_id", "int"),
         ("ol_supply_w_id", "int"), ("ol_delivery_d", "int"), ("ol_quantity", "int"), ("ol_amount", "decimal"),
         ("ol_dist_info", "text")],
        ["ol_w_id", "ol_d_id", "ol_o_id", "ol_number"],
    ),
    "stock": (
        [("s_w_id", "int"), ("s_i_id", "int"), ("s_quantity", "int"), ("s_ytd", "int"), ("s_order_cnt", "int"),
         ("s_remote_cnt", "int"), ("s_data", "text"), ("s_dist_info", "text")],
        ["s_w_id", "s_i_id"],
    ),
}

SPLIT_PRIVATE = ("c_credit", "c_discount", "c_balance", "c_ytd_payment", "c_payment_cnt", "c_delivery_cnt")
SPLIT_PUBLIC = ("c_first", "c_last", "c_street", "c_city", "c_state")
OL_COLS = tuple(c for c, _ in SCHEMA["order_line"][0])
CUST_PK = ("c_w_id", "c_d_id", "c_id")
OL_GROUP = ("ol_w_id", "ol_d_id", "ol_o_id")

LAST_SYLLABLES = ("BAR", "OUGHT", "ABLE", "PRI", "PRES", "ESE", "ANTI", "CALLY", "ATION", "EING")


def item_price(i_id: int) -> Decimal:
    return Decimal(100 + (i_id * 7919) % 9901) * CENT


def last_name(n: int) -> str:
    return "".join(LAST_SYLLABLES[int(d)] for d in f"{n:03d}")


def migration_spec(kind: str, strategy: str) -> MigrationSpec:
    if kind == "split":
        def cols(names):
            return tuple((c, ("customer", c)) for c in CUST_PK + names)

        return MigrationSpec(
            "split_customer", "split", ("customer",),
            (NewTableSpec("customer_private", CUST_PK, cols(SPLIT_PRIVATE)),
             NewTableSpec("customer_public", CUST_PK, cols(SPLIT_PUBLIC))),
            strategy,
        )
    if kind == "join":
        cols = tuple((c, ("order_line", c)) for c in OL_COLS) + (
            ("s_data", ("stock", "s_data")), ("s_dist_info", ("stock", "s_dist_info")))
        return MigrationSpec(
            "join_order_line_stock", "join", ("order_line", "stock"),
            (NewTableSpec("order_line_stock", tuple(SCHEMA["order_line"][1]), cols),),
            strategy,
            join_keys=((("order_line", "ol_supply_w_id"), ("stock", "s_w_id")),
                       (("order_line", "ol_i_id"), ("stock", "s_i_id"))),
        )
    if kind == "preaggregate":
        cols = tuple((c, ("order_line", c)) for c in OL_GROUP) + (("ol_total", Agg("sum", "order_line", "ol_amount")),)
        return MigrationSpec(
            "preaggregate_order_line", "preaggregate", ("order_line",),
            (NewTableSpec("order_line_agg", OL_GROUP, cols),), strategy, group_keys=OL_GROUP,
        )
    raise ValueError(f"unknown migration {kind!r}")


@dataclass(frozen=True)
class Population:
    """Row counts per warehouse; defaults are the standard TPC-C cardinalities."""

    scale: int = 1
    districts: int = 10
    customers: int = 3000  # per district
    items: int = 100_000
    orders: int = 3000  # per district
    new_orders: int = 900  # undelivered tail per district

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError("scale must be at least 1 warehouse")
        if min(self.districts, self.customers, self.items, self.orders) < 1:
            raise ValueError("population sizes must be positive")
        if not 0 <= self.new_orders <= self.orders:
            raise ValueError("new_orders must lie within [0, orders]")


def create_schema(db: Database, pop: Population) -> None:
    nodes = db.nodes
    for name, (cols, pk) in SCHEMA.items():
        db.create_table(name, cols, pk, leases=[nodes[0]])
    lease = lambda i: nodes[(i - 1) % len(nodes)]  # noqa: E731
    wd = [(w, d) for w in range(1, pop.scale + 1) for d in range(1, pop.districts + 1)]
    for name in ("district", "customer", "orders", "new_order", "order_line"):
        db.split_table(name, wd, leases=lease)
    db.split_table("warehouse", [(w,) for w in range(1, pop.scale + 1)], leases=lease)
    step = max(1, pop.items // 10)
    db.split_table("stock", [(w, i) for w in range(1, pop.scale + 1) for i in range(1, pop.items + 1, step)],
                   leases=lease)


def load(pop: Population, nodes: int = 3, seed: int = 1) -> Database:
    """Deterministically populate a fresh database."""
    db = Database(nodes=nodes, seed=seed)
    create_schema(db, pop)
    rng = random.Random(seed)
    ws = range(1, pop.scale + 1)
    db.load_rows("warehouse", ({"w_id": w, "w_name": f"W{w}", "w_tax": Decimal(rng.randint(0, 2000)) / 10000,
                                "w_ytd": Decimal("300000.00")} for w in ws))
    db.load_rows("district", ({"d_w_id": w, "d_id": d, "d_name": f"D{w}-{d}",
                               "d_tax": Decimal(rng.randint(0, 2000)) / 10000, "d_ytd": Decimal("30000.00"),
                               "d_next_o_id": pop.orders + 1}
                              for w in ws for d in range(1, pop.districts + 1)))

    def customers():
        for w in ws:
            for d in range(1, pop.districts + 1):
                for c in range(1, pop.customers + 1):
                    yield {
                        "c_w_id": w, "c_d_id": d, "c_id": c,
                        "c_first": f"F{rng.randrange(10**6):06d}",
                        "c_last": last_name((c - 1) % 1000),
                        "c_street": f"{rng.randint(1, 999)} Main St", "c_city": f"City{rng.randint(1, 99)}",
                        "c_state": "ABCDEFGH"[rng.randrange(8)] + "ZYXWVUT"[rng.randrange(7)],
                        "c_credit": "BC" if rng.random() < 0.1 else "GC",
                        "c_discount": Decimal(rng.randint(0, 5000)) / 10000,
                        "c_balance": Decimal("-10.00"), "c_ytd_payment": Decimal("10.00"),
                        "c_payment_cnt": 1, "c_delivery_cnt": 0,
                    }

    db.load_rows("customer", customers())
    db.load_rows("stock", ({"s_w_id": w, "s_i_id": i, "s_quantity": rng.randint(10, 100), "s_ytd": 0,
                            "s_order_cnt": 0, "s_remote_cnt": 0, "s_data": f"data{i % 9973:04d}",
                            "s_dist_info": f"dist{(i * 31) % 1000:03d}"}
                           for w in ws for i in range(1, pop.items + 1)))
    orders, lines, news = [], [], []
    undelivered_from = pop.orders - pop.new_orders + 1
    for w in ws:
        for d in range(1, pop.districts + 1):
            perm = list(range(1, pop.customers + 1))
            rng.shuffle(perm)
            for o in range(1, pop.orders + 1):
                cnt = rng.randint(5, 15)
                open_ = o >= undelivered_from
                orders.append({"o_w_id": w, "o_d_id": d, "o_id": o, "o_c_id": perm[(o - 1) % len(perm)],
                               "o_entry_d": 0, "o_carrier_id": None if open_ else rng.randint(1, 10),
                               "o_ol_cnt": cnt})
                if open_:
                    news.append({"no_w_id": w, "no_d_id": d, "no_o_id": o})
                for n in range(1, cnt + 1):
                    i = rng.randint(1, pop.items)
                    q = 5
                    lines.append({"ol_w_id": w, "ol_d_id": d, "ol_o_id": o, "ol_number": n, "ol_i_id": i,
                                  "ol_supply_w_id": w, "ol_delivery_d": None if open_ else 0, "ol_quantity": q,
                                  "ol_amount": item_price(i) * q, "ol_dist_info": f"dist{d:02d}"})
    db.load_rows("orders", orders)
    db.load_rows("new_order", news)
    db.load_rows("order_line", lines)
    return db


def row_counts(db: Database) -> dict[str, int]:
    return {t: len(db.table_rows(t)) for t in SCHEMA}


# -- transaction profiles ------------------------------------------------------


class Workload:
    """Draws transaction inputs and builds profile programs for one run."""

    def __init__(self, db: Database, pop: Population, migration: str, mix: dict | None = None, seed: int = 1):
        self.db = db
        self.pop = pop
        self.migration = migration
        self.mix = dict(mix or MIX)
        self.types = sorted(self.mix)
        self.weights = [self.mix[t] for t in self.types]
        r = random.Random(seed * 7 + 3)
        self.c_const = (r.randrange(1024), r.randrange(8192))
        self.handle = None  # set once the migration is registered
        self.issued = 0  # logical timestamp: ordinal of the drawn transaction

    def new_schema(self) -> bool:
        h = self.handle
        if h is None:
            return False
        return h.lazy or h.state.osc_state == "public"

    def nurand(self, rng: random.Random, a: int, x: int, y: int, c: int) -> int:
        return (((rng.randint(0, a) | rng.randint(x, y)) + c) % (y - x + 1)) + x

    def customer_id(self, rng) -> int:
        return self.nurand(rng, 1023, 1, self.pop.customers, self.c_const[0]) if self.pop.customers > 1 else 1

    def item_id(self, rng) -> int:
        return self.nurand(rng, 8191, 1, self.pop.items, self.c_const[1]) if self.pop.items > 1 else 1

    def next_txn(self, rng: random.Random, home_w: int) -> tuple[str, Callable[[TxnInfo], object]]:
        kind = rng.choices(self.types, self.weights)[0]
        self.issued += 1
        stamp = self.issued
        w = home_w
        d = rng.randint(1, self.pop.districts)
        if kind == "new_order":
            c = self.customer_id(rng)
            n = rng.randint(5, 15)
            items = sorted({self.item_id(rng) for _ in range(n)})
            qty = {i: rng.randint(1, 10) for i in items}
            return kind, lambda info: self.new_order(info, w, d, c, items, qty, stamp)
        if kind == "payment":
            c = self.customer_id(rng)
            amount = Decimal(rng.randint(100, 500000)) * CENT
            return kind, lambda info: self.payment(info, w, d, c, amount)
        if kind == "order_status":
            back = rng.randint(1, 10)
            return kind, lambda info: self.order_status(info, w, d, back)
        if kind == "delivery":
            carrier = rng.randint(1, 10)
            return kind, lambda info: self.delivery(info, w, carrier, stamp)
        threshold = rng.randint(10, 20)
        return kind, lambda info: self.stock_level(info, w, d, threshold)

    def _mode(self, info: TxnInfo, touches: tuple[str, ...]) -> bool:
        new = self.new_schema() and self.migration in touches
        if new:
            info.schema = "new"
        return new

    def new_order(self, info, w, d, c, items, qty, stamp=0):
        new = self._mode(info, ("split", "join"))
        (wh,) = yield Statement.select("warehouse", Predicate.eq(w_id=w), columns=("w_tax",))
        (dist,) = yield Statement.select("district", Predicate.eq(d_w_id=w, d_id=d),
                                         columns=("d_tax", "d_next_o_id"))
        o_id = dist["d_next_o_id"]
        yield Statement.update("district", Predicate.eq(d_w_id=w, d_id=d), {"d_next_o_id": Incr(1)})
        ckey = dict(c_w_id=w, c_d_id=d, c_id=c)
        if new and self.migration == "split":
            (cust,) = yield Statement.select("customer_private", Predicate.eq(**ckey), columns=("c_discount", "c_credit"))
        else:
            (cust,) = yield Statement.select("customer", Predicate.eq(**ckey), columns=("c_discount", "c_credit"))
        yield Statement.insert("orders", {"o_w_id": w, "o_d_id": d, "o_id": o_id, "o_c_id": c, "o_entry_d": stamp,
                                          "o_carrier_id": None, "o_ol_cnt": len(items)})
        yield Statement.insert("new_order", {"no_w_id": w, "no_d_id": d, "no_o_id": o_id})
        stock = yield Statement.select("stock", Predicate.of(("s_w_id", "=", w), ("s_i_id", "in", items)))
        by_item = {s["s_i_id"]: s for s in stock}
        for n, i in enumerate(items, 1):
            s = by_item[i]
            q = qty[i]
            left = s["s_quantity"] - q
            if left < 10:
                left += 91
            yield Statement.update("stock", Predicate.eq(s_w_id=w, s_i_id=i),
                                   {"s_quantity": left, "s_ytd": Incr(q), "s_order_cnt": Incr(1)})
            line = {"ol_w_id": w, "ol_d_id": d, "ol_o_id": o_id, "ol_number": n, "ol_i_id": i, "ol_supply_w_id": w,
                    "ol_delivery_d": None, "ol_quantity": q, "ol_amount": item_price(i) * q,
                    "ol_dist_info": f"dist{d:02d}"}
            if new and self.migration == "join":
                line.update(s_data=s["s_data"], s_dist_info=s["s_dist_info"])
                yield Statement.insert("order_line_stock", line)
            else:
                yield Statement.insert("order_line", line)
        return wh, cust

    def payment(self, info, w, d, c, amount):
        new = self._mode(info, ("split",))
        ckey = Predicate.eq(c_w_id=w, c_d_id=d, c_id=c)
        delta = {"c_balance": Incr(-amount), "c_ytd_payment": Incr(amount), "c_payment_cnt": Incr(1)}
        if new:
            yield Statement.select("customer_public", ckey, columns=("c_first", "c_last", "c_city"))
            yield Statement.update("customer_private", ckey, delta)
        else:
            yield Statement.select("customer", ckey, columns=("c_first", "c_last", "c_city"))
            yield Statement.update("customer", ckey, delta)
        # hot rows last, so their locks are held briefly
        yield Statement.update("district", Predicate.eq(d_w_id=w, d_id=d), {"d_ytd": Incr(amount)})
        yield Statement.update("warehouse", Predicate.eq(w_id=w), {"w_ytd": Incr(amount)})

    def order_status(self, info, w, d, back):
        new = self._mode(info, MIGRATIONS)
        (dist,) = yield Statement.select("district", Predicate.eq(d_w_id=w, d_id=d), columns=("d_next_o_id",))
        o_id = max(1, dist["d_next_o_id"] - back)
        orders = yield Statement.select("orders", Predicate.eq(o_w_id=w, o_d_id=d, o_id=o_id))
        if not orders:
            return
        c = orders[0]["o_c_id"]
        ckey = Predicate.eq(c_w_id=w, c_d_id=d, c_id=c)
        grp = Predicate.eq(ol_w_id=w, ol_d_id=d, ol_o_id=o_id)
        if new and self.migration == "split":
            yield Statement.select("customer_private", ckey, columns=("c_balance",))
            yield Statement.select("customer_public", ckey, columns=("c_first", "c_last"))
        else:
            yield Statement.select("customer", ckey, columns=("c_balance", "c_first", "c_last"))
        if new and self.migration == "join":
            yield Statement.select("order_line_stock", grp)
        elif new and self.migration == "preaggregate":
            yield Statement.select("order_line_agg", grp, columns=("ol_total",))
            yield Statement.select("order_line", grp)
        else:
            yield Statement.select("order_line", grp)

    def delivery(self, info, w, carrier, stamp=0):
        new = self._mode(info, MIGRATIONS)
        for d in range(1, self.pop.districts + 1):
            pending = yield Statement.select("new_order", Predicate.eq(no_w_id=w, no_d_id=d), limit=1)
            if not pending:
                continue
            o_id = pending[0]["no_o_id"]
            yield Statement.delete("new_order", Predicate.eq(no_w_id=w, no_d_id=d, no_o_id=o_id))
            okey = Predicate.eq(o_w_id=w, o_d_id=d, o_id=o_id)
            (order,) = yield Statement.select("orders", okey, columns=("o_c_id",))
            yield Statement.update("orders", okey, {"o_carrier_id": carrier})
            grp = Predicate.eq(ol_w_id=w, ol_d_id=d, ol_o_id=o_id)
            delivered = {"ol_delivery_d": stamp}
            if new and self.migration == "join":
                lines = yield Statement.update("order_line_stock", grp, delivered)
                total = sum((r["ol_amount"] for r in lines), Decimal(0))
            elif new and self.migration == "preaggregate":
                yield Statement.update("order_line", grp, delivered)
                agg = yield Statement.select("order_line_agg", grp, columns=("ol_total",))
                total = agg[0]["ol_total"] if agg else Decimal(0)
            else:
                lines = yield Statement.update("order_line", grp, delivered)
                total = sum((r["ol_amount"] for r in lines), Decimal(0))
            ckey = Predicate.eq(c_w_id=w, c_d_id=d, c_id=order["o_c_id"])
            table = "customer_private" if new and self.migration == "split" else "customer"
            yield Statement.update(table, ckey, {"c_balance": Incr(total), "c_delivery_cnt": Incr(1)})

    def stock_level(self, info, w, d, threshold):
        new = self._mode(info, ("join",))
        (dist,) = yield Statement.select("district", Predicate.eq(d_w_id=w, d_id=d), columns=("d_next_o_id",))
        nxt = dist["d_next_o_id"]
        rng = Predicate.of(("ol_w_id", "=", w), ("ol_d_id", "=", d), ("ol_o_id", ">=", nxt - 20), ("ol_o_id", "<", nxt))
        table = "order_line_stock" if new else "order_line"
        lines = yield Statement.select(table, rng, columns=("ol_i_id",))
        items = sorted({r["ol_i_id"] for r in lines})
        if not items:
            return 0
        low = yield Statement.select("stock", Predicate.of(("s_w_id", "=", w), ("s_i_id", "in", items),
                                                           ("s_quantity", "<", threshold)))
        return len(low)
