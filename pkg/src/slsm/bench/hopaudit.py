"""Round-trip accounting for one lazy point select under forced node placements.

The setup is the small user table (id 51) split into ``user_rights`` (71) and
``user_info`` (72). The gateway, the old row's leaseholder and the new rows'
leaseholder are pinned to realize each colocation category, then a single
``SELECT id, rights FROM user_rights WHERE id = 1001`` runs on an unmigrated
row with zero service cost, so the round-trip count is all that remains.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from ..catalog import PREFIXED_STRATEGIES, MigrationSpec, NewTableSpec, Predicate
from ..engine import CostModel, Database
from ..txn import Hop, Statement

CATEGORIES = ("gateway,old,new", "gateway,old", "gateway,new", "old,new", "none")
ALIASES = {"∅": "none", "empty": "none", "{}": "none"}
AUDIT_STRATEGIES = ("slsm_basic", "slsm_mig_opt", "slsm_full")

# category -> (gateway, old leaseholder, new leaseholder)
PLACEMENTS = {
    "gateway,old,new": (1, 1, 1),
    "gateway,old": (1, 1, 2),
    "gateway,new": (1, 2, 1),
    "old,new": (2, 1, 1),
    "none": (1, 2, 3),
}

USER_COLUMNS = (("id", "int"), ("name", "text"), ("rights", "text"), ("email", "text"))


@dataclass
class HopAudit:
    category: str
    strategy: str
    round_trips: int
    rows: list[dict]
    ledger: list[Hop] = field(default_factory=list)
    parts: dict[str, float] = field(default_factory=dict)
    service: float = 0.0
    fused: bool = False


def normalize_category(category: str) -> str:
    c = ALIASES.get(category, category).replace(" ", "").strip("{}")
    if c not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}; choose from {CATEGORIES}")
    return c


def user_split_spec(strategy: str) -> MigrationSpec:
    return MigrationSpec(
        "user_split", "split", ("user",),
        (
            NewTableSpec("user_rights", ("id",), (("id", ("user", "id")), ("rights", ("user", "rights"))), 71),
            NewTableSpec("user_info", ("id",), (("id", ("user", "id")), ("name", ("user", "name")),
                                                ("email", ("user", "email"))), 72),
        ),
        strategy,
    )


def example_database(old_node: int, cost: CostModel | None = None, rows=range(1000, 1003)) -> Database:
    db = Database(3, cost or CostModel.hop_audit(), first_table_id=51)
    db.create_table("user", USER_COLUMNS, ("id",), table_id=51, leases=[old_node])
    db.load_rows("user", ({"id": i, "name": f"u{i}", "rights": "rw" if i % 2 else "r", "email": f"u{i}@x"}
                          for i in rows))
    return db


def constructible(category: str, strategy: str) -> bool:
    g, o, n = PLACEMENTS[normalize_category(category)]
    # prefixed keys put old and new rows on one leaseholder
    return strategy not in PREFIXED_STRATEGIES or o == n


def audit(category: str, strategy: str, cost: CostModel | None = None) -> HopAudit | None:
    """Run the audit select; ``None`` if the placement cannot exist for this strategy."""
    category = normalize_category(category)
    if not constructible(category, strategy):
        return None
    g, o, n = PLACEMENTS[category]
    db = example_database(o, cost)
    db.register_migration(user_split_spec(strategy), new_leases=lambda i: n)
    txn = db.begin(g, label="audit")
    rows = db.execute(txn, Statement.select("user_rights", Predicate.eq(id=1001), columns=("id", "rights")))
    db.commit(txn)
    st = db.last_step
    placed = st.placement
    if placed is not None and placed != (g, o, n):
        raise AssertionError(f"placement {placed} does not realize {category}")
    return HopAudit(category, strategy, txn.round_trips, rows, list(txn.hop_ledger), dict(st.parts),
                    st.service, st.fused)


def hop_audit(category: str, strategy: str) -> int | None:
    a = audit(category, strategy)
    return None if a is None else a.round_trips


def hop_table(strategies=AUDIT_STRATEGIES) -> dict[str, dict[str, int | None]]:
    return {c: {s: hop_audit(c, s) for s in strategies} for c in CATEGORIES}


def format_table(table: dict[str, dict[str, int | None]]) -> str:
    """CSV with one row per category; unconstructible cells are ``-``."""
    strategies = list(next(iter(table.values())))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category", *strategies])
    for c, row in table.items():
        w.writerow([c, *("-" if v is None else v for v in row.values())])
    return buf.getvalue()
