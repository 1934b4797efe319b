"""Transactions, statements and strict two-phase locking with wound-wait.

Locks are logical: a resource is ``(table, pk_prefix)`` and covers every row
of ``table`` whose primary key starts with ``pk_prefix``. Two requests on the
same table conflict when one prefix extends the other and the modes clash.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .catalog import TRUE, Predicate

S, X = "S", "X"


class TxnError(Exception):
    retryable = False


class LockWait(TxnError):
    """The requester is younger than a conflicting holder and must wait."""

    retryable = True

    def __init__(self, txn: "Transaction", holder: "Transaction", resource):
        super().__init__(f"txn {txn.txn_id} waits for txn {holder.txn_id} on {resource}")
        self.holder = holder
        self.resource = resource


class TxnAborted(TxnError):
    """Wounded by an older transaction (deadlock avoidance); retry from scratch."""

    retryable = True


class SchemaRetired(TxnError):
    """The statement targets an old-schema table that is no longer served."""

    retryable = True


class SchemaUnavailable(TxnError):
    """The new schema is not yet serviceable (OSC before public)."""


class DuplicateKey(TxnError):
    pass


class Hop(NamedTuple):
    src: int
    dst: int
    purpose: str


@dataclass(frozen=True)
class Incr:
    """Update assignment ``col = col + delta``."""

    delta: object


@dataclass(frozen=True)
class Statement:
    kind: str
    table: str
    where: Predicate = TRUE
    row: dict | None = None
    set: dict | None = None
    columns: tuple[str, ...] | None = None
    limit: int | None = None

    def __post_init__(self):
        if self.kind not in ("select", "insert", "update", "delete"):
            raise ValueError(f"unknown statement kind {self.kind!r}")
        if self.kind == "insert":
            if self.row is None or self.where.conds:
                raise ValueError("insert takes a row payload and no predicate")
        elif self.row is not None:
            raise ValueError(f"{self.kind} takes no row payload")
        if (self.set is not None) != (self.kind == "update"):
            raise ValueError("only update statements carry assignments")

    @classmethod
    def select(cls, table, where=TRUE, columns=None, limit=None):
        return cls("select", table, where, columns=columns, limit=limit)

    @classmethod
    def insert(cls, table, row):
        return cls("insert", table, row=dict(row))

    @classmethod
    def update(cls, table, where, set):
        return cls("update", table, where, set=dict(set))

    @classmethod
    def delete(cls, table, where):
        return cls("delete", table, where)


@dataclass(eq=False)
class Transaction:
    txn_id: int
    gateway: int
    priority: tuple
    start: float = 0.0
    end: float | None = None
    status: str = "active"
    label: str = ""
    locks: dict = field(default_factory=dict)  # table -> {prefix: mode}
    hop_ledger: list[Hop] = field(default_factory=list)
    undo: list = field(default_factory=list)  # (key, previous value or None)
    mig_events: list = field(default_factory=list)  # (mig_id, scope)
    wounded: bool = False
    on_commit: list = field(default_factory=list)
    busy: float = 0.0
    new_schema_busy: float = 0.0

    @property
    def active(self) -> bool:
        return self.status == "active"

    @property
    def round_trips(self) -> int:
        return len(self.hop_ledger)

    def holds(self, table: str, pk: tuple, write: bool) -> bool:
        held = self.locks.get(table)
        if not held:
            return False
        for i in range(len(pk) + 1):
            m = held.get(pk[:i])
            if m == X or (m == S and not write):
                return True
        return False


def _conflicts(a: str, b: str) -> bool:
    return a == X or b == X


def _overlaps(p: tuple, q: tuple) -> bool:
    n = min(len(p), len(q))
    return p[:n] == q[:n]


class LockManager:
    def __init__(self):
        self.table: dict[str, dict[tuple, dict[Transaction, str]]] = {}

    def acquire(self, txn: Transaction, table: str, prefix: tuple, mode: str, wound) -> None:
        """Grant or raise LockWait; younger conflicting holders are wounded via ``wound``."""
        mine = txn.locks.get(table, {}).get(prefix)
        if mine == X or mine == mode:
            return
        entries = self.table.setdefault(table, {})
        victims = []
        for q, holders in entries.items():
            if not _overlaps(prefix, q):
                continue
            for h, m in holders.items():
                if h is txn or not _conflicts(mode, m):
                    continue
                if h.priority < txn.priority:
                    raise LockWait(txn, h, (table, prefix))
                victims.append(h)
        for v in dict.fromkeys(victims):
            wound(v)
        entries.setdefault(prefix, {})[txn] = mode
        txn.locks.setdefault(table, {})[prefix] = mode

    def release_all(self, txn: Transaction) -> None:
        for table, held in txn.locks.items():
            entries = self.table.get(table)
            if entries is None:
                continue
            for prefix in held:
                holders = entries.get(prefix)
                if holders is not None:
                    holders.pop(txn, None)
                    if not holders:
                        del entries[prefix]
        txn.locks = {}

    def holders(self) -> set[Transaction]:
        return {h for e in self.table.values() for hs in e.values() for h in hs}


HOP_CSV_HEADER = ("txn_id", "strategy", "category", "round_trips")


def hops_csv(rows: Iterable[tuple]) -> str:
    """Render hop-ledger records ``(txn_id, strategy, category, round_trips)`` as CSV."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HOP_CSV_HEADER)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
