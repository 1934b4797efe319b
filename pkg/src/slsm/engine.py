"""The database engine: statement execution over the cluster, with locking,
undo logging and per-statement hop/time accounting.

Every statement runs as one atomic *step*. A step records the data flows
between nodes it causes; requests between the same pair of nodes inside one
step are batched, so each distinct node pair costs one round trip. A step's
duration is ``round_trips * rtt`` plus its service time, where service time
is the sum of the migration and user parts, or their maximum for fused plans.
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass
from typing import Callable, Iterable

from . import migration
from .catalog import (
    TRUE,
    Catalog,
    CatalogError,
    MigrationHandle,
    MigrationSpec,
    Predicate,
    TableDescriptor,
)
from .keys import Key, decode_key, encode_prefix, encode_prefixed_key, prefix_end
from .kvstore import Cluster, LockViolation, dump_values
from .txn import (
    S,
    X,
    DuplicateKey,
    Hop,
    Incr,
    LockManager,
    SchemaRetired,
    SchemaUnavailable,
    Statement,
    Transaction,
    TxnAborted,
)


@dataclass
class CostModel:
    """Virtual-time costs in milliseconds."""

    rtt: float = 0.0
    part_overhead: float = 0.0
    per_key: float = 0.0
    per_write: float = 0.0
    prefix_op: float = 0.0

    @classmethod
    def hop_audit(cls, rtt: float = 1.0) -> "CostModel":
        return cls(rtt=rtt)

    @classmethod
    def bench(cls, rtt: float) -> "CostModel":
        return cls(rtt=rtt, part_overhead=4.0, per_key=0.05, per_write=0.1, prefix_op=0.2)


class Exec:
    """Bookkeeping for one step."""

    __slots__ = ("txn", "gateway", "flows", "parts", "fused", "new_schema", "placement",
                 "duration", "round_trips", "service")

    def __init__(self, txn: Transaction):
        self.txn = txn
        self.gateway = txn.gateway
        self.flows: list[tuple[int, int, str]] = []
        self.parts: dict[str, float] = {}
        self.fused = False
        self.new_schema = False
        self.placement: tuple[int, int, int] | None = None
        self.duration = 0.0
        self.round_trips = 0
        self.service = 0.0

    def flow(self, a: int, b: int, purpose: str) -> None:
        self.flows.append((a, b, purpose))

    def charge(self, part: str, amount: float) -> None:
        self.parts[part] = self.parts.get(part, 0.0) + amount


class _Token:
    __slots__ = ("db", "txn", "only")

    def __init__(self, db: "Database", txn: Transaction, only: frozenset | None = None):
        self.db, self.txn, self.only = db, txn, only

    def check(self, key: Key, write: bool) -> None:
        if not self.db.audit:
            return
        table, pk = self.db.logical(key)
        if self.only is not None and table not in self.only:
            return
        if not self.txn.holds(table, pk, write):
            raise LockViolation(f"txn {self.txn.txn_id} touched {table}{pk} without a lock")


class Database:
    def __init__(
        self,
        nodes: int | list[int] = 3,
        cost: CostModel | None = None,
        seed: int = 0,
        clock_mode: str = "virtual",
        audit: bool = True,
        first_table_id: int = 51,
    ):
        node_ids = list(range(1, nodes + 1)) if isinstance(nodes, int) else list(nodes)
        self.cost = cost or CostModel()
        self.cluster = Cluster(node_ids, self.cost.rtt, clock_mode)
        self.catalog = Catalog(first_table_id)
        self.locks = LockManager()
        self.rng = random.Random(seed)
        self.audit = audit
        self.now = 0.0
        self.sync_clock = True
        self.marker_owner: dict[int, tuple[str, MigrationHandle]] = {}
        # (mig_id, scope) -> committed migration count
        self.migration_counts: dict[tuple, int] = {}
        self.on_release: list[Callable[[], None]] = []
        self.events: list[tuple] = []  # (time, kind, *payload)
        self._gw = 0
        self._txn_seq = 0

    @property
    def nodes(self) -> list[int]:
        return self.cluster.nodes

    # -- schema ------------------------------------------------------------

    def create_table(self, name, columns, pk, table_id=None, leases=None) -> TableDescriptor:
        d = self.catalog.create_table(name, columns, pk, table_id)
        lo = encode_prefix(d.table_id)
        self.cluster.split_range(prefix_end(lo))
        self.cluster.split_range(lo, self._lease(leases, 0))
        return d

    def _lease(self, leases, i: int):
        if leases is None:
            return None
        if callable(leases):
            return leases(i)
        return leases[i % len(leases)]

    def split_table(self, name: str, boundaries: Iterable[tuple], leases=None) -> None:
        """Split a table's keyspace at the given pk prefixes."""
        d = self.catalog.table(name)
        for i, p in enumerate(boundaries, 1):
            self.cluster.split_range(encode_prefix(d.table_id, p), self._lease(leases, i))

    def table_ranges(self, name: str):
        d = self.catalog.table(name)
        lo, hi = d.prefix_interval(())
        return [r for r, _, _ in self.cluster.split_interval(lo, hi)]

    def load_rows(self, name: str, rows: Iterable[dict], check: bool = False) -> int:
        d = self.catalog.table(name)
        items = []
        for row in rows:
            if check:
                d.check_row(row)
            pk, vals = d.split_row(row)
            items.append((d.key(pk), vals))
        self.cluster.bulk_load(items)
        return len(items)

    def logical(self, key: Key) -> tuple[str, tuple]:
        d = decode_key(key)
        if d.sub_table_id is None:
            return self.catalog.by_id[d.table_id].name, d.pk
        owner = self.marker_owner.get(d.sub_table_id)
        if owner is not None:
            return owner[0], d.pk
        return self.catalog.by_id[d.sub_table_id].name, d.pk + d.sub_pk

    # -- transactions -------------------------------------------------------

    def next_gateway(self) -> int:
        g = self.nodes[self._gw % len(self.nodes)]
        self._gw += 1
        return g

    def begin(self, gateway: int | None = None, priority: tuple | None = None, label: str = "") -> Transaction:
        if gateway is None:
            gateway = self.next_gateway()
        if gateway not in self.nodes:
            raise ValueError(f"unknown gateway node {gateway}")
        self._txn_seq += 1
        tid = self._txn_seq
        t = Transaction(tid, gateway, priority or (self.now, tid), start=self.now, label=label)
        return t

    def commit(self, txn: Transaction) -> None:
        if txn.status != "active":
            raise TxnAborted(f"txn {txn.txn_id} is {txn.status}")
        txn.status = "committed"
        txn.end = self.now
        for ev in txn.mig_events:
            self.migration_counts[ev] = self.migration_counts.get(ev, 0) + 1
        txn.undo = []
        for fn in txn.on_commit:
            fn()
        txn.on_commit = []
        self._release(txn)

    def abort(self, txn: Transaction) -> None:
        if txn.status != "active":
            return
        self._rollback_to(txn, 0)
        txn.mig_events = []
        txn.on_commit = []
        txn.status = "aborted"
        txn.end = self.now
        self._release(txn)

    def _wound(self, victim: Transaction) -> None:
        victim.wounded = True
        self.abort(victim)

    def _release(self, txn: Transaction) -> None:
        self.locks.release_all(txn)
        for cb in self.on_release:
            cb()

    def _rollback_to(self, txn: Transaction, mark: int) -> None:
        data = self.cluster.data
        while len(txn.undo) > mark:
            key, old = txn.undo.pop()
            if old is None:
                data.pop(key, None)
            else:
                data[key] = old

    def lock(self, ctx: Exec, table: str, prefix: tuple, mode: str) -> None:
        self.locks.acquire(ctx.txn, table, tuple(prefix), mode, self._wound)

    def charge_hop(self, txn: Transaction, src: int, dst: int, purpose: str) -> int:
        """Record one request/response round trip between two distinct nodes."""
        if src == dst:
            return 0
        txn.hop_ledger.append(Hop(src, dst, purpose))
        return 1

    def step(self, txn: Transaction, body: Callable[[Exec], object]):
        if txn.status != "active":
            raise TxnAborted(f"txn {txn.txn_id} is {txn.status}")
        ctx = Exec(txn)
        mark, ev, oc = len(txn.undo), len(txn.mig_events), len(txn.on_commit)
        try:
            out = body(ctx)
        except BaseException:
            if txn.status == "active":
                self._rollback_to(txn, mark)
                del txn.mig_events[ev:]
                del txn.on_commit[oc:]
            raise
        seen = set()
        rts = 0
        for a, b, purpose in ctx.flows:
            if a == b:
                continue
            pair = (a, b) if a < b else (b, a)
            if pair in seen:
                continue
            seen.add(pair)
            rts += self.charge_hop(txn, a, b, purpose)
        parts = ctx.parts.values()
        service = (max(parts) if ctx.fused else sum(parts)) if parts else 0.0
        ctx.round_trips = rts
        ctx.service = service
        ctx.duration = rts * self.cost.rtt + service
        txn.busy += ctx.duration
        if ctx.new_schema:
            txn.new_schema_busy += ctx.duration
        self.last_step = ctx
        if self.sync_clock:
            self.now += ctx.duration
        return out

    def execute(self, txn: Transaction, stmt: Statement) -> list[dict]:
        return self.step(txn, lambda ctx: self._dispatch(ctx, stmt))

    def run(self, stmt: Statement, gateway: int | None = None) -> list[dict]:
        """Execute one statement in its own transaction and commit."""
        t = self.begin(gateway)
        try:
            rows = self.execute(t, stmt)
        except BaseException:
            self.abort(t)
            raise
        self.commit(t)
        return rows

    def _dispatch(self, ctx: Exec, stmt: Statement) -> list[dict]:
        desc = self.catalog.table(stmt.table)
        h = self.catalog.migration_touching(stmt.table)
        if h is None:
            return self.exec_plain(ctx, desc, stmt)
        if stmt.table in h.new:
            ctx.new_schema = True
            if not h.lazy:
                if h.state.osc_state != "public":
                    raise SchemaUnavailable(f"{stmt.table} is not public yet ({h.state.osc_state})")
                return self.exec_plain(ctx, desc, stmt)
            if h.state.done:
                return self.exec_plain(ctx, desc, stmt)
            if stmt.kind == "insert":
                return migration.run_insert_direct(self, ctx, h, stmt)
            if h.strategy in ("slsm_user_opt", "slsm_full"):
                return migration.run_fusion(self, ctx, h, stmt)
            return migration.run_lazy(self, ctx, h, stmt)
        # statement on an old table
        retired = stmt.table in h.consumed and (h.lazy or h.state.osc_state == "public")
        if retired:
            raise SchemaRetired(f"{stmt.table} was replaced by migration {h.spec.name}")
        if not h.lazy and h.state.osc_state != "public":
            return migration.run_osc(self, ctx, h, stmt)
        return migration.run_maintained(self, ctx, h, stmt)

    # -- storage helpers -----------------------------------------------------

    def intervals(self, desc: TableDescriptor, pred: Predicate) -> list[tuple[tuple, Key, Key]]:
        """Physical intervals (with their pk lock prefix) that may hold rows matching ``pred``."""
        prefix, rng = pred.pk_bounds(desc.pk)
        prefixes = [prefix]
        if rng is None and len(prefix) < len(desc.pk):
            col = desc.pk[len(prefix)]
            ins = [set(c.value) for c in pred.conds if c.column == col and c.op == "in"]
            if ins:
                vals = set.intersection(*ins)
                prefixes = [prefix + (v,) for v in sorted(vals)]
        out = []
        for p in prefixes:
            lo, hi = desc.prefix_interval(p)
            if rng and len(p) == len(prefix):
                for c in rng:
                    a, b = desc.prefix_interval(p + (c.value,))
                    if c.op == ">=":
                        lo = max(lo, a)
                    elif c.op == ">":
                        lo = max(lo, b)
                    elif c.op == "<":
                        hi = min(hi, a)
                    else:
                        hi = min(hi, b)
            if lo < hi:
                out.append((p, lo, hi))
        return out

    def lock_prefixes(self, desc: TableDescriptor, pred: Predicate) -> list[tuple]:
        prefix, rng = pred.pk_bounds(desc.pk)
        if rng is None and len(prefix) < len(desc.pk):
            col = desc.pk[len(prefix)]
            ins = [set(c.value) for c in pred.conds if c.column == col and c.op == "in"]
            if ins:
                return [prefix + (v,) for v in sorted(set.intersection(*ins))]
        return [prefix]

    def _key_cost(self, ctx: Exec, part: str, key: Key, write: bool) -> None:
        c = self.cost
        amt = c.per_write if write else c.per_key
        if key and decode_key_is_prefixed(key):
            amt += c.prefix_op
        ctx.charge(part, amt)

    def scan_raw(self, ctx: Exec, lo: Key, hi: Key, origin: int, part: str, purpose: str, only=None):
        """Scan [lo, hi) across ranges; yields (key, value, leaseholder)."""
        out = []
        token = _Token(self, ctx.txn, only)
        cost = self.cost
        for r, a, b in self.cluster.split_interval(lo, hi):
            ctx.flow(origin, r.leaseholder, purpose)
            ctx.charge(part, cost.per_key)  # seek
            for k, v in self.cluster.scan(r.leaseholder, a, b, token):
                self._key_cost(ctx, part, k, False)
                out.append((k, v, r.leaseholder))
        return out

    def scan_rows(self, ctx: Exec, desc: TableDescriptor, pred: Predicate, origin: int | None = None,
                  part: str = "usr", purpose: str = "read", limit: int | None = None) -> list[dict]:
        origin = ctx.gateway if origin is None else origin
        rows = []
        tid = desc.table_id
        prefixed = desc.prefixed
        only = frozenset((desc.name,))
        for _, lo, hi in self.intervals(desc, pred):
            for k, v, _lh in self.scan_raw(ctx, lo, hi, origin, part, purpose, only):
                d = decode_key(k)
                if prefixed:
                    if d.sub_table_id != tid:
                        continue
                    pk = d.pk + d.sub_pk
                else:
                    if d.table_id != tid or d.sub_table_id is not None:
                        continue
                    pk = d.pk
                row = desc.join_row(pk, v)
                if pred.matches(row):
                    rows.append(row)
                    if limit is not None and len(rows) >= limit:
                        return rows
        return rows

    def read_key(self, ctx: Exec, key: Key, origin: int, part: str, purpose: str):
        lh = self.cluster.leaseholder(key)
        ctx.flow(origin, lh, purpose)
        self._key_cost(ctx, part, key, False)
        return self.cluster.get(lh, key, _Token(self, ctx.txn))

    def write_key(self, ctx: Exec, key: Key, value: tuple | None, origin: int, part: str, purpose: str):
        lh = self.cluster.leaseholder(key)
        ctx.flow(origin, lh, purpose)
        self._key_cost(ctx, part, key, True)
        token = _Token(self, ctx.txn)
        if value is None:
            old = self.cluster.delete(lh, key, token)
        else:
            old = self.cluster.put(lh, key, value, token)
        ctx.txn.undo.append((key, old))
        return old

    def read_row(self, ctx: Exec, desc: TableDescriptor, pk: tuple, origin: int | None = None,
                 part: str = "usr", purpose: str = "read") -> dict | None:
        origin = ctx.gateway if origin is None else origin
        v = self.read_key(ctx, desc.key(pk), origin, part, purpose)
        return None if v is None else desc.join_row(pk, v)

    def put_row(self, ctx: Exec, desc: TableDescriptor, row: dict, origin: int | None = None,
                part: str = "usr", purpose: str = "write") -> None:
        origin = ctx.gateway if origin is None else origin
        pk, vals = desc.split_row(row)
        self.write_key(ctx, desc.key(pk), vals, origin, part, purpose)

    def delete_row(self, ctx: Exec, desc: TableDescriptor, pk: tuple, origin: int | None = None,
                   part: str = "usr", purpose: str = "delete") -> None:
        origin = ctx.gateway if origin is None else origin
        self.write_key(ctx, desc.key(pk), None, origin, part, purpose)

    # -- plain execution -------------------------------------------------------

    def exec_plain(self, ctx: Exec, desc: TableDescriptor, stmt: Statement, part: str = "usr",
                   locked: bool = False) -> list[dict]:
        rows, _ = self.exec_plain_tracked(ctx, desc, stmt, part, locked)
        return rows

    def exec_plain_tracked(self, ctx: Exec, desc: TableDescriptor, stmt: Statement, part: str = "usr",
                           locked: bool = False) -> tuple[list[dict], list[tuple[dict | None, dict | None]]]:
        """Run a statement directly against ``desc``; also returns (before, after) images of writes."""
        ctx.charge(part, self.cost.part_overhead)
        kind = stmt.kind
        if kind == "insert":
            row = full_row(desc, stmt.row)
            desc.check_row(row)
            pk, _ = desc.split_row(row)
            if not locked:
                self.lock(ctx, desc.name, pk, X)
            if self.read_row(ctx, desc, pk, part=part) is not None:
                raise DuplicateKey(f"{desc.name}{pk} exists")
            self.put_row(ctx, desc, row, part=part, purpose="insert")
            return [row], [(None, row)]
        mode = S if kind == "select" else X
        if not locked:
            for p in self.lock_prefixes(desc, stmt.where):
                self.lock(ctx, desc.name, p, mode)
        limit = stmt.limit if kind == "select" else None
        rows = self.scan_rows(ctx, desc, stmt.where, part=part, limit=limit)
        return self.apply_user_op(ctx, desc, stmt, rows, part)

    def apply_user_op(self, ctx: Exec, desc: TableDescriptor, stmt: Statement, rows: list[dict], part: str):
        if stmt.kind == "select":
            if stmt.limit is not None:
                rows = rows[: stmt.limit]
            return project(rows, stmt.columns), []
        changes = []
        if stmt.kind == "update":
            bad = set(stmt.set) & set(desc.pk)
            if bad:
                raise CatalogError(f"primary key columns cannot be updated: {sorted(bad)}")
            out = []
            for r in rows:
                new = dict(r)
                for c, v in stmt.set.items():
                    desc.column(c)
                    new[c] = r[c] + v.delta if isinstance(v, Incr) else v
                desc.check_row(new)
                self.put_row(ctx, desc, new, part=part, purpose="update")
                changes.append((r, new))
                out.append(new)
            return project(out, stmt.columns), changes
        for r in rows:
            self.delete_row(ctx, desc, tuple(r[c] for c in desc.pk), part=part)
            changes.append((r, None))
        return project(rows, stmt.columns), changes

    # -- migrations --------------------------------------------------------------

    def register_migration(self, spec: MigrationSpec, new_leases=None) -> MigrationHandle:
        """Install a migration. ``new_leases(i)`` picks leaseholders for plain new-table ranges."""
        h = self.catalog.register_migration(spec)
        try:
            migration.install(self, h, new_leases)
        except BaseException:
            self.catalog.migrations.remove(h)
            for t in h.new.values():
                self.catalog.tables.pop(t.name, None)
                self.catalog.by_id.pop(t.table_id, None)
            raise
        h.registered_at = self.now
        self.events.append((self.now, "register", h.spec.name))
        migration.availability_probe(self, h)
        return h

    # -- system-level inspection (bypasses locks; for oracles and reports) ------

    def table_rows(self, name: str) -> list[dict]:
        desc = self.catalog.table(name)
        lo, hi = desc.prefix_interval(())
        out = []
        for k in self.cluster.data.irange(lo, hi, inclusive=(True, False)):
            d = decode_key(k)
            if desc.prefixed:
                if d.sub_table_id != desc.table_id:
                    continue
                pk = d.pk + d.sub_pk
            elif d.sub_table_id is not None:
                continue
            else:
                pk = d.pk
            out.append(desc.join_row(pk, self.cluster.data[k]))
        return out

    def dump_table(self, name: str) -> str:
        """Logical snapshot: one ``hex(logical key)\\tvalues`` line per row, in pk order."""
        desc = self.catalog.table(name)
        lines = []
        for row in self.table_rows(name):
            pk, vals = desc.split_row(row)
            lines.append(f"{desc.logical_key(pk).hex()}\t{dump_values(vals)}\n")
        return "".join(lines)

    def fork(self) -> "Database":
        """Deep copy sharing immutable row tuples; used to rerun strategies on one loaded state."""
        cl, cbs = self.cluster, self.on_release
        self.cluster, self.on_release = None, []
        try:
            new = copy.deepcopy(self)
        finally:
            self.cluster, self.on_release = cl, cbs
        new.cluster = cl.fork()
        return new


def decode_key_is_prefixed(key: Key) -> bool:
    # a nested table tag can only follow a complete value, so a cheap scan is unsafe;
    # decode fully (keys are short)
    return decode_key(key).sub_table_id is not None


def full_row(desc: TableDescriptor, payload: dict) -> dict:
    row = {c: payload.get(c) for c in desc.column_names}
    return row


def project(rows: list[dict], columns) -> list[dict]:
    if columns is None:
        return rows
    return [{c: r[c] for c in columns} for r in rows]
