"""Background completion of migrations.

Lazy strategies drain remaining scopes in small transactions: the default
cursor mode walks the source keyspace and skips scopes already migrated,
while ``whole_table`` mode (the Bullfrog baseline) revisits every source
position captured at registration, migrated or not. OSC advances its state
machine and backfills in watermark order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

from . import migration
from .catalog import MigrationHandle
from .keys import encode_prefix, prefix_end
from .txn import S, TxnError

if TYPE_CHECKING:
    from .engine import Database, Exec


@dataclass
class DrainConfig:
    batch_size: int = 128
    pace: float = 1.0  # idle time between background steps, ms
    mode: str | None = None  # "cursor" | "whole_table"; defaults by strategy
    gateway: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.pace < 0:
            raise ValueError("pace must be non-negative")
        if self.mode not in (None, "cursor", "whole_table"):
            raise ValueError(f"unknown drain mode {self.mode!r}")

    def mode_for(self, h: MigrationHandle) -> str:
        if self.mode is not None:
            return self.mode
        return "whole_table" if h.strategy == "bullfrog" else "cursor"


@dataclass
class DrainReport:
    steps: int = 0
    migrated: list[int] = field(default_factory=list)
    scanned_positions: int = 0
    done_at: float | None = None


def _mark_done(db: "Database", h: MigrationHandle) -> None:
    h.state.done = True
    h.done_at = db.now
    db.events.append((db.now, "done", h.spec.name))


def drain_body(db: "Database", ctx: "Exec", h: MigrationHandle, cfg: DrainConfig) -> int:
    """One drain transaction's work; bookkeeping is applied when it commits."""
    st = h.state
    if st.done:
        return 0
    dd = h.old[h.driving]
    lo, hi = dd.prefix_interval(())
    b = cfg.batch_size

    if cfg.mode_for(h) == "whole_table" and st.position_idx < len(st.positions):
        batch = st.positions[st.position_idx: st.position_idx + b]
        count = 0
        for scope in batch:
            migration.migrate_scopes(db, ctx, h, {h.driving: migration.scope_pred(h, scope)})
            count += _migrated_now(ctx, h, scope)

        def fin():
            st.position_idx += len(batch)
            st.scanned_positions += len(batch)
            st.drain_pass_rows += count
            if st.position_idx >= len(st.positions):
                # the sweep was one full pass; a cursor pass must now confirm completion
                st.drain_pass_rows = 0

        ctx.txn.on_commit.append(fin)
        return count

    start = st.drain_cursor or lo
    found = migration.list_scopes(db, h, start, hi, limit=b + 1, unmigrated_only=True)
    batch = [s for s, _ in found[:b]]
    exhausted = len(found) <= b
    at_pass_start = not st.drain_cursor
    if not batch and at_pass_start and st.drain_pass_rows == 0:
        # final check: block writers to the source while confirming nothing is left
        db.lock(ctx, h.driving, (), S)
        found = migration.list_scopes(db, h, lo, hi, limit=b + 1, unmigrated_only=True)
        batch = [s for s, _ in found[:b]]
        exhausted = len(found) <= b
    count = 0
    for scope in batch:
        migration.migrate_scopes(db, ctx, h, {h.driving: migration.scope_pred(h, scope)})
        count += _migrated_now(ctx, h, scope)

    def fin():
        st.scanned_positions += len(batch)
        st.drain_pass_rows += count
        if not exhausted:
            st.drain_cursor = prefix_end(encode_prefix(dd.table_id, batch[-1]))
            return
        if st.drain_pass_rows == 0 and at_pass_start:
            _mark_done(db, h)
        st.drain_pass_rows = 0
        st.drain_cursor = b""

    ctx.txn.on_commit.append(fin)
    return count


def _migrated_now(ctx: "Exec", h: MigrationHandle, scope: tuple) -> bool:
    return (h.mig_id, scope) in ctx.txn.mig_events[-1:]


def osc_body(db: "Database", ctx: "Exec", h: MigrationHandle, batch_size: int) -> int:
    st = h.state
    if st.osc_state == "absent":
        ctx.txn.on_commit.append(lambda: _osc_advance(db, h, "delete_only"))
        return 0
    if st.osc_state == "delete_only":
        ctx.txn.on_commit.append(lambda: _osc_advance(db, h, "write_only"))
        return 0
    if st.osc_state == "public":
        return 0
    dd = h.old[h.driving]
    lo, hi = dd.prefix_interval(())
    found = migration.list_scopes(db, h, st.backfill_watermark or lo, hi, limit=batch_size)
    if not found:
        ctx.txn.on_commit.append(lambda: _osc_public(db, h))
        return 0
    scopes = [s for s, _ in found]
    for scope in scopes:
        migration.lock_scopes(db, ctx, h, migration.scope_pred(h, scope), mode=S)
        migration.rederive(db, ctx, h, scope, ctx.gateway, "mig")
    mark = prefix_end(encode_prefix(dd.table_id, scopes[-1]))

    def fin():
        st.backfill_watermark = mark
        st.scanned_positions += len(scopes)

    ctx.txn.on_commit.append(fin)
    return len(scopes)


def _osc_advance(db: "Database", h: MigrationHandle, to: str) -> None:
    h.state.advance(to)
    db.events.append((db.now, "osc_" + to, h.spec.name))


def _osc_public(db: "Database", h: MigrationHandle) -> None:
    _osc_advance(db, h, "public")
    migration.availability_probe(db, h)
    _mark_done(db, h)


def background_body(db: "Database", h: MigrationHandle, cfg: DrainConfig) -> Callable[["Exec"], int]:
    if h.lazy:
        return lambda ctx: drain_body(db, ctx, h, cfg)
    return lambda ctx: osc_body(db, ctx, h, cfg.batch_size)


def run_system_txn(db: "Database", body: Callable[["Exec"], object], gateway: int | None = None,
                   attempts: int = 20):
    """Run ``body`` as one single-step transaction, retrying retryable failures."""
    last = None
    for _ in range(attempts):
        txn = db.begin(gateway, label="system")
        try:
            out = db.step(txn, body)
            db.commit(txn)
            return out
        except TxnError as e:
            db.abort(txn)
            if not e.retryable:
                raise
            last = e
    raise RuntimeError(f"system transaction kept failing: {last}")


def drain_step(db: "Database", h: MigrationHandle, cfg: DrainConfig | None = None) -> int:
    """One background step (lazy drain or OSC); returns scopes migrated or backfilled."""
    cfg = cfg or DrainConfig()
    return run_system_txn(db, background_body(db, h, cfg), cfg.gateway or db.nodes[0])


def drain_until_done(db: "Database", h: MigrationHandle, cfg: DrainConfig | None = None,
                     max_steps: int | None = None) -> DrainReport:
    cfg = cfg or DrainConfig()
    rep = DrainReport()
    while not h.state.done:
        if max_steps is not None and rep.steps >= max_steps:
            break
        rep.migrated.append(drain_step(db, h, cfg))
        rep.steps += 1
        if db.sync_clock:
            db.now += cfg.pace
    rep.scanned_positions = h.state.scanned_positions
    rep.done_at = h.done_at
    return rep
