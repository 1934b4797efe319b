"""Migration execution: lazy and fused plans, direct inserts, OSC mirroring.

The unit of migration is a *scope*: one source row for split and join, one
group for preaggregate. A scope is migrated at most once. Split moves the
source row (delete old, insert new); join and preaggregate leave the source
in place and record a marker key inside the scope's prefix group instead.
"""

from __future__ import annotations

from decimal import Decimal
from typing import TYPE_CHECKING

from .catalog import TRUE, Agg, CatalogError, MigrationHandle, Predicate, RewriteUnsupported, TableDescriptor
from .keys import Key, decode_key, encode_prefix, encode_prefixed_key, prefix_end
from .kvstore import SplitRejected
from .txn import S, X, DuplicateKey, Statement

if TYPE_CHECKING:
    from .engine import Database, Exec


# -- setup -------------------------------------------------------------------


def install(db: "Database", h: MigrationHandle, new_leases=None) -> None:
    dd = h.old[h.driving]
    arity = len(h.scope_cols)
    needs_groups = h.marker_tid is not None or any(t.prefixed for t in h.new.values())
    if needs_groups:
        for r in db.cluster.ranges:
            if len(r.start) < 4:
                continue
            d = decode_key(r.start)
            if d.table_id == dd.table_id and (d.prefixed or len(d.pk) > arity):
                raise CatalogError(f"range boundary {d.pk} of {dd.name} splits a migration scope")
        db.cluster.register_group_arity(dd.table_id, arity)
    if h.marker_tid is not None:
        db.marker_owner[h.marker_tid] = (h.driving, h)

    lease_i = 0

    def lease():
        nonlocal lease_i
        lease_i += 1
        if new_leases is not None:
            return new_leases(lease_i - 1)
        return db.rng.choice(db.nodes)

    lo, hi = dd.prefix_interval(())
    src_bounds = [decode_key(r.start).pk for r, a, _ in db.cluster.split_interval(lo, hi) if a == r.start and r.start != lo]
    for t in h.new.values():
        if t.prefixed:
            continue
        tlo = encode_prefix(t.table_id)
        db.cluster.split_range(prefix_end(tlo))
        db.cluster.split_range(tlo, lease())
        nscope = h.new_scope_cols[t.name]
        if tuple(t.pk[: len(nscope)]) != nscope:
            continue
        for p in src_bounds:
            try:
                db.cluster.split_range(encode_prefix(t.table_id, p[:arity]), lease())
            except SplitRejected:
                pass

    if h.strategy == "bullfrog":
        h.state.positions = [s for s, _ in list_scopes(db, h, lo, hi)]


def availability_probe(db: "Database", h: MigrationHandle) -> bool:
    """Point select on a sentinel scope of the first new table; records first service time."""
    if h.first_service_at is not None:
        return True
    if not h.lazy and h.state.osc_state != "public":
        return False
    h.first_service_at = db.now
    db.events.append((db.now, "first_service", h.spec.name))
    return True


# -- helpers -------------------------------------------------------------------


def marker_key(h: MigrationHandle, scope: tuple) -> Key:
    return encode_prefixed_key(h.old[h.driving].table_id, scope, h.marker_tid)


def scope_pred(h: MigrationHandle, scope: tuple) -> Predicate:
    return Predicate.eq(**dict(zip(h.scope_cols, scope)))


def list_scopes(db: "Database", h: MigrationHandle, lo: Key, hi: Key, limit: int | None = None,
                unmigrated_only: bool = False) -> list[tuple[tuple, bool]]:
    """Lock-free listing of source scopes in [lo, hi) as (scope, migrated) pairs."""
    dd = h.old[h.driving]
    tid = dd.table_id
    arity = len(h.scope_cols)
    out: list[tuple[tuple, bool]] = []
    cur = None
    marked = False
    for k in db.cluster.keys_in(lo, hi):
        d = decode_key(k)
        if d.table_id != tid:
            continue
        if d.sub_table_id is None:
            s = d.pk[:arity]
            if s != cur:
                if cur is not None and not (unmigrated_only and marked):
                    out.append((cur, marked))
                    if limit is not None and len(out) >= limit:
                        return out
                cur, marked = s, False
        elif d.sub_table_id == h.marker_tid and d.pk == cur:
            marked = True
    if cur is not None and not (unmigrated_only and marked):
        out.append((cur, marked))
    return out[:limit] if limit is not None else out


def relaxed_rewrite(h: MigrationHandle, table: str, pred: Predicate) -> dict[str, Predicate]:
    """Rewrite onto old tables, dropping conjuncts that have no source expression.

    Dropping a conjunct widens the migrated set to whole groups (or the whole
    table), which is safe since migration of a scope is idempotent.
    """
    try:
        return h.rewrite_predicate(table, pred)
    except RewriteUnsupported:
        keep = []
        for c in pred.conds:
            try:
                h.rewrite_predicate(table, Predicate((c,)))
            except RewriteUnsupported:
                continue
            keep.append(c)
        return h.rewrite_predicate(table, Predicate(tuple(keep)))


def lock_scopes(db: "Database", ctx: "Exec", h: MigrationHandle, pred_d: Predicate, mode: str = X) -> None:
    dd = h.old[h.driving]
    arity = len(h.scope_cols)
    for p in {p[:arity] for p in db.lock_prefixes(dd, pred_d)}:
        db.lock(ctx, h.driving, p, mode)
        for t in h.new.values():
            nscope = h.new_scope_cols[t.name]
            tp = p if tuple(t.pk[: len(p)]) == nscope[: len(p)] else ()
            db.lock(ctx, t.name, tp, X)


def _zero(t: TableDescriptor, col: str):
    return Decimal(0) if t.column(col).type == "decimal" else 0


def derive(h: MigrationHandle, rows: list[dict], dim_row: dict | None) -> dict[str, dict | None]:
    """New-table rows produced by one scope's source rows."""
    out: dict[str, dict | None] = {}
    for name, t in h.new.items():
        cmap = h.filter.maps[name]
        if not rows or (h.dimension is not None and dim_row is None):
            out[name] = None
            continue
        row = {}
        for col, src in cmap.items():
            if isinstance(src, Agg):
                vals = [r[src.column] for r in rows if r[src.column] is not None]
                acc = _zero(t, col)
                for v in vals:
                    acc += v
                row[col] = acc
            elif src[0] == h.driving:
                row[col] = rows[0][src[1]]
            else:
                row[col] = dim_row[src[1]]
        out[name] = row
    return out


def lookup_dimension(db: "Database", ctx: "Exec", h: MigrationHandle, row: dict, origin: int, part: str) -> dict | None:
    dim = h.old[h.dimension]
    bound = {}
    for (ta, ca), (tb, cb) in h.spec.join_keys:
        if ta == h.dimension and tb == h.driving:
            bound[ca] = row[cb]
        elif tb == h.dimension and ta == h.driving:
            bound[cb] = row[ca]
    if all(c in bound for c in dim.pk):
        pk = tuple(bound[c] for c in dim.pk)
        db.lock(ctx, dim.name, pk, S)
        return db.read_row(ctx, dim, pk, origin=origin, part=part, purpose="mig-read")
    pred = Predicate.eq(**bound)
    for p in db.lock_prefixes(dim, pred):
        db.lock(ctx, dim.name, p, S)
    found = db.scan_rows(ctx, dim, pred, origin=origin, part=part, purpose="mig-read", limit=2)
    if len(found) > 1:
        raise CatalogError(f"join with {dim.name} is not many-to-one")
    return found[0] if found else None


# -- core migration --------------------------------------------------------------


def migrate_scopes(db: "Database", ctx: "Exec", h: MigrationHandle, preds: dict[str, Predicate],
                   origin: int | None = None, part: str = "mig", locked: bool = False) -> dict[str, list[dict]]:
    """Migrate every unmigrated scope selected by ``preds``; returns inserted rows per new table."""
    origin = ctx.gateway if origin is None else origin
    dd = h.old[h.driving]
    tid = dd.table_id
    arity = len(h.scope_cols)
    pred_d = preds.get(h.driving, TRUE)
    pred_dim = preds.get(h.dimension, TRUE) if h.dimension else TRUE
    if not locked:
        lock_scopes(db, ctx, h, pred_d)
    ctx.charge(part, db.cost.part_overhead)
    found: dict[tuple, tuple[int, list[dict]]] = {}
    marked: set[tuple] = set()
    only = frozenset((h.driving,))
    for _, lo, hi in db.intervals(dd, pred_d):
        for k, v, lh in db.scan_raw(ctx, lo, hi, origin, part, "mig-read", only):
            d = decode_key(k)
            if d.table_id != tid:
                continue
            if d.sub_table_id is None:
                row = dd.join_row(d.pk, v)
                if pred_d.matches(row):
                    found.setdefault(d.pk[:arity], (lh, []))[1].append(row)
            elif d.sub_table_id == h.marker_tid:
                marked.add(d.pk)
    out: dict[str, list[dict]] = {name: [] for name in h.new}
    for scope, (lh, rows) in found.items():
        if not h.moves and scope in marked:
            continue
        dim_row = None
        if h.dimension is not None:
            dim_row = lookup_dimension(db, ctx, h, rows[0], lh, part)
            if dim_row is not None and not pred_dim.matches(dim_row):
                continue
            if dim_row is None and pred_dim.conds:
                continue
        for name, row in derive(h, rows, dim_row).items():
            if row is None:
                continue
            t = h.new[name]
            pk, vals = t.split_row(row)
            key = t.key(pk)
            prev = db.write_key(ctx, key, vals, lh, part, "mig-write")
            if prev is not None:
                raise DuplicateKey(f"{name}{pk} already present while migrating scope {scope}")
            if ctx.placement is None:
                ctx.placement = (ctx.gateway, lh, db.cluster.leaseholder(key))
            out[name].append(row)
        if h.moves:
            for r in rows:
                db.write_key(ctx, dd.key(tuple(r[c] for c in dd.pk)), None, lh, part, "mig-delete")
        else:
            db.write_key(ctx, marker_key(h, scope), (), lh, part, "mark")
        ctx.txn.mig_events.append((h.mig_id, scope))
    return out


def _point_scope(h: MigrationHandle, t: TableDescriptor, stmt: Statement) -> tuple | None:
    """The new-table pk when ``stmt`` pins a whole scope by equality and the pk is exactly the scope."""
    nscope = h.new_scope_cols[t.name]
    if tuple(t.pk) != nscope:
        return None
    eqs = {c.column: c.value for c in stmt.where.conds if c.op == "="}
    if not all(c in eqs for c in t.pk):
        return None
    return tuple(eqs[c] for c in t.pk)


def _already_migrated(db: "Database", ctx: "Exec", h: MigrationHandle, t: TableDescriptor, stmt: Statement) -> bool:
    # a new row under a fully-bound scope proves the scope has left the old schema,
    # so the old table need not be consulted
    pk = _point_scope(h, t, stmt)
    if pk is None:
        return False
    return db.read_row(ctx, t, pk, part="usr", purpose="probe") is not None


def run_lazy(db: "Database", ctx: "Exec", h: MigrationHandle, stmt: Statement) -> list[dict]:
    t = h.new[stmt.table]
    preds = relaxed_rewrite(h, stmt.table, stmt.where)
    lock_scopes(db, ctx, h, preds.get(h.driving, TRUE))
    if not _already_migrated(db, ctx, h, t, stmt):
        migrate_scopes(db, ctx, h, preds, locked=True)
    ctx.placement = ctx.placement or (ctx.gateway, None, None)
    return db.exec_plain(ctx, t, stmt, part="usr")


def run_fusion(db: "Database", ctx: "Exec", h: MigrationHandle, stmt: Statement) -> list[dict]:
    """Single plan: scan the new table, migrate with insert-returning, merge, then apply the user op."""
    t = h.new[stmt.table]
    preds = relaxed_rewrite(h, stmt.table, stmt.where)
    lock_scopes(db, ctx, h, preds.get(h.driving, TRUE))
    ctx.fused = True
    if _already_migrated(db, ctx, h, t, stmt):
        return db.exec_plain(ctx, t, stmt, part="usr")
    ctx.charge("usr", db.cost.part_overhead)
    pre = db.scan_rows(ctx, t, stmt.where, part="usr")
    inserted = migrate_scopes(db, ctx, h, preds, locked=True)[t.name]
    merged = pre + [r for r in inserted if stmt.where.matches(r)]
    merged.sort(key=lambda r: tuple(r[c] for c in t.pk))
    rows, _ = db.apply_user_op(ctx, t, stmt, merged, "usr")
    return rows


def run_insert_direct(db: "Database", ctx: "Exec", h: MigrationHandle, stmt: Statement) -> list[dict]:
    """Insert into a new table without migrating; enforces uniqueness across both schemas."""
    from .engine import full_row

    t = h.new[stmt.table]
    row = full_row(t, stmt.row)
    t.check_row(row)
    scope = h.scope_of_new(t.name, row)
    dd = h.old[h.driving]
    lock_scopes(db, ctx, h, scope_pred(h, scope))
    ctx.charge("usr", db.cost.part_overhead)
    pk, _ = t.split_row(row)
    if db.read_row(ctx, t, pk, purpose="probe") is not None:
        raise DuplicateKey(f"{t.name}{pk} exists")
    if h.moves:
        if db.read_row(ctx, dd, scope, purpose="probe") is not None:
            raise DuplicateKey(f"{t.name}{pk} exists in {dd.name}")
    else:
        marked = db.read_key(ctx, marker_key(h, scope), ctx.gateway, "usr", "probe") is not None
        if not marked and db.scan_rows(ctx, dd, scope_pred(h, scope), purpose="probe", limit=1):
            raise DuplicateKey(f"{t.name}{pk} exists in {dd.name}")
    db.put_row(ctx, t, row, purpose="insert")
    if h.moves:
        for name, sib in h.new.items():
            if name == t.name:
                continue
            payload = dict(zip(h.new_scope_cols[name], scope))
            for c in sib.column_names:
                if c not in payload and c in stmt.row:
                    payload[c] = stmt.row[c]
            srow = full_row(sib, payload)
            sib.check_row(srow)
            spk, _ = sib.split_row(srow)
            if db.read_row(ctx, sib, spk, purpose="probe") is not None:
                raise DuplicateKey(f"{name}{spk} exists")
            db.put_row(ctx, sib, srow, purpose="insert")
    else:
        db.write_key(ctx, marker_key(h, scope), (), ctx.gateway, "usr", "mark")
    return [row]


# -- keeping derived rows in step with live sources ---------------------------------


def rederive(db: "Database", ctx: "Exec", h: MigrationHandle, scope: tuple, origin: int, part: str,
             upsert: bool = True, mark: bool = False) -> None:
    """Recompute one scope's new-table rows from the current source rows (idempotent)."""
    dd = h.old[h.driving]
    rows = db.scan_rows(ctx, dd, scope_pred(h, scope), origin=origin, part=part, purpose="mig-read")
    lh = db.cluster.leaseholder(encode_prefix(dd.table_id, scope))
    dim_row = None
    if rows and h.dimension is not None:
        dim_row = lookup_dimension(db, ctx, h, rows[0], lh, part)
    for name, want in derive(h, rows, dim_row).items():
        t = h.new[name]
        npred = Predicate.eq(**dict(zip(h.new_scope_cols[name], scope)))
        have = db.scan_rows(ctx, t, npred, origin=lh, part=part, purpose="mig-read")
        want_pk = t.split_row(want)[0] if want is not None else None
        for r in have:
            pk = tuple(r[c] for c in t.pk)
            if pk != want_pk:
                db.write_key(ctx, t.key(pk), None, lh, part, "mirror")
        if want is not None and upsert and want not in have:
            pk, vals = t.split_row(want)
            db.write_key(ctx, t.key(pk), vals, lh, part, "mirror")
    if mark and rows and h.marker_tid is not None:
        db.write_key(ctx, marker_key(h, scope), (), lh, part, "mark")


def affected_scopes(db: "Database", ctx: "Exec", h: MigrationHandle, table: str, changes) -> list[tuple]:
    arity = len(h.scope_cols)
    out: dict[tuple, None] = {}
    if table == h.driving:
        dd = h.old[table]
        for before, after in changes:
            r = after if after is not None else before
            out[tuple(r[c] for c in dd.pk)[:arity]] = None
        return list(out)
    if table != h.dimension:
        return []
    dim = h.old[table]
    mapped = {src[1] for cmap in h.filter.maps.values() for src in cmap.values()
              if not isinstance(src, Agg) and src[0] == table}
    pairs = []
    for (ta, ca), (tb, cb) in h.spec.join_keys:
        if ta == table:
            pairs.append((ca, cb))
        elif tb == table:
            pairs.append((cb, ca))
    dd = h.old[h.driving]
    for before, after in changes:
        if before is not None and after is not None:
            if all(before[c] == after[c] for c in mapped):
                continue
        r = after if after is not None else before
        pred = Predicate.eq(**{dc: r[sc] for sc, dc in pairs})
        for p in db.lock_prefixes(dd, pred):
            db.lock(ctx, h.driving, p, S)
        for row in db.scan_rows(ctx, dd, pred, purpose="mig-read"):
            out[tuple(row[c] for c in dd.pk)[:arity]] = None
    return list(out)


def run_osc(db: "Database", ctx: "Exec", h: MigrationHandle, stmt: Statement) -> list[dict]:
    """Old-schema statement while OSC builds the new tables: execute, then mirror."""
    desc = h.old[stmt.table]
    rows, changes = db.exec_plain_tracked(ctx, desc, stmt)
    state = h.state.osc_state
    if changes and state in ("delete_only", "write_only"):
        for scope in affected_scopes(db, ctx, h, stmt.table, changes):
            lock_scopes(db, ctx, h, scope_pred(h, scope), mode=S)
            rederive(db, ctx, h, scope, ctx.gateway, "mig", upsert=state == "write_only")
    return rows


def run_maintained(db: "Database", ctx: "Exec", h: MigrationHandle, stmt: Statement) -> list[dict]:
    """Statement on a live (not consumed) old table; derived rows of migrated scopes follow it."""
    desc = h.old[stmt.table]
    rows, changes = db.exec_plain_tracked(ctx, desc, stmt)
    if not changes:
        return rows
    for scope in affected_scopes(db, ctx, h, stmt.table, changes):
        lock_scopes(db, ctx, h, scope_pred(h, scope), mode=S)
        if h.lazy and not h.state.done:
            if db.read_key(ctx, marker_key(h, scope), ctx.gateway, "mig", "probe") is None:
                continue
        rederive(db, ctx, h, scope, ctx.gateway, "mig")  # marker already set
    return rows


# -- oracles ---------------------------------------------------------------------------


def exclusivity_violations(db: "Database", h: MigrationHandle) -> list[tuple]:
    """Scopes visible in both schemas at once (system read; for tests)."""
    dd = h.old[h.driving]
    lo, hi = dd.prefix_interval(())
    in_new: set[tuple] = set()
    for name in h.new:
        nscope = h.new_scope_cols[name]
        in_new.update(tuple(r[c] for c in nscope) for r in db.table_rows(name))
    return [s for s, migrated in list_scopes(db, h, lo, hi) if (h.moves or not migrated) and s in in_new]
