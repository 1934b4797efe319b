"""Table descriptors, migration specs and predicate rewriting."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field, replace
from decimal import Decimal
from typing import Iterable, Mapping, Sequence

from .keys import (
    ColocationUnsupported,
    Key,
    check_colocation,
    encode_key,
    encode_prefix,
    encode_prefixed_key,
    prefix_end,
)

log = logging.getLogger(__name__)

PY_TYPES = {"int": int, "decimal": Decimal, "text": str}

CLASSES = ("split", "join", "preaggregate")
STRATEGIES = ("osc", "bullfrog", "slsm_basic", "slsm_mig_opt", "slsm_user_opt", "slsm_full")
LAZY_STRATEGIES = STRATEGIES[1:]
PREFIXED_STRATEGIES = ("slsm_mig_opt", "slsm_full")
FUSION_STRATEGIES = ("slsm_user_opt", "slsm_full")
OSC_STATES = ("absent", "delete_only", "write_only", "public")


class CatalogError(ValueError):
    pass


class RewriteUnsupported(CatalogError):
    """A predicate references a column with no source expression (e.g. an aggregate)."""


# -- schema --------------------------------------------------------------


@dataclass(frozen=True)
class ColumnDef:
    name: str
    type: str = "int"

    def __post_init__(self):
        if self.type not in PY_TYPES:
            raise CatalogError(f"unknown column type {self.type!r}")


@dataclass(frozen=True)
class TableDescriptor:
    table_id: int
    name: str
    columns: tuple[ColumnDef, ...]
    pk: tuple[str, ...]
    # ("plain",) or ("prefixed", old_table_id, prefix_arity)
    key_mode: tuple = ("plain",)

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise CatalogError(f"{self.name}: duplicate column names")
        if not self.pk:
            raise CatalogError(f"{self.name}: empty primary key")
        for c in self.pk:
            if c not in names:
                raise CatalogError(f"{self.name}: pk column {c} not defined")
        object.__setattr__(self, "_idx", {n: i for i, n in enumerate(names)})
        object.__setattr__(self, "_vals", tuple(n for n in names if n not in self.pk))

    @property
    def prefixed(self) -> bool:
        return self.key_mode[0] == "prefixed"

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    @property
    def value_columns(self) -> tuple[str, ...]:
        """Columns stored in the KV value (everything outside the pk)."""
        return self._vals

    def column(self, name: str) -> ColumnDef:
        try:
            return self.columns[self._idx[name]]
        except KeyError:
            raise CatalogError(f"{self.name} has no column {name!r}") from None

    def pk_types(self) -> tuple[type, ...]:
        return tuple(PY_TYPES[self.column(c).type] for c in self.pk)

    def check_row(self, row: Mapping) -> None:
        for c in self.columns:
            if c.name not in row:
                raise CatalogError(f"{self.name}: missing column {c.name}")
            v = row[c.name]
            if v is None:
                if c.name in self.pk:
                    raise CatalogError(f"{self.name}: null pk column {c.name}")
                continue
            t = PY_TYPES[c.type]
            if isinstance(v, bool) or not isinstance(v, t):
                raise CatalogError(f"{self.name}.{c.name}: {v!r} is not {c.type}")
        extra = set(row) - set(self._idx)
        if extra:
            raise CatalogError(f"{self.name}: unknown columns {sorted(extra)}")

    def split_row(self, row: Mapping) -> tuple[tuple, tuple]:
        return tuple(row[c] for c in self.pk), tuple(row[c] for c in self._vals)

    def join_row(self, pk: Sequence, values: Sequence) -> dict:
        d = dict(zip(self.pk, pk))
        d.update(zip(self._vals, values))
        return d

    # physical layout

    def key(self, pk: Sequence) -> Key:
        if self.key_mode[0] == "plain":
            return encode_key(self.table_id, pk)
        _, old_tid, a = self.key_mode
        return encode_prefixed_key(old_tid, pk[:a], self.table_id, pk[a:])

    def logical_key(self, pk: Sequence) -> Key:
        return encode_key(self.table_id, pk)

    def prefix_interval(self, prefix: Sequence) -> tuple[Key, Key]:
        """Physical interval holding every row whose pk starts with ``prefix``.

        For prefixed tables with a prefix no longer than the group arity the
        interval also holds rows of the old table; callers filter by table.
        """
        if self.key_mode[0] == "plain":
            lo = encode_prefix(self.table_id, prefix)
            return lo, prefix_end(lo)
        _, old_tid, a = self.key_mode
        if len(prefix) <= a:
            lo = encode_prefix(old_tid, prefix)
        else:
            lo = encode_prefixed_key(old_tid, prefix[:a], self.table_id, prefix[a:])
        return lo, prefix_end(lo)


# -- predicates ------------------------------------------------------------

OPS = ("=", "<", "<=", ">", ">=", "in")


@dataclass(frozen=True)
class Cond:
    column: str
    op: str
    value: object

    def __post_init__(self):
        if self.op not in OPS:
            raise CatalogError(f"unsupported operator {self.op!r}")
        if self.op == "in":
            object.__setattr__(self, "value", tuple(self.value))

    def test(self, v) -> bool:
        if v is None:
            return False
        x = self.value
        op = self.op
        if op == "=":
            return v == x
        if op == "in":
            return v in x
        if op == "<":
            return v < x
        if op == "<=":
            return v <= x
        if op == ">":
            return v > x
        return v >= x


@dataclass(frozen=True)
class Predicate:
    """Conjunction of column comparisons; the empty conjunction is TRUE."""

    conds: tuple[Cond, ...] = ()

    @classmethod
    def eq(cls, **kw) -> "Predicate":
        return cls(tuple(Cond(k, "=", v) for k, v in kw.items()))

    @classmethod
    def of(cls, *conds: tuple) -> "Predicate":
        return cls(tuple(Cond(*c) for c in conds))

    def and_(self, other: "Predicate") -> "Predicate":
        return Predicate(self.conds + other.conds)

    def columns(self) -> set[str]:
        return {c.column for c in self.conds}

    def matches(self, row: Mapping) -> bool:
        return all(c.test(row.get(c.column)) for c in self.conds)

    def pk_bounds(self, pk: Sequence[str]) -> tuple[tuple, Cond | None]:
        """Longest equality-bound pk prefix, plus range conds on the next pk column."""
        eqs = {c.column: c.value for c in self.conds if c.op == "="}
        prefix = []
        for col in pk:
            if col in eqs:
                prefix.append(eqs[col])
            else:
                break
        nxt = None
        if len(prefix) < len(pk):
            col = pk[len(prefix)]
            rng = [c for c in self.conds if c.column == col and c.op in ("<", "<=", ">", ">=")]
            nxt = tuple(rng) or None
        return tuple(prefix), nxt

    def __str__(self) -> str:
        if not self.conds:
            return "TRUE"
        return " AND ".join(f"{c.column} {c.op} {c.value!r}" for c in self.conds)


TRUE = Predicate()


# -- migrations ------------------------------------------------------------


@dataclass(frozen=True)
class Agg:
    func: str
    table: str
    column: str

    def __post_init__(self):
        if self.func != "sum":
            raise CatalogError(f"unsupported aggregate {self.func!r}")


@dataclass(frozen=True)
class NewTableSpec:
    name: str
    pk: tuple[str, ...]
    # new column -> (source table, source column) or Agg
    columns: tuple[tuple[str, object], ...]
    table_id: int | None = None

    @property
    def column_map(self) -> dict[str, object]:
        return dict(self.columns)


@dataclass(frozen=True)
class MigrationSpec:
    name: str
    cls: str
    old_tables: tuple[str, ...]
    new_tables: tuple[NewTableSpec, ...]
    strategy: str = "slsm_full"
    # ((table, column), (table, column)) equi-join pairs
    join_keys: tuple[tuple[tuple[str, str], tuple[str, str]], ...] = ()
    group_keys: tuple[str, ...] = ()

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise CatalogError(f"unknown migration class {self.cls!r}")
        if self.strategy not in STRATEGIES:
            raise CatalogError(f"unknown strategy {self.strategy!r}")
        arity = {"split": (1, 2), "join": (2, 1), "preaggregate": (1, 1)}[self.cls]
        if (len(self.old_tables), len(self.new_tables)) != arity:
            raise CatalogError(f"{self.cls} migrations map {arity[0]} old table(s) to {arity[1]} new")
        if self.cls == "join" and not self.join_keys:
            raise CatalogError("join migration needs join keys")
        if self.cls == "preaggregate":
            if not self.group_keys:
                raise CatalogError("preaggregate migration needs group keys")
            aggs = [v for t in self.new_tables for _, v in t.columns if isinstance(v, Agg)]
            if len(aggs) != 1:
                raise CatalogError("preaggregate migration needs exactly one aggregate column")

    def with_strategy(self, strategy: str) -> "MigrationSpec":
        return replace(self, strategy=strategy)


@dataclass
class MigrationState:
    osc_state: str = "absent"
    backfill_watermark: Key = b""
    drain_cursor: Key = b""
    done: bool = False
    drain_pass_rows: int = 0
    scanned_positions: int = 0
    # whole-table drains iterate a snapshot of source scopes taken at registration
    positions: list = field(default_factory=list)
    position_idx: int = 0

    def advance(self, to: str) -> None:
        if OSC_STATES.index(to) < OSC_STATES.index(self.osc_state):
            raise CatalogError(f"osc state cannot move back from {self.osc_state} to {to}")
        self.osc_state = to


class PredicateFilter:
    """Maps conjunctive predicates on new tables onto the old tables."""

    def __init__(self, spec: MigrationSpec, driving: str, dimension: str | None):
        self.spec = spec
        self.driving = driving
        self.dimension = dimension
        self.maps = {t.name: t.column_map for t in spec.new_tables}
        # column equivalences across a join
        self.join_pairs = list(spec.join_keys)

    def rewrite(self, new_table: str, pred: Predicate) -> dict[str, Predicate]:
        cmap = self.maps[new_table]
        out: dict[str, list[Cond]] = {t: [] for t in self.spec.old_tables}
        for c in pred.conds:
            src = cmap.get(c.column)
            if src is None:
                raise RewriteUnsupported(f"{new_table}.{c.column} is not a migrated column")
            if isinstance(src, Agg):
                raise RewriteUnsupported(f"{new_table}.{c.column} is computed by {src.func}()")
            t, col = src
            out[t].append(Cond(col, c.op, c.value))
            for left, right in self.join_pairs:
                for here, there in ((left, right), (right, left)):
                    if here == (t, col):
                        out[there[0]].append(Cond(there[1], c.op, c.value))
        return {t: Predicate(tuple(cs)) for t, cs in out.items()}


@dataclass
class MigrationHandle:
    mig_id: int
    spec: MigrationSpec
    old: dict[str, TableDescriptor]
    new: dict[str, TableDescriptor]
    driving: str
    dimension: str | None
    scope_cols: tuple[str, ...]  # driving-table columns forming the unit of migration
    new_scope_cols: dict[str, tuple[str, ...]]  # per new table, columns matching scope_cols
    marker_tid: int | None
    filter: PredicateFilter
    state: MigrationState = field(default_factory=MigrationState)
    registered_at: float | None = None
    first_service_at: float | None = None
    done_at: float | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def strategy(self) -> str:
        return self.spec.strategy

    @property
    def cls(self) -> str:
        return self.spec.cls

    @property
    def lazy(self) -> bool:
        return self.spec.strategy != "osc"

    @property
    def moves(self) -> bool:
        """Split consumes source rows; join and preaggregate mark them."""
        return self.spec.cls == "split"

    @property
    def consumed(self) -> tuple[str, ...]:
        """Old tables retired from direct access once the new schema is live."""
        if self.spec.cls == "preaggregate":
            return ()
        return (self.driving,)

    def rewrite_predicate(self, new_table: str, pred: Predicate) -> dict[str, Predicate]:
        return self.filter.rewrite(new_table, pred)

    def scope_of_new(self, new_table: str, row: Mapping) -> tuple:
        return tuple(row[c] for c in self.new_scope_cols[new_table])

    def scope_prefix_for_new(self, new_table: str, pred: Predicate) -> tuple:
        """Equality-bound prefix of the scope implied by a predicate on a new table."""
        eqs = {c.column: c.value for c in pred.conds if c.op == "="}
        out = []
        for c in self.new_scope_cols[new_table]:
            if c not in eqs:
                break
            out.append(eqs[c])
        return tuple(out)


class Catalog:
    def __init__(self, first_table_id: int = 51):
        self.tables: dict[str, TableDescriptor] = {}
        self.by_id: dict[int, TableDescriptor] = {}
        self.migrations: list[MigrationHandle] = []
        self._next_id = first_table_id
        self._mu = threading.RLock()

    def __getstate__(self):
        d = dict(self.__dict__)
        del d["_mu"]
        return d

    def __setstate__(self, d):
        self.__dict__.update(d)
        self._mu = threading.RLock()

    def _alloc_id(self) -> int:
        while self._next_id in self.by_id:
            self._next_id += 1
        tid = self._next_id
        self._next_id += 1
        return tid

    def create_table(
        self,
        name: str,
        columns: Iterable[ColumnDef | tuple[str, str]],
        pk: Sequence[str],
        table_id: int | None = None,
        key_mode: tuple = ("plain",),
    ) -> TableDescriptor:
        with self._mu:
            if name in self.tables:
                raise CatalogError(f"table {name} exists")
            if table_id is None:
                table_id = self._alloc_id()
            elif table_id in self.by_id:
                raise CatalogError(f"table id {table_id} in use")
            cols = tuple(c if isinstance(c, ColumnDef) else ColumnDef(*c) for c in columns)
            d = TableDescriptor(table_id, name, cols, tuple(pk), key_mode)
            self.tables[name] = d
            self.by_id[table_id] = d
            return d

    def table(self, name: str) -> TableDescriptor:
        try:
            return self.tables[name]
        except KeyError:
            raise CatalogError(f"no table {name!r}") from None

    def active_migration_for(self, name: str) -> MigrationHandle | None:
        for h in self.migrations:
            if h.state.done and not (h.spec.strategy == "osc" and h.state.osc_state != "public"):
                continue
            if name in h.old or name in h.new:
                return h
        return None

    def migration_touching(self, name: str) -> MigrationHandle | None:
        for h in reversed(self.migrations):
            if name in h.old or name in h.new:
                return h
        return None

    def register_migration(self, spec: MigrationSpec) -> MigrationHandle:
        with self._mu:
            old = {}
            for t in spec.old_tables:
                old[t] = self.table(t)
                h = self.migration_touching(t)
                if h is not None and not h.state.done:
                    raise CatalogError(f"table {t} already has an active migration {h.spec.name}")
                if h is not None and t in h.old and t in h.consumed:
                    raise CatalogError(f"table {t} was retired by migration {h.spec.name}")
            for nt in spec.new_tables:
                if nt.name in self.tables:
                    raise CatalogError(f"table {nt.name} exists")
            driving, dimension = self._driving(spec, old)
            dd = old[driving]
            if spec.cls == "preaggregate":
                scope_cols = tuple(spec.group_keys)
                if dd.pk[: len(scope_cols)] != scope_cols:
                    raise CatalogError("group keys must be a prefix of the source primary key")
            else:
                scope_cols = dd.pk

            warnings: list[str] = []
            new_scope_cols: dict[str, tuple[str, ...]] = {}
            plans = []
            for nt in spec.new_tables:
                cols = []
                inv = {}
                for cname, src in nt.columns:
                    if isinstance(src, Agg):
                        st = old[src.table].column(src.column).type
                    else:
                        st_name, sc = src
                        if st_name not in old:
                            raise CatalogError(f"{nt.name}.{cname} maps from non-source table {st_name}")
                        st = old[st_name].column(sc).type
                        if st_name == driving:
                            inv.setdefault(sc, cname)
                    cols.append(ColumnDef(cname, st))
                missing = [c for c in scope_cols if c not in inv or inv[c] not in nt.pk]
                if missing:
                    raise CatalogError(
                        f"{nt.name}: primary key must contain the source scope columns {list(scope_cols)}"
                    )
                nscope = tuple(inv[c] for c in scope_cols)
                new_scope_cols[nt.name] = nscope
                key_mode: tuple = ("plain",)
                if spec.strategy in PREFIXED_STRATEGIES:
                    try:
                        check_colocation(nscope, nt.pk)
                        key_mode = ("prefixed", dd.table_id, len(nscope))
                    except ColocationUnsupported as e:
                        msg = f"{nt.name}: {e}; colocation disabled"
                        warnings.append(msg)
                        log.warning(msg)
                plans.append((nt, cols, key_mode))

            new = {}
            for nt, cols, key_mode in plans:
                new[nt.name] = self.create_table(nt.name, cols, nt.pk, nt.table_id, key_mode)
            marker_tid = None
            if spec.cls != "split":
                marker_tid = self._alloc_id()
            h = MigrationHandle(
                mig_id=len(self.migrations) + 1,
                spec=spec,
                old=old,
                new=new,
                driving=driving,
                dimension=dimension,
                scope_cols=scope_cols,
                new_scope_cols=new_scope_cols,
                marker_tid=marker_tid,
                filter=PredicateFilter(spec, driving, dimension),
                warnings=warnings,
            )
            self.migrations.append(h)
            return h

    @staticmethod
    def _driving(spec: MigrationSpec, old: dict[str, TableDescriptor]) -> tuple[str, str | None]:
        if spec.cls != "join":
            return spec.old_tables[0], None
        nt = spec.new_tables[0]
        for cand in spec.old_tables:
            srcs = {src[1] for _, src in nt.columns if not isinstance(src, Agg) and src[0] == cand}
            other = [t for t in spec.old_tables if t != cand][0]
            if set(old[cand].pk) <= srcs:
                mapped_pk = [c for c, src in nt.columns if not isinstance(src, Agg) and src[0] == cand and src[1] in old[cand].pk]
                if set(mapped_pk) <= set(nt.pk):
                    return cand, other
        raise CatalogError("join result pk must contain one source table's primary key")


# -- migration spec text format -------------------------------------------


def parse_migration_spec(text: str) -> MigrationSpec:
    """Parse the line-oriented migration spec format (see README)."""
    name = cls = None
    strategy = "slsm_full"
    old: list[str] = []
    new: list[dict] = []
    join_tables: list[tuple[str, str]] = []
    group: tuple[str, ...] = ()

    def ref(s: str) -> tuple[str, str]:
        t, _, c = s.strip().partition(".")
        if not c:
            raise CatalogError(f"expected table.column, got {s!r}")
        return t, c

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, _, rest = line.partition(" ")
        rest = rest.strip()
        try:
            if word == "migration":
                name = rest
            elif word == "class":
                cls = rest
            elif word == "strategy":
                strategy = rest
            elif word == "old":
                old.append(rest)
            elif word == "new":
                tname, _, tail = rest.partition(" ")
                tail = tail.strip()
                if not tail.startswith("pk "):
                    raise CatalogError("expected: new <table> pk <col>,<col>...")
                pk = tuple(c.strip() for c in tail[3:].split(","))
                new.append({"name": tname, "pk": pk, "cols": []})
            elif word == "id":
                new[-1]["id"] = int(rest)
            elif word == "col":
                lhs, _, rhs = rest.partition("=")
                rhs = rhs.strip()
                if rhs.startswith("sum(") and rhs.endswith(")"):
                    t, c = ref(rhs[4:-1])
                    src: object = Agg("sum", t, c)
                else:
                    src = ref(rhs)
                new[-1]["cols"].append((lhs.strip(), src))
            elif word == "cols":
                t, _, cs = rest.partition(":")
                for c in cs.split(","):
                    new[-1]["cols"].append((c.strip(), (t.strip(), c.strip())))
            elif word == "join":
                lhs, _, rhs = rest.partition("=")
                join_tables.append((ref(lhs), ref(rhs)))
            elif word == "group":
                group = tuple(c.strip() for c in rest.split(","))
            else:
                raise CatalogError(f"unknown directive {word!r}")
        except (IndexError, CatalogError) as e:
            raise CatalogError(f"line {lineno}: {e}") from None
    if name is None or cls is None:
        raise CatalogError("migration spec needs 'migration' and 'class' lines")
    tables = tuple(
        NewTableSpec(n["name"], n["pk"], tuple(n["cols"]), n.get("id")) for n in new
    )
    return MigrationSpec(name, cls, tuple(old), tables, strategy, tuple(join_tables), group)
