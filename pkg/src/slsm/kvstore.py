"""Range-partitioned ordered KV storage with leaseholder routing.

Only the leaseholder copy is materialised; replicas are placement metadata.
Every point/scan access names the node it is served from, and the store
refuses accesses from any node other than the covering range's leaseholder.
"""

from __future__ import annotations

import bisect
import itertools
import json
import threading
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Iterable, Iterator, Protocol

from sortedcontainers import SortedDict

from .keys import EncodingError, Key, decode_key


class RoutingViolation(RuntimeError):
    """A KV access was attempted on a node that does not hold the lease."""


class LockViolation(RuntimeError):
    """A KV access was attempted without a covering lock."""


class SplitRejected(ValueError):
    pass


class LockToken(Protocol):
    def check(self, key: Key, write: bool) -> None: ...


@dataclass
class Range:
    range_id: int
    start: Key
    end: Key | None  # None = +inf
    replicas: tuple[int, ...]
    leaseholder: int

    def contains(self, key: Key) -> bool:
        return self.start <= key and (self.end is None or key < self.end)


@dataclass
class Cluster:
    nodes: list[int]
    per_hop_latency: float = 0.0
    clock_mode: str = "virtual"
    replication: int = 3
    ranges: list[Range] = field(default_factory=list)

    def __post_init__(self):
        if not self.nodes:
            raise ValueError("cluster needs at least one node")
        if self.clock_mode not in ("virtual", "wall"):
            raise ValueError(f"unknown clock mode {self.clock_mode!r}")
        self._ids = itertools.count(1)
        self._mu = threading.RLock()
        self.data: SortedDict = SortedDict()
        # table id -> number of pk columns forming a prefix group
        self.group_arity: dict[int, int] = {}
        if not self.ranges:
            lh = self.nodes[0]
            self.ranges = [Range(next(self._ids), b"", None, self._replicas_for(lh), lh)]
        self._starts = [r.start for r in self.ranges]

    def _replicas_for(self, lh: int) -> tuple[int, ...]:
        i = self.nodes.index(lh)
        k = min(self.replication, len(self.nodes))
        return tuple(self.nodes[(i + j) % len(self.nodes)] for j in range(k))

    # -- routing ---------------------------------------------------------

    def _index(self, key: Key) -> int:
        return bisect.bisect_right(self._starts, key) - 1

    def range_for(self, key: Key) -> Range:
        return self.ranges[self._index(key)]

    def route(self, key: Key) -> tuple[int, int]:
        r = self.ranges[self._index(key)]
        return r.range_id, r.leaseholder

    def leaseholder(self, key: Key) -> int:
        return self.ranges[self._index(key)].leaseholder

    def get_range(self, range_id: int) -> Range:
        for r in self.ranges:
            if r.range_id == range_id:
                return r
        raise KeyError(f"no range {range_id}")

    def split_interval(self, lo: Key, hi: Key | None) -> list[tuple[Range, Key, Key | None]]:
        """Cut [lo, hi) along range boundaries."""
        out = []
        i = self._index(lo)
        while i < len(self.ranges):
            r = self.ranges[i]
            if hi is not None and r.start >= hi:
                break
            a = max(lo, r.start)
            if r.end is None:
                b = hi
            elif hi is None:
                b = r.end
            else:
                b = min(hi, r.end)
            out.append((r, a, b))
            i += 1
        return out

    # -- topology changes ------------------------------------------------

    def register_group_arity(self, table_id: int, arity: int) -> None:
        """Forbid splits inside prefix groups of ``table_id`` keyed on ``arity`` pk columns."""
        prev = self.group_arity.get(table_id)
        self.group_arity[table_id] = arity if prev is None else min(prev, arity)

    def check_boundary(self, boundary: Key) -> None:
        try:
            d = decode_key(boundary)
        except EncodingError as e:
            raise SplitRejected(f"boundary is not a decodable key: {e}") from None
        if d.prefixed:
            raise SplitRejected("boundary falls inside a prefix group")
        arity = self.group_arity.get(d.table_id)
        if arity is not None and len(d.pk) > arity:
            raise SplitRejected(
                f"boundary pk {d.pk} is finer than the {arity}-column prefix groups of table {d.table_id}"
            )

    def split_range(self, boundary: Key, leaseholder: int | None = None) -> int:
        with self._mu:
            self.check_boundary(boundary)
            i = self._index(boundary)
            r = self.ranges[i]
            if r.start == boundary:
                if leaseholder is not None:
                    self.transfer_lease(r.range_id, leaseholder)
                return r.range_id
            new_lh = r.leaseholder if leaseholder is None else leaseholder
            reps = r.replicas if new_lh in r.replicas else self._replicas_for(new_lh)
            right = Range(next(self._ids), boundary, r.end, reps, new_lh)
            r.end = boundary
            self.ranges.insert(i + 1, right)
            self._starts.insert(i + 1, boundary)
            return right.range_id

    def transfer_lease(self, range_id: int, node: int) -> None:
        r = self.get_range(range_id)
        if node not in self.nodes:
            raise ValueError(f"unknown node {node}")
        if node not in r.replicas:
            # lease moves with a replica rebalance onto the target node
            r.replicas = tuple(sorted(set(r.replicas[1:]) | {node}))
        r.leaseholder = node

    # -- storage primitives -----------------------------------------------

    def _check(self, node: int, key: Key, token, write: bool) -> None:
        if token is None:
            raise LockViolation("storage access without a lock token")
        lh = self.leaseholder(key)
        if node != lh:
            raise RoutingViolation(f"node {node} accessed key {key.hex()} leased to node {lh}")
        token.check(key, write)

    def get(self, node: int, key: Key, token: LockToken):
        self._check(node, key, token, False)
        return self.data.get(key)

    def put(self, node: int, key: Key, value: tuple, token: LockToken):
        self._check(node, key, token, True)
        with self._mu:
            old = self.data.get(key)
            self.data[key] = value
        return old

    def delete(self, node: int, key: Key, token: LockToken):
        self._check(node, key, token, True)
        with self._mu:
            return self.data.pop(key, None)

    def scan(self, node: int, lo: Key, hi: Key | None, token: LockToken) -> list[tuple[Key, tuple]]:
        """Ordered scan of [lo, hi); the interval must lie inside one range leased to ``node``."""
        if token is None:
            raise LockViolation("storage access without a lock token")
        r = self.range_for(lo)
        if node != r.leaseholder:
            raise RoutingViolation(f"node {node} scanned range {r.range_id} leased to {r.leaseholder}")
        if r.end is not None and (hi is None or hi > r.end):
            raise RoutingViolation(f"scan [{lo.hex()}, ...) crosses the end of range {r.range_id}")
        out = []
        for k in self.data.irange(lo, hi, inclusive=(True, False)):
            token.check(k, False)
            out.append((k, self.data[k]))
        return out

    def keys_in(self, lo: Key, hi: Key | None) -> Iterator[Key]:
        """Lock-free key listing used by planners to size lock sets."""
        return self.data.irange(lo, hi, inclusive=(True, False))

    def bulk_load(self, items: Iterable[tuple[Key, tuple]]) -> None:
        with self._mu:
            self.data.update(items)

    # -- snapshots ---------------------------------------------------------

    def dump(self) -> str:
        return "".join(f"{k.hex()}\t{dump_values(v)}\n" for k, v in self.data.items())

    def load(self, text: str) -> None:
        with self._mu:
            self.data.clear()
            for line in text.splitlines():
                if line:
                    k, v = line.split("\t", 1)
                    self.data[bytes.fromhex(k)] = load_values(v)

    def fork(self) -> "Cluster":
        """Independent copy sharing immutable row tuples."""
        c = Cluster(list(self.nodes), self.per_hop_latency, self.clock_mode, self.replication)
        c.ranges = [Range(r.range_id, r.start, r.end, r.replicas, r.leaseholder) for r in self.ranges]
        c._starts = [r.start for r in c.ranges]
        c._ids = itertools.count(max(r.range_id for r in self.ranges) + 1)
        c.data = self.data.copy()
        c.group_arity = dict(self.group_arity)
        return c


def _enc_value(v):
    if isinstance(v, Decimal):
        return {"dec": str(v)}
    return v


def _dec_value(v):
    if isinstance(v, dict):
        return Decimal(v["dec"])
    return v


def dump_values(values: tuple) -> str:
    return json.dumps([_enc_value(v) for v in values], ensure_ascii=False, separators=(",", ":"))


def load_values(text: str) -> tuple:
    return tuple(_dec_value(v) for v in json.loads(text))
