"""Session scheduling in virtual time (discrete events) or wall-clock time (threads).

A session runs transactions one after another. A transaction is a generator
that yields :class:`Statement` or :class:`SysStep` operations and receives
each operation's result. The engine applies a step's effects at the moment
it is scheduled; its reply arrives ``duration`` later, when the generator
resumes. Blocked steps wait for the next lock release and are retried;
wounded or retired transactions restart from scratch with their original
priority.
"""

from __future__ import annotations

import heapq
import itertools
import random
import threading
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Generator

from .txn import LockWait, Statement, Transaction, TxnError

if TYPE_CHECKING:
    from .engine import Database, Exec


@dataclass
class SysStep:
    fn: Callable[["Exec"], object]


@dataclass
class TxnInfo:
    """Per-transaction facts a program reports back (schema used, etc.)."""

    label: str
    schema: str = "old"
    placement: tuple | None = None  # (gateway, old leaseholder, new leaseholder) of the first migration


# program(info) -> generator yielding Statement | SysStep
Program = Callable[[TxnInfo], Generator]


@dataclass
class TxnRecord:
    txn_id: int
    session: int
    type: str
    schema: str
    start: float
    end: float
    latency: float
    new_schema_latency: float  # summed issue-to-reply time of new-schema statements
    new_schema_statements: int
    round_trips: int
    restarts: int
    status: str = "committed"
    category: str = ""


@dataclass
class Session:
    sid: int
    gateway: int
    # next_txn(session) -> (label, program) or None when the session is finished
    next_txn: Callable[["Session"], tuple[str, Program] | None]
    think: Callable[["Session"], float] = lambda s: 0.0
    rng: random.Random = field(default_factory=random.Random)
    start_at: float = 0.0
    kind: str = "user"


def category_of(placement) -> str:
    """Name the set of distinct nodes among (gateway, old leaseholder, new leaseholder)."""
    if placement is None:
        return ""
    g, o, n = placement
    if g == o == n:
        return "gateway,old,new"
    if g == o:
        return "gateway,old"
    if g == n:
        return "gateway,new"
    if o == n:
        return "old,new"
    return "none"


class _Attempt:
    __slots__ = ("label", "program", "info", "gen", "txn", "priority", "first_start", "restarts", "op",
                 "op_t0", "ns_sum", "ns_count")

    def __init__(self, label, program):
        self.label = label
        self.program = program
        self.info = None
        self.gen = None
        self.txn: Transaction | None = None
        self.priority = None
        self.first_start = 0.0
        self.restarts = 0
        self.op = None
        self.op_t0 = 0.0
        self.ns_sum = 0.0
        self.ns_count = 0


class Simulator:
    """Discrete-event scheduler over a shared :class:`Database`."""

    def __init__(self, db: "Database", seed: int = 0, until: float = float("inf")):
        self.db = db
        self.rng = random.Random(seed)
        self.until = until
        self.heap: list = []
        self.seq = itertools.count()
        self.records: list[TxnRecord] = []
        self.errors: list[tuple[float, int, str, str]] = []
        self.waiters: list[tuple[Session, _Attempt]] = []
        self.sessions: list[Session] = []
        self.on_record: list[Callable[[TxnRecord], None]] = []
        db.sync_clock = False
        db.on_release.append(self._wake)

    def at(self, t: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self.heap, (t, self.rng.random(), next(self.seq), fn))

    def add(self, s: Session) -> None:
        self.sessions.append(s)
        self.at(s.start_at, lambda: self._next(s))

    def run(self) -> list[TxnRecord]:
        db = self.db
        while self.heap:
            t, _, _, fn = heapq.heappop(self.heap)
            if t > self.until:
                break
            db.now = max(db.now, t)
            fn()
        return self.records

    # -- session driving ----------------------------------------------------

    def _next(self, s: Session) -> None:
        if self.db.now > self.until:
            return
        nxt = s.next_txn(s)
        if nxt is None:
            return
        a = _Attempt(*nxt)
        a.first_start = self.db.now
        self._begin(s, a)

    def _begin(self, s: Session, a: _Attempt) -> None:
        db = self.db
        a.txn = db.begin(s.gateway, priority=a.priority, label=a.label)
        if a.priority is None:
            a.priority = a.txn.priority
        a.info = TxnInfo(a.label)
        a.ns_sum, a.ns_count = 0.0, 0
        a.gen = a.program(a.info)
        self._advance(s, a, None)

    def _advance(self, s: Session, a: _Attempt, value) -> None:
        try:
            op = a.gen.send(value)
        except StopIteration:
            self._commit(s, a)
            return
        except TxnError as e:
            self._failed(s, a, e)
            return
        a.op = op
        a.op_t0 = self.db.now
        self._issue(s, a)

    def _issue(self, s: Session, a: _Attempt) -> None:
        db = self.db
        op = a.op
        try:
            if isinstance(op, Statement):
                out = db.execute(a.txn, op)
            elif isinstance(op, SysStep):
                out = db.step(a.txn, op.fn)
            else:
                raise TypeError(f"programs yield Statement or SysStep, got {op!r}")
        except LockWait:
            self.waiters.append((s, a))
            return
        except TxnError as e:
            self._failed(s, a, e)
            return
        st = db.last_step
        if a.info.placement is None and st.placement is not None:
            a.info.placement = st.placement
        done_at = db.now + st.duration
        if st.new_schema:
            a.ns_sum += done_at - a.op_t0
            a.ns_count += 1
        self.at(done_at, lambda: self._advance(s, a, out))

    def _wake(self) -> None:
        if not self.waiters:
            return
        ws, self.waiters = self.waiters, []
        for s, a in ws:
            self.at(self.db.now, lambda s=s, a=a: self._retry(s, a))

    def _retry(self, s: Session, a: _Attempt) -> None:
        if a.txn.status != "active":
            self._restart(s, a)
            return
        self._issue(s, a)

    def _failed(self, s: Session, a: _Attempt, e: TxnError) -> None:
        db = self.db
        db.abort(a.txn)
        if e.retryable:
            self._restart(s, a)
            return
        self.errors.append((db.now, s.sid, a.label, f"{type(e).__name__}: {e}"))
        self.at(db.now + s.think(s), lambda: self._next(s))

    def _restart(self, s: Session, a: _Attempt) -> None:
        self.db.abort(a.txn)
        a.restarts += 1
        a.gen.close()
        self._begin(s, a)

    def _commit(self, s: Session, a: _Attempt) -> None:
        db = self.db
        txn = a.txn
        if txn.status != "active":
            self._restart(s, a)
            return
        db.commit(txn)
        rec = TxnRecord(
            txn.txn_id, s.sid, a.label, a.info.schema, a.first_start, db.now, db.now - a.first_start,
            a.ns_sum, a.ns_count, txn.round_trips, a.restarts, category=category_of(a.info.placement),
        )
        self.records.append(rec)
        for cb in self.on_record:
            cb(rec)
        self.at(db.now + s.think(s), lambda: self._next(s))


class WallClockRunner:
    """Threaded runner: each session is a thread; step durations are slept outside the engine lock."""

    def __init__(self, db: "Database", until: float, time_scale: float = 1.0):
        self.db = db
        self.until = until
        self.scale = time_scale
        self.mu = threading.Lock()
        self.cv = threading.Condition(self.mu)
        self.records: list[TxnRecord] = []
        self.errors: list[tuple[float, int, str, str]] = []
        self.sessions: list[Session] = []
        self.t0 = 0.0
        db.sync_clock = False
        db.on_release.append(self.cv.notify_all)

    def add(self, s: Session) -> None:
        self.sessions.append(s)

    def _now(self) -> float:
        return (time.monotonic() - self.t0) * 1000.0 / self.scale

    def _sleep(self, ms: float) -> None:
        if ms > 0:
            time.sleep(ms * self.scale / 1000.0)

    def run(self) -> list[TxnRecord]:
        self.t0 = time.monotonic()
        threads = [threading.Thread(target=self._loop, args=(s,), daemon=True) for s in self.sessions]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        return self.records

    def _loop(self, s: Session) -> None:
        db = self.db
        self._sleep(s.start_at - self._now())
        while self._now() < self.until:
            with self.mu:
                db.now = self._now()
                nxt = s.next_txn(s)
            if nxt is None:
                return
            label, program = nxt
            start = self._now()
            priority = None
            restarts = 0
            while True:
                with self.mu:
                    db.now = self._now()
                    txn = db.begin(s.gateway, priority=priority, label=label)
                priority = txn.priority
                info = TxnInfo(label)
                ns = [0.0, 0]
                ok = self._attempt(s, txn, program(info), ns)
                if ok is True:
                    with self.mu:
                        db.now = self._now()
                        self.records.append(TxnRecord(
                            txn.txn_id, s.sid, label, info.schema, start, db.now, db.now - start,
                            ns[0], ns[1], txn.round_trips, restarts, category=category_of(info.placement)))
                    break
                if ok is False:
                    restarts += 1
                    continue
                self.errors.append((self._now(), s.sid, label, ok))
                break
            self._sleep(s.think(s))

    def _attempt(self, s: Session, txn: Transaction, gen, ns: list) -> bool | str:
        db = self.db
        value = None
        while True:
            try:
                with self.mu:
                    db.now = self._now()
                    op = gen.send(value)
            except StopIteration:
                with self.mu:
                    if txn.status != "active":
                        return False
                    db.commit(txn)
                return True
            except TxnError as e:
                with self.mu:
                    db.abort(txn)
                return False if e.retryable else f"{type(e).__name__}: {e}"
            t0 = self._now()
            while True:
                with self.mu:
                    db.now = self._now()
                    try:
                        if isinstance(op, Statement):
                            value = db.execute(txn, op)
                        else:
                            value = db.step(txn, op.fn)
                        d = db.last_step.duration
                        is_new = db.last_step.new_schema
                        break
                    except LockWait:
                        self.cv.wait(timeout=0.05)
                        continue
                    except TxnError as e:
                        db.abort(txn)
                        gen.close()
                        return False if e.retryable else f"{type(e).__name__}: {e}"
            self._sleep(d)
            if is_new:
                ns[0] += self._now() - t0
                ns[1] += 1
