"""Benchmark runs: configuration, session wiring, metrics and CSV export."""

from __future__ import annotations

import csv
import io
import json
import os
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .. import background
from ..background import DrainConfig
from ..catalog import LAZY_STRATEGIES, STRATEGIES
from ..engine import CostModel, Database
from ..sim import Session, Simulator, SysStep, TxnRecord, WallClockRunner, category_of
from ..txn import hops_csv
from . import tpcc

RTT_PRESETS = (1.15, 11.78, 22.33)
OUT_ENV = "SLSM_BENCH_OUT"


@dataclass
class WorkloadConfig:
    scale: int = 1
    mix: dict = field(default_factory=lambda: dict(tpcc.MIX))
    duration: float = 20_000.0  # ms of simulated (or wall) time
    seed: int = 1
    rtt: float = 11.78
    nodes: int = 3
    strategy: str = "slsm_full"
    migration: str = "split"
    migration_start: float = 2_000.0
    sessions: int = 10
    clock: str = "virtual"
    think: float = 0.0
    drain: bool = True
    drain_batch: int = 128
    drain_pace: float = 1.0
    osc_batch: int = 500
    run_to_completion: bool = False  # keep the background session going after `duration` until done
    max_txns: int | None = None  # stop after this many user transactions instead of at `duration`
    window: float = 1_000.0
    time_scale: float = 1.0  # wall mode: real seconds per simulated second
    # population (per warehouse); defaults are standard cardinalities
    districts: int = 10
    customers: int = 3000
    items: int = 100_000
    orders: int = 3000
    new_orders: int = 900
    # cost model overrides (ms)
    part_overhead: float = 4.0
    per_key: float = 0.05
    per_write: float = 0.1
    prefix_op: float = 0.2

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError("scale must be at least 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.migration not in tpcc.MIGRATIONS:
            raise ValueError(f"unknown migration {self.migration!r}; choose from {tpcc.MIGRATIONS}")
        if self.clock not in ("virtual", "wall"):
            raise ValueError("clock must be 'virtual' or 'wall'")
        if set(self.mix) - set(tpcc.MIX) or any(v < 0 for v in self.mix.values()):
            raise ValueError(f"mix may only weight {sorted(tpcc.MIX)}")
        if abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise ValueError("mix weights must sum to 1")
        if self.nodes < 1 or self.sessions < 0 or self.duration < 0 or self.rtt < 0:
            raise ValueError("nodes must be >= 1 and sessions, duration, rtt non-negative")
        if self.max_txns is not None and self.max_txns < 0:
            raise ValueError("max_txns must be non-negative")
        if self.window <= 0:
            raise ValueError("window must be positive")

    @property
    def population(self) -> tpcc.Population:
        return tpcc.Population(self.scale, self.districts, self.customers, self.items, self.orders, self.new_orders)

    def cost(self) -> CostModel:
        return CostModel(self.rtt, self.part_overhead, self.per_key, self.per_write, self.prefix_op)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "WorkloadConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise OSError(f"cannot read config {path}: {e}") from e
        known = {f.name for f in fields(cls)}
        bad = set(data) - known
        if bad:
            raise ValueError(f"{path}: unknown config keys {sorted(bad)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


@dataclass
class MetricsReport:
    config: WorkloadConfig
    records: list[TxnRecord]
    timeline: dict
    progress: list[tuple]
    hops: list[tuple]
    errors: list[tuple]
    end_time: float

    def committed(self, schema: str | None = None, types=None) -> list[TxnRecord]:
        return [r for r in self.records if (schema is None or r.schema == schema) and (types is None or r.type in types)]

    def mean_latency(self, schema: str | None = None) -> float:
        rs = self.committed(schema)
        return sum(r.latency for r in rs) / len(rs) if rs else 0.0

    def mean_new_schema_statement_latency(self) -> float:
        n = sum(r.new_schema_statements for r in self.records)
        return sum(r.new_schema_latency for r in self.records) / n if n else 0.0

    def tps(self) -> list[tuple[float, int, float]]:
        w = self.config.window
        n = int(self.end_time // w) + 1 if self.records else 0
        counts = [0] * n
        for r in self.records:
            counts[min(int(r.end // w), n - 1)] += 1
        return [(i * w, c, c * 1000.0 / w) for i, c in enumerate(counts)]

    def summary(self) -> str:
        c = self.config
        t = self.timeline
        lines = [
            f"strategy {c.strategy}  migration {c.migration}  rtt {c.rtt:.2f}ms  nodes {c.nodes}  seed {c.seed}",
            f"committed {len(self.records)}  errors {len(self.errors)}  "
            f"restarts {sum(r.restarts for r in self.records)}",
            f"mean latency {self.mean_latency():.3f}ms  new-schema txns {len(self.committed('new'))}  "
            f"mean new-schema statement latency {self.mean_new_schema_statement_latency():.3f}ms",
            f"timeline start {_fmt(t.get('start'))}  first_service {_fmt(t.get('first_service'))}  "
            f"done {_fmt(t.get('done'))}",
        ]
        by_type: dict[str, list[float]] = {}
        for r in self.records:
            by_type.setdefault(r.type, []).append(r.latency)
        for k in sorted(by_type):
            v = by_type[k]
            lines.append(f"  {k:<13} n={len(v):<6} mean={sum(v) / len(v):.3f}ms")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "" if v is None else f"{v:.3f}"


_LOADED: dict[tuple, Database] = {}


def loaded_database(pop: tpcc.Population, nodes: int, seed: int) -> Database:
    """Populated database for (population, nodes, seed), cached; callers get a fork."""
    key = (pop, nodes, seed)
    if key not in _LOADED:
        _LOADED.clear()
        _LOADED[key] = tpcc.load(pop, nodes=nodes, seed=seed)
    return _LOADED[key].fork()


def run_benchmark(cfg: WorkloadConfig, db: Database | None = None) -> MetricsReport:
    if db is None:
        db = loaded_database(cfg.population, cfg.nodes, cfg.seed)
    db.cost = cfg.cost()
    db.cluster.per_hop_latency = cfg.rtt
    db.rng = random.Random(cfg.seed * 1_000_003 + 17)
    db.now = 0.0
    wl = tpcc.Workload(db, cfg.population, cfg.migration, cfg.mix, cfg.seed)
    until = cfg.duration
    wall = cfg.clock == "wall"
    runner = WallClockRunner(db, until, cfg.time_scale) if wall else Simulator(db, cfg.seed, float("inf"))
    timeline: dict = {}
    progress: list[tuple] = []
    state = {"handle": None}

    def user_next(s: Session):
        if cfg.max_txns is not None:
            if wl.issued >= cfg.max_txns:
                return None
        elif db.now >= until:
            return None
        return wl.next_txn(s.rng, 1 + (s.sid - 1) % cfg.scale)

    for i in range(1, cfg.sessions + 1):
        runner.add(Session(i, db.nodes[(i - 1) % len(db.nodes)], user_next, lambda s: cfg.think,
                           random.Random(cfg.seed * 7919 + i)))

    dcfg = DrainConfig(cfg.drain_batch, cfg.drain_pace) if cfg.strategy != "osc" else DrainConfig(cfg.osc_batch, cfg.drain_pace)

    def bg_next(s: Session):
        h = state["handle"]
        if h is None:
            h = db.register_migration(tpcc.migration_spec(cfg.migration, cfg.strategy))
            state["handle"] = wl.handle = h
            timeline["start"] = h.registered_at
        if h.state.done or not (cfg.drain or not h.lazy):
            return None
        if db.now >= until and not cfg.run_to_completion:
            return None
        body = background.background_body(db, h, dcfg)

        def program(info):
            info.schema = "system"
            n = yield SysStep(body)
            progress.append((db.now, h.state.drain_cursor.hex() if h.lazy else h.state.backfill_watermark.hex(),
                             n, h.state.scanned_positions))

        return "background", program

    runner.add(Session(0, db.nodes[0], bg_next, lambda s: cfg.drain_pace, random.Random(cfg.seed), cfg.migration_start,
                       kind="system"))
    records = runner.run()
    h = state["handle"]
    if h is not None:
        timeline["first_service"] = h.first_service_at
        timeline["done"] = h.done_at
    users = [r for r in records if r.type != "background"]
    hops = [(r.txn_id, cfg.strategy, r.category, r.round_trips) for r in users]
    return MetricsReport(cfg, users, timeline, progress, hops, list(runner.errors), max(db.now, until))


TXN_HEADER = ("txn_id", "session", "type", "strategy", "schema", "start", "end", "latency",
              "new_schema_latency", "new_schema_statements", "round_trips", "restarts")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def report_files(rep: MetricsReport) -> dict[str, str]:
    s = rep.config.strategy
    txns = [(r.txn_id, r.session, r.type, s, r.schema, f"{r.start:.3f}", f"{r.end:.3f}", f"{r.latency:.3f}",
             f"{r.new_schema_latency:.3f}", r.new_schema_statements, r.round_trips, r.restarts) for r in rep.records]
    tps = [(f"{a:.3f}", n, f"{v:.3f}") for a, n, v in rep.tps()]
    tl = [(s, _fmt(rep.timeline.get("start")), _fmt(rep.timeline.get("first_service")), _fmt(rep.timeline.get("done")))]
    prog = [(f"{t:.3f}", cur, n, sc) for t, cur, n, sc in rep.progress]
    return {
        "txns.csv": _csv(TXN_HEADER, txns),
        "tps.csv": _csv(("window_start", "commits", "tps"), tps),
        "timeline.csv": _csv(("strategy", "start", "first_service", "done"), tl),
        "progress.csv": _csv(("time", "cursor", "migrated", "scanned_positions"), prog),
        "hops.csv": hops_csv(rep.hops),
        "summary.txt": rep.summary(),
    }


def export_report(rep: MetricsReport, out_dir: str | Path | None = None) -> Path:
    out = Path(os.environ.get(OUT_ENV) or out_dir or "bench_out")
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in report_files(rep).items():
            (out / name).write_text(text)
    except OSError as e:
        raise OSError(f"cannot write report to {out}: {e}") from e
    return out


def config_dict(cfg: WorkloadConfig) -> dict:
    return asdict(cfg)


__all__ = ["WorkloadConfig", "MetricsReport", "run_benchmark", "export_report", "report_files", "RTT_PRESETS",
           "LAZY_STRATEGIES", "category_of", "loaded_database"]
