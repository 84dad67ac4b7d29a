"""Throughput and recovery benchmarks driven by a simulated arrival clock.

Arrivals follow a fixed input rate in simulated time. Each engine call is
charged a service time, either modeled from work counters (deterministic) or
measured with ``perf_counter`` (wall clock). A single-server queue then turns
service times into the output throughput the engine would sustain at that rate.
"""
from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import work
from .archive import StrategyUnsupported
from .cep import CompiledQuery, compile_query
from .events import EVENT_FUNCTIONS, annotate
from .kb import JoinBudgetExceeded
from .optimizer import event_predicates
from .pipeline import Engine, PipelineConfig
from .planner import PlanError, recover
from .query import XcepQuery
from .runtime import arrival_times
from .semantic import SemanticFilter, SemanticCache, compute_query_root_properties
from .work import CostModel

DEFAULT_RATES = (50, 100, 200, 500, 1000, 2000, 5000, 10000, 20000, 50000, 100000, 200000)


@dataclass(frozen=True)
class BenchConfig:
    name: str
    buffer_ms: int = 0
    cache_capacity: int = 0

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(buffer_ms=self.buffer_ms, cache_capacity=self.cache_capacity)


def standard_configs(cache_small: int, cache_large: int, buffers: tuple = (1000, 2000)) -> list[BenchConfig]:
    """Baseline, buffer-only at two windows, cache-only at two capacities, and combined."""
    out = [BenchConfig("baseline")]
    out += [BenchConfig(f"buffer-{b}ms", buffer_ms=b) for b in buffers]
    out += [BenchConfig(f"cache-{c}", cache_capacity=c) for c in (cache_small, cache_large)]
    out.append(BenchConfig("combined", buffer_ms=max(buffers), cache_capacity=cache_large))
    return out


def make_clock(mode: str, model: Optional[CostModel] = None) -> Callable[[], float]:
    if mode == "wall":
        return work.wall_clock()
    return work.work_clock(model or CostModel())


# -- queue simulation -------------------------------------------------------------

@dataclass
class QueueResult:
    rate: float
    achieved_eps: float  # events over the finite run's makespan
    capacity_eps: float  # events per second of busy service time
    mean_latency_s: float
    max_latency_s: float

    @property
    def sustained_eps(self) -> float:
        """Steady-state output rate: the input rate while service keeps up, else capacity."""
        return min(self.rate, self.capacity_eps)


def drain(items: list, n_events: int, rate: float) -> QueueResult:
    """Serve ``(ready_s, cost_s)`` items FIFO on one server."""
    if not items:
        return QueueResult(rate, 0.0, 0.0, 0.0, 0.0)
    free = -math.inf
    lat = []
    for ready, cost in items:
        start = ready if ready > free else free
        free = start + cost
        lat.append(free - ready)
    first = items[0][0]
    span = max(free, items[-1][0] + 1.0 / rate) - first
    busy = sum(c for _, c in items)
    capacity = n_events / busy if busy > 0 else math.inf
    return QueueResult(rate, n_events / span, capacity, float(np.mean(lat)), float(max(lat)))


def service_items(cq: CompiledQuery, events: list, kb, defs: dict, config: PipelineConfig,
                  arrivals_ms: list, clock: Callable[[], float]):
    """Run one engine, charging each push (and the final flush) its clock time."""
    eng = Engine(kb, defs, [cq], config, clock)
    items = []
    matches = 0
    for e, a in zip(events, arrivals_ms):
        c0 = clock()
        matches += len(eng.push(e, a))
        items.append((a / 1000.0, clock() - c0))
    if arrivals_ms:
        c0 = clock()
        matches += len(eng.flush())
        items.append((arrivals_ms[-1] / 1000.0, clock() - c0))
    return items, eng, matches


# -- throughput sweep ----------------------------------------------------------------

@dataclass
class ConfigReport:
    name: str
    buffer_ms: int
    cache_capacity: int
    cache_pct_of_unique_keys: Optional[float]
    curve: list  # QueueResult per rate
    peak_sustained_eps: float
    stage_us_per_event: dict
    semantic_us_per_miss: Optional[float]
    cache_hit_ratio: float
    semantic_evaluations: int
    matches: int

    def as_dict(self) -> dict:
        d = asdict(self)
        d["curve"] = [dict(asdict(p), sustained_eps=p.sustained_eps) for p in self.curve]
        return d


def unique_cache_keys(query: XcepQuery, events: list, kb, defs: dict) -> int:
    """Distinct semantic cache keys the stream produces for ``query``."""
    sf = SemanticFilter(kb, SemanticCache(0), event_predicates(defs), EVENT_FUNCTIONS)
    plans = sf.plans(query)
    streams = dict(query.sources)
    keys = set()
    for e in events:
        if e.stream not in defs:
            continue
        sem = None
        for p in plans:
            if streams[p.sub.var] != e.stream:
                continue
            sem = sem or annotate(e, defs[e.stream])
            keys.add(compute_query_root_properties(sem, p))
    return len(keys)


def _stage_report(eng: Engine) -> tuple[dict, Optional[float]]:
    m = eng.metrics()
    stages = {s: v["mean_per_event_s"] * 1e6 for s, v in m["stages"].items()}
    misses = m["semantic_evaluated_events"]
    per_miss = eng.stats["semantic"].seconds / misses * 1e6 if misses else None
    return stages, per_miss


def throughput_sweep(query: XcepQuery, events: list, kb, defs: dict, configs: list[BenchConfig],
                     rates=DEFAULT_RATES, clock_mode: str = "simulated", model: Optional[CostModel] = None,
                     now: Optional[int] = None, repeats: int = 1) -> list[ConfigReport]:
    """One throughput curve per configuration.

    Without buffering the work per event does not depend on the input rate,
    so the engine runs once and only the queue is replayed per rate.
    """
    clock = make_clock(clock_mode, model)
    now = events[0].timestamp if now is None and events else now
    cq = compile_query(query, defs, kb, now=now)
    n_keys = unique_cache_keys(query, events, kb, defs) if query.semantic else 0
    reports = []
    for cfg in configs:
        curve = []
        runs = []  # engine that produced each curve point
        cached = None
        for rate in rates:
            arr = arrival_times(events, rate)
            if cfg.buffer_ms == 0 and cached is not None:
                costs, eng, matches = cached
            else:
                costs = None
                for _ in range(max(1, repeats)):
                    items, eng, matches = service_items(cq, events, kb, defs, cfg.pipeline(), arr, clock)
                    c = [x for _, x in items]
                    costs = c if costs is None else [min(a, b) for a, b in zip(costs, c)]
                if cfg.buffer_ms == 0:
                    cached = (costs, eng, matches)
            ready = [a / 1000.0 for a in arr] + ([arr[-1] / 1000.0] if arr else [])
            curve.append(drain(list(zip(ready, costs)), len(events), rate))
            runs.append((eng, matches))
        best = max(range(len(curve)), key=lambda i: curve[i].sustained_eps)
        eng, matches = runs[best]
        stages, per_miss = _stage_report(eng)
        pct = 100.0 * cfg.cache_capacity / n_keys if n_keys else None
        reports.append(ConfigReport(cfg.name, cfg.buffer_ms, cfg.cache_capacity, pct, curve,
                                    curve[best].sustained_eps, stages, per_miss,
                                    eng.cache.hit_ratio, eng.filter.evaluations, matches))
    return reports


# -- recovery sweep ------------------------------------------------------------------

@dataclass
class RecoveryRow:
    strategy: str
    downtime_ms: int
    metrics: Optional[dict] = None
    error: Optional[str] = None
    matches: Optional[int] = None

    def as_dict(self) -> dict:
        return asdict(self)


def recovery_sweep(query: XcepQuery, events: list, kb, defs: dict, downtimes_ms: list, strategies: list,
                   fail_at: int, t0s: Optional[int] = None, retention_ms: Optional[int] = None,
                   config: Optional[PipelineConfig] = None, clock_mode: str = "simulated",
                   model: Optional[CostModel] = None, budget: Optional[int] = None) -> list[RecoveryRow]:
    """The three recovery metrics per strategy and downtime."""
    clock = make_clock(clock_mode, model)
    t0s = events[0].timestamp if t0s is None else t0s
    rows = []
    for strategy in strategies:
        for d in downtimes_ms:
            row = RecoveryRow(strategy, d)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    run = recover(query, events, kb, defs, t0s, fail_at, fail_at + d, strategy=strategy,
                                  config=config, retention_ms=retention_ms, budget=budget, clock=clock)
                row.metrics = run.recovery.as_dict()
                row.matches = len(run.matches)
            except StrategyUnsupported as exc:
                row.error = f"unsupported: {exc}"
            except JoinBudgetExceeded as exc:
                row.error = f"join budget exceeded: {exc}"
            except PlanError as exc:
                row.error = f"plan error: {exc}"
            rows.append(row)
    return rows


def slope(xs: list, ys: list) -> float:
    """Least-squares slope of ``ys`` against ``xs``."""
    if len(xs) < 2:
        return 0.0
    return float(np.polyfit(np.asarray(xs, float), np.asarray(ys, float), 1)[0])


# -- calibration ---------------------------------------------------------------------

def _per_unit(fn: Callable[[], None], kind: str, repeats: int = 3) -> float:
    """Microseconds per unit of ``kind`` for the work ``fn`` performs (best of ``repeats``)."""
    best = math.inf
    units = 0
    for _ in range(repeats):
        before = work.snapshot()
        t0 = time.perf_counter()
        fn()
        dt = time.perf_counter() - t0
        units = work.delta(before, work.snapshot())[kind]
        best = min(best, dt)
    return round(best / units * 1e6, 3) if units else 0.0


# varied enough in batch size and hit ratio to separate the semantic unit costs
CALIBRATION_CONFIGS = (
    BenchConfig("baseline"), BenchConfig("buffer-100ms", 100), BenchConfig("buffer-500ms", 500),
    BenchConfig("buffer-2000ms", 2000), BenchConfig("cache-1", 0, 1), BenchConfig("cache-5", 0, 5),
    BenchConfig("cache-20", 0, 20), BenchConfig("combined-2000ms-5", 2000, 5),
    BenchConfig("combined-100ms-1", 100, 1),
)


def calibrate(query: XcepQuery, events: list, kb, defs: dict, join_query: Optional[XcepQuery] = None,
              rates: tuple = (1000.0, 20000.0), configs: Optional[list] = None) -> CostModel:
    """Fit unit costs to measured stage times on this machine.

    ``query`` should carry a semantic segment: each pipeline configuration
    contributes one observation of the semantic stage's measured total against
    the work counted while it ran. The per-triple join cost comes from a PLAIN
    archive evaluation of ``join_query`` (a windowed query), where joins dominate.
    """
    from .archive import PLAIN, ArchiveStore, execute_archive
    default = CostModel()
    store = ArchiveStore(defs)
    for e in events:
        store.append(e)
    decode_us = _per_unit(lambda: store.range_replay(), work.DECODE)
    triple_us = default.triple_matched_us
    if join_query is not None:
        before = work.snapshot()
        t0 = time.perf_counter()
        execute_archive(join_query, store, kb, PLAIN, now=events[0].timestamp, budget=None)
        dt = (time.perf_counter() - t0) * 1e6
        d = work.delta(before, work.snapshot())
        if d[work.TRIPLE]:
            rest = d[work.DECODE] * decode_us + d[work.PATH_CALL] * default.path_call_us
            triple_us = max(dt - rest, 0.0) / d[work.TRIPLE]
    configs = configs or CALIBRATION_CONFIGS
    cq = compile_query(query, defs, kb, now=events[0].timestamp)
    sem_rows, sem_t = [], []
    ann = [0, 0.0]
    cep = [0, 0.0]
    sem_kinds = (work.SEM_EVENT, work.PROBE, work.PATH_CALL, work.INDEXED)
    for cfg, rate in ((c, r) for c in configs for r in (rates if c.buffer_ms else rates[:1])):
        arr = arrival_times(events, rate)
        eng = Engine(kb, defs, [cq], cfg.pipeline())
        before = work.snapshot()
        for e, a in zip(events, arr):
            eng.push(e, a)
        eng.flush()
        d = work.delta(before, work.snapshot())
        sem_rows.append([d[k] for k in sem_kinds])
        sem_t.append(eng.stats["semantic"].seconds * 1e6 - d[work.TRIPLE] * triple_us)
        ann[0] += d[work.ANNOTATE]
        ann[1] += eng.stats["annotate"].seconds * 1e6
        cep[0] += d[work.CEP_ROW]
        cep[1] += eng.stats["cep"].seconds * 1e6
    coef = _nonneg_lstsq(np.asarray(sem_rows, float), np.asarray(sem_t, float))
    vals = dict(zip(("semantic_evaluated_us", "cache_probe_us", "path_call_us", "triple_indexed_us"),
                    (round(float(c), 3) for c in coef)))
    return CostModel(annotate_us=round(ann[1] / ann[0], 3) if ann[0] else default.annotate_us,
                     cep_row_us=round(cep[1] / cep[0], 3) if cep[0] else default.cep_row_us,
                     triple_matched_us=round(triple_us, 3), record_decoded_us=decode_us, **vals)


def _nonneg_lstsq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Least squares with coefficients clipped at zero, refitting the rest after each clip."""
    active = list(range(a.shape[1]))
    coef = np.zeros(a.shape[1])
    while active:
        sol = np.linalg.lstsq(a[:, active], b, rcond=None)[0]
        if (sol >= 0).all():
            coef[active] = sol
            break
        active.pop(int(np.argmin(sol)))
    return coef


def report_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2)
