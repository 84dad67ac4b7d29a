"""Integrated plans over archived and real-time events, recovery and result merging.

The logical stream is split at key cuts ``(timestamp, seqno)`` into segments
served either by the archive or by a real-time engine. A windowed match whose
first contributor lies in one segment and whose last lies beyond the next cut
is produced by a boundary task evaluated on the archive once every event it
can reference has landed there.
"""
from __future__ import annotations

import heapq
import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from .archive import (DEFAULT_JOIN_BUDGET, HYBRID, ArchiveStore, Constraints, PartialCoverage,
                      execute_archive, strategy_name)
from .cep import compile_query
from .pipeline import Engine, PipelineConfig
from .query import BATCH, XcepQuery
from .results import MatchResult
from .runtime import ForkConfig
from .timeutil import format_instant

ZERO = "ZERO"
NEGATIVE = "NEGATIVE"
POSITIVE = "POSITIVE"

REALTIME = "realtime"
ARCHIVE = "archive"
BOUNDARY = "boundary"

MERGE_POLICY = "order by (result timestamp, contributor seqnos); drop repeated contributor lists"


class PlanError(Exception):
    pass


class ArchiveUnreachable(PlanError):
    pass


class MergeOrderError(PlanError):
    pass


class Unrecoverable(PlanError):
    def __init__(self, message: str, missing: tuple):
        super().__init__(message)
        self.missing = missing  # (from ms, to ms) of history no longer retained


@dataclass(frozen=True)
class Inflight:
    """What ingestion knows at planning time: the latest event it forked and the
    declared archival delay (known in simulation; zero when unknown)."""

    last_key: Optional[tuple] = None
    delay_ms: int = 0


@dataclass(frozen=True)
class GapState:
    t0s: int
    t0d: Optional[int]
    gap: str
    lag: int = 0  # how long archive tasks wait for in-flight events
    delay: int = 0  # declared archival delay, bounds waits for future events

    @property
    def wait(self) -> int:
        return max(self.lag, self.delay)


def classify_gap(t0s: int, archive: Optional[ArchiveStore], inflight: Optional[Inflight] = None) -> GapState:
    """Compare the archive's high watermark with the real-time cursor ``t0s``."""
    if archive is None:
        raise ArchiveUnreachable("no archive to classify against")
    hw = archive.high_watermark
    t0d = hw[0] if hw is not None else None
    delay = max(0, inflight.delay_ms) if inflight is not None else 0
    if t0d is not None and t0d >= t0s:
        return GapState(t0s, t0d, NEGATIVE, 0, delay)
    if inflight is None:
        # live mode: only a lagging watermark is observable
        if t0d is None:
            return GapState(t0s, t0d, ZERO, 0, delay)
        return GapState(t0s, t0d, POSITIVE, t0s - t0d, delay)
    if inflight.last_key is not None and (hw is None or inflight.last_key > hw):
        # every in-flight event lands by t0s + delay, and t0d <= t0s - delay
        lag = t0s - t0d if t0d is not None else delay
        return GapState(t0s, t0d, POSITIVE, lag, delay)
    return GapState(t0s, t0d, ZERO, 0, delay)


@dataclass(frozen=True)
class BoundaryWindows:
    """Archive side ``[t0s - w, t0s)`` and real-time side ``[t0s, t0s + w)``.

    The archive side is closed at ``t0s - w`` because a window admits matches
    spanning exactly ``w``.
    """

    t0s: int
    width: int

    @property
    def archive_side(self) -> tuple:
        return (self.t0s - self.width, self.t0s)

    @property
    def realtime_side(self) -> tuple:
        return (self.t0s, self.t0s + self.width)


def boundary_windows(t0s: int, w: int) -> BoundaryWindows:
    if w <= 0:
        raise PlanError("window width must be > 0")
    return BoundaryWindows(t0s, w)


def build_boundary_query(query: XcepQuery, bw: BoundaryWindows, first_lo: Optional[tuple] = None) -> tuple:
    """The boundary variant: same query, first contributor on the archive side
    and last contributor on the real-time side. Returns ``(query, constraints)``."""
    if not query.multi_window:
        raise PlanError("boundary queries need a multi-variable WINDOW")
    cut = (bw.t0s, -1)
    lo = (bw.t0s - bw.width, -1)
    first_lo = lo if first_lo is None else max(first_lo, lo)
    cons = Constraints(read_lo=lo, read_hi=(bw.t0s + bw.width + 1, -1),
                       first_lo=first_lo, first_hi=cut, last_lo=cut)
    return query, cons


@dataclass(frozen=True)
class Task:
    kind: str  # realtime | archive | boundary
    label: str
    cons: Constraints
    execute_at: int
    strategy: Optional[str] = None
    dedup_cutoff: Optional[int] = None

    def to_json(self) -> dict:
        def key(k):
            return None if k is None else {"t": format_instant(k[0]), "seqno": k[1]}
        c = self.cons
        out = {"kind": self.kind, "label": self.label, "executeAt": format_instant(self.execute_at),
               "read": [key(c.read_lo), key(c.read_hi)]}
        if self.strategy:
            out["strategy"] = self.strategy
        if c.first_lo is not None or c.first_hi is not None:
            out["first"] = [key(c.first_lo), key(c.first_hi)]
        if c.last_lo is not None or c.last_hi is not None:
            out["last"] = [key(c.last_lo), key(c.last_hi)]
        if c.emit_from is not None:
            out["emitFrom"] = format_instant(c.emit_from)
        if self.dedup_cutoff is not None:
            out["dedupFilter"] = format_instant(self.dedup_cutoff)
        return out


@dataclass
class ExecutionPlan:
    query_id: str
    gap: GapState
    tasks: list
    merge_policy: str = MERGE_POLICY
    warnings: list = field(default_factory=list)

    def of_kind(self, kind: str) -> list:
        return [t for t in self.tasks if t.kind == kind]

    @property
    def archive_task(self) -> Optional[Task]:
        ts = self.of_kind(ARCHIVE)
        return ts[0] if ts else None

    @property
    def realtime_task(self) -> Optional[Task]:
        ts = self.of_kind(REALTIME)
        return ts[0] if ts else None

    @property
    def boundary_tasks(self) -> list:
        return self.of_kind(BOUNDARY)

    def to_json(self) -> dict:
        g = self.gap
        return {"query": self.query_id,
                "gap": {"class": g.gap, "t0S": format_instant(g.t0s),
                        "t0D": format_instant(g.t0d) if g.t0d is not None else None,
                        "lagMs": g.lag, "delayMs": g.delay},
                "tasks": [t.to_json() for t in self.tasks],
                "mergePolicy": self.merge_policy,
                "warnings": list(self.warnings)}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _width(query: XcepQuery) -> Optional[int]:
    w = query.window
    return w.width if w is not None else None


def segment_tasks(query: XcepQuery, segments: list, strategy: str, waits: dict) -> list[Task]:
    """Tasks covering every match over contiguous ``segments``.

    ``segments`` holds ``(lo, hi, kind, ready_at)`` with ``lo``/``hi`` key cuts
    (``None`` is unbounded); ``waits`` maps a cut to the archival wait applying
    to events after it.
    """
    w = _width(query)
    agg = query.is_aggregate
    multi = query.multi_window
    tasks = []
    for i, (lo, hi, kind, ready_at) in enumerate(segments):
        first = i == 0
        if kind == REALTIME:
            emit_from = lo[0] + w if agg and not first else None
            tasks.append(Task(REALTIME, f"realtime[{i}]", Constraints(read_lo=lo, read_hi=hi, emit_from=emit_from),
                              ready_at))
            if agg and not first:
                stop = (lo[0] + w, -1)
                if hi is not None and hi < stop:
                    stop = hi
                cons = Constraints(read_lo=(lo[0] - w, -1), read_hi=stop, last_lo=lo, last_hi=stop)
                tasks.append(Task(BOUNDARY, f"boundary[{i}]", cons, stop[0] + waits.get(lo, 0), strategy))
        else:
            read_lo = lo
            cons = Constraints(read_lo=lo, read_hi=hi)
            if agg and not first:
                read_lo = (lo[0] - w, -1)
                cons = Constraints(read_lo=read_lo, read_hi=hi, last_lo=lo, last_hi=hi)
            tasks.append(Task(ARCHIVE, f"archive[{i}]", cons, ready_at, strategy))
        if multi and not first:
            prev_lo = segments[i - 1][0]
            cons = Constraints(read_lo=(lo[0] - w, -1), read_hi=(lo[0] + w + 1, -1),
                               first_lo=prev_lo, first_hi=lo, last_lo=lo)
            tasks.append(Task(BOUNDARY, f"boundary[{i}]", cons, lo[0] + w + waits.get(lo, 0), strategy))
    return tasks


def plan(query: XcepQuery, gap: GapState, strategy: str = HYBRID,
         retention_ms: Optional[int] = None) -> ExecutionPlan:
    """Split ``query``'s range at the real-time cursor ``gap.t0s``."""
    strategy = strategy_name(strategy)
    t0s = gap.t0s
    p0 = (t0s, -1)
    start = query.within.start
    notes = []
    if start is None or start >= t0s:
        notes.append("range entirely in the future: no archive task")
        tasks = segment_tasks(query, [(p0, None, REALTIME, t0s)], strategy, {})
        return ExecutionPlan(query.qid, gap, tasks, warnings=notes)
    if query.window is not None and query.window.kind == BATCH:
        raise PlanError("BATCH windows are not supported over past ranges")
    archive_at = t0s + (gap.lag if gap.gap == POSITIVE else 0)
    segments = [(None, p0, ARCHIVE, archive_at), (p0, None, REALTIME, t0s)]
    tasks = segment_tasks(query, segments, strategy, {p0: gap.wait})
    if gap.gap == NEGATIVE:
        tasks = [replace(t, dedup_cutoff=t0s) if t.kind == ARCHIVE else t for t in tasks]
    if retention_ms is not None and start < archive_at - retention_ms:
        notes.append(f"range starts {format_instant(start)}, before retained history "
                     f"{format_instant(archive_at - retention_ms)}: partial results")
    return ExecutionPlan(query.qid, gap, tasks, warnings=notes)


def recovery_plan(query: XcepQuery, base: ExecutionPlan, cut_f: tuple, cut_r: tuple,
                  gap_r: GapState, strategy: str = HYBRID) -> ExecutionPlan:
    """Replace the open real-time segment of ``base`` by real-time up to ``cut_f``,
    archive over ``[cut_f, cut_r)`` and real-time from ``cut_r``."""
    strategy = strategy_name(strategy)
    rt = base.realtime_task
    segs = []
    past = [t for t in base.tasks if t.kind == ARCHIVE]
    if past:
        segs.append((None, rt.cons.read_lo, ARCHIVE, past[0].execute_at))
    tr = cut_r[0]
    recover_at = tr + gap_r.lag
    if cut_f < cut_r:
        segs.append((rt.cons.read_lo, cut_f, REALTIME, rt.execute_at))
        segs.append((cut_f, cut_r, ARCHIVE, recover_at))
    else:
        segs.append((rt.cons.read_lo, cut_r, REALTIME, rt.execute_at))
    segs.append((cut_r, None, REALTIME, tr))
    waits = {rt.cons.read_lo: base.gap.wait, cut_f: gap_r.wait, cut_r: gap_r.wait}
    tasks = segment_tasks(query, segs, strategy, waits)
    fixed = []
    for t in tasks:
        # nothing after the failure can run before recovery
        if t.kind != REALTIME and t.execute_at < recover_at and t.cons.read_hi is not None \
                and t.cons.read_hi > cut_f and t.label != "archive[0]":
            t = replace(t, execute_at=max(recover_at, t.execute_at))
        if base.gap.gap == NEGATIVE and t.label == "archive[0]":
            t = replace(t, dedup_cutoff=base.gap.t0s)
        fixed.append(t)
    notes = list(base.warnings)
    return ExecutionPlan(query.qid, base.gap, fixed, warnings=notes)


# -- merging ----------------------------------------------------------------------

def merge_results(partials: Iterable[list]) -> list[MatchResult]:
    """k-way merge of internally ordered result lists, dropping duplicates."""
    lists = [list(p) for p in partials]
    for p in lists:
        for a, b in zip(p, p[1:]):
            if b.sort_key < a.sort_key:
                raise MergeOrderError("partial result stream is not ordered")
    out: list = []
    last = None
    for m in heapq.merge(*lists, key=lambda m: m.sort_key):
        k = m.dedup_key
        if k == last:
            continue
        last = k
        out.append(m)
    return out


# -- simulation -----------------------------------------------------------------------

@dataclass
class RecoveryMetrics:
    initial_recovery_latency_s: Optional[float] = None
    catchup_duration_s: float = 0.0
    catchup_events: int = 0

    @property
    def catchup_throughput(self) -> float:
        return self.catchup_events / self.catchup_duration_s if self.catchup_duration_s > 0 else 0.0

    def as_dict(self) -> dict:
        return {"initialRecoveryLatency_s": self.initial_recovery_latency_s,
                "catchupDuration_s": self.catchup_duration_s,
                "catchupEvents": self.catchup_events,
                "catchupThroughput_eps": self.catchup_throughput}


@dataclass
class IntegratedRun:
    matches: list
    plan: ExecutionPlan
    partials: dict
    recovery: Optional[RecoveryMetrics] = None
    engine_metrics: list = field(default_factory=list)
    archive_stats: dict = field(default_factory=dict)


@dataclass(frozen=True)
class _Watermark:
    high_watermark: Optional[tuple]


class _TimedArchive:
    """Grows an archive as simulated time passes, honouring visibility and retention."""

    def __init__(self, events: list, fork: ForkConfig, defs: dict, retention_ms: Optional[int],
                 path: Optional[str] = None):
        self.schedule = [(fork.archive_visible_at(e.timestamp), e) for e in events]
        self.store = ArchiveStore(defs, path, retention_ms)
        self.pos = 0
        self.now = None

    def watermark_at(self, t: int):
        """A read-only view of the high watermark the archive will have at ``t``."""
        hw = None
        for vis, e in self.schedule:
            if vis > t:
                break
            hw = e.key
        return _Watermark(hw)

    def advance(self, t: int) -> ArchiveStore:
        if self.now is not None and t < self.now:
            raise PlanError("simulated time ran backwards")
        self.now = t
        while self.pos < len(self.schedule) and self.schedule[self.pos][0] <= t:
            self.store.append(self.schedule[self.pos][1])
            self.pos += 1
        self.store.prune(t)
        return self.store


def _last_before(events: list, t: int) -> Optional[tuple]:
    last = None
    for e in events:
        if e.timestamp >= t:
            break
        last = e.key
    return last


def _run_engine(query, events, kb, defs, cons: Constraints, config, now, stop_at: Optional[int] = None,
                clock=None):
    """Feed events in ``cons``'s read range to a fresh engine; a failure at
    ``stop_at`` loses whatever is still buffered."""
    cq = compile_query(query, defs, kb, now=now, accept=(cons.read_lo, cons.read_hi), emit_from=cons.emit_from)
    eng = Engine(kb, defs, [cq], config, clock)
    out = []
    for e in events:
        if cons.read_lo is not None and e.key < cons.read_lo:
            continue
        if stop_at is not None and e.timestamp >= stop_at:
            break
        out.extend(eng.push(e))
    if stop_at is None:
        out.extend(eng.flush())
    else:
        eng.crash()
    return out, eng


def _initial(query, events, defs, t0s, fork, strategy, retention_ms, archive_path=None):
    arch = _TimedArchive(events, fork, defs, retention_ms, archive_path)
    store = arch.advance(t0s)
    gap = classify_gap(t0s, store, Inflight(_last_before(events, t0s), max(0, fork.gap_ms)))
    return arch, plan(query, gap, strategy, retention_ms)


def initial_plan(query: XcepQuery, events: list, defs: dict, t0s: int, *, fork: ForkConfig = ForkConfig(),
                 strategy: str = HYBRID, retention_ms: Optional[int] = None) -> ExecutionPlan:
    """The plan ``run_integrated`` would start from, without executing anything."""
    events = sorted(events, key=lambda e: e.key)
    return _initial(query, events, defs, t0s, fork, strategy_name(strategy), retention_ms)[1]


def run_integrated(query: XcepQuery, events: list, kb, defs: dict, t0s: int, *,
                   fork: ForkConfig = ForkConfig(), strategy: str = HYBRID,
                   config: Optional[PipelineConfig] = None, retention_ms: Optional[int] = None,
                   budget: Optional[int] = DEFAULT_JOIN_BUDGET, archive_path: Optional[str] = None,
                   strict_retention: bool = True, replay_config: Optional[PipelineConfig] = None,
                   clock=None) -> IntegratedRun:
    """Simulate a query submitted at ``t0s`` over a forked stream and merge all parts.

    ``replay_config`` configures the dedicated pipeline that REPLAY tasks feed
    (defaults to ``config``); ``clock`` times archive tasks and engine stages.
    """
    config = config or PipelineConfig()
    replay_config = replay_config or config
    strategy = strategy_name(strategy)
    events = sorted(events, key=lambda e: e.key)
    arch, base = _initial(query, events, defs, t0s, fork, strategy, retention_ms, archive_path)
    now = t0s
    partials: dict = {}
    engine_metrics = []
    recovery = None
    rt = base.realtime_task
    if fork.has_failure and fork.recover_at > t0s:
        fail = max(fork.fail_at, t0s)
        pre, eng = _run_engine(query, events, kb, defs, rt.cons, config, now, stop_at=fail, clock=clock)
        engine_metrics.append(eng.metrics())
        last = eng.last_processed
        cut_f = rt.cons.read_lo if last is None or last < rt.cons.read_lo else (last[0], last[1] + 1)
        cut_r = (fork.recover_at, -1)
        gap_r = classify_gap(fork.recover_at, arch.watermark_at(fork.recover_at),
                             Inflight(_last_before(events, fork.recover_at), max(0, fork.gap_ms)))
        full = recovery_plan(query, base, cut_f, cut_r, gap_r, strategy)
        pre_label = next(t.label for t in full.tasks
                         if t.kind == REALTIME and t.cons.read_lo == rt.cons.read_lo)
        partials[pre_label] = pre
        recovery = RecoveryMetrics()
        if retention_ms is not None and strict_retention:
            check_retention(full, retention_ms, after=rt.cons.read_lo,
                            floor=events[0].timestamp if events else None)
    else:
        full = base
    for t in full.tasks:
        if t.kind != REALTIME or t.label in partials:
            continue
        out, eng = _run_engine(query, events, kb, defs, t.cons, config, now, clock=clock)
        engine_metrics.append(eng.metrics())
        partials[t.label] = out
    stats = {}
    for t in sorted((t for t in full.tasks if t.kind != REALTIME), key=lambda t: (t.execute_at, t.label)):
        store = arch.advance(t.execute_at)
        with warnings.catch_warnings():
            if not strict_retention:
                warnings.simplefilter("ignore", PartialCoverage)
            run = execute_archive(query, store, kb, t.strategy, t.cons, now=now, config=replay_config,
                                  budget=budget, clock=clock)
        partials[t.label] = run.matches
        stats[t.label] = {"events_read": run.events_read, "seconds": run.seconds}
        if recovery is not None and t.kind == ARCHIVE and t.cons.read_hi is not None and t.cons.read_lo is not None \
                and t.execute_at >= fork.recover_at and t.label != "archive[0]":
            if recovery.initial_recovery_latency_s is None:
                recovery.initial_recovery_latency_s = run.first_event_s if run.first_event_s is not None \
                    else run.seconds
            recovery.catchup_duration_s += run.seconds
            recovery.catchup_events += run.events_read
    order = [t.label for t in full.tasks]
    merged = merge_results(partials[k] for k in order if k in partials)
    return IntegratedRun(merged, full, partials, recovery, engine_metrics, stats)


def check_retention(p: ExecutionPlan, retention_ms: int, after: Optional[tuple] = None,
                    floor: Optional[int] = None) -> None:
    """Raise when a task reading past ``after`` needs history pruned by the time it runs.

    ``floor`` is the earliest event time; nothing before it was ever archived.
    """
    worst = None
    for t in p.tasks:
        lo = t.cons.read_lo
        if t.kind == REALTIME or lo is None:
            continue
        if floor is not None and lo[0] < floor:
            lo = (floor, -1)
        if after is not None and t.cons.read_hi is not None and t.cons.read_hi <= after:
            continue
        oldest = t.execute_at - retention_ms
        if lo[0] < oldest and (worst is None or lo[0] < worst[0]):
            worst = (lo[0], oldest)
    if worst is not None:
        raise Unrecoverable(f"history from {format_instant(worst[0])} to {format_instant(worst[1])} "
                            "is pruned before recovery can read it", worst)


def recover(query: XcepQuery, events: list, kb, defs: dict, t0s: int, t_failure: int, t_recover: int,
            **kwargs) -> IntegratedRun:
    """Run with real-time downtime ``[t_failure, t_recover)`` and reconstruct the results."""
    fork = kwargs.pop("fork", ForkConfig())
    fork = ForkConfig(fork.gap_ms, t_failure, t_recover)
    return run_integrated(query, events, kb, defs, t0s, fork=fork, **kwargs)
