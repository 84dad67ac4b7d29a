"""Real-time pipeline: annotate, buffer, semantic filter, CEP kernel."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .cep import CepKernel, CompiledQuery, MatchResult
from .events import RawEvent, annotate
from .optimizer import event_predicates
from .semantic import SemanticCache, SemanticFilter

STAGES = ("annotate", "semantic", "cep")


@dataclass
class BufferConfig:
    window_ms: int = 0  # 0 evaluates every event on its own

    def __post_init__(self):
        if self.window_ms < 0:
            raise ValueError("buffer window must be >= 0")


@dataclass
class StageStats:
    calls: int = 0
    events: int = 0
    seconds: float = 0.0
    max_seconds: float = 0.0

    def add(self, seconds: float, events: int):
        self.calls += 1
        self.events += events
        self.seconds += seconds
        if seconds > self.max_seconds:
            self.max_seconds = seconds

    @property
    def per_event(self) -> float:
        return self.seconds / self.events if self.events else 0.0

    def as_dict(self) -> dict:
        return {"calls": self.calls, "events": self.events, "total_s": self.seconds,
                "mean_per_event_s": self.per_event, "max_call_s": self.max_seconds}


@dataclass
class PipelineConfig:
    buffer_ms: int = 0
    cache_capacity: int = 0
    batch_semantic: bool = True
    columnar: bool = True
    queue_bound: int = 100_000


class Engine:
    """One real-time engine instance with its own cache and CEP state."""

    def __init__(self, kb, defs: dict, queries: Iterable[CompiledQuery],
                 config: Optional[PipelineConfig] = None, clock: Optional[Callable[[], float]] = None):
        self.kb = kb
        self.clock = clock or time.perf_counter
        self.defs = defs
        self.config = config or PipelineConfig()
        BufferConfig(self.config.buffer_ms)
        self.cache = SemanticCache(self.config.cache_capacity)
        from .events import EVENT_FUNCTIONS
        self.filter = SemanticFilter(kb, self.cache, event_predicates(defs), EVENT_FUNCTIONS,
                                     batch_eval=self.config.batch_semantic)
        self.kernels = [CepKernel(cq, use_columnar=self.config.columnar) for cq in queries]
        self.buffer: list = []
        self.bucket = None
        self.stats = {s: StageStats() for s in STAGES}
        self.events_in = 0
        self.matches_out = 0
        self.backpressure = 0
        self.last_processed: Optional[tuple] = None
        self.max_retained = 0

    def push(self, event: RawEvent, arrival_ms: Optional[int] = None) -> list[MatchResult]:
        """Accept one event; returns the matches released by any buffer flush."""
        self.events_in += 1
        t0 = self.clock()
        sem = annotate(event, self.defs[event.stream]) if event.stream in self.defs else None
        self.stats["annotate"].add(self.clock() - t0, 1)
        arrival = event.timestamp if arrival_ms is None else arrival_ms
        out = []
        w = self.config.buffer_ms
        bucket = arrival // w if w else None
        if self.buffer and (w == 0 or bucket != self.bucket):
            out = self._flush()
        self.bucket = bucket
        if sem is not None:
            self.buffer.append(sem)
        elif self.kernels:
            self.last_processed = event.key
        if len(self.buffer) > self.config.queue_bound:
            self.backpressure += 1
        if w == 0 and self.buffer:
            out.extend(self._flush())
        return out

    def flush(self) -> list[MatchResult]:
        """Drain the buffer and close pending windows (end of input)."""
        out = self._flush() if self.buffer else []
        tail = []
        for k in self.kernels:
            tail.extend(k.finish())
        self.matches_out += len(tail)
        return out + tail

    def crash(self) -> None:
        """Lose buffered, unprocessed events."""
        self.buffer = []

    def _flush(self) -> list[MatchResult]:
        batch = self.buffer
        self.buffer = []
        n = len(batch)
        out: list = []
        per_kernel = []
        t0 = self.clock()
        for k in self.kernels:
            q = k.cq.query
            if q.never:
                per_kernel.append(None)
                continue
            relevant = [sem for sem in batch if k.cq.admits(sem.source)]
            flags = self.filter.evaluate(relevant, q) if relevant else []
            per_kernel.append((relevant, flags))
        t1 = self.clock()
        self.stats["semantic"].add(t1 - t0, n)
        for k, item in zip(self.kernels, per_kernel):
            if item is None:
                continue
            relevant, flags = item
            rows = [(sem.source, k.candidate_vars(sem.source, f)) for sem, f in zip(relevant, flags)]
            out.extend(k.process(rows))
            if len(k.retained) > self.max_retained:
                self.max_retained = len(k.retained)
        self.stats["cep"].add(self.clock() - t1, n)
        if batch:
            self.last_processed = batch[-1].source.key
        self.matches_out += len(out)
        if len(self.kernels) > 1:
            out.sort(key=lambda m: (m.sort_key, m.query_id))
        return out

    def metrics(self) -> dict:
        return {"events_in": self.events_in, "matches_out": self.matches_out,
                "cache_hits": self.cache.hits, "cache_misses": self.cache.misses,
                "cache_hit_ratio": self.cache.hit_ratio, "semantic_evaluations": self.filter.evaluations,
                "semantic_evaluated_events": self.filter.evaluated_events,
                "backpressure": self.backpressure,
                "stages": {s: st.as_dict() for s, st in self.stats.items()}}


def run_pipeline(events: Iterable[RawEvent], queries: list[CompiledQuery], kb, defs: dict,
                 config: Optional[PipelineConfig] = None, arrivals: Optional[Iterable[int]] = None,
                 clock: Optional[Callable[[], float]] = None):
    """Run all events through one engine; returns (matches, engine)."""
    eng = Engine(kb, defs, queries, config, clock)
    out = []
    arr = iter(arrivals) if arrivals is not None else None
    for e in events:
        out.extend(eng.push(e, next(arr) if arr is not None else None))
    out.extend(eng.flush())
    return out, eng
