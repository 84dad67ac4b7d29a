"""Append-only event archive and the three archive execution strategies.

REPLAY feeds a time range through a dedicated pipeline; PLAIN rewrites the
whole query into one path query over the archive's triple view; HYBRID
rewrites everything except the correlation clauses (JOIN, SEQ, WINDOW) and
finishes those in a CEP kernel.
"""
from __future__ import annotations

import bisect
import io
import json
import os
import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import expr as X
from .cep import CepKernel, compile_query
from .events import (EVENT_FUNCTIONS, InstanceRef, RawEvent, annotate, event_from_record,
                     event_iri, event_to_record)
from .kb import (Iri, PathQuery, TripleStore, Variable, evaluate_path_query, instant, num, string)
from .optimizer import event_predicates
from .pipeline import Engine, PipelineConfig
from .semantic import evaluate_subquery
from .query import CepSubquery, XcepQuery
from .results import MatchResult
from .work import COUNTS, DECODE

REPLAY = "REPLAY"
PLAIN = "PLAIN"
HYBRID = "HYBRID"
STRATEGIES = (REPLAY, PLAIN, HYBRID)
DEFAULT_JOIN_BUDGET = 10 ** 7

_LEN = struct.Struct(">I")


class ArchiveError(Exception):
    pass


class OutOfOrderAppend(ArchiveError):
    pass


class StrategyUnsupported(ArchiveError):
    pass


class PartialCoverage(UserWarning):
    def __init__(self, message: str, covered: tuple):
        super().__init__(message)
        self.covered = covered


def strategy_name(text: str) -> str:
    s = text.upper()
    if s == "REWRITE":
        s = PLAIN
    if s not in STRATEGIES:
        raise ArchiveError(f"unknown strategy {text!r}")
    return s


# -- the store --------------------------------------------------------------------

class ArchiveStore:
    """Length-prefixed JSON log with a time index, IRI index and triple view.

    Pruning never rewrites the log; it advances the retained start and records
    the pruned offset in a sidecar metadata file.
    """

    def __init__(self, defs: dict, path: Optional[str] = None, retention_ms: Optional[int] = None):
        self.defs = defs
        self.path = path
        self.retention_ms = retention_ms
        self._fh = open(path, "a+b") if path else io.BytesIO()
        self._keys: list = []  # (timestamp, seqno) per retained record
        self._offsets: list = []
        self._first = 0  # index of the oldest retained record
        self._by_iri: dict = {}  # iri -> (offset, triples)
        self.triples = TripleStore()
        self.high_watermark: Optional[tuple] = None
        self.pruned_before: Optional[int] = None  # events older than this were pruned
        self.appends = 0

    # persistence ----------------------------------------------------------
    @property
    def meta_path(self) -> Optional[str]:
        return self.path + ".meta.json" if self.path else None

    def _write_meta(self):
        if not self.path:
            return
        offset = self._offsets[self._first] if self._first < len(self._offsets) else self._end()
        doc = {"retention_ms": self.retention_ms, "pruned_offset": offset, "pruned_before": self.pruned_before}
        with open(self.meta_path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)

    def _end(self) -> int:
        self._fh.seek(0, os.SEEK_END)
        return self._fh.tell()

    @classmethod
    def open(cls, path: str, defs: dict, retention_ms: Optional[int] = None) -> "ArchiveStore":
        """Reopen a log, rebuilding the indexes from the retained records."""
        store = cls(defs, path, retention_ms)
        start = 0
        if os.path.exists(store.meta_path):
            with open(store.meta_path, encoding="utf-8") as fh:
                meta = json.load(fh)
            start = meta.get("pruned_offset", 0)
            store.pruned_before = meta.get("pruned_before")
            if retention_ms is None:
                store.retention_ms = meta.get("retention_ms")
        fh = store._fh
        fh.seek(0, os.SEEK_END)
        end = fh.tell()
        pos = start
        while pos < end:
            fh.seek(pos)
            head = fh.read(4)
            if len(head) < 4:
                break
            (n,) = _LEN.unpack(head)
            body = fh.read(n)
            if len(body) < n:
                break  # torn final record
            store._index(event_from_record(json.loads(body)), pos)
            pos += 4 + n
        return store

    def close(self):
        self._fh.close()

    # writes -----------------------------------------------------------------
    def append(self, event: RawEvent) -> tuple:
        """Durably append ``event``; returns the new high watermark."""
        if self.high_watermark is not None and event.key < self.high_watermark:
            raise OutOfOrderAppend(f"event {event.key} precedes high watermark {self.high_watermark}")
        if self.high_watermark is not None and event.key == self.high_watermark:
            return self.high_watermark  # duplicate delivery of the latest event
        body = json.dumps(event_to_record(event), separators=(",", ":")).encode("utf-8")
        pos = self._end()
        self._fh.write(_LEN.pack(len(body)) + body)
        self._fh.flush()
        self._index(event, pos)
        self.appends += 1
        return self.high_watermark

    def _index(self, event: RawEvent, pos: int):
        defn = self.defs.get(event.stream)
        triples = annotate(event, defn).triples if defn is not None else ()
        for t in triples:
            self.triples.add(t)
        self._by_iri[event_iri(event.stream, event.timestamp, event.seqno)] = (pos, triples)
        self._keys.append(event.key)
        self._offsets.append(pos)
        self.high_watermark = event.key

    def prune(self, now_ms: int) -> int:
        """Drop events older than ``now_ms - retention`` from every structure."""
        if self.retention_ms is None:
            return 0
        cutoff = now_ms - self.retention_ms
        stop = bisect.bisect_left(self._keys, (cutoff, -1), self._first)
        dropped = 0
        for i in range(self._first, stop):
            e = self._read(self._offsets[i])
            iri = event_iri(e.stream, e.timestamp, e.seqno)
            _, triples = self._by_iri.pop(iri)
            for t in triples:
                self.triples.discard(t)
            dropped += 1
        if dropped:
            self._first = stop
            self.pruned_before = cutoff if self.pruned_before is None else max(self.pruned_before, cutoff)
            self._write_meta()
        return dropped

    # reads ------------------------------------------------------------------
    def _read(self, pos: int) -> RawEvent:
        self._fh.seek(pos)
        (n,) = _LEN.unpack(self._fh.read(4))
        COUNTS[DECODE] += 1
        return event_from_record(json.loads(self._fh.read(n)))

    def __len__(self) -> int:
        return len(self._keys) - self._first

    @property
    def oldest(self) -> Optional[tuple]:
        return self._keys[self._first] if len(self) else None

    def event(self, iri: str) -> RawEvent:
        hit = self._by_iri.get(iri)
        if hit is None:
            raise ArchiveError(f"event {iri} is not retained")
        return self._read(hit[0])

    def triples_of(self, iri: str) -> tuple:
        return self._by_iri[iri][1]

    def range_replay(self, lo: Optional[tuple] = None, hi: Optional[tuple] = None) -> list[RawEvent]:
        """Retained events with ``lo <= (timestamp, seqno) < hi`` in key order."""
        self.check_coverage(lo)
        a = self._first if lo is None else bisect.bisect_left(self._keys, lo, self._first)
        b = len(self._keys) if hi is None else bisect.bisect_left(self._keys, hi, self._first)
        return [self._read(self._offsets[i]) for i in range(a, b)]

    def check_coverage(self, lo: Optional[tuple]) -> bool:
        """Warn and return False when ``lo`` reaches into pruned history."""
        if self.pruned_before is None:
            return True
        if lo is None or lo[0] < self.pruned_before:
            start = self.oldest[0] if self.oldest else self.pruned_before
            warnings.warn(PartialCoverage(f"range starts before retained history; covered from {start}",
                                          (start, None)))
            return False
        return True


def time_range_keys(start: Optional[int], end: Optional[int]) -> tuple:
    """Key bounds for the half-open time range ``[start, end)``."""
    return ((start, -1) if start is not None else None, (end, -1) if end is not None else None)


# -- rewriting ----------------------------------------------------------------------

@dataclass(frozen=True)
class Constraints:
    """Key-range restrictions on a task: which events may contribute and
    which first/last contributors a match may have."""

    read_lo: Optional[tuple] = None
    read_hi: Optional[tuple] = None
    first_lo: Optional[tuple] = None
    first_hi: Optional[tuple] = None
    last_lo: Optional[tuple] = None
    last_hi: Optional[tuple] = None
    emit_from: Optional[int] = None

    def admits_match(self, m: MatchResult) -> bool:
        c0 = m.contributors[0][1:]
        cn = m.contributors[-1][1:]
        if self.first_lo is not None and c0 < self.first_lo:
            return False
        if self.first_hi is not None and c0 >= self.first_hi:
            return False
        if self.last_lo is not None and cn < self.last_lo:
            return False
        if self.last_hi is not None and cn >= self.last_hi:
            return False
        return True

    @property
    def has_match_constraints(self) -> bool:
        return any(x is not None for x in (self.first_lo, self.first_hi, self.last_lo, self.last_hi))


@dataclass(frozen=True)
class RewrittenQuery:
    path_query: PathQuery  # PLAIN: the whole query; HYBRID: unused, see per_var
    order_by: str = "timestamp"
    residual: Optional[CepSubquery] = None
    mode: str = PLAIN
    per_var: tuple = ()  # HYBRID: ((var, ((PathQuery, per-event subqueries) per OR-group, ...)), ...)
    pushed_filters: tuple = ()  # indexes of CEP FILTERs evaluated by the path queries


class _Builder:
    """Accumulates patterns and filters while translating clauses."""

    def __init__(self, query: XcepQuery, resolver):
        self.q = query
        self.resolver = resolver
        self.event_preds = event_predicates(resolver.defs)
        self.patterns: list = []
        self.filters: list = []
        self.attr_vars: dict = {}

    def attr_var(self, var: str, name: str) -> str:
        """Variable bound to the object of ``?var``'s triple for attribute ``name``."""
        key = (var, name)
        if key not in self.attr_vars:
            stream = self.q.stream_of(var)
            defn = self.resolver.defs[stream]
            v = f"_{var}_{len(self.attr_vars)}"
            self.attr_vars[key] = v
            self.patterns.append((Variable(var), defn.predicate(name), Variable(v)))
        return self.attr_vars[key]

    def attr_kind(self, var: str, name: str):
        defn = self.resolver.defs[self.q.stream_of(var)]
        rule = defn.mapping.value_rules.get(name)
        if isinstance(rule, InstanceRef):
            return ("iri", rule.namespace)
        return (defn.schema.type_of(name), None)

    def name(self, var: str, ref) -> str:
        return self.resolver.resolve(self.q.stream_of(var), ref)

    def time_var(self, var: str) -> str:
        defn = self.resolver.defs[self.q.stream_of(var)]
        if "timestamp" not in defn.schema.names:
            raise StrategyUnsupported(f"stream {defn.stream!r} has no timestamp attribute to rewrite against")
        return self.attr_var(var, "timestamp")

    def stream_filter(self, var: str):
        stream = self.q.stream_of(var)
        self.filters.append(X.Compare("=", X.Call("stream", (X.Var(var),)), X.Const(string(stream))))

    def key_bound(self, var: str, key: tuple, lower: bool):
        """``(t, seqno) >= key`` when ``lower``, else ``(t, seqno) < key``."""
        t = X.Var(self.time_var(var))
        ts = X.Const(instant(key[0]))
        seq = X.Call("seqno", (X.Var(var),))
        s = X.Const(num(key[1]))
        if lower:
            return X.Or((X.Compare(">", t, ts), X.And((X.Compare("=", t, ts), X.Compare(">=", seq, s)))))
        return X.Or((X.Compare("<", t, ts), X.And((X.Compare("=", t, ts), X.Compare("<", seq, s)))))

    def within(self, var: str, now: Optional[int]):
        r = self.q.within
        start = r.start if r.start is not None else now
        t = X.Var(self.time_var(var))
        if start is not None:
            self.filters.append(X.Compare(">=" if r.start_inclusive else ">", t, X.Const(instant(start))))
        if r.end is not None:
            self.filters.append(X.Compare("<=" if r.end_inclusive else "<", t, X.Const(instant(r.end))))

    def value_const(self, var: str, name: str, value):
        kind, ns = self.attr_kind(var, name)
        if kind == "iri":
            if not isinstance(value, str):
                raise StrategyUnsupported(f"{name} is instance-mapped; only string equality rewrites")
            from urllib.parse import quote
            return Iri(ns + quote(value, safe="-_.~"))
        if kind == "ts":
            raise StrategyUnsupported("timestamp-valued attribute comparisons are not rewritten")
        if isinstance(value, str):
            return string(value)
        return num(value)

    def expr(self, e):
        """Translate a CEP expression into a path filter over bound attribute variables."""
        if isinstance(e, X.Const):
            if isinstance(e.value, str):
                return X.Const(string(e.value))
            return X.Const(num(e.value))
        if isinstance(e, X.Attr):
            name = self.name(e.var, e.name)
            kind, _ = self.attr_kind(e.var, name)
            if kind in ("iri", "ts"):
                raise StrategyUnsupported(f"{name} cannot appear inside a rewritten expression")
            return X.Var(self.attr_var(e.var, name))
        if isinstance(e, X.Arith):
            return X.Arith(e.op, self.expr(e.left), self.expr(e.right))
        if isinstance(e, X.Compare):
            return X.Compare(e.op, self.expr(e.left), self.expr(e.right))
        if isinstance(e, X.And):
            return X.And(tuple(self.expr(i) for i in e.items))
        if isinstance(e, X.Or):
            return X.Or(tuple(self.expr(i) for i in e.items))
        raise StrategyUnsupported(f"cannot rewrite {e!r}")

    def filter_clause(self, f):
        """Filter rewriting: a property path to the mapped attribute plus a value filter."""
        name = self.name(f.var, f.attr)
        kind, _ = self.attr_kind(f.var, name)
        if kind == "iri" and f.op not in ("=", "!="):
            raise StrategyUnsupported(f"ordering comparison on instance-mapped attribute {name}")
        const = self.value_const(f.var, name, f.value)
        self.filters.append(X.Compare(f.op, X.Var(self.attr_var(f.var, name)), X.Const(const)))

    def join_clause(self, e):
        """Join rewriting: equality of instance-mapped attributes shares one variable;
        other constraints become filters over the mapped values."""
        if isinstance(e, X.Compare) and e.op == "=" and isinstance(e.left, X.Attr) and isinstance(e.right, X.Attr):
            na, nb = self.name(e.left.var, e.left.name), self.name(e.right.var, e.right.name)
            ka, kb = self.attr_kind(e.left.var, na), self.attr_kind(e.right.var, nb)
            if ka == kb and ka[0] != "ts":
                va = self.attr_var(e.left.var, na)
                key = (e.right.var, nb)
                if key in self.attr_vars:
                    self.filters.append(X.Compare("=", X.Var(va), X.Var(self.attr_vars[key])))
                else:
                    stream = self.q.stream_of(e.right.var)
                    self.attr_vars[key] = va
                    self.patterns.append((Variable(e.right.var), self.resolver.defs[stream].predicate(nb),
                                          Variable(va)))
                return
        for node in X.walk(e):
            if isinstance(node, X.Attr):
                name = self.name(node.var, node.name)
                if self.attr_kind(node.var, name)[0] == "iri":
                    raise StrategyUnsupported(f"only equality joins rewrite over instance-mapped {name}")
        self.filters.append(self.expr(e))

    def seq_clause(self, seq: tuple):
        """Sequence rewriting: strict (timestamp, seqno) order between consecutive variables."""
        for a, b in zip(seq, seq[1:]):
            ta, tb = X.Var(self.time_var(a)), X.Var(self.time_var(b))
            sa, sb = X.Call("seqno", (X.Var(a),)), X.Call("seqno", (X.Var(b),))
            self.filters.append(X.Or((X.Compare("<", ta, tb),
                                      X.And((X.Compare("=", ta, tb), X.Compare("<", sa, sb))))))

    def window_clause(self, window, seq: Optional[tuple]):
        """Window rewriting: the last contributor is at most ``width`` after the first."""
        w = X.Const(num(window.width))
        vs = list(window.variables)
        if seq and set(seq) == set(vs):
            first, last = X.Var(self.time_var(seq[0])), X.Var(self.time_var(seq[-1]))
            self.filters.append(X.Compare("<=", X.Arith("-", last, first), w))
            return
        for i, a in enumerate(vs):
            for b in vs[i + 1:]:
                ta, tb = X.Var(self.time_var(a)), X.Var(self.time_var(b))
                self.filters.append(X.Compare("<=", X.Arith("-", ta, tb), w))
                self.filters.append(X.Compare("<=", X.Arith("-", tb, ta), w))

    def semantic(self, var: str, subs: list, tag: str):
        """Pass semantic subqueries through, renaming their private variables."""
        for sub in subs:
            if not event_local(sub, self.event_preds):
                raise StrategyUnsupported("subquery reaches event triples beyond its own event")
        for k, sub in enumerate(subs):
            mapping = {}

            def ren(t):
                if isinstance(t, Variable) and t.name != var and t.name not in self.q.variables:
                    mapping.setdefault(t.name, f"_{tag}{k}_{t.name}")
                    return Variable(mapping[t.name])
                return t
            for s, p, o in sub.body.patterns:
                self.patterns.append((ren(s), p, ren(o)))
            for f in sub.body.filters:
                self.filters.append(_rename_vars(f, mapping))


def event_local(sub, event_preds: frozenset) -> bool:
    """True when the subquery only touches event triples rooted at its own variable,
    so evaluating it over the whole archive equals evaluating it per event."""
    for s, p, o in sub.body.patterns:
        if isinstance(o, Variable) and o.name == sub.var:
            return False
        if p in event_preds and not (isinstance(s, Variable) and s.name == sub.var):
            return False
    return True


def _rename_vars(e, mapping: dict):
    if isinstance(e, X.Var):
        return X.Var(mapping.get(e.name, e.name))
    if isinstance(e, X.Arith):
        return X.Arith(e.op, _rename_vars(e.left, mapping), _rename_vars(e.right, mapping))
    if isinstance(e, X.Compare):
        return X.Compare(e.op, _rename_vars(e.left, mapping), _rename_vars(e.right, mapping))
    if isinstance(e, X.And):
        return X.And(tuple(_rename_vars(i, mapping) for i in e.items))
    if isinstance(e, X.Or):
        return X.Or(tuple(_rename_vars(i, mapping) for i in e.items))
    if isinstance(e, X.Call):
        return X.Call(e.fn, tuple(_rename_vars(a, mapping) for a in e.args))
    return e


def _or_groups(subs: list) -> list:
    groups: list = []
    for s in subs:
        if not groups or s.connective == "OR":
            groups.append([])
        groups[-1].append(s)
    return groups or [[]]


def _constrain(b: _Builder, cons: Constraints, variables: list):
    for v in variables:
        if cons.read_lo is not None:
            b.filters.append(b.key_bound(v, cons.read_lo, True))
        if cons.read_hi is not None:
            b.filters.append(b.key_bound(v, cons.read_hi, False))
    if len(variables) == 1:
        v = variables[0]
        for key, lower in ((cons.first_lo, True), (cons.first_hi, False), (cons.last_lo, True),
                           (cons.last_hi, False)):
            if key is not None:
                b.filters.append(b.key_bound(v, key, lower))
        return
    # first contributor = min over variables; last = max
    if cons.first_lo is not None:
        b.filters.extend(b.key_bound(v, cons.first_lo, True) for v in variables)
    if cons.first_hi is not None:
        b.filters.append(X.Or(tuple(b.key_bound(v, cons.first_hi, False) for v in variables)))
    if cons.last_lo is not None:
        b.filters.append(X.Or(tuple(b.key_bound(v, cons.last_lo, True) for v in variables)))
    if cons.last_hi is not None:
        b.filters.extend(b.key_bound(v, cons.last_hi, False) for v in variables)


def rewrite(query: XcepQuery, mode: str, resolver, cons: Constraints = Constraints(),
            now: Optional[int] = None) -> RewrittenQuery:
    """Translate ``query`` into path queries over the archive's triple view."""
    mode = strategy_name(mode)
    if mode == REPLAY:
        raise ArchiveError("REPLAY does not rewrite")
    cep = query.cep or CepSubquery()
    if mode == PLAIN:
        if query.is_aggregate:
            raise StrategyUnsupported("sliding aggregation windows are not rewritten into one path query")
        if any(s.connective == "OR" for s in query.semantic[1:]):
            raise StrategyUnsupported("OR between semantic subqueries has no single-pattern rewriting")
        b = _Builder(query, resolver)
        vs = query.variables
        for v in vs:
            b.time_var(v)
            b.stream_filter(v)
            b.within(v, now)
            b.semantic(v, query.subqueries_for(v), f"{v}s")
        for f in cep.filters:
            b.filter_clause(f)
        for j in cep.joins:
            b.join_clause(j.expr)
        if cep.seq:
            b.seq_clause(cep.seq)
        if cep.window is not None and cep.window.multi:
            b.window_clause(cep.window, cep.seq)
        for i, u in enumerate(vs):
            for w in vs[i + 1:]:
                b.filters.append(X.Compare("!=", X.Var(u), X.Var(w)))
        _constrain(b, cons, vs)
        pq = PathQuery(tuple(b.patterns), tuple(b.filters), tuple(vs))
        return RewrittenQuery(pq, "timestamp", None, PLAIN, (), tuple(range(len(cep.filters))))
    # HYBRID: per-variable prefilters; correlations stay in the kernel
    per_var = []
    pushed = []
    for v in query.variables:
        groups = []
        for g in _or_groups(query.subqueries_for(v)):
            b = _Builder(query, resolver)
            b.time_var(v)
            b.stream_filter(v)
            b.within(v, now)
            local = tuple(sub for sub in g if not event_local(sub, b.event_preds))
            b.semantic(v, [sub for sub in g if sub not in local], f"{v}s")
            for i, f in enumerate(cep.filters):
                if f.var != v:
                    continue
                try:
                    probe = _Builder(query, resolver)
                    probe.filter_clause(f)
                except StrategyUnsupported:
                    continue
                b.filter_clause(f)
                if i not in pushed:
                    pushed.append(i)
            for key, lower in ((cons.read_lo, True), (cons.read_hi, False)):
                if key is not None:
                    b.filters.append(b.key_bound(v, key, lower))
            groups.append((PathQuery(tuple(b.patterns), tuple(b.filters), (v,)), local))
        per_var.append((v, tuple(groups)))
    residual = CepSubquery((), cep.joins, cep.seq, cep.window)
    first = per_var[0][1][0][0] if per_var else PathQuery(())
    return RewrittenQuery(first, "timestamp", residual, HYBRID, tuple(per_var), tuple(sorted(pushed)))


# -- execution ----------------------------------------------------------------------

@dataclass
class ArchiveRun:
    matches: list
    events_read: int = 0
    events_to_kernel: int = 0
    path_queries: int = 0
    first_event_s: Optional[float] = None  # time until the first archived event was processed
    seconds: float = 0.0
    stats: dict = field(default_factory=dict)


def _match_filter(cons: Constraints) -> Optional[Callable]:
    if not cons.has_match_constraints:
        return None
    return lambda m, binding: cons.admits_match(m)


def execute_archive(query: XcepQuery, archive: ArchiveStore, kb: TripleStore, strategy: str,
                    cons: Constraints = Constraints(), *, now: Optional[int] = None,
                    config: Optional[PipelineConfig] = None, budget: Optional[int] = DEFAULT_JOIN_BUDGET,
                    clock: Callable = None) -> ArchiveRun:
    """Evaluate ``query`` over the archived events admitted by ``cons``."""
    import time
    clock = clock or time.perf_counter
    strategy = strategy_name(strategy)
    defs = archive.defs
    t0 = clock()
    if query.never:
        return ArchiveRun([], seconds=clock() - t0)
    archive.check_coverage(cons.read_lo)
    cq = compile_query(query, defs, kb, now=now, accept=(cons.read_lo, cons.read_hi),
                       emit_from=cons.emit_from, match_filter=_match_filter(cons))
    if strategy == REPLAY:
        events = archive.range_replay(cons.read_lo, cons.read_hi)
        run = ArchiveRun([], events_read=len(events), events_to_kernel=len(events))
        if events:
            eng = Engine(kb, defs, [cq], config or PipelineConfig(), clock)
            out = eng.push(events[0])
            run.first_event_s = clock() - t0
            for e in events[1:]:
                out.extend(eng.push(e))
            out.extend(eng.flush())
            run.matches = out
            run.stats = eng.metrics()
        run.seconds = clock() - t0
        return run
    rq = rewrite(query, strategy, cq.resolver, cons, now)
    if strategy == PLAIN:
        rows = evaluate_path_query(kb, rq.path_query, archive.triples, budget=budget, functions=EVENT_FUNCTIONS)
        run = ArchiveRun([], path_queries=1)
        cache: dict = {}

        def ev(iri):
            if iri not in cache:
                cache[iri] = archive.event(iri)
            return cache[iri]
        out = []
        for r in rows:
            binding = {v: ev(r[v]) for v in query.variables}
            out.append(_plain_match(cq, binding))
        out.sort(key=lambda m: m.sort_key)  # results leave in logical-timestamp order
        run.events_read = len(cache)
        run.first_event_s = clock() - t0 if out else None
        run.matches = out
        run.seconds = clock() - t0
        return run
    # HYBRID
    flags: dict = {}
    nq = 0
    for v, groups in rq.per_var:
        for pq, local in groups:
            nq += 1
            rows = evaluate_path_query(kb, pq, archive.triples, budget=budget, functions=EVENT_FUNCTIONS)
            for r in rows:
                iri = r[v]
                if local:
                    sem = annotate(archive.event(iri), defs[query.stream_of(v)])
                    if not all(evaluate_subquery(kb, sub, sem, EVENT_FUNCTIONS) for sub in local):
                        continue
                flags.setdefault(iri, set()).add(v)
    events = sorted((archive.event(iri) for iri in flags), key=lambda e: e.key)
    residual_filters = [f for i, f in enumerate((query.cep.filters if query.cep else ()))
                        if i not in rq.pushed_filters]
    kernel = CepKernel(cq)
    rows = []
    for e in events:
        vs = set(flags[event_iri(e.stream, e.timestamp, e.seqno)])
        for f in residual_filters:
            if f.var in vs and not _holds(cq, f, e):
                vs.discard(f.var)
        rows.append((e, frozenset(vs)))
    run = ArchiveRun([], events_read=len(events), events_to_kernel=len(rows), path_queries=nq)
    out = kernel.process(rows[:1])
    if rows:
        run.first_event_s = clock() - t0
    out.extend(kernel.process(rows[1:]))
    out.extend(kernel.finish())
    run.matches = out
    run.seconds = clock() - t0
    return run


def _holds(cq, f, e) -> bool:
    from .cep import compile_expr
    return compile_expr(f.as_expr(), cq.attr_name)({f.var: e})


def _plain_match(cq, binding: dict) -> MatchResult:
    from .cep import _outputs
    from .results import contributor
    cs = sorted((contributor(e) for e in binding.values()), key=lambda c: (c[1], c[2]))
    return MatchResult(cq.qid, _outputs(cq, binding), tuple(cs),
                       tuple((v, binding[v].seqno) for v in cq.query.variables))
