"""CEP kernel: FILTER, JOIN, SEQ and WINDOW operators plus sliding aggregation.

Selection policy is emit-all, consume-none: every qualifying combination of
retained events is reported and no event is consumed by a match.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import expr as X
from . import kernels
from .events import AttributeResolver, RawEvent
from .query import BATCH, XcepQuery
from .results import MatchResult, contributor
from .work import CEP_ROW, COUNTS


class CepError(Exception):
    pass


class CepTypeError(CepError):
    pass


class AggregationOverflow(CepError):
    pass


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def cep_compare(op: str, a, b) -> bool:
    if not ((_is_num(a) and _is_num(b)) or (isinstance(a, str) and isinstance(b, str))):
        raise CepTypeError(f"cannot compare {a!r} {op} {b!r}")
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    if op == "=":
        return a == b
    return a != b


def cep_arith(op: str, a, b):
    if not (_is_num(a) and _is_num(b)):
        raise CepTypeError(f"arithmetic on non-numbers: {a!r} {op} {b!r}")
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if b == 0:
        raise CepError("division by zero")
    return a / b


def compile_expr(e, attr_name: Callable) -> Callable:
    """Compile a CEP expression into ``f(binding)`` where binding maps var -> RawEvent."""
    if isinstance(e, X.Attr):
        var, name = e.var, attr_name(e.var, e.name)
        return lambda b: b[var].get(name)
    if isinstance(e, X.Const):
        v = e.value
        return lambda b: v
    if isinstance(e, X.Arith):
        l, r, op = compile_expr(e.left, attr_name), compile_expr(e.right, attr_name), e.op
        return lambda b: cep_arith(op, l(b), r(b))
    if isinstance(e, X.Compare):
        l, r, op = compile_expr(e.left, attr_name), compile_expr(e.right, attr_name), e.op
        return lambda b: cep_compare(op, l(b), r(b))
    if isinstance(e, X.And):
        fs = [compile_expr(i, attr_name) for i in e.items]
        return lambda b: all(f(b) for f in fs)
    if isinstance(e, X.Or):
        fs = [compile_expr(i, attr_name) for i in e.items]
        return lambda b: any(f(b) for f in fs)
    raise CepError(f"unsupported CEP expression {e!r}")


def aggregate_value(func: str, total: float, count: int, lo: float, hi: float):
    if func == "COUNT":
        return count
    if func == "SUM":
        v = total
    elif func == "AVG":
        v = total / count
    elif func == "MIN":
        v = lo
    else:
        v = hi
    if math.isinf(v) or math.isnan(v):
        raise AggregationOverflow(f"{func} overflowed")
    return v


@dataclass
class CompiledQuery:
    """A query bound to stream definitions, ready for the kernel.

    ``accept`` restricts which events (by ``(timestamp, seqno)``) may contribute;
    ``emit_from`` suppresses aggregate triggers earlier than that timestamp;
    ``match_filter`` is an extra predicate on candidate matches.
    """

    query: XcepQuery
    defs: dict
    resolver: AttributeResolver
    now: Optional[int] = None
    accept: tuple = (None, None)
    emit_from: Optional[int] = None
    match_filter: Optional[Callable] = None
    var_filters: dict = field(default_factory=dict)
    joins: list = field(default_factory=list)
    projections: list = field(default_factory=list)

    @property
    def qid(self) -> str:
        return self.query.qid

    def attr_name(self, var: str, name) -> str:
        return self.resolver.resolve(self.query.stream_of(var), name)

    def admits(self, e: RawEvent) -> bool:
        lo, hi = self.accept
        k = (e.timestamp, e.seqno)
        if lo is not None and k < lo:
            return False
        if hi is not None and k >= hi:
            return False
        return self.query.within.contains(e.timestamp, self.now)


def compile_query(q: XcepQuery, defs: dict, kb=None, *, now: Optional[int] = None,
                  accept: tuple = (None, None), emit_from: Optional[int] = None,
                  match_filter: Optional[Callable] = None) -> CompiledQuery:
    for _, s in q.sources:
        if s not in defs:
            raise CepError(f"unknown stream {s!r}")
    if len(q.sources) > 1:
        w = q.window
        if w is None or not w.multi:
            raise CepError("queries over several event variables need a multi-variable WINDOW")
        if set(w.variables) != set(q.variables):
            raise CepError("the multi-variable WINDOW must cover every event variable")
    if q.within.start is None and now is None:
        raise CepError("WITHIN starts at now; a submission time is required")
    cq = CompiledQuery(q, defs, AttributeResolver(defs, kb), now, accept, emit_from, match_filter)
    filters: dict = {v: [] for v in q.variables}
    if q.cep:
        for f in q.cep.filters:
            filters[f.var].append(compile_expr(f.as_expr(), cq.attr_name))
        cq.joins = [(X.event_vars(j.expr), compile_expr(j.expr, cq.attr_name)) for j in q.cep.joins]
    cq.var_filters = filters
    cq.projections = [(p, cq.attr_name(p.ref.var, p.ref.name)) for p in q.select]
    return cq


def _outputs(cq: CompiledQuery, binding: dict, aggs: Optional[dict] = None) -> tuple:
    out = []
    for p, name in cq.projections:
        if p.kind == "agg":
            out.append((p.label, aggs[p.label]))
        else:
            out.append((p.label, binding[p.ref.var].get(name)))
    return tuple(out)


class CepKernel:
    """Per-query operator state. Feed events in ``(timestamp, seqno)`` order."""

    def __init__(self, cq: CompiledQuery, use_columnar: bool = True):
        self.cq = cq
        q = cq.query
        self.vars = q.variables
        self.window = q.window
        self.retained: list = []  # (event, frozenset of vars)
        self.use_columnar = use_columnar
        self.batch_bucket = None
        self.batch_events: list = []
        self._fast = None
        if self.window is not None and self.window.multi:
            self._fast = self._fast_path_plan() if use_columnar else None
        if q.is_aggregate:
            self._agg_name = cq.attr_name(q.aggregates[0].ref.var, q.aggregates[0].ref.name)
            names = {cq.attr_name(p.ref.var, p.ref.name) for p in q.aggregates}
            if len(names) != 1:
                self._agg_name = None  # several aggregated attributes: generic path

    # candidate flags -------------------------------------------------------
    def candidate_vars(self, e: RawEvent, semantic_pass: dict) -> frozenset:
        cq = self.cq
        if cq.query.never or not cq.admits(e):
            return frozenset()
        out = []
        for v, s in cq.query.sources:
            if s != e.stream or not semantic_pass.get(v, False):
                continue
            if all(f({v: e}) for f in cq.var_filters[v]):
                out.append(v)
        return frozenset(out)

    @property
    def oldest_retained(self) -> Optional[int]:
        return self.retained[0][0].timestamp if self.retained else None

    # processing --------------------------------------------------------------
    def process(self, batch: list) -> list[MatchResult]:
        """``batch`` holds ``(event, candidate vars)`` pairs in key order."""
        batch = [(e, vs) for e, vs in batch if vs]
        COUNTS[CEP_ROW] += len(batch)
        if not batch:
            return []
        q = self.cq.query
        if q.is_aggregate:
            if self.window.kind == BATCH:
                return self._batch_windows(batch)
            return self._sliding(batch)
        if len(self.vars) == 1:
            return self._singles(batch)
        if self._fast is not None:
            return self._pairs_columnar(batch)
        out = []
        for e, vs in batch:
            out.extend(self._multi_one(e, vs))
        return out

    def finish(self) -> list[MatchResult]:
        """Close a pending BATCH window at end of input."""
        if self.window is not None and self.window.kind == BATCH and self.batch_events:
            res = self._close_bucket()
            return [res] if res else []
        return []

    def _accept_match(self, m: MatchResult, binding: dict) -> bool:
        f = self.cq.match_filter
        return f is None or f(m, binding)

    def _singles(self, batch) -> list[MatchResult]:
        out = []
        v = self.vars[0]
        for e, _ in batch:
            binding = {v: e}
            m = MatchResult(self.cq.qid, _outputs(self.cq, binding), (contributor(e),), ((v, e.seqno),))
            if self._accept_match(m, binding):
                out.append(m)
        return out

    # aggregation -------------------------------------------------------------
    def _values(self, events, name):
        vals = []
        for e in events:
            v = e.get(name)
            if not _is_num(v):
                raise CepTypeError(f"cannot aggregate non-numeric value {v!r}")
            vals.append(float(v))
        return vals

    def _agg_result(self, window_events: list, trigger: RawEvent, sums: dict) -> Optional[MatchResult]:
        q = self.cq.query
        aggs = {}
        for p in q.aggregates:
            total, count, lo, hi = sums[p.label]
            val = aggregate_value(p.func, total, count, lo, hi)
            if p.guard is not None and not cep_compare(p.guard[0], val, p.guard[1]):
                return None
            aggs[p.label] = val
        v = self.vars[0]
        binding = {v: trigger}
        m = MatchResult(self.cq.qid, _outputs(self.cq, binding, aggs),
                        tuple(contributor(e) for e in window_events))
        return m if self._accept_match(m, binding) else None

    def _window_sums(self, events) -> dict:
        sums = {}
        for p in self.cq.query.aggregates:
            name = self.cq.attr_name(p.ref.var, p.ref.name)
            vals = self._values(events, name)
            total = 0.0
            for x in vals:
                total += x
            sums[p.label] = (total, len(vals), min(vals), max(vals))
        return sums

    def _sliding(self, batch) -> list[MatchResult]:
        w = self.window.width
        events = [e for e, _ in self.retained] + [e for e, _ in batch]
        start = len(self.retained)
        out = []
        emit_from = self.cq.emit_from
        if self.use_columnar and self._agg_name is not None:
            ts = np.fromiter((e.timestamp for e in events), np.int64, len(events))
            vals = np.array(self._values(events, self._agg_name), dtype=np.float64)
            lo, sums, mins, maxs = kernels.sliding_aggregates(ts, vals, start, w)
            for k in range(len(batch)):
                j = start + k
                trigger = events[j]
                if emit_from is not None and trigger.timestamp < emit_from:
                    continue
                a = int(lo[k])
                stats = (float(sums[k]), j - a + 1, float(mins[k]), float(maxs[k]))
                m = self._agg_result(events[a:j + 1], trigger, {p.label: stats for p in self.cq.query.aggregates})
                if m is not None:
                    out.append(m)
        else:
            ts_list = [e.timestamp for e in events]
            for j in range(start, len(events)):
                trigger = events[j]
                if emit_from is not None and trigger.timestamp < emit_from:
                    continue
                a = bisect.bisect_right(ts_list, trigger.timestamp - w, 0, j + 1)
                window_events = events[a:j + 1]
                m = self._agg_result(window_events, trigger, self._window_sums(window_events))
                if m is not None:
                    out.append(m)
        last = events[-1].timestamp
        keep = [(e, vs) for e, vs in self.retained + batch if e.timestamp > last - w]
        self.retained = keep
        return out

    def _close_bucket(self) -> Optional[MatchResult]:
        events = self.batch_events
        self.batch_events = []
        if self.cq.emit_from is not None and events[-1].timestamp < self.cq.emit_from:
            return None
        return self._agg_result(events, events[-1], self._window_sums(events))

    def _batch_windows(self, batch) -> list[MatchResult]:
        out = []
        w = self.window.width
        for e, _ in batch:
            b = e.timestamp // w
            if self.batch_bucket is not None and b != self.batch_bucket and self.batch_events:
                res = self._close_bucket()
                if res:
                    out.append(res)
            self.batch_bucket = b
            self.batch_events.append(e)
        return out

    # multi-variable ------------------------------------------------------------
    def _prune(self, now_ts: int):
        w = self.window.width
        cut = 0
        while cut < len(self.retained) and self.retained[cut][0].timestamp < now_ts - w:
            cut += 1
        if cut:
            del self.retained[:cut]

    def _binding_ok(self, binding: dict) -> bool:
        q = self.cq.query
        if q.cep and q.cep.seq:
            keys = [(binding[v].timestamp, binding[v].seqno) for v in q.cep.seq]
            if any(keys[i] >= keys[i + 1] for i in range(len(keys) - 1)):
                return False
        ts = [binding[v].timestamp for v in self.window.variables]
        if max(ts) - min(ts) > self.window.width:
            return False
        for vars_, f in self.cq.joins:
            if not f(binding):
                return False
        return True

    def _make_multi(self, binding: dict) -> MatchResult:
        cs = sorted((contributor(e) for e in binding.values()), key=lambda c: (c[1], c[2]))
        return MatchResult(self.cq.qid, _outputs(self.cq, binding), tuple(cs),
                           tuple((v, binding[v].seqno) for v in self.vars))

    def _multi_one(self, x: RawEvent, xvars: frozenset) -> list[MatchResult]:
        self._prune(x.timestamp)
        found = []
        pool = self.retained
        for v in self.vars:
            if v not in xvars:
                continue
            others = [u for u in self.vars if u != v]

            def extend(k: int, binding: dict, used: set):
                if k == len(others):
                    if self._binding_ok(binding):
                        m = self._make_multi(binding)
                        if self._accept_match(m, binding):
                            found.append(m)
                    return
                u = others[k]
                for e, evs in pool:
                    if u in evs and e.seqno not in used:
                        binding[u] = e
                        used.add(e.seqno)
                        extend(k + 1, binding, used)
                        used.discard(e.seqno)
                        del binding[u]

            extend(0, {v: x}, {x.seqno})
        self.retained.append((x, xvars))
        found.sort(key=lambda m: m.sort_key)
        return found

    def _fast_path_plan(self):
        """Plan for two variables under SEQ: equality joins become integer key codes."""
        q = self.cq.query
        if len(self.vars) != 2 or not (q.cep and q.cep.seq and len(q.cep.seq) == 2):
            return None
        a, b = q.cep.seq
        eq = None
        rest = []
        for vars_, f in self.cq.joins:
            rest.append(f)
        for j in q.cep.joins:
            e = j.expr
            if eq is None and isinstance(e, X.Compare) and e.op == "=" \
                    and isinstance(e.left, X.Attr) and isinstance(e.right, X.Attr) \
                    and {e.left.var, e.right.var} == {a, b}:
                la = e.left if e.left.var == a else e.right
                lb = e.right if la is e.left else e.left
                na, nb = self.cq.attr_name(a, la.name), self.cq.attr_name(b, lb.name)
                sa = self.cq.defs[q.stream_of(a)].schema.type_of(na)
                sb = self.cq.defs[q.stream_of(b)].schema.type_of(nb)
                if sa == sb:
                    eq = (na, nb)
        return (a, b, eq)

    def _pairs_columnar(self, batch) -> list[MatchResult]:
        a, b, eq = self._fast
        self._prune(batch[0][0].timestamp)
        rows = self.retained + batch
        start = len(self.retained)
        n = len(rows)
        ts = np.fromiter((e.timestamp for e, _ in rows), np.int64, n)
        fa = np.fromiter((a in vs for _, vs in rows), np.bool_, n)
        fb = np.fromiter((b in vs for _, vs in rows), np.bool_, n)
        codes = np.zeros(n, np.int64)
        if eq is not None:
            table: dict = {}
            na, nb = eq
            for i, (e, vs) in enumerate(rows):
                # an event may serve as either side; encode with the side it can take
                key_a = e.get(na) if a in vs else None
                key_b = e.get(nb) if b in vs else None
                if a in vs and b in vs and key_a != key_b:
                    codes = None
                    break
                key = key_a if a in vs else key_b
                codes[i] = table.setdefault((type(key).__name__ if not _is_num(key) else "n", key), len(table))
        if codes is None:
            out = []
            for e, vs in batch:
                out.extend(self._multi_one(e, vs))
            return out
        I, J = kernels.seq_pairs(ts, codes, fa, fb, start, self.window.width)
        out = []
        for i, j in zip(I.tolist(), J.tolist()):
            binding = {a: rows[i][0], b: rows[j][0]}
            if all(f(binding) for _, f in self.cq.joins):
                m = self._make_multi(binding)
                if self._accept_match(m, binding):
                    out.append(m)
        last = rows[-1][0].timestamp
        self.retained = [r for r in rows if r[0].timestamp >= last - self.window.width]
        return out
