"""Brute-force reference matcher over a complete, sorted event list.

Only the parser, the annotator and the triple store are shared with the
engine; expression evaluation, semantic checks and match enumeration are
written out independently and as directly as possible.
"""
from __future__ import annotations

import bisect
import math
from typing import Optional

from . import expr as X
from .events import EVENT_FUNCTIONS, AttributeResolver, RawEvent, annotate, event_iri
from .kb import PathQuery, TripleStore, evaluate_path_query
from .query import BATCH, XcepQuery
from .results import MatchResult

DEFAULT_BUDGET = 10 ** 8


class OracleError(Exception):
    pass


class CombinationBudgetExceeded(OracleError):
    pass


def _number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _value(e, binding: dict, resolve):
    if isinstance(e, X.Const):
        return e.value
    if isinstance(e, X.Attr):
        return binding[e.var].get(resolve(e.var, e.name))
    if isinstance(e, X.Arith):
        a, b = _value(e.left, binding, resolve), _value(e.right, binding, resolve)
        if not (_number(a) and _number(b)):
            raise OracleError(f"arithmetic on {a!r} and {b!r}")
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if b == 0:
            raise OracleError("division by zero")
        return a / b
    if isinstance(e, X.Compare):
        a, b = _value(e.left, binding, resolve), _value(e.right, binding, resolve)
        if not ((_number(a) and _number(b)) or (isinstance(a, str) and isinstance(b, str))):
            raise OracleError(f"cannot compare {a!r} and {b!r}")
        return {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b, "=": a == b, "!=": a != b}[e.op]
    if isinstance(e, X.And):
        return all(_value(i, binding, resolve) for i in e.items)
    if isinstance(e, X.Or):
        return any(_value(i, binding, resolve) for i in e.items)
    raise OracleError(f"unsupported expression {e!r}")


def _semantic_ok(query: XcepQuery, var: str, sem, kb: TripleStore) -> bool:
    """Direct evaluation of every subquery on ``var``; AND binds tighter than OR."""
    groups: list = []
    for i, sub in enumerate(query.semantic):
        if sub.var != var:
            continue
        if not groups or sub.connective == "OR":
            groups.append([])
        body = sub.body
        if var in body.variables():
            rows = evaluate_path_query(kb, PathQuery(body.patterns, body.filters, (var,)), sem.triples,
                                       functions=EVENT_FUNCTIONS)
            ok = any(r[var] == sem.iri for r in rows)
        else:
            ok = bool(evaluate_path_query(kb, body, sem.triples, functions=EVENT_FUNCTIONS))
        groups[-1].append(ok)
    if not groups:
        return True
    return any(all(g) for g in groups)


def _contrib(e: RawEvent) -> tuple:
    return (event_iri(e.stream, e.timestamp, e.seqno), e.timestamp, e.seqno)


def _aggregate(func: str, values: list):
    if func == "COUNT":
        return len(values)
    if func == "SUM" or func == "AVG":
        acc = 0.0
        for v in values:
            acc += float(v)
        out = acc if func == "SUM" else acc / len(values)
    elif func == "MIN":
        out = min(float(v) for v in values)
    else:
        out = max(float(v) for v in values)
    if math.isinf(out) or math.isnan(out):
        raise OracleError(f"{func} overflowed")
    return out


def oracle_match(query: XcepQuery, events: list, kb: TripleStore, defs: dict,
                 now: Optional[int] = None, budget: int = DEFAULT_BUDGET) -> list[MatchResult]:
    """Every match of ``query`` over the full event list, ordered by result time."""
    for i in range(1, len(events)):
        if events[i].key <= events[i - 1].key:
            raise OracleError("events must be strictly ordered by (timestamp, seqno)")
    if query.never:
        return []
    resolver = AttributeResolver(defs, kb)

    def resolve(var, name):
        return resolver.resolve(query.stream_of(var), name)

    filters = {v: [] for v in query.variables}
    if query.cep:
        for f in query.cep.filters:
            filters[f.var].append(f.as_expr())
    candidates = {v: [] for v in query.variables}
    for e in events:
        if e.stream not in defs or not query.within.contains(e.timestamp, now):
            continue
        sem = None
        for v, s in query.sources:
            if s != e.stream:
                continue
            if sem is None:
                sem = annotate(e, defs[e.stream])
            if _semantic_ok(query, v, sem, kb) and all(_value(f, {v: e}, resolve) for f in filters[v]):
                candidates[v].append(e)

    if query.is_aggregate:
        out = _aggregates(query, candidates[query.variables[0]], resolve)
    elif len(query.variables) == 1:
        v = query.variables[0]
        out = [MatchResult(query.qid, _outputs(query, {v: e}, resolve), (_contrib(e),), ((v, e.seqno),))
               for e in candidates[v]]
    else:
        out = _combinations(query, candidates, resolve, budget)
    out.sort(key=lambda m: m.sort_key)
    return out


def _outputs(query: XcepQuery, binding: dict, resolve, aggs: Optional[dict] = None) -> tuple:
    vals = []
    for p in query.select:
        if p.kind == "agg":
            vals.append((p.label, aggs[p.label]))
        else:
            vals.append((p.label, binding[p.ref.var].get(resolve(p.ref.var, p.ref.name))))
    return tuple(vals)


def _aggregate_match(query: XcepQuery, window: list, trigger: RawEvent, resolve) -> Optional[MatchResult]:
    aggs = {}
    for p in query.aggregates:
        name = resolve(p.ref.var, p.ref.name)
        values = [e.get(name) for e in window]
        if not all(_number(x) for x in values):
            raise OracleError("aggregate over non-numeric values")
        val = _aggregate(p.func, values)
        if p.guard is not None:
            op, c = p.guard
            if not _value(X.Compare(op, X.Const(val), X.Const(c)), {}, resolve):
                return None
        aggs[p.label] = val
    var = query.variables[0]
    return MatchResult(query.qid, _outputs(query, {var: trigger}, resolve, aggs),
                       tuple(_contrib(e) for e in window))


def _aggregates(query: XcepQuery, cands: list, resolve) -> list[MatchResult]:
    w = query.window.width
    out = []
    if query.window.kind == BATCH:
        buckets: dict = {}
        for e in cands:
            buckets.setdefault(e.timestamp // w, []).append(e)
        for b in sorted(buckets):
            m = _aggregate_match(query, buckets[b], buckets[b][-1], resolve)
            if m is not None:
                out.append(m)
        return out
    times = [e.timestamp for e in cands]
    for j, trigger in enumerate(cands):
        window = cands[bisect.bisect_right(times, trigger.timestamp - w, 0, j + 1):j + 1]
        m = _aggregate_match(query, window, trigger, resolve)
        if m is not None:
            out.append(m)
    return out


def _combinations(query: XcepQuery, candidates: dict, resolve, budget: int) -> list[MatchResult]:
    vars_ = query.variables
    cep = query.cep
    window = query.window
    width = window.width if window is not None else None
    if window is not None and set(window.variables) != set(vars_):
        width = None  # the window does not bound every variable; no pruning
    times = {v: [e.timestamp for e in candidates[v]] for v in vars_}
    out = []
    tried = [0]

    def pool(v: str, anchor: Optional[RawEvent]) -> list:
        evs = candidates[v]
        if anchor is None or width is None:
            return evs
        lo = bisect.bisect_left(times[v], anchor.timestamp - width)
        hi = bisect.bisect_right(times[v], anchor.timestamp + width)
        return evs[lo:hi]

    def check(binding: dict) -> bool:
        if cep is not None and cep.seq:
            keys = [binding[v].key for v in cep.seq]
            for a, b in zip(keys, keys[1:]):
                if not a < b:
                    return False
        if window is not None:
            ts = [binding[v].timestamp for v in window.variables]
            if max(ts) - min(ts) > window.width:
                return False
        if cep is not None:
            for j in cep.joins:
                if not _value(j.expr, binding, resolve):
                    return False
        return True

    def loop(k: int, binding: dict):
        if k == len(vars_):
            tried[0] += 1
            if tried[0] > budget:
                raise CombinationBudgetExceeded(f"more than {budget} combinations")
            if check(binding):
                cs = sorted((_contrib(e) for e in binding.values()), key=lambda c: (c[1], c[2]))
                out.append(MatchResult(query.qid, _outputs(query, binding, resolve), tuple(cs),
                                       tuple((v, binding[v].seqno) for v in vars_)))
            return
        v = vars_[k]
        anchor = binding[vars_[0]] if k else None
        used = {e.seqno for e in binding.values()}
        for e in pool(v, anchor):
            if e.seqno in used:
                continue
            binding[v] = e
            loop(k + 1, binding)
            del binding[v]

    loop(0, {})
    return out
