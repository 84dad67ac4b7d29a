"""Semantic filtering of annotated events with an LRU result cache."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

from . import expr as X
from .events import SemanticEvent, root_properties
from .kb import PathQuery, TripleStore, Variable, evaluate_path_query, term_key, term_str
from .query import SemanticSubquery, XcepQuery
from .work import COUNTS, PROBE, SEM_EVENT


class SemanticCache:
    """Fixed-capacity LRU map from cache key to a boolean subquery result."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.entries: OrderedDict = OrderedDict()
        self.hits = 0
        self.misses = 0

    def get(self, key: str) -> Optional[bool]:
        COUNTS[PROBE] += 1
        if self.capacity == 0:
            self.misses += 1
            return None
        v = self.entries.get(key)
        if v is None:
            self.misses += 1
            return None
        self.entries.move_to_end(key)
        self.hits += 1
        return v

    def put(self, key: str, value: bool) -> None:
        if self.capacity == 0:
            return
        self.entries[key] = value
        self.entries.move_to_end(key)
        if len(self.entries) > self.capacity:
            self.entries.popitem(last=False)

    def __contains__(self, key) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def hit_ratio(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


@dataclass(frozen=True)
class SubqueryPlan:
    sid: str
    sub: SemanticSubquery
    predicates: frozenset  # predicates whose root properties form the key
    needs_iri: bool  # result may depend on the event IRI itself
    batchable: bool


def plan_subquery(sid: str, sub: SemanticSubquery, event_predicates: frozenset) -> SubqueryPlan:
    body = sub.body
    var = sub.var
    preds = frozenset(p[1] for p in body.patterns)
    needs_iri = False
    batchable = True
    for s, p, o in body.patterns:
        if isinstance(o, Variable) and o.name == var:
            needs_iri = True
        if p in event_predicates and not (isinstance(s, Variable) and s.name == var):
            batchable = False
    for f in body.filters:
        if var in X.variables(f) or any(isinstance(n, X.Call) for n in X.walk(f)):
            needs_iri = True
    if needs_iri:
        batchable = False
    return SubqueryPlan(sid, sub, preds, needs_iri, batchable)


def query_root_properties(sem: SemanticEvent, plan: SubqueryPlan) -> list[tuple]:
    return [(p, o) for p, o in root_properties(sem) if p in plan.predicates]


def compute_query_root_properties(sem: SemanticEvent, plan: SubqueryPlan) -> str:
    """Cache key: subquery id plus the canonical root properties it evaluates."""
    parts = [plan.sid]
    if plan.needs_iri:
        parts.append(f"@{sem.iri}")
    preds = plan.predicates
    props = [(t.predicate, t.object) for t in sem.triples if t.predicate in preds]
    if len(props) > 1:
        props.sort(key=lambda po: (str(po[0]), term_key(po[1])))
    for p, o in props:
        parts.append(f"<{p}>={term_str(o)}")
    return "|".join(parts)


def evaluate_subquery(kb: TripleStore, sub: SemanticSubquery, sem: SemanticEvent,
                      functions: Optional[dict] = None) -> bool:
    body = sub.body
    if sub.var not in body.variables():
        return bool(evaluate_path_query(kb, body, sem.triples, functions=functions))
    rows = evaluate_path_query(kb, PathQuery(body.patterns, body.filters, (sub.var,)), sem.triples,
                               functions=functions)
    return any(r[sub.var] == sem.iri for r in rows)


def evaluate_subquery_batch(kb: TripleStore, sub: SemanticSubquery, sems: list,
                            functions: Optional[dict] = None) -> set:
    """IRIs of the events in ``sems`` that satisfy ``sub``, from one joint evaluation."""
    body = sub.body
    extra = [t for s in sems for t in s.triples]
    if sub.var not in body.variables():
        ok = bool(evaluate_path_query(kb, body, (), functions=functions))
        return {s.iri for s in sems} if ok else set()
    rows = evaluate_path_query(kb, PathQuery(body.patterns, body.filters, (sub.var,)), extra,
                               functions=functions)
    return {r[sub.var] for r in rows}


def combine(query: XcepQuery, var: str, results: dict) -> bool:
    """Combine subquery booleans for ``var``; AND binds tighter than OR."""
    subs = [(i, s) for i, s in enumerate(query.semantic) if s.var == var]
    if not subs:
        return True
    has_or = any(s.connective == "OR" for _, s in subs[1:])
    if not has_or:
        return all(results[i] for i, _ in subs)
    chains: list = []
    for k, (i, s) in enumerate(subs):
        if k == 0 or s.connective == "OR":
            chains.append([])
        chains[-1].append(results[i])
    return any(all(c) for c in chains)


def semantic_filter(batch: list, query: XcepQuery, kb: TripleStore, cache: SemanticCache,
                    event_predicates: frozenset = frozenset(), functions: Optional[dict] = None) -> list:
    """Events from ``batch`` (in order) that pass the semantic segment for some variable."""
    sf = SemanticFilter(kb, cache, event_predicates, functions)
    passes = sf.evaluate(batch, query)
    return [sem for sem, flags in zip(batch, passes) if any(flags.values())]


class SemanticFilter:
    """Evaluates semantic segments for batches of events; owns its cache."""

    def __init__(self, kb: TripleStore, cache: SemanticCache, event_predicates: frozenset = frozenset(),
                 functions: Optional[dict] = None, batch_eval: bool = True):
        self.kb = kb
        self.cache = cache
        self.event_predicates = event_predicates
        self.functions = functions
        self.batch_eval = batch_eval
        self._plans: dict = {}
        self.evaluations = 0  # path-query calls
        self.evaluated_events = 0  # events whose result was computed rather than recalled

    def plans(self, query: XcepQuery) -> list[SubqueryPlan]:
        key = id(query)
        hit = self._plans.get(key)
        if hit is None or hit[0] is not query:
            plans = [plan_subquery(query.subquery_id(i), s, self.event_predicates)
                     for i, s in enumerate(query.semantic)]
            hit = (query, plans)
            self._plans[key] = hit
        return hit[1]

    def evaluate(self, batch: list, query: XcepQuery) -> list[dict]:
        """Per event, a map var -> bool for the variables reading that event's stream."""
        streams = dict(query.sources)
        plans = self.plans(query)
        results = [dict() for _ in batch]
        for idx, plan in enumerate(plans):
            stream = streams[plan.sub.var]
            pending: dict = {}
            memo = self.cache.capacity > 0
            for k, sem in enumerate(batch):
                if sem.source.stream != stream:
                    continue
                if not memo:  # no memoization: every event is evaluated
                    pending[k] = [k]
                    continue
                key = compute_query_root_properties(sem, plan)
                v = self.cache.get(key)
                if v is None:
                    pending.setdefault(key, []).append(k)
                else:
                    results[k][idx] = v
            if not pending:
                continue
            self.evaluated_events += len(pending)
            COUNTS[SEM_EVENT] += len(pending)
            if self.batch_eval and plan.batchable and len(pending) > 1:
                reps = [batch[ks[0]] for ks in pending.values()]
                self.evaluations += 1
                ok = evaluate_subquery_batch(self.kb, plan.sub, reps, self.functions)
                for key, ks in pending.items():
                    v = batch[ks[0]].iri in ok
                    if memo:
                        self.cache.put(key, v)
                    for k in ks:
                        results[k][idx] = v
            else:
                for key, ks in pending.items():
                    self.evaluations += 1
                    v = evaluate_subquery(self.kb, plan.sub, batch[ks[0]], self.functions)
                    if memo:
                        self.cache.put(key, v)
                    for k in ks:
                        results[k][idx] = v
        out = []
        for k, sem in enumerate(batch):
            flags = {}
            for var, s in query.sources:
                if s == sem.source.stream:
                    flags[var] = combine(query, var, results[k])
            out.append(flags)
        return out
