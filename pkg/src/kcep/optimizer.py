"""Compile-time rewrites: constant-path pruning, one-hop transformation and
attribute normalization."""
from __future__ import annotations

import warnings
from dataclasses import replace
from typing import Optional

from . import expr as X
from .events import AmbiguousMapping, AttributeResolver, InstanceRef
from .kb import Iri, Literal, PathQuery, TripleStore, Variable, evaluate_path_query
from .query import CepSubquery, FilterConstraint, JoinConstraint, XcepQuery


class NeverMatches(UserWarning):
    """A constant path has no solution in the knowledge base."""


def _components(patterns) -> list[list]:
    parent: dict = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, p in enumerate(patterns):
        find(("p", i))
        for t in (p[0], p[2]):
            if isinstance(t, Variable):
                parent[find(("p", i))] = find(("v", t.name))
    groups: dict = {}
    for i, p in enumerate(patterns):
        groups.setdefault(find(("p", i)), []).append(p)
    return list(groups.values())


def _pattern_vars(patterns) -> set:
    return {t.name for p in patterns for t in (p[0], p[2]) if isinstance(t, Variable)}


def _or_chains(semantic) -> list[list[int]]:
    chains: list[list[int]] = []
    for i, s in enumerate(semantic):
        if i == 0 or s.connective == "OR":
            chains.append([i])
        else:
            chains[-1].append(i)
    return chains


def prune_and_migrate(q: XcepQuery, kb: TripleStore,
                      event_predicates: frozenset = frozenset()) -> XcepQuery:
    """Evaluate constant-rooted PATH components once and substitute their values."""
    if q.never or not q.semantic:
        return q
    status = []  # per subquery: SemanticSubquery, True (always) or False (never)
    changed = False
    for s in q.semantic:
        pats = list(s.body.patterns)
        filters = list(s.body.filters)
        result = s
        for comp in _components(pats):
            cvars = _pattern_vars(comp)
            if s.var in cvars or any(p[1] in event_predicates for p in comp):
                continue
            # the event IRI never occurs in the knowledge base, so a component
            # without the event variable evaluates the same for every event
            local = [f for f in filters if X.variables(f) <= cvars]
            shared = sorted(v for v in cvars if any(v in X.variables(f) for f in filters if f not in local))
            rows = evaluate_path_query(kb, PathQuery(tuple(comp), tuple(local), tuple(shared)))
            changed = True
            pats = [p for p in pats if p not in comp]
            filters = [f for f in filters if f not in local]
            if not rows:
                result = False
                break
            if shared:
                new_filters = []
                for f in filters:
                    if not (X.variables(f) & set(shared)):
                        new_filters.append(f)
                        continue
                    alts = []
                    for row in rows:
                        g = X.substitute(f, row)
                        if g not in alts:
                            alts.append(g)
                    new_filters.append(alts[0] if len(alts) == 1 else X.Or(tuple(alts)))
                filters = new_filters
        if result is False:
            status.append(False)
        elif not pats:
            status.append(True if not filters else _const_truth(filters))
        else:
            status.append(replace(s, body=PathQuery(tuple(pats), tuple(filters), s.body.projection)))
    if not changed:
        return q
    return _rebuild(q, status)


def _const_truth(filters) -> bool:
    from .kb import eval_filter
    return all(eval_filter(f, {}) for f in filters)


def _rebuild(q: XcepQuery, status: list) -> XcepQuery:
    """Reassemble the semantic segment after subqueries became constant."""
    chains = _or_chains(q.semantic)
    kept_chains = []
    for chain in chains:
        items = [status[i] for i in chain]
        if any(it is False for it in items):
            continue
        rest = [it for it in items if it is not True]
        if not rest:
            kept_chains = None  # one disjunct is always true
            break
        kept_chains.append(rest)
    if kept_chains is None:
        return replace(q, semantic=())
    if not kept_chains:
        warnings.warn(f"query {q.qid} can never match: a constant path has no solution", NeverMatches,
                      stacklevel=3)
        return replace(q, semantic=(), never=True)
    out = []
    for chain in kept_chains:
        for k, s in enumerate(chain):
            conn = "OR" if (k == 0 and out) else "AND"
            out.append(replace(s, connective=conn))
    return replace(q, semantic=tuple(out))


def _flatten(filters) -> list:
    out = []
    for f in filters:
        if isinstance(f, X.And):
            out.extend(_flatten(f.items))
        else:
            out.append(f)
    return out


def _simple_const_filter(f, var: str):
    """``(op, value)`` if ``f`` compares ``?var`` with a plain literal, else None."""
    if not isinstance(f, X.Compare):
        return None
    l, r, op = f.left, f.right, f.op
    if isinstance(r, X.Var) and isinstance(l, X.Const):
        l, r, op = r, l, X.FLIPPED[op]
    if isinstance(l, X.Var) and l.name == var and isinstance(r, X.Const) \
            and isinstance(r.value, Literal) and r.value.kind in ("num", "str"):
        return op, r.value
    return None


def transform_to_cep(q: XcepQuery, defs: dict) -> XcepQuery:
    """Move one-hop ``?e P ?x`` patterns filtered only against constants into CEP filters."""
    if q.never or not q.semantic:
        return q
    if any(s.connective == "OR" for s in q.semantic[1:]):
        return q
    usage: dict = {}
    for s in q.semantic:
        for p in s.body.patterns:
            for t in (p[0], p[2]):
                if isinstance(t, Variable):
                    usage[t.name] = usage.get(t.name, 0) + 1
    new_filters = list(q.cep.filters) if q.cep else []
    out = []
    changed = False
    for s in q.semantic:
        defn = defs.get(q.stream_of(s.var))
        pats = list(s.body.patterns)
        filters = _flatten(s.body.filters)
        for p in list(pats):
            subj, pred, obj = p
            if not (isinstance(subj, Variable) and subj.name == s.var and isinstance(obj, Variable)):
                continue
            x = obj.name
            if x == s.var or usage.get(x) != 1 or defn is None:
                continue
            attr = _literal_attr_for(defn, pred)
            if attr is None:
                continue
            mine = [f for f in filters if x in X.variables(f)]
            simple = [_simple_const_filter(f, x) for f in mine]
            if not mine or any(c is None for c in simple):
                continue
            tag = defn.schema.type_of(attr)
            if any(c[1].kind != tag for c in simple):
                continue
            pats.remove(p)
            filters = [f for f in filters if f not in mine]
            new_filters.extend(FilterConstraint(s.var, pred, op, lit.value) for op, lit in simple)
            changed = True
        if pats:
            out.append(replace(s, body=PathQuery(tuple(pats), tuple(filters), s.body.projection)))
        elif filters:
            raise AssertionError("filters left without patterns")
    if not changed:
        return q
    out = [replace(s, connective="AND") for s in out]
    cep = q.cep or CepSubquery()
    return replace(q, semantic=tuple(out), cep=replace(cep, filters=tuple(new_filters)))


def _literal_attr_for(defn, pred: Iri) -> Optional[str]:
    hits = []
    for name, tag in defn.schema.attributes:
        try:
            if defn.predicate(name) != pred:
                continue
        except Exception:
            continue
        if isinstance(defn.mapping.value_rules.get(name), InstanceRef) or tag not in ("num", "str"):
            return None
        hits.append(name)
    return hits[0] if len(hits) == 1 else None


def normalize_attributes(q: XcepQuery, defs: dict, kb: Optional[TripleStore]) -> XcepQuery:
    """Rewrite attribute references in SELECT and CEP clauses to canonical concepts."""
    resolver = AttributeResolver(defs, kb)

    def canon(a: X.Attr) -> X.Attr:
        stream = q.stream_of(a.var)
        name = resolver.resolve(stream, a.name)
        concept = resolver.concept_of(stream, name)
        if resolver.resolve(stream, concept) != name:
            raise AmbiguousMapping(f"?{a.var}.{a.name} normalizes to {concept}, which is ambiguous in {stream!r}")
        return X.Attr(a.var, concept)

    select = tuple(replace(p, ref=canon(p.ref)) for p in q.select)
    cep = q.cep
    if cep is not None:
        filters = tuple(replace(f, attr=canon(X.Attr(f.var, f.attr)).name) for f in cep.filters)
        joins = tuple(JoinConstraint(X.map_attrs(j.expr, canon)) for j in cep.joins)
        cep = replace(cep, filters=filters, joins=joins)
    return replace(q, select=select, cep=cep)


def event_predicates(defs: dict) -> frozenset:
    preds = set()
    for d in defs.values():
        for name in d.schema.names:
            try:
                preds.add(d.predicate(name))
            except Exception:
                pass
    return frozenset(preds)


def optimize(q: XcepQuery, kb: TripleStore, defs: dict) -> XcepQuery:
    """prune, then transform, then normalize."""
    q = prune_and_migrate(q, kb, event_predicates(defs))
    q = transform_to_cep(q, defs)
    return normalize_attributes(q, defs, kb)
