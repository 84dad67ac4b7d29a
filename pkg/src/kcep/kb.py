"""Embedded triple store, restricted inference and PATH query evaluation."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Iterable, Iterator, NamedTuple, Optional, Union

from . import expr as X
from .timeutil import format_instant, parse_instant
from .work import COUNTS, INDEXED, PATH_CALL, TRIPLE

RDF = "http://www.w3.org/1999/02/22-rdf-syntax-ns#"
RDFS = "http://www.w3.org/2000/01/rdf-schema#"
OWL = "http://www.w3.org/2002/07/owl#"

DEFAULT_PREFIXES = {"rdf": RDF, "rdfs": RDFS, "owl": OWL}


class KBError(Exception):
    pass


class OntologyParseError(KBError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UndeclaredPrefix(KBError):
    pass


class UnboundVariable(KBError):
    pass


class ComparisonError(KBError):
    """Raised for comparisons or arithmetic across incompatible term types."""


class JoinBudgetExceeded(KBError):
    def __init__(self, budget: int):
        super().__init__(f"join evaluation exceeded budget of {budget} candidate bindings")
        self.budget = budget


class Iri(str):
    __slots__ = ()

    def __repr__(self):
        return f"Iri({str.__repr__(self)})"


@dataclass(frozen=True, slots=True)
class Literal:
    value: Any
    kind: str  # "num" | "str" | "ts"

    def __repr__(self):
        return f"Literal({self.value!r}, {self.kind})"


@dataclass(frozen=True, slots=True)
class Variable:
    name: str


Term = Union[Iri, Literal, Variable]

RDF_TYPE = Iri(RDF + "type")
SUBCLASS_OF = Iri(RDFS + "subClassOf")
SAME_AS = Iri(OWL + "sameAs")


class Triple(NamedTuple):
    subject: Iri
    predicate: Iri
    object: Term


def num(v) -> Literal:
    return Literal(v, "num")


def string(v: str) -> Literal:
    return Literal(v, "str")


def instant(ms: int) -> Literal:
    return Literal(int(ms), "ts")


def term_key(t) -> tuple:
    """Total order over terms: IRIs, then numbers, strings, timestamps."""
    if isinstance(t, Iri):
        return (0, str(t))
    if isinstance(t, Literal):
        if t.kind == "num":
            return (1, float(t.value), "")
        if t.kind == "str":
            return (2, t.value)
        return (3, t.value)
    if isinstance(t, Variable):
        return (4, t.name)
    raise TypeError(f"not a term: {t!r}")


def term_str(t) -> str:
    """Canonical string form, stable across equal terms (500 == 500.0)."""
    if isinstance(t, Iri):
        return f"<{t}>"
    if t.kind == "num":
        return repr(float(t.value))
    if t.kind == "str":
        return '"' + t.value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return f'"{format_instant(t.value)}"^^ts'


class PrefixMap:
    """Prefix table; ``rdf``, ``rdfs`` and ``owl`` are always declared."""

    def __init__(self, mapping: Optional[dict] = None):
        self._ns = dict(DEFAULT_PREFIXES)
        for p, ns in (mapping or {}).items():
            self.declare(p, ns)

    def declare(self, prefix: str, namespace: str) -> None:
        old = self._ns.get(prefix)
        if old is not None and old != namespace and prefix not in DEFAULT_PREFIXES:
            raise KBError(f"prefix {prefix!r} redeclared with a different namespace")
        self._ns[prefix] = namespace

    def __contains__(self, prefix):
        return prefix in self._ns

    def namespace(self, prefix: str) -> str:
        try:
            return self._ns[prefix]
        except KeyError:
            raise UndeclaredPrefix(f"undeclared prefix: {prefix!r}") from None

    def expand(self, curie: str) -> Iri:
        prefix, sep, local = curie.partition(":")
        if not sep:
            raise KBError(f"not a CURIE: {curie!r}")
        return Iri(self.namespace(prefix) + local)

    def compact(self, iri: str) -> str:
        best = None
        for p, ns in self._ns.items():
            if iri.startswith(ns) and (best is None or len(ns) > len(self._ns[best])):
                best = p
        if best is None:
            return f"<{iri}>"
        return f"{best}:{iri[len(self._ns[best]):]}"

    def items(self):
        return self._ns.items()

    def as_dict(self) -> dict:
        return dict(self._ns)

    def copy(self) -> "PrefixMap":
        return PrefixMap(self._ns)


class TripleStore:
    """Set of ground triples with subject, predicate and (predicate, object) indexes."""

    def __init__(self, triples: Iterable[Triple] = (), prefixes: Optional[PrefixMap] = None):
        self.prefixes = prefixes or PrefixMap()
        self._all: set[Triple] = set()
        self._by_s: dict = {}
        self._by_p: dict = {}
        self._by_po: dict = {}
        self._frozen = False
        for t in triples:
            self.add(t)

    def add(self, t: Triple) -> bool:
        if self._frozen:
            raise KBError("store is immutable after load")
        if t in self._all:
            return False
        if not isinstance(t, Triple):
            t = Triple(*t)
        if isinstance(t.object, Variable) or not isinstance(t.subject, Iri) or not isinstance(t.predicate, Iri):
            raise KBError(f"triple is not ground: {t!r}")
        self._all.add(t)
        self._by_s.setdefault(t.subject, set()).add(t)
        self._by_p.setdefault(t.predicate, set()).add(t)
        self._by_po.setdefault((t.predicate, t.object), set()).add(t)
        return True

    def discard(self, t: Triple) -> None:
        if self._frozen:
            raise KBError("store is immutable after load")
        if t not in self._all:
            return
        self._all.discard(t)
        for index, key in ((self._by_s, t.subject), (self._by_p, t.predicate),
                           (self._by_po, (t.predicate, t.object))):
            bucket = index[key]
            bucket.discard(t)
            if not bucket:
                del index[key]

    def freeze(self) -> "TripleStore":
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def __contains__(self, t) -> bool:
        return t in self._all

    def __len__(self) -> int:
        return len(self._all)

    def __iter__(self) -> Iterator[Triple]:
        return iter(self._all)

    def by_subject(self, s) -> set:
        return self._by_s.get(s, _EMPTY)

    def by_predicate(self, p) -> set:
        return self._by_p.get(p, _EMPTY)

    def by_predicate_object(self, p, o) -> set:
        return self._by_po.get((p, o), _EMPTY)

    def match(self, s=None, p=None, o=None) -> Iterable[Triple]:
        if s is not None and p is not None and o is not None:
            t = Triple(s, p, o)
            return (t,) if t in self._all else ()
        if p is not None and o is not None:
            return self._by_po.get((p, o), _EMPTY)
        if s is not None:
            bucket = self._by_s.get(s, _EMPTY)
            if p is None and o is None:
                return bucket
            return [t for t in bucket if (p is None or t.predicate == p) and (o is None or t.object == o)]
        if p is not None:
            return self._by_p.get(p, _EMPTY)
        if o is not None:
            return [t for t in self._all if t.object == o]
        return self._all

    def count(self, s=None, p=None, o=None) -> int:
        if s is not None:
            return len(self._by_s.get(s, _EMPTY))
        if p is not None and o is not None:
            return len(self._by_po.get((p, o), _EMPTY))
        if p is not None:
            return len(self._by_p.get(p, _EMPTY))
        return len(self._all)

    def objects(self, s, p) -> list:
        return [t.object for t in self.match(s, p, None)]

    def subjects(self, p, o) -> list:
        return [t.subject for t in self.match(None, p, o)]

    def copy(self) -> "TripleStore":
        return TripleStore(self._all, self.prefixes.copy())


_EMPTY: frozenset = frozenset()


# -- ontology text format ---------------------------------------------------

_TOKEN_RE = re.compile(r'"(?:[^"\\]|\\.)*"(?:\^\^[A-Za-z_][\w-]*)?|<[^>\s]*>|\S+')
_NUMBER_RE = re.compile(r"^[-+]?\d+(\.\d+)?([eE][-+]?\d+)?$")
_PREFIX_RE = re.compile(r"^@prefix\s+([A-Za-z_][\w-]*)?:\s*<([^>]*)>\s*\.?\s*$")


def parse_term(token: str, prefixes: PrefixMap, line: int = 0) -> Term:
    if token.startswith('"'):
        body, _, dtype = token.rpartition('"')
        if dtype and not dtype.startswith("^^"):
            raise OntologyParseError(f"malformed literal {token!r}", line)
        text = bytes(body[1:], "utf-8").decode("unicode_escape") if "\\" in body else body[1:]
        if dtype == "^^ts":
            try:
                return instant(parse_instant(text))
            except ValueError as exc:
                raise OntologyParseError(str(exc), line) from None
        if dtype:
            raise OntologyParseError(f"unknown datatype {dtype[2:]!r}", line)
        return string(text)
    if token.startswith("<") and token.endswith(">"):
        return Iri(token[1:-1])
    if _NUMBER_RE.match(token):
        return num(int(token) if re.match(r"^[-+]?\d+$", token) else float(token))
    if ":" in token:
        try:
            return prefixes.expand(token)
        except UndeclaredPrefix as exc:
            raise OntologyParseError(str(exc), line) from None
    raise OntologyParseError(f"cannot parse term {token!r}", line)


def parse_ontology(text: str, prefixes: Optional[PrefixMap] = None) -> TripleStore:
    """Parse the line-oriented triple format without applying inference."""
    prefixes = prefixes or PrefixMap()
    store = TripleStore(prefixes=prefixes)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("@prefix"):
            m = _PREFIX_RE.match(line)
            if not m:
                raise OntologyParseError("malformed @prefix line", lineno)
            prefixes.declare(m.group(1) or "", m.group(2))
            continue
        tokens = _TOKEN_RE.findall(line)
        if tokens and tokens[-1] == ".":
            tokens.pop()
        elif tokens and tokens[-1].endswith(".") and not _NUMBER_RE.match(tokens[-1]) \
                and not tokens[-1].startswith('"'):
            tokens[-1] = tokens[-1][:-1]
        else:
            raise OntologyParseError("triple must end with '.'", lineno)
        if len(tokens) != 3:
            raise OntologyParseError(f"expected 3 terms, found {len(tokens)}", lineno)
        s, p, o = (parse_term(tok, prefixes, lineno) for tok in tokens)
        if not isinstance(s, Iri):
            raise OntologyParseError("subject must be an IRI", lineno)
        if not isinstance(p, Iri):
            raise OntologyParseError("predicate must be an IRI", lineno)
        store.add(Triple(s, p, o))
    return store


def load_ontology(source: str, prefixes: Optional[PrefixMap] = None) -> TripleStore:
    """Parse an ontology document and return its frozen inference closure."""
    return apply_inference(parse_ontology(source, prefixes))


def format_term(t: Term, prefixes: PrefixMap) -> str:
    if isinstance(t, Iri):
        return prefixes.compact(t)
    if isinstance(t, Literal) and t.kind == "num":
        return repr(t.value)
    return term_str(t)


def dump_ontology(store: TripleStore) -> str:
    lines = [f"@prefix {p}: <{ns}> ." for p, ns in store.prefixes.items()]
    body = sorted(store, key=lambda t: (str(t.subject), str(t.predicate), term_key(t.object)))
    lines += [" ".join(format_term(x, store.prefixes) for x in t) + " ." for t in body]
    return "\n".join(lines) + "\n"


# -- inference --------------------------------------------------------------

def _reach(edges: dict) -> dict:
    closure = {}
    for start in edges:
        seen = set()
        stack = list(edges[start])
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            stack.extend(edges.get(n, ()))
        closure[start] = seen
    return closure


def apply_inference(store: TripleStore) -> TripleStore:
    """Close ``store`` under sameAs symmetry/transitivity, subClassOf
    transitivity, and type lifting along subClassOf. Returns a new frozen store."""
    out = TripleStore(store, store.prefixes)

    same = {}
    for t in store.by_predicate(SAME_AS):
        if isinstance(t.object, Iri):
            same.setdefault(t.subject, set()).add(t.object)
            same.setdefault(t.object, set()).add(t.subject)
    for a, group in _reach(same).items():
        for b in group:
            out.add(Triple(a, SAME_AS, b))

    sub = {}
    for t in store.by_predicate(SUBCLASS_OF):
        if isinstance(t.object, Iri):
            sub.setdefault(t.subject, set()).add(t.object)
    supers = _reach(sub)
    for c, ds in supers.items():
        for d in ds:
            out.add(Triple(c, SUBCLASS_OF, d))
    for t in list(out.by_predicate(RDF_TYPE)):
        for d in supers.get(t.object, ()):
            out.add(Triple(t.subject, RDF_TYPE, d))
    return out.freeze()


def same_as_class(store: TripleStore, iri: Iri) -> set:
    return {iri} | {o for o in store.objects(iri, SAME_AS) if isinstance(o, Iri)}


# -- PATH queries -----------------------------------------------------------

@dataclass(frozen=True)
class PathQuery:
    patterns: tuple  # of (subject Term, predicate Iri, object Term)
    filters: tuple = ()  # of expr nodes over Var/Const
    projection: tuple = ()  # variable names; empty means all

    def variables(self) -> list[str]:
        seen: list[str] = []
        for pat in self.patterns:
            for t in pat:
                if isinstance(t, Variable) and t.name not in seen:
                    seen.append(t.name)
        return seen

    def validate(self) -> None:
        bound = set(self.variables())
        for pat in self.patterns:
            if not isinstance(pat[1], Iri):
                raise KBError(f"predicate must be an IRI: {pat[1]!r}")
        for f in self.filters:
            missing = X.variables(f) - bound
            if missing:
                raise UnboundVariable(f"filter references unbound variable(s): {sorted(missing)}")
        missing = set(self.projection) - bound
        if missing:
            raise UnboundVariable(f"projection references unbound variable(s): {sorted(missing)}")


def _num_value(t):
    return t.value


def arith(op: str, a, b):
    if not (isinstance(a, Literal) and isinstance(b, Literal)):
        raise ComparisonError(f"arithmetic on non-literals: {a!r} {op} {b!r}")
    if a.kind == "num" and b.kind == "num":
        x, y = a.value, b.value
        if op == "+":
            return num(x + y)
        if op == "-":
            return num(x - y)
        if op == "*":
            return num(x * y)
        if y == 0:
            raise ComparisonError("division by zero")
        return num(x / y)
    if a.kind == "ts" and b.kind == "ts" and op == "-":
        return num(a.value - b.value)
    if a.kind == "ts" and b.kind == "num" and op in "+-":
        return instant(a.value + b.value if op == "+" else a.value - b.value)
    raise ComparisonError(f"unsupported arithmetic: {a.kind} {op} {b.kind}")


def compare(op: str, a, b) -> bool:
    if isinstance(a, Iri) and isinstance(b, Iri):
        if op == "=":
            return a == b
        if op == "!=":
            return a != b
        raise ComparisonError(f"ordering comparison on IRIs: {op}")
    if isinstance(a, Literal) and isinstance(b, Literal) and a.kind == b.kind:
        x, y = a.value, b.value
    else:
        raise ComparisonError(f"mixed-type comparison: {a!r} {op} {b!r}")
    if op == "<":
        return x < y
    if op == "<=":
        return x <= y
    if op == ">":
        return x > y
    if op == ">=":
        return x >= y
    if op == "=":
        return x == y
    return x != y


def eval_filter(e, binding: dict, functions: Optional[dict] = None):
    if isinstance(e, X.Compare):
        return compare(e.op, eval_filter(e.left, binding, functions), eval_filter(e.right, binding, functions))
    if isinstance(e, X.Var):
        return binding[e.name]
    if isinstance(e, X.Const):
        return e.value
    if isinstance(e, X.And):
        return all(eval_filter(i, binding, functions) for i in e.items)
    if isinstance(e, X.Or):
        return any(eval_filter(i, binding, functions) for i in e.items)
    if isinstance(e, X.Arith):
        return arith(e.op, eval_filter(e.left, binding, functions), eval_filter(e.right, binding, functions))
    if isinstance(e, X.Call):
        fn = (functions or {}).get(e.fn)
        if fn is None:
            raise KBError(f"unknown function {e.fn!r}")
        return fn(*(eval_filter(a, binding, functions) for a in e.args))
    raise KBError(f"unsupported filter node {e!r}")


class _Overlay:
    """Minimal index over a small set of extra triples."""

    __slots__ = ("_all", "_by_s", "_by_p", "_by_po")

    def __init__(self, triples: Iterable[Triple]):
        self._all = set(triples)
        COUNTS[INDEXED] += len(self._all)
        self._by_s: dict = {}
        self._by_p: dict = {}
        self._by_po: dict = {}
        for t in self._all:
            self._by_s.setdefault(t[0], []).append(t)
            self._by_p.setdefault(t[1], []).append(t)
            self._by_po.setdefault((t[1], t[2]), []).append(t)

    def match(self, s=None, p=None, o=None):
        if s is not None:
            return [t for t in self._by_s.get(s, ()) if (p is None or t[1] == p) and (o is None or t[2] == o)]
        if p is not None and o is not None:
            return self._by_po.get((p, o), ())
        if p is not None:
            return self._by_p.get(p, ())
        return [t for t in self._all if o is None or t[2] == o]

    def count(self, s=None, p=None, o=None) -> int:
        if s is not None:
            return len(self._by_s.get(s, ()))
        if p is not None and o is not None:
            return len(self._by_po.get((p, o), ()))
        if p is not None:
            return len(self._by_p.get(p, ()))
        return len(self._all)


def _estimate(pat, bound: set, sources) -> float:
    s, p, o = pat
    s_const = not isinstance(s, Variable)
    o_const = not isinstance(o, Variable)
    s_bound = s_const or s.name in bound
    o_bound = o_const or o.name in bound
    if s_bound and o_bound:
        return 0.5
    base = sum(src.count(s if s_const else None, p, o if o_const else None) for src in sources)
    if s_bound:
        return min(base, 2.0)
    if o_bound:
        return min(base, 8.0)
    return float(base)


def _plan(patterns, sources, initially_bound=()) -> list:
    remaining = list(patterns)
    bound = set(initially_bound)
    order = []
    while remaining:
        def score(pat):
            connected = any(isinstance(t, Variable) and t.name in bound for t in (pat[0], pat[2]))
            constant = not any(isinstance(t, Variable) for t in (pat[0], pat[2]))
            penalty = 0 if (connected or constant or not bound) else 1
            return (penalty, _estimate(pat, bound, sources))
        best = min(remaining, key=score)
        remaining.remove(best)
        order.append(best)
        for t in (best[0], best[2]):
            if isinstance(t, Variable):
                bound.add(t.name)
    return order


def _solutions(sources, query: PathQuery, budget, functions) -> Iterator[dict]:
    order = _plan(query.patterns, sources)
    # attach each filter to the first step at which all its variables are bound
    staged: list[list] = [[] for _ in range(len(order) + 1)]
    bound: set = set()
    pending = list(query.filters)
    for step in range(len(order) + 1):
        still = []
        for f in pending:
            (staged[step] if X.variables(f) <= bound else still).append(f)
        pending = still
        if step < len(order):
            for t in (order[step][0], order[step][2]):
                if isinstance(t, Variable):
                    bound.add(t.name)
    if pending:
        raise UnboundVariable("filter references a variable absent from patterns")

    counter = [0]

    def extend(step: int, binding: dict):
        for f in staged[step]:
            if not eval_filter(f, binding, functions):
                return
        if step == len(order):
            yield binding
            return
        s, p, o = order[step]
        s_val = binding.get(s.name) if isinstance(s, Variable) else s
        o_val = binding.get(o.name) if isinstance(o, Variable) else o
        for src in sources:
            for t in src.match(s_val, p, o_val):
                counter[0] += 1
                if budget is not None and counter[0] > budget:
                    raise JoinBudgetExceeded(budget)
                nb = binding
                if s_val is None:
                    nb = dict(nb)
                    nb[s.name] = t[0]
                if o_val is None:
                    if isinstance(s, Variable) and s.name == o.name and nb[s.name] != t[2]:
                        continue
                    if nb is binding:
                        nb = dict(nb)
                    nb[o.name] = t[2]
                yield from extend(step + 1, nb)

    COUNTS[PATH_CALL] += 1
    try:
        yield from extend(0, {})
    finally:
        COUNTS[TRIPLE] += counter[0]


def _sources(store, extra):
    sources = [store] if store is not None else []
    if extra is None:
        return sources
    if isinstance(extra, (TripleStore, _Overlay)):
        sources.append(extra)
    else:
        extra = list(extra)
        if extra:
            sources.append(_Overlay(extra))
    return sources


def evaluate_path_query(store: TripleStore, query: PathQuery, extra=(), *,
                        budget: Optional[int] = None,
                        functions: Optional[dict] = None) -> list[dict]:
    """All distinct projected bindings over ``store`` plus ``extra`` triples,
    sorted lexicographically by the projected terms."""
    query.validate()
    proj = query.projection or tuple(query.variables())
    seen = set()
    out = []
    for b in _solutions(_sources(store, extra), query, budget, functions):
        row = tuple(b[v] for v in proj)
        if row not in seen:
            seen.add(row)
            out.append(row)
    out.sort(key=lambda row: tuple(term_key(t) for t in row))
    return [dict(zip(proj, row)) for row in out]


def ask_path_query(store: TripleStore, query: PathQuery, extra=(), *,
                   functions: Optional[dict] = None) -> bool:
    """True iff the query has at least one solution."""
    for _ in _solutions(_sources(store, extra), query, None, functions):
        return True
    return False


def overlay(triples: Iterable[Triple]) -> _Overlay:
    return _Overlay(triples)
