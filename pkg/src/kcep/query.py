"""Two-segment continuous query language: AST, parser, printer and validation.

Grammar (keywords are case-insensitive, ``#`` starts a comment)::

    query      := prefix* SELECT proj ("," proj)* [FROM src ("," src)*]
                  [WITHIN range] [WHERE] clause*
    prefix     := PREFIX PNAME IRIREF
    proj       := AGG "(" ATTR ")" [cmpop const] [AS NAME] | ATTR [AS NAME]
    src        := "(" VAR "," NAME ")"
    range      := ("[" | "(") (NOW | DATETIME | <empty>) "," [DATETIME] ("]" | ")")
    clause     := [AND | OR] PATH "{" pattern* "}"
                | FILTER "(" expr ")" | JOIN "(" expr ")"
                | SEQ "(" VAR ("," VAR)+ ")"
                | WINDOW "(" VAR "," (SLIDING | BATCH) "," DURATION ")"
                | WINDOW "(" VAR ("," VAR)+ ["," SLIDING] "," DURATION ")"
    pattern    := term PNAME|IRIREF term ["."] | FILTER "(" expr ")" ["."]

``[`` and ``]`` mark an inclusive bound, ``(`` and ``)`` an exclusive one.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Optional

from . import expr as X
from .kb import (Iri, Literal, PathQuery, PrefixMap, TripleStore, UndeclaredPrefix, Variable,
                 instant, num, string, format_term)
from .timeutil import format_duration, format_instant, parse_duration, parse_instant

AGGREGATES = ("AVG", "SUM", "COUNT", "MIN", "MAX")
SLIDING = "SLIDING"
BATCH = "BATCH"


class QueryError(Exception):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        where = f"{line}:{column}: " if line else ""
        super().__init__(where + message)
        self.message = message
        self.line = line
        self.column = column


class QuerySyntaxError(QueryError):
    pass


class UnknownPrefix(QueryError):
    pass


class UndeclaredVariable(QueryError):
    pass


class MultipleCepSubqueries(QueryError):
    pass


class SpansEventVariables(QueryError):
    pass


# -- AST ----------------------------------------------------------------------

@dataclass(frozen=True)
class TimeRange:
    start: Optional[int] = None  # None means NOW
    end: Optional[int] = None  # None means unbounded
    start_inclusive: bool = True
    end_inclusive: bool = False

    def resolve(self, now: int) -> "TimeRange":
        return replace(self, start=now) if self.start is None else self

    def contains(self, t: int, now: Optional[int] = None) -> bool:
        start = self.start if self.start is not None else now
        if start is not None:
            if t < start or (t == start and not self.start_inclusive):
                return False
        if self.end is not None:
            if t > self.end or (t == self.end and not self.end_inclusive):
                return False
        return True


@dataclass(frozen=True)
class Projection:
    kind: str  # "attr" | "agg"
    ref: X.Attr
    func: Optional[str] = None
    guard: Optional[tuple] = None  # (op, constant)
    alias: Optional[str] = None
    label: str = ""


@dataclass(frozen=True)
class SemanticSubquery:
    var: str
    body: PathQuery
    connective: str = "AND"  # joins this subquery to the previous one


@dataclass(frozen=True)
class FilterConstraint:
    var: str
    attr: str  # syntactic name or concept Iri
    op: str
    value: object

    def as_expr(self) -> X.Compare:
        return X.Compare(self.op, X.Attr(self.var, self.attr), X.Const(self.value))


@dataclass(frozen=True)
class JoinConstraint:
    expr: object


@dataclass(frozen=True)
class WindowSpec:
    kind: str
    variables: tuple
    width: int

    @property
    def multi(self) -> bool:
        return len(self.variables) > 1


@dataclass(frozen=True)
class CepSubquery:
    filters: tuple = ()
    joins: tuple = ()
    seq: Optional[tuple] = None
    window: Optional[WindowSpec] = None

    def is_empty(self) -> bool:
        return not (self.filters or self.joins or self.seq or self.window)


@dataclass(frozen=True)
class XcepQuery:
    prefixes: tuple
    select: tuple
    sources: tuple  # ((var, stream), ...)
    within: TimeRange = field(default_factory=TimeRange)
    semantic: tuple = ()
    cep: Optional[CepSubquery] = None
    qid: str = "q"
    never: bool = False

    @property
    def variables(self) -> list[str]:
        return [v for v, _ in self.sources]

    def stream_of(self, var: str) -> str:
        for v, s in self.sources:
            if v == var:
                return s
        raise UndeclaredVariable(f"undeclared event variable ?{var}")

    @property
    def window(self) -> Optional[WindowSpec]:
        return self.cep.window if self.cep else None

    @property
    def aggregates(self) -> list[Projection]:
        return [p for p in self.select if p.kind == "agg"]

    @property
    def is_aggregate(self) -> bool:
        return bool(self.aggregates)

    @property
    def multi_window(self) -> bool:
        w = self.window
        return w is not None and w.multi

    def prefix_map(self) -> PrefixMap:
        return PrefixMap(dict(self.prefixes))

    def subqueries_for(self, var: str) -> list[SemanticSubquery]:
        return [s for s in self.semantic if s.var == var]

    def subquery_id(self, index: int) -> str:
        return f"{self.qid}#s{index}"


# -- tokenizer ----------------------------------------------------------------

_TOKEN_SPEC = [
    ("WS", r"[ \t\r\n]+"),
    ("COMMENT", r"#[^\n]*"),
    ("IRIREF", r"<[A-Za-z][A-Za-z0-9+.\-]*:[^<>\"\s{}|^`\\]*>"),
    ("DATETIME", r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}(?::\d{2}(?:\.\d+)?)?(?:Z|[+-]\d{2}:\d{2})?"),
    ("DURATION", r"\d+(?:ms|min|s|h)\b"),
    ("NUMBER", r"\d+(?:\.\d+)?(?:[eE][-+]?\d+)?"),
    ("STRING", r'"(?:[^"\\\n]|\\.)*"'),
    ("ATTR", r"\?[A-Za-z_]\w*\.(?:[A-Za-z_][\w\-]*:[A-Za-z_0-9][\w\-]*|[A-Za-z_]\w*)"),
    ("VAR", r"\?[A-Za-z_]\w*"),
    ("PNAME", r"[A-Za-z_][\w\-]*:(?:[A-Za-z_0-9][\w.\-]*)?"),
    ("NAME", r"[A-Za-z_]\w*"),
    ("OP", r"<=|>=|!=|&&|\|\||[<>=+\-*/]"),
    ("PUNCT", r"[{}()\[\],.]"),
]
_TOKEN_RE = re.compile("|".join(f"(?P<{n}>{p})" for n, p in _TOKEN_SPEC))


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    col: int

    @property
    def upper(self) -> str:
        return self.text.upper()


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        tok = m.group()
        if kind == "PNAME":
            tok = tok.rstrip(".")
        if kind not in ("WS", "COMMENT"):
            tokens.append(Token(kind, tok, line, pos - line_start + 1))
        end = pos + len(tok)
        chunk = text[pos:end]
        nl = chunk.count("\n")
        if nl:
            line += nl
            line_start = pos + chunk.rindex("\n") + 1
        pos = end
    tokens.append(Token("EOF", "", line, pos - line_start + 1))
    return tokens


# -- parser -------------------------------------------------------------------

_CLAUSES = {"PATH", "FILTER", "JOIN", "SEQ", "WINDOW", "AND", "OR"}


class _Parser:
    def __init__(self, text: str, qid: str, default_stream: Optional[str], prefixes: Optional[dict]):
        self.toks = tokenize(text)
        self.i = 0
        self.qid = qid
        self.default_stream = default_stream
        self.prefixes = PrefixMap(prefixes or {})
        self.declared: dict = dict(prefixes or {})
        self.var_pos: dict = {}

    # token helpers
    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def error(self, msg: str, tok: Optional[Token] = None, cls=QuerySyntaxError):
        t = tok or self.tok
        return cls(msg, t.line, t.col)

    def advance(self) -> Token:
        t = self.toks[self.i]
        self.i += 1
        return t

    def at_kw(self, *words) -> bool:
        return self.tok.kind == "NAME" and self.tok.upper in words

    def expect_kw(self, word: str) -> Token:
        if not self.at_kw(word):
            raise self.error(f"expected {word}, found {self.tok.text or 'end of input'!r}")
        return self.advance()

    def at(self, text: str) -> bool:
        return self.tok.kind in ("PUNCT", "OP") and self.tok.text == text

    def expect(self, text: str) -> Token:
        if not self.at(text):
            raise self.error(f"expected {text!r}, found {self.tok.text or 'end of input'!r}")
        return self.advance()

    def expect_kind(self, kind: str, what: str) -> Token:
        if self.tok.kind != kind:
            raise self.error(f"expected {what}, found {self.tok.text or 'end of input'!r}")
        return self.advance()

    def note_var(self, name: str, tok: Token):
        self.var_pos.setdefault(name, tok)

    def expand(self, tok: Token) -> Iri:
        if tok.kind == "IRIREF":
            return Iri(tok.text[1:-1])
        try:
            return self.prefixes.expand(tok.text)
        except UndeclaredPrefix:
            raise self.error(f"unknown prefix {tok.text.split(':')[0]!r}", tok, UnknownPrefix) from None

    def attr(self, tok: Token) -> X.Attr:
        var, _, name = tok.text[1:].partition(".")
        self.note_var(var, tok)
        if ":" in name:
            return X.Attr(var, self.expand(Token("PNAME", name, tok.line, tok.col)))
        return X.Attr(var, name)

    # top level
    def parse(self) -> XcepQuery:
        while self.at_kw("PREFIX"):
            self.advance()
            p = self.expect_kind("PNAME", "prefix name")
            if not p.text.endswith(":"):
                raise self.error("prefix name must end with ':'", p)
            iri = self.expect_kind("IRIREF", "namespace IRI")
            self.prefixes.declare(p.text[:-1], iri.text[1:-1])
            self.declared[p.text[:-1]] = iri.text[1:-1]
        self.expect_kw("SELECT")
        select = [self.projection()]
        while self.at(","):
            self.advance()
            select.append(self.projection())
        sources = []
        from_tok = None
        if self.at_kw("FROM"):
            from_tok = self.advance()
            sources.append(self.source())
            while self.at(","):
                self.advance()
                sources.append(self.source())
        within = TimeRange()
        if self.at_kw("WITHIN"):
            self.advance()
            within = self.time_range()
        if self.at_kw("WHERE"):
            self.advance()
        blocks, filters, joins, seq, window = [], [], [], None, None
        while self.tok.kind != "EOF":
            t = self.tok
            if t.kind != "NAME" or t.upper not in _CLAUSES:
                raise self.error(f"unexpected {t.text!r}")
            kw = t.upper
            if kw in ("AND", "OR"):
                self.advance()
                if not self.at_kw("PATH"):
                    raise self.error(f"{kw} must be followed by PATH")
                blocks.append((kw, self.path_block()))
            elif kw == "PATH":
                blocks.append(("AND", self.path_block()))
            elif kw == "FILTER":
                self.advance()
                filters.append(self.cep_filter())
            elif kw == "JOIN":
                self.advance()
                joins.append(self.cep_join(t))
            elif kw == "SEQ":
                if seq is not None:
                    raise self.error("at most one SEQ clause", t, MultipleCepSubqueries)
                self.advance()
                seq = self.seq_clause(t)
            else:
                if window is not None:
                    raise self.error("at most one WINDOW clause", t, MultipleCepSubqueries)
                self.advance()
                window = self.window_clause()
        if not sources:
            if self.default_stream is None:
                raise self.error("missing FROM clause", from_tok)
            used = [v for v in self.var_pos if v in self._cep_vars]
            sources = [(v, self.default_stream) for v in used]
        declared = {v for v, _ in sources}
        if len(declared) != len(sources):
            raise self.error("event variable declared twice", from_tok)
        for v in self._cep_vars:
            if v not in declared:
                raise self.error(f"undeclared variable ?{v}", self.var_pos[v], UndeclaredVariable)
        cep = CepSubquery(tuple(filters), tuple(joins), seq, window)
        semantic = self.split_blocks(blocks, [v for v, _ in sources])
        q = XcepQuery(tuple(sorted(self.declared.items())), tuple(select), tuple(sources), within,
                      tuple(semantic), None if cep.is_empty() else cep, self.qid)
        check_query(q)
        return q

    _cep_vars: list

    def _use(self, var: str):
        if var not in self._cep_vars:
            self._cep_vars.append(var)

    def projection(self) -> Projection:
        t = self.tok
        if t.kind == "NAME" and t.upper in AGGREGATES:
            func = self.advance().upper
            self.expect("(")
            a = self.attr(self.expect_kind("ATTR", "attribute reference"))
            self._use(a.var)
            self.expect(")")
            guard = None
            if self.tok.kind == "OP" and self.tok.text in X.COMPARISONS:
                op = self.advance().text
                guard = (op, self.cep_const())
            alias = self.alias()
            label = alias or f"{func.lower()}({a.var}.{_attr_text(a.name, self.prefixes)})"
            return Projection("agg", a, func, guard, alias, label)
        a = self.attr(self.expect_kind("ATTR", "attribute reference or aggregate"))
        self._use(a.var)
        alias = self.alias()
        return Projection("attr", a, None, None, alias, alias or f"{a.var}.{_attr_text(a.name, self.prefixes)}")

    def alias(self) -> Optional[str]:
        if self.at_kw("AS"):
            self.advance()
            return self.expect_kind("NAME", "alias").text
        return None

    def source(self):
        self.expect("(")
        v = self.expect_kind("VAR", "event variable")
        self.expect(",")
        s = self.expect_kind("NAME", "stream name")
        self.expect(")")
        self.note_var(v.text[1:], v)
        return (v.text[1:], s.text)

    def time_range(self) -> TimeRange:
        if self.at("["):
            start_inc = True
        elif self.at("("):
            start_inc = False
        else:
            raise self.error("expected '[' or '(' to open WITHIN range")
        self.advance()
        if self.at_kw("NOW"):
            self.advance()
            start = None
        elif self.tok.kind == "DATETIME":
            start = parse_instant(self.advance().text)
        elif self.at(","):
            raise self.error("WITHIN range needs a start (use now)")
        else:
            raise self.error("expected now or a date-time")
        self.expect(",")
        end = None
        if self.tok.kind == "DATETIME":
            end = parse_instant(self.advance().text)
        if self.at("]"):
            end_inc = True
        elif self.at(")"):
            end_inc = False
        else:
            raise self.error("expected ']' or ')' to close WITHIN range")
        close = self.advance()
        if start is not None and end is not None and start > end:
            raise self.error("WITHIN start is after its end", close)
        return TimeRange(start, end, start_inc, end_inc)

    # PATH blocks
    def path_block(self):
        start = self.expect_kw("PATH")
        self.expect("{")
        patterns, filters = [], []
        while not self.at("}"):
            if self.tok.kind == "EOF":
                raise self.error("unterminated PATH block", start)
            if self.at_kw("FILTER"):
                self.advance()
                self.expect("(")
                e = self.expression(path=True)
                self.expect(")")
                if not _is_boolean(e):
                    raise self.error("PATH FILTER must be a boolean condition")
                filters.append(e)
            else:
                s = self.path_term(subject=True)
                pt = self.tok
                if pt.kind not in ("PNAME", "IRIREF"):
                    raise self.error("predicate must be a prefixed name or IRI")
                self.advance()
                p = self.expand(pt)
                o = self.path_term(subject=False)
                patterns.append((s, p, o))
            if self.at("."):
                self.advance()
        self.expect("}")
        if not patterns:
            raise self.error("PATH block has no triple patterns", start)
        return (start, tuple(patterns), tuple(filters))

    def path_term(self, subject: bool):
        t = self.tok
        if t.kind == "VAR":
            self.advance()
            self.note_var(t.text[1:], t)
            return Variable(t.text[1:])
        if t.kind in ("PNAME", "IRIREF"):
            self.advance()
            return self.expand(t)
        if subject:
            raise self.error("subject must be a variable or IRI")
        if t.kind in ("NUMBER", "STRING", "DATETIME") or self.at("-"):
            return self.literal_term()
        raise self.error(f"unexpected {t.text!r} in triple pattern")

    def literal_term(self):
        neg = False
        if self.at("-"):
            self.advance()
            neg = True
        t = self.advance()
        if t.kind == "NUMBER":
            v = float(t.text) if any(c in t.text for c in ".eE") else int(t.text)
            return num(-v if neg else v)
        if neg:
            raise self.error("'-' must precede a number", t)
        if t.kind == "STRING":
            return string(bytes(t.text[1:-1], "utf-8").decode("unicode_escape"))
        if t.kind == "DATETIME":
            return instant(parse_instant(t.text))
        raise self.error(f"expected a literal, found {t.text!r}", t)

    # expressions (shared by PATH FILTER, CEP FILTER and JOIN)
    def expression(self, path: bool):
        left = self.and_expr(path)
        items = [left]
        while self.at("||"):
            self.advance()
            items.append(self.and_expr(path))
        return items[0] if len(items) == 1 else X.Or(tuple(items))

    def and_expr(self, path: bool):
        items = [self.comparison(path)]
        while self.at("&&"):
            self.advance()
            items.append(self.comparison(path))
        return items[0] if len(items) == 1 else X.And(tuple(items))

    def comparison(self, path: bool):
        left = self.additive(path)
        if self.tok.kind == "OP" and self.tok.text in X.COMPARISONS:
            op = self.advance().text
            right = self.additive(path)
            return X.Compare(op, left, right)
        return left

    def additive(self, path: bool):
        e = self.multiplicative(path)
        while self.at("+") or self.at("-"):
            op = self.advance().text
            e = X.Arith(op, e, self.multiplicative(path))
        return e

    def multiplicative(self, path: bool):
        e = self.unary(path)
        while self.at("*") or self.at("/"):
            op = self.advance().text
            e = X.Arith(op, e, self.unary(path))
        return e

    def unary(self, path: bool):
        if self.at("-"):
            t = self.advance()
            inner = self.unary(path)
            if isinstance(inner, X.Const) and isinstance(inner.value, Literal) and inner.value.kind == "num":
                return X.Const(num(-inner.value.value))
            if isinstance(inner, X.Const) and not path and isinstance(inner.value, (int, float)):
                return X.Const(-inner.value)
            raise self.error("unary '-' applies only to numbers", t)
        return self.primary(path)

    def primary(self, path: bool):
        t = self.tok
        if self.at("("):
            self.advance()
            e = self.expression(path)
            self.expect(")")
            return e
        if t.kind == "VAR":
            if not path:
                raise self.error("CEP clauses reference attributes as ?var.name")
            self.advance()
            self.note_var(t.text[1:], t)
            return X.Var(t.text[1:])
        if t.kind == "ATTR":
            if path:
                raise self.error("attribute references are not allowed inside PATH")
            self.advance()
            a = self.attr(t)
            self._use(a.var)
            return a
        if t.kind == "NAME" and self.toks[self.i + 1].text == "(" and path:
            fn = self.advance().text.lower()
            self.expect("(")
            args = [self.expression(path)]
            while self.at(","):
                self.advance()
                args.append(self.expression(path))
            self.expect(")")
            return X.Call(fn, tuple(args))
        if t.kind in ("PNAME", "IRIREF") and path:
            self.advance()
            return X.Const(self.expand(t))
        if t.kind in ("NUMBER", "STRING", "DATETIME"):
            lit = self.literal_term()
            return X.Const(lit if path else lit.value)
        raise self.error(f"unexpected {t.text or 'end of input'!r} in expression")

    def cep_const(self):
        e = self.unary(path=False)
        if not isinstance(e, X.Const):
            raise self.error("expected a constant")
        return e.value

    def cep_filter(self) -> FilterConstraint:
        open_tok = self.expect("(")
        e = self.expression(path=False)
        self.expect(")")
        if isinstance(e, X.Compare):
            l, r, op = e.left, e.right, e.op
            if isinstance(r, X.Attr) and isinstance(l, X.Const):
                l, r, op = r, l, X.FLIPPED[op]
            if isinstance(l, X.Attr) and isinstance(r, X.Const):
                return FilterConstraint(l.var, l.name, op, r.value)
        raise self.error("FILTER must compare one attribute with a constant", open_tok)

    def cep_join(self, kw: Token) -> JoinConstraint:
        self.expect("(")
        e = self.expression(path=False)
        self.expect(")")
        if not _is_boolean(e):
            raise self.error("JOIN must be a boolean condition", kw)
        if len(X.event_vars(e)) < 2:
            raise self.error("JOIN must reference at least two event variables", kw)
        return JoinConstraint(e)

    def seq_clause(self, kw: Token) -> tuple:
        self.expect("(")
        vs = [self.expect_kind("VAR", "event variable")]
        while self.at(","):
            self.advance()
            vs.append(self.expect_kind("VAR", "event variable"))
        self.expect(")")
        names = []
        for t in vs:
            self.note_var(t.text[1:], t)
            self._use(t.text[1:])
            names.append(t.text[1:])
        if len(set(names)) != len(names):
            raise self.error("SEQ variables must be distinct", kw)
        if len(names) < 2:
            raise self.error("SEQ needs at least two variables", kw)
        return tuple(names)

    def window_clause(self) -> WindowSpec:
        open_tok = self.expect("(")
        vs = [self.expect_kind("VAR", "event variable")]
        kind = None
        while self.at(","):
            self.advance()
            if self.tok.kind == "VAR":
                vs.append(self.advance())
            else:
                break
        if self.at_kw("SLIDING", "BATCH"):
            kind = self.advance().upper
            self.expect(",")
        d = self.expect_kind("DURATION", "window width such as 5min")
        self.expect(")")
        names = []
        for t in vs:
            self.note_var(t.text[1:], t)
            self._use(t.text[1:])
            names.append(t.text[1:])
        if len(set(names)) != len(names):
            raise self.error("WINDOW variables must be distinct", open_tok)
        width = parse_duration(d.text)
        if width <= 0:
            raise self.error("window width must be positive", d)
        if len(names) == 1 and kind is None:
            raise self.error("single-variable WINDOW needs sliding or batch", open_tok)
        if len(names) > 1 and kind == BATCH:
            raise self.error("multi-variable WINDOW must be sliding", open_tok)
        return WindowSpec(kind or SLIDING, tuple(names), width)

    def split_blocks(self, blocks, event_vars: list[str]) -> list[SemanticSubquery]:
        ev = set(event_vars)
        out: list[SemanticSubquery] = []
        orphans = []
        for connective, (start, patterns, filters) in blocks:
            parent: dict = {}

            def find(x):
                while parent.setdefault(x, x) != x:
                    parent[x] = parent[parent[x]]
                    x = parent[x]
                return x

            def union(a, b):
                parent[find(a)] = find(b)

            units = []  # (node ids, item)
            for i, pat in enumerate(patterns):
                node = ("p", i)
                find(node)
                for t in (pat[0], pat[2]):
                    if isinstance(t, Variable):
                        union(node, ("v", t.name))
                units.append((node, pat))
            for j, f in enumerate(filters):
                node = ("f", j)
                find(node)
                for v in sorted(X.variables(f)):
                    union(node, ("v", v))
            comps: dict = {}
            for node, pat in units:
                comps.setdefault(find(node), [[], []])[0].append(pat)
            for j, f in enumerate(filters):
                root = find(("f", j))
                if root not in comps:
                    raise self.error("PATH FILTER uses variables not bound by any pattern", start,
                                     UndeclaredVariable)
                comps[root][1].append(f)
            parts = []
            consts = []
            for pats, fils in comps.values():
                vars_ = {t.name for p in pats for t in (p[0], p[2]) if isinstance(t, Variable)} & ev
                if len(vars_) > 1:
                    raise self.error("semantic subquery spans two event variables: "
                                     + ", ".join(f"?{v}" for v in sorted(vars_)), start, SpansEventVariables)
                if vars_:
                    parts.append([vars_.pop(), pats, fils])
                else:
                    consts.append((pats, fils))
            order = {v: i for i, v in enumerate(event_vars)}
            parts.sort(key=lambda p: order[p[0]])
            if parts and consts:
                for pats, fils in consts:
                    parts[0][1] = parts[0][1] + pats
                    parts[0][2] = parts[0][2] + fils
            elif consts:
                orphans.append((connective, consts, start))
                continue
            for k, (var, pats, fils) in enumerate(parts):
                out.append(SemanticSubquery(var, PathQuery(tuple(pats), tuple(fils), (var,)),
                                            connective if (k == 0 and out) else "AND"))
        for connective, consts, start in orphans:
            pats = tuple(p for ps, _ in consts for p in ps)
            fils = tuple(f for _, fs in consts for f in fs)
            if out:
                first = out[0]
                body = PathQuery(first.body.patterns + pats, first.body.filters + fils, first.body.projection)
                out[0] = replace(first, body=body)
            elif event_vars:
                out.append(SemanticSubquery(event_vars[0], PathQuery(pats, fils, ())))
            else:
                raise self.error("PATH block is not connected to any event variable", start)
        return out


def _is_boolean(e) -> bool:
    return isinstance(e, (X.Compare, X.And, X.Or))


def _attr_text(name, prefixes: PrefixMap) -> str:
    return prefixes.compact(name) if isinstance(name, Iri) else name


def parse(text: str, qid: str = "q", default_stream: Optional[str] = None,
          prefixes: Optional[dict] = None) -> XcepQuery:
    """Parse query text. ``prefixes`` pre-declares namespaces; ``default_stream``
    binds event variables when FROM is omitted."""
    p = _Parser(text, qid, default_stream, prefixes)
    p._cep_vars = []
    try:
        return p.parse()
    except QueryError:
        raise
    except Exception as exc:  # the parser reports every failure as a syntax error
        t = p.tok if p.i < len(p.toks) else p.toks[-1]
        raise QuerySyntaxError(str(exc) or type(exc).__name__, t.line, t.col) from None


def check_query(q: XcepQuery) -> None:
    """Structural invariants shared by parsed and rewritten queries."""
    declared = set(q.variables)
    has_or = any(s.connective == "OR" for s in q.semantic[1:])
    if has_or and len({s.var for s in q.semantic}) > 1:
        raise QueryError("OR between semantic subqueries is only supported for a single event variable")
    for s in q.semantic:
        if s.var not in declared:
            raise UndeclaredVariable(f"PATH block uses undeclared event variable ?{s.var}")
    aggs = q.aggregates
    w = q.window
    if aggs:
        if w is None or w.multi:
            raise QueryError("aggregate projections need a single-variable WINDOW")
        for a in aggs:
            if a.ref.var != w.variables[0]:
                raise QueryError("aggregate must range over the windowed variable")
    elif w is not None and not w.multi:
        raise QueryError("single-variable WINDOW needs an aggregate projection")
    if w is not None:
        for v in w.variables:
            if v not in declared:
                raise UndeclaredVariable(f"WINDOW uses undeclared variable ?{v}")
    if q.cep and q.cep.seq:
        for v in q.cep.seq:
            if v not in declared:
                raise UndeclaredVariable(f"SEQ uses undeclared variable ?{v}")


# -- printer ------------------------------------------------------------------

def _const_text(v, prefixes: PrefixMap, path: bool) -> str:
    if path:
        if isinstance(v, Literal) and v.kind == "ts":
            return format_instant(v.value)
        return format_term(v, prefixes)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(v)


_PREC = {"or": 1, "and": 2, "cmp": 3, "+": 4, "-": 4, "*": 5, "/": 5}


def format_expr(e, prefixes: PrefixMap, path: bool = False, parent: int = 0) -> str:
    if isinstance(e, X.Or):
        s = " || ".join(format_expr(i, prefixes, path, 1) for i in e.items)
        return f"({s})" if parent > 1 else s
    if isinstance(e, X.And):
        s = " && ".join(format_expr(i, prefixes, path, 2) for i in e.items)
        return f"({s})" if parent > 2 else s
    if isinstance(e, X.Compare):
        s = f"{format_expr(e.left, prefixes, path, 3)} {e.op} {format_expr(e.right, prefixes, path, 3)}"
        return f"({s})" if parent >= 3 else s
    if isinstance(e, X.Arith):
        p = _PREC[e.op]
        s = f"{format_expr(e.left, prefixes, path, p)}{e.op}{format_expr(e.right, prefixes, path, p + 1)}"
        return f"({s})" if parent > p else s
    if isinstance(e, X.Attr):
        return f"?{e.var}.{_attr_text(e.name, prefixes)}"
    if isinstance(e, X.Var):
        return f"?{e.name}"
    if isinstance(e, X.Call):
        return f"{e.fn}(" + ", ".join(format_expr(a, prefixes, path) for a in e.args) + ")"
    if isinstance(e, X.Const):
        text = _const_text(e.value, prefixes, path)
        negative = text.startswith("-")
        return f"({text})" if negative and parent >= 4 else text
    raise TypeError(f"cannot print {e!r}")


def _pattern_term(t, prefixes: PrefixMap) -> str:
    if isinstance(t, Variable):
        return f"?{t.name}"
    return _const_text(t, prefixes, path=True)


def format_query(q: XcepQuery) -> str:
    pm = q.prefix_map()
    lines = [f"PREFIX {p}: <{ns}>" for p, ns in q.prefixes]
    projs = []
    for p in q.select:
        ref = f"?{p.ref.var}.{_attr_text(p.ref.name, pm)}"
        s = f"{p.func}({ref})" if p.kind == "agg" else ref
        if p.guard:
            s += f" {p.guard[0]} {_const_text(p.guard[1], pm, False)}"
        if p.alias:
            s += f" AS {p.alias}"
        projs.append(s)
    lines.append("SELECT " + ", ".join(projs))
    lines.append("FROM " + ", ".join(f"(?{v}, {s})" for v, s in q.sources))
    w = q.within
    start = "now" if w.start is None else format_instant(w.start)
    end = "" if w.end is None else format_instant(w.end)
    lines.append(f"WITHIN {'[' if w.start_inclusive else '('}{start}, {end}{']' if w.end_inclusive else ')'}")
    lines.append("WHERE")
    for i, s in enumerate(q.semantic):
        body = [" ".join(_pattern_term(t, pm) for t in pat) + " ." for pat in s.body.patterns]
        body += [f"FILTER ({format_expr(f, pm, path=True)})" for f in s.body.filters]
        head = "PATH" if i == 0 else f"{s.connective} PATH"
        lines.append(head + " {\n    " + "\n    ".join(body) + "\n}")
    if q.cep:
        for f in q.cep.filters:
            lines.append(f"FILTER ({format_expr(f.as_expr(), pm)})")
        for j in q.cep.joins:
            lines.append(f"JOIN ({format_expr(j.expr, pm)})")
        if q.cep.seq:
            lines.append("SEQ (" + ", ".join(f"?{v}" for v in q.cep.seq) + ")")
        win = q.cep.window
        if win:
            vs = ", ".join(f"?{v}" for v in win.variables)
            kind = f"{win.kind.lower()}, " if not win.multi or win.kind != SLIDING else ""
            lines.append(f"WINDOW ({vs}, {kind}{format_duration(win.width)})")
    return "\n".join(lines) + "\n"


# -- validation against schemas and knowledge base ---------------------------

@dataclass(frozen=True)
class Issue:
    kind: str  # unknown-stream | unknown-attribute | unknown-iri
    detail: str


def validate_against(q: XcepQuery, defs: dict, kb: TripleStore) -> list[Issue]:
    from .events import AttributeResolver, EventError

    issues: list[Issue] = []
    for v, s in q.sources:
        if s not in defs:
            issues.append(Issue("unknown-stream", f"?{v} reads unknown stream {s!r}"))
    resolver = AttributeResolver(defs, kb)
    refs = [p.ref for p in q.select]
    if q.cep:
        refs += [X.Attr(f.var, f.attr) for f in q.cep.filters]
        for j in q.cep.joins:
            refs += X.attrs(j.expr)
    seen = set()
    for a in refs:
        if a in seen:
            continue
        seen.add(a)
        stream = dict(q.sources).get(a.var)
        if stream not in defs:
            continue
        try:
            resolver.resolve(stream, a.name)
        except EventError as exc:
            issues.append(Issue("unknown-attribute", str(exc)))
    known = set()
    for t in kb:
        known.add(t.subject)
        known.add(t.predicate)
        if isinstance(t.object, Iri):
            known.add(t.object)
    for d in defs.values():
        known.update(d.mapping.predicate_for.values())
        known.update(d.schema.static_mappings.values())
    for s in q.semantic:
        for pat in s.body.patterns:
            for t in pat:
                if isinstance(t, Iri) and t not in known:
                    issues.append(Issue("unknown-iri", f"{t} does not occur in the knowledge base"))
    return issues
