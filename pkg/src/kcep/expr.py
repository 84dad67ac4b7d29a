"""Expression trees shared by PATH filters and CEP clauses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Union

COMPARISONS = ("<", "<=", ">", ">=", "=", "!=")
ARITHMETIC = ("+", "-", "*", "/")

# flipping operands of a comparison
FLIPPED = {"<": ">", "<=": ">=", ">": "<", ">=": "<=", "=": "=", "!=": "!="}


@dataclass(frozen=True, slots=True)
class Const:
    value: Any  # a Term for PATH filters, a raw value for CEP clauses


@dataclass(frozen=True, slots=True)
class Var:
    name: str


@dataclass(frozen=True, slots=True)
class Attr:
    """Attribute reference ``?var.name``.

    ``name`` is either a syntactic attribute name (plain ``str``) or a
    concept IRI (``kb.Iri``) when written as ``?var.prefix:concept``.
    """

    var: str
    name: str


@dataclass(frozen=True, slots=True)
class Arith:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True, slots=True)
class Call:
    fn: str
    args: tuple


@dataclass(frozen=True, slots=True)
class Compare:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True, slots=True)
class And:
    items: tuple


@dataclass(frozen=True, slots=True)
class Or:
    items: tuple


Expr = Union[Const, Var, Attr, Arith, Call, Compare, And, Or]


def children(e) -> tuple:
    if isinstance(e, (Arith, Compare)):
        return (e.left, e.right)
    if isinstance(e, (And, Or)):
        return e.items
    if isinstance(e, Call):
        return e.args
    return ()


def walk(e):
    yield e
    for c in children(e):
        yield from walk(c)


def variables(e) -> set[str]:
    """Names of PATH variables used in ``e``."""
    return {n.name for n in walk(e) if isinstance(n, Var)}


def attrs(e) -> list[Attr]:
    seen: list[Attr] = []
    for n in walk(e):
        if isinstance(n, Attr) and n not in seen:
            seen.append(n)
    return seen


def event_vars(e) -> set[str]:
    return {a.var for a in attrs(e)}


def substitute(e, mapping: dict):
    """Replace ``Var`` nodes whose name is in ``mapping`` by ``Const`` values."""
    if isinstance(e, Var):
        return Const(mapping[e.name]) if e.name in mapping else e
    if isinstance(e, Arith):
        return Arith(e.op, substitute(e.left, mapping), substitute(e.right, mapping))
    if isinstance(e, Compare):
        return Compare(e.op, substitute(e.left, mapping), substitute(e.right, mapping))
    if isinstance(e, And):
        return And(tuple(substitute(i, mapping) for i in e.items))
    if isinstance(e, Or):
        return Or(tuple(substitute(i, mapping) for i in e.items))
    if isinstance(e, Call):
        return Call(e.fn, tuple(substitute(i, mapping) for i in e.args))
    return e


def map_attrs(e, fn):
    """Rebuild ``e`` with every ``Attr`` node replaced by ``fn(attr)``."""
    if isinstance(e, Attr):
        return fn(e)
    if isinstance(e, Arith):
        return Arith(e.op, map_attrs(e.left, fn), map_attrs(e.right, fn))
    if isinstance(e, Compare):
        return Compare(e.op, map_attrs(e.left, fn), map_attrs(e.right, fn))
    if isinstance(e, And):
        return And(tuple(map_attrs(i, fn) for i in e.items))
    if isinstance(e, Or):
        return Or(tuple(map_attrs(i, fn) for i in e.items))
    if isinstance(e, Call):
        return Call(e.fn, tuple(map_attrs(i, fn) for i in e.args))
    return e
