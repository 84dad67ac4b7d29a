"""Raw event tuples, stream schemas, and semantic annotation into triples."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Iterator, Optional, Union
from urllib.parse import quote

from .kb import (Iri, PrefixMap, TripleStore, Triple, instant, num, same_as_class,
                 string, term_key)
from .timeutil import format_instant, parse_instant
from .work import ANNOTATE, COUNTS

EVT_NS = "http://example.org/kcep/event#"
TIMESTAMP = "timestamp"
TYPES = ("str", "num", "ts")


class EventError(Exception):
    pass


class MissingAttribute(EventError):
    pass


class UnmappedAttribute(EventError):
    pass


class TypeMismatch(EventError):
    pass


class OutOfOrderInput(EventError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True, slots=True)
class RawEvent:
    stream: str
    timestamp: int  # event time, epoch ms
    seqno: int
    attrs: tuple  # ((name, value), ...) in declaration order

    @property
    def key(self) -> tuple:
        return (self.timestamp, self.seqno)

    def get(self, name: str, default=None):
        if name == TIMESTAMP:
            return self.timestamp
        for k, v in self.attrs:
            if k == name:
                return v
        return default

    def as_dict(self) -> dict:
        return dict(self.attrs)

    def to_json(self) -> dict:
        return {"stream": self.stream, "timestamp": format_instant(self.timestamp),
                "seqno": self.seqno, "attrs": dict(self.attrs)}


def make_event(stream: str, timestamp: int, seqno: int, attrs: Union[dict, Iterable]) -> RawEvent:
    if not stream:
        raise EventError("stream name must be nonempty")
    items = tuple(attrs.items()) if isinstance(attrs, dict) else tuple(attrs)
    return RawEvent(stream, int(timestamp), int(seqno), items)


@dataclass(frozen=True)
class InstanceRef:
    """Maps an attribute value to the IRI ``namespace + value``."""

    namespace: str


@dataclass(frozen=True)
class LiteralRule:
    pass


@dataclass(frozen=True)
class StreamSchema:
    stream: str
    attributes: tuple  # ((name, type tag), ...)
    static_mappings: dict = field(default_factory=dict)  # name -> Iri

    def type_of(self, name: str) -> Optional[str]:
        for n, t in self.attributes:
            if n == name:
                return t
        return None

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.attributes]


@dataclass(frozen=True)
class AnnotationMapping:
    stream: str
    value_rules: dict  # name -> InstanceRef | LiteralRule
    predicate_for: dict  # name or concept Iri -> predicate Iri


@dataclass(frozen=True)
class StreamDef:
    schema: StreamSchema
    mapping: AnnotationMapping

    @property
    def stream(self) -> str:
        return self.schema.stream

    def predicate(self, name: str) -> Iri:
        m = self.mapping.predicate_for
        if name in m:
            return m[name]
        concept = self.schema.static_mappings.get(name)
        if concept is not None:
            return m.get(concept, concept)
        raise UnmappedAttribute(f"{self.stream}.{name} has no predicate mapping")


@dataclass(frozen=True)
class SemanticEvent:
    iri: Iri
    triples: tuple
    source: RawEvent


@lru_cache(maxsize=1 << 16)
def event_iri(stream: str, timestamp: int, seqno: int) -> Iri:
    return Iri(f"{EVT_NS}{quote(stream, safe='-_.~')}/{timestamp}/{seqno}")


def parse_event_iri(iri: str) -> tuple[str, int, int]:
    rest = iri[len(EVT_NS):] if iri.startswith(EVT_NS) else iri
    stream, ts, seq = rest.rsplit("/", 2)
    return stream, int(ts), int(seq)


def _check_type(stream: str, name: str, tag: str, value):
    ok = {"num": isinstance(value, (int, float)) and not isinstance(value, bool),
          "str": isinstance(value, str),
          "ts": isinstance(value, int) and not isinstance(value, bool)}[tag]
    if not ok:
        raise TypeMismatch(f"{stream}.{name}: value {value!r} is not of type {tag}")


def annotate(event: RawEvent, defn: StreamDef) -> SemanticEvent:
    """Materialize ``event`` as triples rooted at its generated IRI."""
    schema, mapping = defn.schema, defn.mapping
    if event.stream != schema.stream:
        raise EventError(f"event on stream {event.stream!r} annotated with mapping for {schema.stream!r}")
    COUNTS[ANNOTATE] += 1
    iri = event_iri(event.stream, event.timestamp, event.seqno)
    given = dict(event.attrs)
    triples = []
    for name, tag in schema.attributes:
        if name == TIMESTAMP:
            value = event.timestamp
        elif name in given:
            value = given[name]
        else:
            raise MissingAttribute(f"{event.stream} event {event.seqno} lacks attribute {name!r}")
        _check_type(event.stream, name, tag, value)
        rule = mapping.value_rules.get(name)
        if rule is None:
            raise UnmappedAttribute(f"{event.stream}.{name} has no value rule")
        if isinstance(rule, InstanceRef):
            obj = Iri(rule.namespace + quote(str(value), safe="-_.~"))
        elif tag == "ts":
            obj = instant(value)
        elif tag == "num":
            obj = num(value)
        else:
            obj = string(value)
        triples.append(Triple(iri, defn.predicate(name), obj))
    return SemanticEvent(iri, tuple(triples), event)


def root_properties(sem: SemanticEvent) -> list[tuple]:
    """The event's (predicate, object) pairs in canonical order."""
    return sorted(((t.predicate, t.object) for t in sem.triples),
                  key=lambda po: (str(po[0]), term_key(po[1])))


class AttributeResolver:
    """Resolves attribute names or concepts to a stream's syntactic attribute."""

    def __init__(self, defs: dict, kb: Optional[TripleStore] = None):
        self.defs = defs
        self.kb = kb
        self._cache: dict = {}

    def canonical(self, concept: Iri) -> Iri:
        if self.kb is None:
            return concept
        return min(same_as_class(self.kb, concept))

    def concept_of(self, stream: str, name: str) -> Iri:
        defn = self.defs[stream]
        c = defn.schema.static_mappings.get(name)
        if c is None:
            c = defn.predicate(name)
        return self.canonical(c)

    def resolve(self, stream: str, ref: str) -> str:
        """Attribute name of ``stream`` denoted by ``ref`` (a name or concept Iri)."""
        key = (stream, ref, isinstance(ref, Iri))
        if key in self._cache:
            return self._cache[key]
        defn = self.defs.get(stream)
        if defn is None:
            raise EventError(f"unknown stream {stream!r}")
        names = defn.schema.names
        if not isinstance(ref, Iri):
            if ref not in names:
                raise UnmappedAttribute(f"stream {stream!r} has no attribute {ref!r}")
            self._cache[key] = ref
            return ref
        target = self.canonical(ref)
        hits = []
        for n in names:
            concepts = {self.concept_of(stream, n)}
            try:
                concepts.add(self.canonical(defn.predicate(n)))
            except UnmappedAttribute:
                pass
            if target in concepts:
                hits.append(n)
        if not hits:
            raise UnmappedAttribute(f"stream {stream!r} has no attribute for {ref}")
        if len(hits) > 1:
            raise AmbiguousMapping(f"{ref} maps to several attributes of {stream!r}: {hits}")
        self._cache[key] = hits[0]
        return hits[0]


class AmbiguousMapping(EventError):
    pass


# -- JSON encodings ---------------------------------------------------------

def _value_from_json(tag: str, v):
    if tag == "ts" and isinstance(v, str):
        return parse_instant(v)
    return v


def stream_def_from_json(doc: dict) -> StreamDef:
    prefixes = PrefixMap(doc.get("prefixes", {}))

    def iri(text: str) -> Iri:
        if text.startswith("<") and text.endswith(">"):
            return Iri(text[1:-1])
        return prefixes.expand(text)

    stream = doc["stream"]
    attributes = []
    for a in doc["attributes"]:
        if a["type"] not in TYPES:
            raise EventError(f"unknown attribute type {a['type']!r}")
        attributes.append((a["name"], a["type"]))
    static = {k: iri(v) for k, v in doc.get("staticMappings", {}).items()}
    rules = {}
    for name, spec in doc.get("valueRules", {}).items():
        if spec == "literal":
            rules[name] = LiteralRule()
        elif isinstance(spec, dict) and "instance" in spec:
            rules[name] = InstanceRef(prefixes.namespace(spec["instance"]))
        else:
            raise EventError(f"bad value rule for {name!r}: {spec!r}")
    preds = {}
    for k, v in doc.get("predicateFor", {}).items():
        preds[iri(k) if ":" in k else k] = iri(v)
    schema = StreamSchema(stream, tuple(attributes), static)
    for name, _ in attributes:
        if name not in rules:
            raise UnmappedAttribute(f"{stream}.{name} has no value rule")
    return StreamDef(schema, AnnotationMapping(stream, rules, preds))


def load_stream_defs(paths: Iterable[str]) -> dict:
    out = {}
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            doc = json.load(fh)
        docs = doc if isinstance(doc, list) else [doc]
        for d in docs:
            defn = stream_def_from_json(d)
            out[defn.stream] = defn
    return out


def read_events(lines: Iterable[str], defs: Optional[dict] = None, first_seqno: int = 0) -> Iterator[RawEvent]:
    """Parse JSON-lines events, assigning seqnos in file order."""
    seq = first_seqno
    last_ts = None
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            doc = json.loads(line)
            stream = doc["stream"]
            ts = parse_instant(doc["timestamp"]) if isinstance(doc["timestamp"], str) else int(doc["timestamp"])
            attrs = doc.get("attrs", {})
        except (ValueError, KeyError, TypeError) as exc:
            raise OutOfOrderInput(f"malformed event: {exc}", lineno) from None
        if last_ts is not None and ts < last_ts:
            raise OutOfOrderInput("timestamp decreases", lineno)
        last_ts = ts
        if defs is not None and stream in defs:
            schema = defs[stream].schema
            attrs = {k: _value_from_json(schema.type_of(k) or "", v) for k, v in attrs.items()}
        yield make_event(stream, ts, seq, attrs)
        seq += 1


def load_events(path: str, defs: Optional[dict] = None) -> list[RawEvent]:
    with open(path, encoding="utf-8") as fh:
        return list(read_events(fh, defs))


def event_to_line(e: RawEvent) -> str:
    return json.dumps({"stream": e.stream, "timestamp": format_instant(e.timestamp),
                       "attrs": dict(e.attrs)}, separators=(",", ":"))


def event_from_record(doc: dict) -> RawEvent:
    return make_event(doc["stream"], doc["timestamp"], doc["seqno"], doc["attrs"])


def event_to_record(e: RawEvent) -> dict:
    return {"stream": e.stream, "timestamp": e.timestamp, "seqno": e.seqno, "attrs": dict(e.attrs)}


def _fn_seqno(iri):
    if not isinstance(iri, Iri):
        raise EventError(f"seqno() expects an event IRI, got {iri!r}")
    return num(parse_event_iri(iri)[2])


def _fn_stream(iri):
    if not isinstance(iri, Iri):
        raise EventError(f"stream() expects an event IRI, got {iri!r}")
    return string(parse_event_iri(iri)[0])


# functions available to PATH filters over event IRIs
EVENT_FUNCTIONS = {"seqno": _fn_seqno, "stream": _fn_stream}
