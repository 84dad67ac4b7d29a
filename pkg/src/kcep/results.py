"""Match results shared by every evaluation path."""
from __future__ import annotations

from dataclasses import dataclass

from .events import RawEvent, event_iri
from .timeutil import format_instant


@dataclass(frozen=True)
class MatchResult:
    query_id: str
    outputs: tuple  # ((label, value), ...)
    contributors: tuple  # ((iri, timestamp, seqno), ...) ordered by (timestamp, seqno)
    bindings: tuple = ()  # ((var, seqno), ...) in FROM order; empty for aggregates

    @property
    def result_ts(self) -> int:
        return self.contributors[-1][1]

    @property
    def sort_key(self) -> tuple:
        return (self.contributors[-1][1], self.contributors[-1][2],
                tuple(c[2] for c in self.contributors), tuple(s for _, s in self.bindings))

    @property
    def dedup_key(self) -> tuple:
        return (tuple(c[0] for c in self.contributors), self.bindings)

    def to_json(self) -> dict:
        return {"query": self.query_id,
                "timestamp": format_instant(self.result_ts),
                "outputs": dict(self.outputs),
                "contributors": [c[0] for c in self.contributors],
                "bindings": dict(self.bindings)}


def contributor(e: RawEvent) -> tuple:
    return (event_iri(e.stream, e.timestamp, e.seqno), e.timestamp, e.seqno)
