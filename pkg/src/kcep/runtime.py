"""Ingestion, the real-time/archive fork, clocks, metrics and synthetic workloads."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .events import RawEvent, event_to_line, make_event
from .timeutil import format_instant, parse_instant

SIMULATED = "SIMULATED"
WALL = "WALL"

DEFAULT_START = parse_instant("2012-05-04T09:00:00Z")
GAP_LIMIT = 2 ** 31


class IngestError(Exception):
    pass


@dataclass(frozen=True)
class ForkConfig:
    gap_ms: int = 0  # >0 delays archive visibility, <0 makes the archive run ahead
    fail_at: Optional[int] = None
    recover_at: Optional[int] = None

    def __post_init__(self):
        if abs(self.gap_ms) >= GAP_LIMIT:
            raise IngestError("gap must be within +/-2^31 ms")
        if (self.fail_at is None) != (self.recover_at is None):
            raise IngestError("fail_at and recover_at go together")
        if self.fail_at is not None and self.recover_at < self.fail_at:
            raise IngestError("recover_at precedes fail_at")

    @property
    def has_failure(self) -> bool:
        return self.fail_at is not None and self.recover_at > self.fail_at

    def realtime_delivers(self, t: int) -> bool:
        return not (self.has_failure and self.fail_at <= t < self.recover_at)

    def archive_visible_at(self, t: int) -> int:
        return t + self.gap_ms


@dataclass
class ClockSource:
    """Simulated clocks follow event arrival times; wall clocks read ``time.time``."""

    mode: str = SIMULATED
    now_ms: int = 0

    def advance(self, t: int) -> int:
        if self.mode == SIMULATED:
            if t < self.now_ms:
                raise IngestError("simulated clock cannot run backwards")
            self.now_ms = t
            return t
        import time
        self.now_ms = int(time.time() * 1000)
        return self.now_ms


@dataclass
class Fork:
    realtime: list  # (arrival ms, event) delivered to the real-time path
    archive: list  # (visible-at ms, event) appended to the archive, in event order


def arrival_times(events: list, rate: Optional[float]) -> list[int]:
    """Arrival instants: event time, or a fixed-rate replay starting at the first event."""
    if rate is None:
        return [e.timestamp for e in events]
    if rate <= 0:
        raise IngestError("rate must be > 0")
    if not events:
        return []
    t0 = events[0].timestamp
    return [t0 + int(i * 1000 / rate) for i in range(len(events))]


def ingest(events: Iterable[RawEvent], rate: Optional[float] = None, fork: ForkConfig = ForkConfig()) -> Fork:
    """Split a time-ordered stream into its real-time and archive deliveries."""
    evs = list(events)
    for i in range(1, len(evs)):
        if evs[i].key < evs[i - 1].key:
            raise IngestError(f"event {i + 1} is out of order")
    arr = arrival_times(evs, rate)
    rt = [(a, e) for a, e in zip(arr, evs) if fork.realtime_delivers(a)]
    ar = [(fork.archive_visible_at(a), e) for a, e in zip(arr, evs)]
    return Fork(rt, ar)


def with_seqnos(events: Iterable[RawEvent], first: int = 0) -> list[RawEvent]:
    return [make_event(e.stream, e.timestamp, first + i, e.attrs) for i, e in enumerate(events)]


# -- metrics --------------------------------------------------------------------

@dataclass
class Metrics:
    counters: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict)
    gauges: dict = field(default_factory=dict)

    def inc(self, name: str, by: int = 1):
        self.counters[name] = self.counters.get(name, 0) + by

    def observe(self, name: str, value: float):
        self.histograms.setdefault(name, []).append(value)

    def set(self, name: str, value):
        self.gauges[name] = value

    def quantile(self, name: str, q: float) -> Optional[float]:
        vals = self.histograms.get(name)
        if not vals:
            return None
        return float(np.quantile(np.asarray(vals), q))

    def snapshot(self, at_ms: Optional[int] = None) -> dict:
        out = {"counters": dict(sorted(self.counters.items())), "gauges": dict(sorted(self.gauges.items()))}
        hist = {}
        for k in sorted(self.histograms):
            v = self.histograms[k]
            hist[k] = {"count": len(v), "mean": float(np.mean(v)), "max": float(np.max(v)),
                       "p50": self.quantile(k, 0.5), "p99": self.quantile(k, 0.99)}
        out["histograms"] = hist
        if at_ms is not None:
            out["at"] = format_instant(at_ms)
        return out

    def to_jsonl(self, at_ms: Optional[int] = None) -> str:
        return json.dumps(self.snapshot(at_ms), sort_keys=True)


# -- synthetic workloads ---------------------------------------------------------

NAMESPACES = {
    "bd": "http://example.org/kcep/building#",
    "ee": "http://example.org/kcep/equipment#",
    "hvc": "http://example.org/kcep/hvac#",
    "org": "http://example.org/kcep/organization#",
    "evt": "http://example.org/kcep/event#",
    "rdf": "http://www.w3.org/1999/02/22-rdf-syntax-ns#",
    "rdfs": "http://www.w3.org/2000/01/rdf-schema#",
    "owl": "http://www.w3.org/2002/07/owl#",
}

STREAM_VALUE_ATTR = {"airflowReport": "flowrate", "ventReport": "airvolume"}


def sensor_ids(n: int) -> list[str]:
    return [f"D{100 + i}VOL" for i in range(n)]


def room_kind(i: int) -> str:
    return ("Office", "Office", "MeetingRoom", "Lab")[i % 4]


def department(i: int) -> str:
    return "CSDepartment" if i % 3 == 1 else "EEDepartment"


def sensor_kind(i: int) -> str:
    return "TemperatureSensor" if i % 7 == 6 else "AirflowSensor"


def generate_campus_ontology(sensors: int = 20) -> str:
    """Campus ontology text: sensors, their rooms, room classes and departments."""
    lines = [f"@prefix {p}: <{ns}> ." for p, ns in NAMESPACES.items() if p not in ("rdf", "rdfs", "owl")]
    lines += [
        "# room and equipment class hierarchy",
        "bd:Office rdfs:subClassOf bd:Room .",
        "bd:MeetingRoom rdfs:subClassOf bd:Room .",
        "bd:Lab rdfs:subClassOf bd:Room .",
        "bd:Room rdfs:subClassOf bd:Space .",
        "ee:AirflowSensor rdfs:subClassOf ee:Sensor .",
        "ee:TemperatureSensor rdfs:subClassOf ee:Sensor .",
        "# equivalent names for the airflow concept",
        "hvc:flowrate owl:sameAs hvc:airflow .",
        "hvc:airvolume owl:sameAs hvc:airflow .",
        "hvc:GreenOfficeAirflow hvc:hasValue 500 .",
        "org:EEDepartment rdf:type org:Department .",
        "org:CSDepartment rdf:type org:Department .",
        "bd:RTH rdf:type bd:Building .",
    ]
    for i, sid in enumerate(sensor_ids(sensors)):
        room = f"bd:RTH{100 + i}"
        lines += [
            f"ee:{sid} rdf:type ee:{sensor_kind(i)} .",
            f"ee:{sid} bd:hasLocation {room} .",
            f"{room} rdf:type bd:{room_kind(i)} .",
            f"{room} bd:belongsTo org:{department(i)} .",
            f"{room} bd:partOf bd:RTH .",
        ]
    return "\n".join(lines) + "\n"


def generate_microgrid_stream(sensors: int = 20, events: int = 1000, rate: float = 10.0, seed: int = 0,
                              start: int = DEFAULT_START, streams: tuple = ("airflowReport",),
                              skew: float = 1.1, step: float = 25.0) -> list[RawEvent]:
    """Deterministic airflow readings.

    Sensors are drawn with Zipf-like weights ``1/(rank+1)**skew``; each sensor's
    flowrate follows a random walk quantized to 0.5 cfm and clipped to [200, 800].
    """
    if sensors < 1:
        raise ValueError("sensors must be >= 1")
    if rate <= 0:
        raise ValueError("rate must be > 0")
    rng = np.random.default_rng(seed)
    ids = sensor_ids(sensors)
    weights = 1.0 / np.arange(1, sensors + 1) ** skew
    weights /= weights.sum()
    choice = rng.choice(sensors, size=events, p=weights)
    level = np.round(rng.uniform(350, 650, size=sensors) * 2) / 2
    steps = np.round(rng.normal(0.0, step, size=events) * 2) / 2
    stream_pick = rng.integers(0, len(streams), size=events) if len(streams) > 1 else np.zeros(events, int)
    out = []
    for k in range(events):
        s = int(choice[k])
        level[s] = min(800.0, max(200.0, level[s] + steps[k]))
        stream = streams[int(stream_pick[k])]
        ts = start + int(math.floor(k * 1000 / rate))
        out.append(make_event(stream, ts, k, {"sensorID": ids[s], STREAM_VALUE_ATTR[stream]: float(level[s])}))
    return out


def write_events(events: Iterable[RawEvent], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(event_to_line(e) + "\n")
