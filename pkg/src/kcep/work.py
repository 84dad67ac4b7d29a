"""Process-wide work counters and the cost-model clock built on them.

Every unit of engine work bumps a counter here: annotations, cache probes,
events whose semantic result is computed, path-query calls, triples matched during
joins, triples indexed for a join, events handed to a CEP kernel and archive
records decoded. A :class:`CostModel` turns counter
values into modeled seconds, which gives benchmarks a clock that depends only
on the work performed and is therefore identical across runs.
"""
from __future__ import annotations

import time
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable

COUNTS: Counter = Counter()

ANNOTATE = "annotate"
PROBE = "cache_probe"
SEM_EVENT = "semantic_evaluated"
PATH_CALL = "path_call"
TRIPLE = "triple_matched"
INDEXED = "triple_indexed"
CEP_ROW = "cep_row"
DECODE = "record_decoded"
KINDS = (ANNOTATE, PROBE, SEM_EVENT, PATH_CALL, TRIPLE, INDEXED, CEP_ROW, DECODE)


def snapshot() -> dict:
    return {k: COUNTS[k] for k in KINDS}


def delta(before: dict, after: dict) -> dict:
    return {k: after[k] - before[k] for k in KINDS}


@dataclass(frozen=True)
class CostModel:
    """Microseconds charged per unit of work.

    Defaults come from :func:`kcep.bench.calibrate` on a single desktop core;
    rerun it to refit them for another machine.
    """

    annotate_us: float = 9.5
    cache_probe_us: float = 3.0
    semantic_evaluated_us: float = 0.3
    path_call_us: float = 55.0
    triple_matched_us: float = 6.5
    triple_indexed_us: float = 1.0
    cep_row_us: float = 10.8
    record_decoded_us: float = 4.5

    def seconds(self, work: dict) -> float:
        us = (work.get(ANNOTATE, 0) * self.annotate_us + work.get(PROBE, 0) * self.cache_probe_us
              + work.get(SEM_EVENT, 0) * self.semantic_evaluated_us
              + work.get(PATH_CALL, 0) * self.path_call_us + work.get(TRIPLE, 0) * self.triple_matched_us
              + work.get(INDEXED, 0) * self.triple_indexed_us
              + work.get(CEP_ROW, 0) * self.cep_row_us + work.get(DECODE, 0) * self.record_decoded_us)
        return us / 1e6

    def as_dict(self) -> dict:
        return asdict(self)


def work_clock(model: CostModel) -> Callable[[], float]:
    """A clock reading the modeled cost of the work done since it was created.

    Starting from zero keeps readings independent of earlier work in the process.
    """
    base = snapshot()
    return lambda: model.seconds({k: COUNTS[k] - base[k] for k in KINDS})


def wall_clock() -> Callable[[], float]:
    return time.perf_counter
