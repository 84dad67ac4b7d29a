import os
import random
from dataclasses import replace

import pytest

from kcep.events import load_stream_defs
from kcep.kb import load_ontology
from kcep.optimizer import optimize
from kcep.query import TimeRange, parse
from kcep.runtime import generate_microgrid_stream

DATA = os.path.join(os.path.dirname(__import__("kcep").__file__), "data")


def data_path(name: str) -> str:
    return os.path.join(DATA, name)


def query_text(i: int) -> str:
    with open(data_path(f"q{i}.xcep"), encoding="utf-8") as fh:
        return fh.read()


def load_query(i: int, within_from=None):
    q = parse(query_text(i), qid=f"q{i}")
    if within_from is not None:
        q = replace(q, within=TimeRange(within_from))
    return q


def optimized(q, kb, defs):
    oq = optimize(q, kb, defs)
    return oq[0] if isinstance(oq, tuple) else oq


def random_stream(seed: int, lo: int = 150, hi: int = 600):
    """A random stream shape: size, sensor count, rate and skew vary with the seed."""
    rng = random.Random(seed)
    return generate_microgrid_stream(sensors=rng.choice([5, 10, 20]), events=rng.randint(lo, hi),
                                     rate=rng.choice([0.5, 1.0, 2.0]), seed=seed,
                                     skew=rng.choice([0.8, 1.1, 1.5]))


@pytest.fixture(scope="session")
def kb():
    with open(data_path("campus.ttl"), encoding="utf-8") as fh:
        return load_ontology(fh.read())


@pytest.fixture(scope="session")
def defs():
    return load_stream_defs([data_path("airflowReport.json"), data_path("ventReport.json")])


def engine_matches(q, events, kb, defs, config=None, now=None):
    from kcep.cep import compile_query
    from kcep.pipeline import run_pipeline
    now = events[0].timestamp if now is None and events else now
    out, _ = run_pipeline(events, [compile_query(q, defs, kb, now=now)], kb, defs, config)
    return out


ACCEPTANCE: dict = {}  # criterion number -> list of (part, ok, detail)


def record(n: int, part: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(n, []).append((part, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        status = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p + ': ' if p else ''}{'ok' if ok else 'FAILED'} {d}" for p, ok, d in parts)
        terminalreporter.write_line(f"criterion {n}: {status} | {detail}")
