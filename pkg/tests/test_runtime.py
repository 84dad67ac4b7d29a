import pytest

from kcep.kb import load_ontology
from kcep.runtime import (DEFAULT_START, ClockSource, ForkConfig, IngestError, Metrics, arrival_times,
                          generate_campus_ontology, generate_microgrid_stream, ingest, sensor_ids, with_seqnos)


def test_fork_without_gap_delivers_identical_streams():
    evs = generate_microgrid_stream(events=200, seed=1)
    f = ingest(evs)
    assert [e for _, e in f.realtime] == [e for _, e in f.archive] == evs
    assert [a for a, _ in f.realtime] == [a for a, _ in f.archive]


@pytest.mark.parametrize("gap", [1000, -1000, 10_000])
def test_archive_visibility_shifts_by_gap(gap):
    evs = generate_microgrid_stream(events=50, seed=2)
    f = ingest(evs, fork=ForkConfig(gap_ms=gap))
    assert [v - a for (v, _), (a, _) in zip(f.archive, f.realtime)] == [gap] * 50


def test_downtime_drops_realtime_only():
    evs = generate_microgrid_stream(events=100, rate=1, seed=3)
    fail, back = evs[20].timestamp, evs[40].timestamp
    f = ingest(evs, fork=ForkConfig(fail_at=fail, recover_at=back))
    assert len(f.realtime) == 80 and len(f.archive) == 100
    assert all(not (fail <= a < back) for a, _ in f.realtime)


def test_fork_config_validation():
    with pytest.raises(IngestError):
        ForkConfig(gap_ms=2 ** 31)
    with pytest.raises(IngestError):
        ForkConfig(fail_at=5)
    with pytest.raises(IngestError):
        ForkConfig(fail_at=5, recover_at=4)
    assert not ForkConfig(fail_at=5, recover_at=5).has_failure


def test_out_of_order_input_rejected():
    evs = generate_microgrid_stream(events=5, seed=0)
    with pytest.raises(IngestError):
        ingest(evs[::-1])


def test_fixed_rate_arrivals():
    evs = generate_microgrid_stream(events=4, rate=1, seed=0)
    assert arrival_times(evs, 2.0) == [evs[0].timestamp + k * 500 for k in range(4)]
    with pytest.raises(IngestError):
        arrival_times(evs, 0)


def test_simulated_clock_is_monotone():
    c = ClockSource()
    assert c.advance(10) == 10
    with pytest.raises(IngestError):
        c.advance(5)


def test_generator_is_deterministic():
    a = generate_microgrid_stream(events=300, seed=7)
    assert a == generate_microgrid_stream(events=300, seed=7)
    assert a != generate_microgrid_stream(events=300, seed=8)
    assert a[0].timestamp == DEFAULT_START and [e.seqno for e in a] == list(range(300))
    assert all(200 <= e.get("flowrate") <= 800 for e in a)


def test_generated_ontology_covers_every_sensor():
    kb = load_ontology(generate_campus_ontology(20))
    subjects = {t.subject.rsplit("#", 1)[1] for t in kb}
    assert set(sensor_ids(20)) <= subjects


def test_full_benchmark_corpus_shape():
    evs = generate_microgrid_stream(events=120_000, seed=0)
    assert len(evs) == 120_000 and len({e.get("sensorID") for e in evs}) == 20
    assert evs[-1].timestamp - evs[0].timestamp == 11_999_900


def test_with_seqnos_renumbers():
    evs = with_seqnos(generate_microgrid_stream(events=3, seed=0), first=10)
    assert [e.seqno for e in evs] == [10, 11, 12]


def test_metrics_snapshot():
    m = Metrics()
    m.inc("events", 3)
    for v in (1.0, 2.0, 3.0):
        m.observe("lat", v)
    m.set("depth", 4)
    snap = m.snapshot(at_ms=0)
    assert snap["counters"] == {"events": 3} and snap["histograms"]["lat"]["p50"] == 2.0
    assert snap["at"] == "1970-01-01T00:00:00.000Z"
    assert m.quantile("missing", 0.5) is None
