import pytest
from conftest import load_query, optimized

from kcep.archive import (HYBRID, PLAIN, REPLAY, ArchiveError, ArchiveStore, Constraints, OutOfOrderAppend,
                          PartialCoverage, StrategyUnsupported, execute_archive, rewrite, strategy_name,
                          time_range_keys)
from kcep.cep import AttributeResolver
from kcep.events import make_event
from kcep.oracle import oracle_match
from kcep.runtime import generate_microgrid_stream
from kcep.timeutil import parse_instant

T930 = parse_instant("2012-05-04T09:30:00Z")


def archive_of(events, defs, **kw):
    a = ArchiveStore(defs, **kw)
    for e in events:
        a.append(e)
    return a


def reading(seqno, flow, ts, sensor="D105VOL"):
    return make_event("airflowReport", ts, seqno, {"sensorID": sensor, "flowrate": flow})


def test_append_advances_watermark(defs):
    a = ArchiveStore(defs)
    assert a.append(reading(0, 510.0, T930)) == (T930, 0)
    assert a.append(reading(1, 520.0, T930 + 5)) == (T930 + 5, 1)
    assert len(a) == 2


def test_out_of_order_append_rejected_and_duplicate_ignored(defs):
    a = archive_of([reading(0, 510.0, T930), reading(1, 520.0, T930 + 5)], defs)
    with pytest.raises(OutOfOrderAppend):
        a.append(reading(0, 510.0, T930))
    a.append(reading(1, 520.0, T930 + 5))
    assert len(a) == 2 and a.appends == 2


def test_retention_keeps_last_hour(defs):
    evs = generate_microgrid_stream(events=120, rate=1 / 60, seed=1)  # one per minute for two hours
    a = archive_of(evs, defs, retention_ms=3_600_000)
    now = evs[-1].timestamp
    a.prune(now)
    kept = a.range_replay((now - 3_600_000, -1))
    assert kept == [e for e in evs if e.timestamp >= now - 3_600_000]
    assert len(a) == len(kept) == 61
    assert len(a.triples) == 61 * 3


def test_pruned_range_warns_partial_coverage(defs):
    evs = generate_microgrid_stream(events=30, rate=1 / 60, seed=1)
    a = archive_of(evs, defs, retention_ms=600_000)
    a.prune(evs[-1].timestamp)
    with pytest.warns(PartialCoverage):
        a.range_replay()


def test_range_replay_matches_linear_scan(defs):
    evs = generate_microgrid_stream(events=500, rate=3, seed=2)
    a = archive_of(evs, defs)
    for lo, hi in [(None, None), (evs[10].key, evs[200].key), time_range_keys(evs[3].timestamp, evs[400].timestamp)]:
        expect = [e for e in evs if (lo is None or e.key >= lo) and (hi is None or e.key < hi)]
        assert a.range_replay(lo, hi) == expect


def test_reopen_from_path_rebuilds_indexes(tmp_path, defs):
    path = str(tmp_path / "log.bin")
    evs = generate_microgrid_stream(events=60, rate=1 / 30, seed=3)
    a = archive_of(evs, defs, path=path, retention_ms=900_000)
    a.prune(evs[-1].timestamp)
    before = a.range_replay((evs[-1].timestamp - 900_000, -1))
    a.close()
    b = ArchiveStore.open(path, defs)
    assert b.retention_ms == 900_000 and b.high_watermark == evs[-1].key
    assert b.range_replay((evs[-1].timestamp - 900_000, -1)) == before
    assert len(b.triples) == len(before) * 3


def test_strategy_names():
    assert strategy_name("rewrite") == PLAIN and strategy_name("hybrid") == HYBRID
    with pytest.raises(ArchiveError):
        strategy_name("magic")


def test_plain_rewrite_of_threshold_query(defs, kb):
    q = optimized(load_query(1), kb, defs)
    rq = rewrite(q, PLAIN, AttributeResolver(defs, kb), now=0)
    assert rq.path_query.projection == ("e",) and rq.pushed_filters == (0,)


def test_plain_rewrite_of_sequence_query(defs, kb):
    q = optimized(load_query(3), kb, defs)
    rq = rewrite(q, PLAIN, AttributeResolver(defs, kb), now=0)
    assert rq.residual is None and set(rq.path_query.projection) == {"e1", "e2"}
    assert len(rq.path_query.filters) > len(q.cep.joins)


def test_hybrid_keeps_correlation_in_kernel(defs, kb):
    q = optimized(load_query(7), kb, defs)
    rq = rewrite(q, HYBRID, AttributeResolver(defs, kb), now=0)
    assert rq.residual.joins == q.cep.joins and rq.residual.seq == ("e1", "e2")
    assert rq.residual.window == q.cep.window and rq.residual.filters == ()
    assert [v for v, _ in rq.per_var] == ["e1", "e2"]


def test_plain_rejects_sliding_aggregate(defs, kb):
    q = optimized(load_query(6), kb, defs)
    with pytest.raises(StrategyUnsupported):
        rewrite(q, PLAIN, AttributeResolver(defs, kb), now=0)
    with pytest.raises(ArchiveError):
        rewrite(q, REPLAY, AttributeResolver(defs, kb), now=0)


@pytest.mark.parametrize("i", [1, 3, 4, 5, 7])
def test_strategies_agree_with_oracle(i, defs, kb):
    evs = generate_microgrid_stream(sensors=10, events=400, rate=1, seed=i)
    a = archive_of(evs, defs)
    q = load_query(i)
    now = evs[0].timestamp
    expect = oracle_match(q, evs, kb, defs, now=now)
    for s in (REPLAY, PLAIN, HYBRID):
        assert execute_archive(optimized(q, kb, defs), a, kb, s, now=now).matches == expect, s


@pytest.mark.parametrize("i", [2, 6])
def test_aggregates_on_replay_and_hybrid(i, defs, kb):
    evs = generate_microgrid_stream(sensors=10, events=300, rate=1, seed=i)
    a = archive_of(evs, defs)
    q = load_query(i)
    now = evs[0].timestamp
    expect = oracle_match(q, evs, kb, defs, now=now)
    for s in (REPLAY, HYBRID):
        assert execute_archive(optimized(q, kb, defs), a, kb, s, now=now).matches == expect


def test_sequence_pair_found_by_every_strategy(defs, kb):
    evs = [reading(0, 510.0, T930), reading(1, 570.0, T930 + 120_000)]
    a = archive_of(evs, defs)
    q = optimized(load_query(3), kb, defs)
    for s in (REPLAY, PLAIN, HYBRID):
        (m,) = execute_archive(q, a, kb, s, now=T930).matches
        assert dict(m.outputs) == {"e1.sensorID": "D105VOL"}


def test_empty_archive_gives_no_matches(defs, kb):
    a = ArchiveStore(defs)
    for s in (REPLAY, PLAIN, HYBRID):
        run = execute_archive(optimized(load_query(4), kb, defs), a, kb, s, now=T930)
        assert run.matches == [] and run.first_event_s is None


def test_read_range_limits_contributors(defs, kb):
    evs = generate_microgrid_stream(events=400, rate=1, seed=6)
    a = archive_of(evs, defs)
    lo, hi = evs[100].key, evs[300].key
    q = optimized(load_query(1), kb, defs)
    for s in (REPLAY, PLAIN, HYBRID):
        out = execute_archive(q, a, kb, s, Constraints(read_lo=lo, read_hi=hi), now=evs[0].timestamp).matches
        assert out and all(lo <= (c[1], c[2]) < hi for m in out for c in m.contributors)
