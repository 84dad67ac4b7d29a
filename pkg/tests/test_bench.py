import math

import pytest
from conftest import load_query, optimized

from kcep import bench as B
from kcep.runtime import generate_microgrid_stream
from kcep.work import CostModel


def test_drain_below_and_above_capacity():
    under = B.drain([(k * 0.01, 0.001) for k in range(100)], 100, 100.0)
    assert under.sustained_eps == 100.0 and math.isclose(under.mean_latency_s, 0.001)
    over = B.drain([(k * 0.001, 0.01) for k in range(100)], 100, 1000.0)
    assert math.isclose(over.capacity_eps, 100.0) and over.sustained_eps == pytest.approx(100.0)
    assert over.max_latency_s > 0.9
    assert B.drain([], 0, 1.0).achieved_eps == 0.0


def test_slope_of_line():
    assert B.slope([1, 2, 3], [2, 4, 6]) == pytest.approx(2.0)
    assert B.slope([1], [5]) == 0.0


def test_standard_configs():
    names = [c.name for c in B.standard_configs(1, 5)]
    assert names == ["baseline", "buffer-1000ms", "buffer-2000ms", "cache-1", "cache-5", "combined"]


def test_cost_model_charges_counted_work():
    m = CostModel()
    assert m.seconds({"annotate": 2, "cep_row": 1}) == pytest.approx((2 * 9.5 + 10.8) / 1e6)


def test_simulated_sweep_is_deterministic(kb, defs):
    evs = generate_microgrid_stream(events=2000, seed=0)
    q = optimized(load_query(4), kb, defs)
    cfgs = B.standard_configs(1, 5)
    a = B.throughput_sweep(q, evs, kb, defs, cfgs, rates=(1000, 100_000))
    b = B.throughput_sweep(q, evs, kb, defs, cfgs, rates=(1000, 100_000))
    assert [r.as_dict() for r in a] == [r.as_dict() for r in b]
    assert len({r.matches for r in a}) == 1
    by = {r.name: r.peak_sustained_eps for r in a}
    assert by["buffer-2000ms"] > by["baseline"] and by["combined"] > by["cache-5"] > by["cache-1"]


def test_unique_cache_keys_counts_sensors(kb, defs):
    evs = generate_microgrid_stream(sensors=7, events=300, seed=1)
    assert B.unique_cache_keys(optimized(load_query(4), kb, defs), evs, kb, defs) == 7


def test_recovery_sweep_reports_budget_trips(kb, defs):
    evs = generate_microgrid_stream(events=3000, rate=10, seed=0)
    q = optimized(load_query(3), kb, defs)
    rows = B.recovery_sweep(q, evs, kb, defs, [60_000], ["PLAIN", "HYBRID"], evs[0].timestamp + 30_000,
                            budget=10_000)
    by = {r.strategy: r for r in rows}
    assert by["PLAIN"].error.startswith("join budget exceeded")
    assert by["HYBRID"].error is None and by["HYBRID"].metrics["catchupEvents"] > 0


def test_recovery_sweep_reports_unsupported(kb, defs):
    evs = generate_microgrid_stream(events=1000, rate=10, seed=0)
    rows = B.recovery_sweep(optimized(load_query(6), kb, defs), evs, kb, defs, [10_000], ["PLAIN"],
                            evs[0].timestamp + 10_000)
    assert rows[0].error.startswith("unsupported")


def test_calibration_produces_positive_costs(kb, defs):
    evs = generate_microgrid_stream(events=600, seed=0)
    m = B.calibrate(optimized(load_query(4), kb, defs), evs, kb, defs,
                    join_query=optimized(load_query(3), kb, defs), rates=(1000.0,),
                    configs=B.CALIBRATION_CONFIGS[:5])
    assert m.annotate_us > 0 and m.record_decoded_us > 0 and m.cep_row_us > 0
