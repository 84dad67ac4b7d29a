
import pytest
from conftest import data_path, engine_matches, load_query, random_stream

from kcep import expr as X
from kcep.kb import Iri, load_ontology, num
from kcep.optimizer import NeverMatches, normalize_attributes, optimize, prune_and_migrate, transform_to_cep
from kcep.oracle import oracle_match
from kcep.query import parse
from kcep.runtime import generate_microgrid_stream

HVC = "http://example.org/kcep/hvac#"
PREFIXES = """PREFIX bd: <http://example.org/kcep/building#>
PREFIX ee: <http://example.org/kcep/equipment#>
PREFIX hvc: <http://example.org/kcep/hvac#>
PREFIX org: <http://example.org/kcep/organization#>
PREFIX evt: <http://example.org/kcep/event#>
PREFIX rdf: <http://www.w3.org/1999/02/22-rdf-syntax-ns#>
"""


def all_patterns(q):
    return [p for s in q.semantic for p in s.body.patterns]


def test_constant_path_replaced_by_its_value(kb):
    q = prune_and_migrate(load_query(5), kb)
    assert not any(p[0] == Iri(HVC + "GreenOfficeAirflow") for p in all_patterns(q))
    (f,) = q.semantic[0].body.filters
    assert f == X.Compare(">", X.Var("rate"), X.Const(num(500)))


def test_prune_without_constant_paths_is_identity(kb):
    q = load_query(4)
    assert prune_and_migrate(q, kb) == q


def test_constant_path_with_two_values_becomes_disjunction(defs):
    with open(data_path("campus.ttl"), encoding="utf-8") as fh:
        kb2 = load_ontology(fh.read() + "hvc:GreenOfficeAirflow hvc:hasValue 450 .\n")
    q = load_query(5)
    pruned = prune_and_migrate(q, kb2)
    (f,) = pruned.semantic[0].body.filters
    assert isinstance(f, X.Or) and len(f.items) == 2
    evs = generate_microgrid_stream(events=400, rate=1, seed=11)
    assert engine_matches(optimize(q, kb2, defs), evs, kb2, defs) == oracle_match(q, evs, kb2, defs,
                                                                                  now=evs[0].timestamp)


def test_constant_path_without_solution_never_matches(kb, defs):
    text = PREFIXES + """SELECT ?e.sensorID FROM (?e, airflowReport) WHERE
PATH { ?e hvc:airflow ?r . hvc:NoSuchLevel hvc:hasValue ?v . FILTER (?r > ?v) }"""
    with pytest.warns(NeverMatches):
        q = optimize(parse(text), kb, defs)
    assert q.never
    evs = generate_microgrid_stream(events=50, seed=1)
    assert engine_matches(q, evs, kb, defs) == []


def test_one_hop_filter_moves_to_cep(kb, defs):
    q = optimize(load_query(5), kb, defs)
    (f,) = q.cep.filters
    assert (f.var, f.attr, f.op, f.value) == ("e", Iri(HVC + "airflow"), ">", 500)
    preds = {p[1].rsplit("#", 1)[1] for p in all_patterns(q)}
    assert preds == {"hasSource", "type", "hasLocation", "belongsTo"}


def test_multi_hop_paths_stay_semantic(kb, defs):
    q = load_query(4)
    assert transform_to_cep(q, defs).semantic == q.semantic


def test_all_one_hop_segment_empties(kb, defs):
    text = PREFIXES + """SELECT ?e.sensorID FROM (?e, airflowReport) WHERE
PATH { ?e hvc:airflow ?r . FILTER (?r > 500) }"""
    q = parse(text)
    oq = optimize(q, kb, defs)
    assert oq.semantic == ()
    evs = generate_microgrid_stream(events=1000, rate=2, seed=5)
    assert engine_matches(oq, evs, kb, defs) == engine_matches(q, evs, kb, defs)


def test_attribute_names_normalize_to_concept(kb, defs):
    q = normalize_attributes(load_query(1), defs, kb)
    assert q.cep.filters[0].attr == Iri(HVC + "airflow")
    assert normalize_attributes(q, defs, kb) == q


def test_projection_labels_survive_normalization(kb, defs):
    q = optimize(load_query(1), kb, defs)
    assert [p.label for p in q.select] == ["e.sensorID", "e.flowrate"]


def test_normalized_query_matches_both_streams(kb, defs):
    text = """SELECT ?a.sensorID, ?b.airvolume FROM (?a, airflowReport), (?b, ventReport) WHERE
FILTER (?a.flowrate > 520) FILTER (?b.airvolume > 520)
JOIN (?a.sensorID = ?b.sensorID) WINDOW (?a, ?b, 1min)"""
    q = parse(text, qid="dual")
    oq = optimize(q, kb, defs)
    assert {f.attr for f in oq.cep.filters} == {Iri(HVC + "airflow")}
    evs = generate_microgrid_stream(sensors=5, events=600, rate=1, seed=3,
                                    streams=("airflowReport", "ventReport"))
    expected = oracle_match(q, evs, kb, defs, now=evs[0].timestamp)
    assert expected and engine_matches(oq, evs, kb, defs) == expected


@pytest.mark.parametrize("i", [4, 5, 6, 7])
def test_optimized_queries_keep_their_matches(i, kb, defs):
    q = load_query(i)
    for seed in range(3):
        evs = random_stream(seed)
        expected = oracle_match(q, evs, kb, defs, now=evs[0].timestamp)
        assert engine_matches(optimize(q, kb, defs), evs, kb, defs) == expected
        assert engine_matches(q, evs, kb, defs) == expected
