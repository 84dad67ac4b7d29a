import io

import pytest

from kcep.events import (EVT_NS, EventError, MissingAttribute, OutOfOrderInput, TypeMismatch, annotate,
                         event_iri, make_event, parse_event_iri, read_events, root_properties,
                         stream_def_from_json)
from kcep.kb import Iri, Triple, instant, num
from kcep.timeutil import parse_instant

EE = "http://example.org/kcep/equipment#"
HVC = "http://example.org/kcep/hvac#"
T930 = parse_instant("2012-05-04T09:30:00Z")


def reading(seqno=0, flow=510.0, ts=T930):
    return make_event("airflowReport", ts, seqno, {"sensorID": "D105VOL", "flowrate": flow})


def test_airflow_reading_triples(defs):
    sem = annotate(reading(), defs["airflowReport"])
    e = sem.iri
    assert set(sem.triples) == {
        Triple(e, Iri(EVT_NS + "hasSource"), Iri(EE + "D105VOL")),
        Triple(e, Iri(EVT_NS + "hasTime"), instant(T930)),
        Triple(e, Iri(HVC + "airflow"), num(510.0)),
    }


def test_annotation_is_deterministic(defs):
    a = annotate(reading(), defs["airflowReport"])
    b = annotate(reading(), defs["airflowReport"])
    assert a.iri == b.iri and a.triples == b.triples


def test_static_mapping_names_the_predicate():
    d = stream_def_from_json({
        "stream": "vent", "prefixes": {"hvc": HVC, "ee": EE},
        "attributes": [{"name": "sensorID", "type": "str"}, {"name": "airvolume", "type": "num"}],
        "staticMappings": {"airvolume": "hvc:airflow"},
        "valueRules": {"sensorID": {"instance": "ee"}, "airvolume": "literal"},
        "predicateFor": {"sensorID": "<http://example.org/kcep/event#hasSource>"},
    })
    sem = annotate(make_event("vent", 0, 0, {"sensorID": "X", "airvolume": 3.0}), d)
    assert Iri(HVC + "airflow") in {t.predicate for t in sem.triples}


def test_root_properties_in_canonical_order(defs):
    props = root_properties(annotate(reading(), defs["airflowReport"]))
    assert props == [(Iri(EVT_NS + "hasSource"), Iri(EE + "D105VOL")),
                     (Iri(EVT_NS + "hasTime"), instant(T930)),
                     (Iri(HVC + "airflow"), num(510.0))]


def test_root_properties_of_unmapped_event_are_empty():
    d = stream_def_from_json({"stream": "s", "attributes": [], "valueRules": {}})
    assert root_properties(annotate(make_event("s", 0, 0, {}), d)) == []


def test_root_properties_differ_only_where_values_do(defs):
    a = root_properties(annotate(reading(0), defs["airflowReport"]))
    b = root_properties(annotate(reading(1, flow=480.0, ts=T930 + 1000), defs["airflowReport"]))
    differ = [pa for pa, pb in zip(a, b) if pa != pb]
    assert [p for p, _ in differ] == [Iri(EVT_NS + "hasTime"), Iri(HVC + "airflow")]


def test_missing_attribute_and_type_errors(defs):
    with pytest.raises(MissingAttribute):
        annotate(make_event("airflowReport", 0, 0, {"sensorID": "D105VOL"}), defs["airflowReport"])
    with pytest.raises(TypeMismatch):
        annotate(make_event("airflowReport", 0, 0, {"sensorID": "D105VOL", "flowrate": "high"}),
                 defs["airflowReport"])


def test_event_iri_round_trips():
    iri = event_iri("air flow/x", 123, 7)
    assert parse_event_iri(iri) == ("air%20flow%2Fx", 123, 7)
    assert parse_event_iri(event_iri("airflowReport", 5, 2)) == ("airflowReport", 5, 2)


def test_read_events_assigns_seqnos_and_rejects_disorder(defs):
    lines = ['{"stream":"airflowReport","timestamp":"2012-05-04T09:30:00Z","attrs":{"sensorID":"A","flowrate":1}}',
             '{"stream":"airflowReport","timestamp":"2012-05-04T09:30:01Z","attrs":{"sensorID":"B","flowrate":2}}']
    evs = list(read_events(io.StringIO("\n".join(lines)), defs))
    assert [e.seqno for e in evs] == [0, 1]
    with pytest.raises(OutOfOrderInput) as err:
        list(read_events(lines[::-1], defs))
    assert err.value.line == 2


def test_empty_stream_name_rejected():
    with pytest.raises(EventError):
        make_event("", 0, 0, {})
