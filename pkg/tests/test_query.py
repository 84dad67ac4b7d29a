import pytest
from conftest import load_query, query_text

from kcep import expr as X
from kcep.query import (QueryError, QuerySyntaxError, SpansEventVariables, TimeRange,
                        UndeclaredVariable, UnknownPrefix, WindowSpec, check_query, format_query, parse,
                        validate_against)
from kcep.timeutil import parse_instant

HEAD = "SELECT ?e.sensorID FROM (?e, airflowReport)\n"


def test_simple_threshold_query():
    q = load_query(1)
    assert [p.label for p in q.select] == ["e.sensorID", "e.flowrate"]
    (f,) = q.cep.filters
    assert (f.var, f.attr, f.op, f.value) == ("e", "flowrate", ">", 500)
    assert q.within == TimeRange(None, None)


def test_sequence_query_structure():
    q = load_query(3)
    assert q.cep.seq == ("e1", "e2")
    assert q.cep.window == WindowSpec("SLIDING", ("e1", "e2"), 300_000)
    eq, diff = (j.expr for j in q.cep.joins)
    assert eq == X.Compare("=", X.Attr("e2", "sensorID"), X.Attr("e1", "sensorID"))
    assert diff.op == ">" and diff.right == X.Const(50)


def test_open_ended_within():
    q = parse(HEAD + "WITHIN [2012-05-07T09:00, )\nWHERE FILTER (?e.flowrate > 500)")
    assert q.within == TimeRange(parse_instant("2012-05-07T09:00:00Z"), None, True, False)


def test_exclusive_start_bracket():
    q = parse(HEAD + "WITHIN (2012-05-07T09:00, 2012-05-07T10:00]")
    assert not q.within.start_inclusive and q.within.end_inclusive


@pytest.mark.parametrize("i", range(1, 8))
def test_packaged_queries_round_trip(i):
    q = load_query(i)
    check_query(q)
    assert parse(format_query(q), qid=q.qid) == q


@pytest.mark.parametrize("i", range(1, 8))
def test_packaged_queries_validate_cleanly(i, kb, defs):
    assert validate_against(load_query(i), defs, kb) == []


def test_unknown_stream_reported(kb, defs):
    q = parse("SELECT ?e.sensorID FROM (?e, noSuchStream)")
    assert [i.kind for i in validate_against(q, defs, kb)] == ["unknown-stream"]


def test_concept_reference_resolves_through_static_mapping(kb, defs):
    q = parse("PREFIX hvc: <http://example.org/kcep/hvac#>\n" + HEAD + "WHERE FILTER (?e.hvc:airflow > 500)")
    assert validate_against(q, defs, kb) == []


@pytest.mark.parametrize("text, error", [
    (HEAD + "WHERE FILTER (?x.flowrate > 500)", UndeclaredVariable),
    (HEAD + "WHERE PATH { ?e zz:p ?y }", UnknownPrefix),
    ("SELECT ?e.sensorID FROM (?e, a), (?f, a) WHERE PATH { ?e <http://x.org/p> ?f }", SpansEventVariables),
    (HEAD + "WHERE FILTER (?e.flowrate > )", QuerySyntaxError),
    ("SELEC ?e.x FROM (?e, a)", QuerySyntaxError),
])
def test_structured_errors(text, error):
    with pytest.raises(error) as err:
        parse(text)
    assert isinstance(err.value, QueryError)


def test_error_positions_are_reported():
    with pytest.raises(QuerySyntaxError) as err:
        parse(HEAD + "WHERE FILTER (?e.flowrate >> 500)")
    assert err.value.line == 2


def test_aggregate_needs_single_variable_window():
    with pytest.raises(QueryError):
        parse("SELECT AVG(?e.flowrate) FROM (?e, airflowReport)")


def test_keywords_are_case_insensitive():
    lower = query_text(3).replace("SELECT", "select").replace("WINDOW", "window").replace("SEQ", "seq")
    assert parse(lower, qid="q3") == load_query(3)
