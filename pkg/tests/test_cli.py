import json

import pytest

from kcep.cli import main, parse_args


def gen(tmp_path, n=400, rate=1.0, seed=0):
    path = tmp_path / "events.jsonl"
    assert main(["gen", "--events", str(n), "--rate", str(rate), "--seed", str(seed), "-o", str(path)]) == 0
    return str(path)


def lines(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(x) for x in fh if x.strip()]


def test_gen_is_deterministic(tmp_path):
    a = gen(tmp_path, seed=3)
    first = open(a).read()
    assert open(gen(tmp_path, seed=3)).read() == first
    assert len(first.splitlines()) == 400


def test_run_matches_oracle(tmp_path):
    ev = gen(tmp_path)
    run_out, orc_out = tmp_path / "run.jsonl", tmp_path / "oracle.jsonl"
    metrics = tmp_path / "metrics.json"
    assert main(["run", "--query", "q3", "--query", "q4", "--events", ev, "--buffer-ms", "2000",
                 "--cache-capacity", "5", "-o", str(run_out), "--metrics", str(metrics)]) == 0
    assert main(["oracle", "--query", "q3", "--query", "q4", "--events", ev, "-o", str(orc_out)]) == 0
    assert lines(run_out) == lines(orc_out) and lines(run_out)
    doc = json.load(open(metrics))
    assert set(doc["queries"]) == {"q3", "q4"}


def test_run_with_past_range_and_recovery(tmp_path):
    ev = gen(tmp_path, n=600)
    rows = lines(ev)
    start, mid, fail, back = (rows[k]["timestamp"] for k in (0, 200, 300, 400))
    out, ref = tmp_path / "r.jsonl", tmp_path / "o.jsonl"
    assert main(["run", "--query", "q7", "--events", ev, "--within-from", start, "--submit-at", mid,
                 "--fail-at", fail, "--recover-at", back, "--strategy", "replay", "--gap-ms", "2000",
                 "-o", str(out), "--metrics", str(tmp_path / "m.json")]) == 0
    assert main(["oracle", "--query", "q7", "--events", ev, "--within-from", start, "-o", str(ref)]) == 0
    assert lines(out) == lines(ref)
    assert "recovery" in json.load(open(tmp_path / "m.json"))["queries"]["q7"]


def test_explain_prints_plan(tmp_path, capsys):
    ev = gen(tmp_path, n=100)
    t = lines(ev)[50]["timestamp"]
    assert main(["explain", "--query", "q7", "--events", ev, "--within-from", lines(ev)[0]["timestamp"],
                 "--submit-at", t]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert [x["kind"] for x in doc["plan"]["tasks"]] == ["archive", "realtime", "boundary"]
    assert "PATH" in doc["optimized"]


def test_run_explain_flag(tmp_path, capsys):
    ev = gen(tmp_path, n=50)
    assert main(["run", "--query", "q1", "--events", ev, "--explain"]) == 0
    assert json.loads(capsys.readouterr().out)["query"] == "q1"


def test_config_file_supplies_defaults(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"buffer_ms": 1000, "cache_capacity": 3}))
    args = parse_args(["run", "--config", str(cfg), "--buffer-ms", "500"])
    assert (args.buffer_ms, args.cache_capacity) == (500, 3)
    cfg.write_text(json.dumps({"no_such_key": 1}))
    assert main(["run", "--config", str(cfg)]) == 2


@pytest.mark.parametrize("argv", [
    ["run", "--query", "q1"],
    ["run", "--query", "missing.xcep", "--events", "x"],
    ["oracle", "--query", "q1", "--events", "/nonexistent/events.jsonl"],
])
def test_errors_are_structured(argv, capsys):
    assert main(argv) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert set(err) == {"error", "message"}


def test_bad_query_text_is_reported(tmp_path, capsys):
    q = tmp_path / "bad.xcep"
    q.write_text("SELECT ?e.x FROM (?e, airflowReport) WHERE FILTER (?e.x >> 1)")
    ev = gen(tmp_path, n=10)
    assert main(["run", "--query", str(q), "--events", ev]) == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "QuerySyntaxError"


def test_bench_throughput_small(tmp_path):
    out = tmp_path / "b.json"
    assert main(["bench", "throughput", "--num-events", "1500", "--rate", "100,100000", "-o", str(out)]) == 0
    doc = json.load(open(out))
    names = [c["name"] for c in doc["queries"]["q4"]["configs"]]
    assert names == ["baseline", "buffer-1000ms", "buffer-2000ms", "cache-1", "cache-5", "combined"]
    assert doc["queries"]["q4"]["uniqueCacheKeys"] == 20


def test_bench_recovery_small(tmp_path):
    out = tmp_path / "r.json"
    assert main(["bench", "recovery", "--num-events", "3000", "--downtimes-min", "0.5,1",
                 "--strategies", "replay,hybrid", "-o", str(out)]) == 0
    rows = json.load(open(out))["queries"]["q4"]
    assert len(rows) == 4 and all(r["metrics"]["catchupEvents"] > 0 for r in rows)
