"""Command-line entry point: ``kcep run|gen|oracle|bench|explain``.

Results go to stdout as JSON lines; metrics and diagnostics go to stderr or to
the file named by ``--metrics``. Errors exit with status 2 and a JSON error
object on stderr. ``--config FILE`` supplies defaults for any flag by its
long name (dashes or underscores); explicit flags override the file.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import replace
from typing import Optional

from . import bench as B
from .archive import ArchiveError
from .cep import CepError
from .events import EventError, load_events, load_stream_defs
from .kb import KBError, load_ontology
from .optimizer import optimize
from .oracle import OracleError, oracle_match
from .pipeline import PipelineConfig
from .planner import PlanError, initial_plan, run_integrated
from .query import QueryError, TimeRange, format_query, parse, validate_against
from .runtime import ForkConfig, IngestError, generate_campus_ontology, generate_microgrid_stream, write_events
from .timeutil import parse_instant
from .work import CostModel

DATA = os.path.join(os.path.dirname(__file__), "data")
DEFAULT_ONTOLOGY = os.path.join(DATA, "campus.ttl")
DEFAULT_MAPPINGS = [os.path.join(DATA, "airflowReport.json"), os.path.join(DATA, "ventReport.json")]

HANDLED = (QueryError, KBError, EventError, ArchiveError, PlanError, CepError, OracleError, IngestError,
           OSError, ValueError, KeyError)


class CliError(Exception):
    pass


# -- argument handling ---------------------------------------------------------------

def _instant(text: str) -> int:
    return int(text) if text.lstrip("-").isdigit() else parse_instant(text)


def _csv(kind):
    def conv(text):
        if isinstance(text, (list, tuple)):
            return [kind(x) for x in text]
        return [kind(x) for x in str(text).split(",") if x.strip()]
    return conv


def _add_inputs(p: argparse.ArgumentParser, events: bool = True) -> None:
    p.add_argument("--query", action="append", help="query file, or a packaged name q1..q7 (repeatable)")
    if events:
        p.add_argument("--events", help="JSON-lines event file")
    p.add_argument("--ontology", help="ontology file (default: packaged campus ontology)")
    p.add_argument("--mappings", action="append", help="stream mapping JSON (repeatable)")
    p.add_argument("--no-compile-opt", action="store_true", default=None,
                   help="skip pruning and semantic-to-CEP migration")
    p.add_argument("--within-from", type=_instant, help="override the query range start")
    p.add_argument("-o", "--output", help="write results here instead of stdout")
    p.add_argument("--config", help="JSON file with defaults for any flag")


def _add_engine(p: argparse.ArgumentParser) -> None:
    p.add_argument("--buffer-ms", type=int, help="semantic buffering window (0 = off)")
    p.add_argument("--cache-capacity", type=int, help="semantic cache entries (0 = off)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kcep", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run queries over an event file")
    _add_inputs(run)
    _add_engine(run)
    run.add_argument("--strategy", choices=["replay", "rewrite", "plain", "hybrid"], help="archive strategy")
    run.add_argument("--submit-at", type=_instant, help="query submission instant (default: first event)")
    run.add_argument("--archive-path", help="persist the archive log at this path")
    run.add_argument("--retention-min", type=float, help="archive retention in minutes")
    run.add_argument("--gap-ms", type=int, help="archive visibility lag (negative: archive runs ahead)")
    run.add_argument("--fail-at", type=_instant, help="real-time outage start")
    run.add_argument("--recover-at", type=_instant, help="real-time outage end")
    run.add_argument("--budget", type=int, help="join budget for archive path queries")
    run.add_argument("--explain", action="store_true", default=None, help="print the execution plan only")
    run.add_argument("--metrics", help="write metrics JSON here instead of stderr")

    gen = sub.add_parser("gen", help="generate a synthetic event stream")
    gen.add_argument("--sensors", type=int, help="number of airflow sensors")
    gen.add_argument("--events", type=int, help="number of events")
    gen.add_argument("--rate", type=float, help="events per second of event time")
    gen.add_argument("--seed", type=int, help="random seed")
    gen.add_argument("--start", type=_instant, help="first event instant")
    gen.add_argument("--ontology-out", help="also write a matching campus ontology here")
    gen.add_argument("-o", "--output", help="write events here instead of stdout")
    gen.add_argument("--config", help="JSON file with defaults for any flag")

    orc = sub.add_parser("oracle", help="brute-force reference matches")
    _add_inputs(orc)
    orc.add_argument("--now", type=_instant, help="instant used for relative ranges (default: first event)")

    exp = sub.add_parser("explain", help="show the parsed, optimized and planned query")
    _add_inputs(exp)
    exp.add_argument("--strategy", choices=["replay", "rewrite", "plain", "hybrid"])
    exp.add_argument("--submit-at", type=_instant)
    exp.add_argument("--retention-min", type=float)
    exp.add_argument("--gap-ms", type=int)

    bn = sub.add_parser("bench", help="throughput, recovery and calibration benchmarks")
    bn.add_argument("kind", choices=["throughput", "recovery", "calibrate"])
    _add_inputs(bn)
    bn.add_argument("--sensors", type=int, help="generated corpus: sensors")
    bn.add_argument("--num-events", type=int, help="generated corpus: events (ignored with --events)")
    bn.add_argument("--seed", type=int, help="generated corpus: seed")
    bn.add_argument("--event-rate", type=float, help="generated corpus: events per second of event time")
    bn.add_argument("--rate", type=_csv(float), help="comma-separated input rates (events/s)")
    bn.add_argument("--buffers-ms", type=_csv(int), help="two buffering windows")
    bn.add_argument("--cache-small", type=int, help="smaller cache capacity (entries)")
    bn.add_argument("--cache-large", type=int, help="larger cache capacity (entries)")
    _add_engine(bn)
    bn.add_argument("--downtimes-min", type=_csv(float), help="recovery downtimes in minutes")
    bn.add_argument("--strategies", type=_csv(str), help="recovery strategies")
    bn.add_argument("--retention-min", type=float)
    bn.add_argument("--fail-after-s", type=float, help="outage start, seconds after the first event")
    bn.add_argument("--budget", type=int, help="join budget for archive path queries")
    bn.add_argument("--repeats", type=int, help="wall-clock repeats per point (minimum is kept)")
    bn.add_argument("--model", help="cost-model JSON (from 'bench calibrate')")
    bn.add_argument("--wall-clock", action="store_true", default=None, help="measure instead of modeling time")
    return ap


GEN_DEFAULTS = {"sensors": 20, "events": 1000, "rate": 10.0, "seed": 0}
BENCH_DEFAULTS = {"sensors": 20, "num_events": 120_000, "seed": 0, "event_rate": 10.0, "rate": list(B.DEFAULT_RATES),
                  "buffers_ms": [1000, 2000], "cache_small": 1, "cache_large": 5, "buffer_ms": 2000,
                  "cache_capacity": 5, "downtimes_min": [1.0, 4.0, 7.0, 11.5],
                  "strategies": ["REPLAY", "HYBRID", "PLAIN"], "retention_min": 15.0, "fail_after_s": 30.0,
                  "budget": 100_000, "repeats": 1}


def parse_args(argv: Optional[list] = None) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    defaults = {}
    if args.command == "gen":
        defaults.update(GEN_DEFAULTS)
    elif args.command == "bench":
        defaults.update(BENCH_DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise CliError("config file must hold a JSON object")
        known = set(vars(args))
        for k, v in doc.items():
            key = k.replace("-", "_")
            if key not in known or key in ("command", "config"):
                raise CliError(f"unknown config key {k!r} for {args.command}")
            defaults[key] = v
    for k, v in defaults.items():
        if getattr(args, k, None) is None:
            setattr(args, k, v)
    return args


# -- shared loading ------------------------------------------------------------------

def _query_path(ref: str) -> str:
    if os.path.exists(ref):
        return ref
    packaged = os.path.join(DATA, ref if ref.endswith(".xcep") else ref + ".xcep")
    if os.path.exists(packaged):
        return packaged
    raise CliError(f"query file not found: {ref}")


def load_context(args):
    kb = load_ontology(open(args.ontology or DEFAULT_ONTOLOGY, encoding="utf-8").read())
    defs = load_stream_defs(args.mappings or DEFAULT_MAPPINGS)
    return kb, defs


def load_queries(args, kb, defs, default: Optional[list] = None) -> list:
    refs = args.query or default
    if not refs:
        raise CliError("at least one --query is required")
    out = []
    for ref in refs:
        path = _query_path(ref)
        qid = os.path.splitext(os.path.basename(path))[0]
        q = parse(open(path, encoding="utf-8").read(), qid=qid)
        issues = validate_against(q, defs, kb)
        errors = [i for i in issues if i.kind != "unknown-iri"]
        if errors:
            raise CliError("; ".join(f"{qid}: {i.detail}" for i in errors))
        for i in issues:
            if i.kind == "unknown-iri":
                print(json.dumps({"warning": i.kind, "query": qid, "message": i.detail}), file=sys.stderr)
        if args.within_from is not None:
            q = replace(q, within=TimeRange(args.within_from))
        out.append(q)
    return out


def optimized(q, kb, defs, args):
    if args.no_compile_opt:
        return q
    oq = optimize(q, kb, defs)
    return oq[0] if isinstance(oq, tuple) else oq


def _out(args):
    return open(args.output, "w", encoding="utf-8") if args.output else sys.stdout


def _write_results(fh, matches) -> None:
    for m in matches:
        fh.write(json.dumps(m.to_json(), sort_keys=True) + "\n")


def _retention(args) -> Optional[int]:
    return int(args.retention_min * 60_000) if args.retention_min is not None else None


# -- commands ------------------------------------------------------------------------

def cmd_run(args) -> int:
    if not args.events:
        raise CliError("--events is required")
    kb, defs = load_context(args)
    queries = [optimized(q, kb, defs, args) for q in load_queries(args, kb, defs)]
    events = load_events(args.events, defs)
    if not events:
        raise CliError("event file is empty")
    t0s = args.submit_at if args.submit_at is not None else events[0].timestamp
    fork = ForkConfig(args.gap_ms or 0, args.fail_at, args.recover_at)
    strategy = args.strategy or "hybrid"
    if args.explain:
        plans = [initial_plan(q, events, defs, t0s, fork=fork, strategy=strategy,
                              retention_ms=_retention(args)).to_json() for q in queries]
        fh = _out(args)
        fh.write(json.dumps(plans if len(plans) > 1 else plans[0], indent=2, sort_keys=True) + "\n")
        return 0
    config = PipelineConfig(buffer_ms=args.buffer_ms or 0, cache_capacity=args.cache_capacity or 0)
    kwargs = {}
    if args.budget is not None:
        kwargs["budget"] = args.budget
    matches = []
    metrics = {"queries": {}}
    for q in queries:
        path = args.archive_path
        if path and len(queries) > 1:
            path = f"{path}.{q.qid}"
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            run = run_integrated(q, events, kb, defs, t0s, fork=fork, strategy=strategy, config=config,
                                 retention_ms=_retention(args), archive_path=path, **kwargs)
        matches.extend(run.matches)
        entry = {"matches": len(run.matches), "plan": run.plan.to_json(), "engines": run.engine_metrics,
                 "archiveTasks": run.archive_stats, "warnings": [str(w.message) for w in caught]}
        if run.recovery is not None:
            entry["recovery"] = run.recovery.as_dict()
        metrics["queries"][q.qid] = entry
    matches.sort(key=lambda m: (m.sort_key, m.query_id))
    _write_results(_out(args), matches)
    doc = json.dumps(metrics, sort_keys=True, default=str)
    if args.metrics:
        with open(args.metrics, "w", encoding="utf-8") as fh:
            fh.write(doc + "\n")
    else:
        print(doc, file=sys.stderr)
    return 0


def cmd_gen(args) -> int:
    start = {} if args.start is None else {"start": args.start}
    events = generate_microgrid_stream(sensors=args.sensors, events=args.events, rate=args.rate, seed=args.seed,
                                       **start)
    if args.output:
        write_events(events, args.output)
    else:
        from .events import event_to_line
        for e in events:
            sys.stdout.write(event_to_line(e) + "\n")
    if args.ontology_out:
        with open(args.ontology_out, "w", encoding="utf-8") as fh:
            fh.write(generate_campus_ontology(args.sensors))
    return 0


def cmd_oracle(args) -> int:
    if not args.events:
        raise CliError("--events is required")
    kb, defs = load_context(args)
    queries = load_queries(args, kb, defs)
    events = load_events(args.events, defs)
    now = args.now if args.now is not None else (events[0].timestamp if events else None)
    out = []
    for q in queries:
        out.extend(oracle_match(q, events, kb, defs, now=now))
    out.sort(key=lambda m: (m.sort_key, m.query_id))
    _write_results(_out(args), out)
    return 0


def cmd_explain(args) -> int:
    kb, defs = load_context(args)
    docs = []
    for q in load_queries(args, kb, defs):
        doc = {"query": q.qid, "parsed": format_query(q)}
        oq = optimized(q, kb, defs, args)
        doc["optimized"] = format_query(oq)
        doc["neverMatches"] = oq.never
        doc["compiled"] = {"variables": list(oq.variables), "semanticSubqueries": len(oq.semantic),
                           "aggregate": oq.is_aggregate}
        if args.events:
            events = load_events(args.events, defs)
            if events:
                t0s = args.submit_at if args.submit_at is not None else events[0].timestamp
                doc["plan"] = initial_plan(oq, events, defs, t0s, fork=ForkConfig(args.gap_ms or 0),
                                           strategy=args.strategy or "hybrid",
                                           retention_ms=_retention(args)).to_json()
        docs.append(doc)
    _out(args).write(json.dumps(docs if len(docs) > 1 else docs[0], indent=2, sort_keys=True) + "\n")
    return 0


def _bench_events(args, defs):
    if args.events:
        return load_events(args.events, defs)
    return generate_microgrid_stream(sensors=args.sensors, events=args.num_events, rate=args.event_rate,
                                     seed=args.seed)


def _model(args) -> CostModel:
    if not args.model:
        return CostModel()
    with open(args.model, encoding="utf-8") as fh:
        doc = json.load(fh)
    return CostModel(**doc.get("model", doc))


def cmd_bench(args) -> int:
    kb, defs = load_context(args)
    clock_mode = "wall" if args.wall_clock else "simulated"
    model = _model(args)
    events = _bench_events(args, defs)
    if not events:
        raise CliError("no events to benchmark")
    queries = [optimized(q, kb, defs, args) for q in load_queries(args, kb, defs, default=["q4"])]
    doc = {"kind": args.kind, "clock": clock_mode, "events": len(events)}
    if clock_mode == "simulated" and args.kind != "calibrate":
        doc["model"] = model.as_dict()
    if args.kind == "calibrate":
        with open(_query_path("q3"), encoding="utf-8") as fh:
            join = optimized(parse(fh.read(), qid="q3"), kb, defs, args)
        doc["model"] = B.calibrate(queries[0], events[:3000], kb, defs, join_query=join).as_dict()
    elif args.kind == "throughput":
        small, large = args.cache_small, args.cache_large
        configs = B.standard_configs(small, large, tuple(args.buffers_ms))
        doc["rates"] = list(args.rate)
        doc["queries"] = {}
        for q in queries:
            reports = B.throughput_sweep(q, events, kb, defs, configs, rates=args.rate, clock_mode=clock_mode,
                                         model=model, repeats=args.repeats)
            doc["queries"][q.qid] = {
                "uniqueCacheKeys": B.unique_cache_keys(q, events, kb, defs) if q.semantic else 0,
                "configs": [r.as_dict() for r in reports]}
    else:
        fail_at = events[0].timestamp + int(args.fail_after_s * 1000)
        downtimes = [int(m * 60_000) for m in args.downtimes_min]
        config = PipelineConfig(buffer_ms=args.buffer_ms, cache_capacity=args.cache_capacity)
        doc["downtimesMs"] = downtimes
        doc["queries"] = {}
        for q in queries:
            rows = B.recovery_sweep(q, events, kb, defs, downtimes, args.strategies, fail_at,
                                    retention_ms=_retention(args), config=config, clock_mode=clock_mode,
                                    model=model, budget=args.budget)
            doc["queries"][q.qid] = [r.as_dict() for r in rows]
    _out(args).write(B.report_json(doc) + "\n")
    return 0


COMMANDS = {"run": cmd_run, "gen": cmd_gen, "oracle": cmd_oracle, "explain": cmd_explain, "bench": cmd_bench}


def main(argv: Optional[list] = None) -> int:
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except BrokenPipeError:
        # the reader went away (for example ``| head``); stop quietly like other filters
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except (CliError, json.JSONDecodeError) + HANDLED as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
