"""Acceptance criteria, one test per criterion.

Each test carries a ``criterion`` marker; the conftest prints one PASS/FAIL
line per criterion at the end of the session.
"""
import asyncio
import json
import random
import subprocess
import sys
import time
from fractions import Fraction

import pytest

from mcp_mediator import cost
from mcp_mediator.blueprint import blueprint_to_dict, serialize_blueprint, validate_structure
from mcp_mediator.cli import main as cli_main
from mcp_mediator.engine import execute
from mcp_mediator.mocks import DESK_SHAPE, FULL_SHAPE, SINGLE_NAMESPACE_SHAPE, GraphServer, ResourceServer
from mcp_mediator.mocks import generate_fixture, make_sync_blueprint
from mcp_mediator.mocks.sync import phase_of
from mcp_mediator.pool import ClientPool, ServerConfig
from mcp_mediator.protocol import McpSession
from mcp_mediator.server import MediatorServer
from mcp_mediator.store import WorkflowStore
from mcp_mediator.templates import ResolveError, ResolverContext, resolve_path, resolve_value
from mcp_mediator.transports import memory_pair

from helpers import call, graph_contents, in_process, make_bp, oracle_graph, run, run_bp

DESK_NAMESPACES = 3
DESK_KINDS = ("Node", "Deployment", "ReplicaSet", "Pod")


# ------------------------------------------------------------------ 1


@pytest.mark.criterion(1, "cost table parity (table preset)")
def test_cost_table_parity(capsys):
    t0 = time.perf_counter()
    assert cli_main(["cost", "--preset", "table"]) == 0
    elapsed = time.perf_counter() - t0
    rows = {}
    for line in capsys.readouterr().out.splitlines():
        parts = line.split()
        if len(parts) == 4 and parts[0].isdigit():
            rows[int(parts[0])] = (int(parts[2].replace(",", "")), parts[3])
    assert rows[1] == (54_150, "95.7%")
    assert rows[5] == (54_750, "99.1%")
    assert rows[10] == (55_500, "99.6%")
    assert rows[365] == (108_750, "99.98%")
    assert elapsed < 1.0


# ------------------------------------------------------------------ 2


@pytest.mark.criterion(2, "appendix arithmetic")
def test_appendix_arithmetic():
    t0 = time.perf_counter()
    inputs = cost.PRESETS["appendix"]
    assert cost.agent_cost(cost.APPENDIX_PHASES) == 1_315_200
    marginal_pp = cost.marginal_savings(inputs) * 100
    assert abs(marginal_pp - Fraction(99989, 1000)) <= Fraction(1, 1000)
    assert cost.smallest_k(Fraction(99, 100), inputs) == 5
    assert abs(cost.break_even(inputs) - Fraction(411, 10_000)) <= Fraction(5, 10_000)
    assert time.perf_counter() - t0 < 1.0


# ------------------------------------------------------------------ 3


@pytest.mark.criterion(3, "generated blueprint structure 67 = 8/39/20, single-namespace 27")
def test_blueprint_structure():
    full = make_sync_blueprint(FULL_SHAPE)
    phases = [0, 0, 0]
    for step in full.steps:
        phases[phase_of(step.id, full) - 1] += 1
    assert len(full.steps) == 67 and phases == [8, 39, 20]
    assert validate_structure(full).errors == ()
    single = make_sync_blueprint(SINGLE_NAMESPACE_SHAPE)
    assert len(single.steps) == 27 and validate_structure(single).errors == ()


# ------------------------------------------------------------------ 4 + 5


def _expected_counts():
    fx = generate_fixture(seed=0, namespaces=DESK_NAMESPACES, kinds=DESK_KINDS)
    nodes, rels = oracle_graph(fx, DESK_SHAPE.kinds, DESK_SHAPE.relationships)
    by_label: dict[str, int] = {}
    for label, _ in nodes:
        by_label[label] = by_label.get(label, 0) + 1
    by_type: dict[str, int] = {}
    for rtype, _, _ in rels:
        by_type[rtype] = by_type.get(rtype, 0) + 1
    return fx, nodes, rels, by_label, by_type


async def _graph_counts(url, labels, types):
    pool = ClientPool([ServerConfig("graph", "streamable-http", url=url)])
    async with pool:
        async def q(text):
            out = await pool.call_tool("run_query", {"graph": "cmdb-prod", "query": text})
            return out.content["matched"]
        totals = (await q("MATCH (n) RETURN count(n)"), await q("MATCH ()-[r]->() RETURN count(r)"))
        per_label = {lb: await q(f"MATCH (n:{lb}) RETURN count(n)") for lb in labels}
        per_type = {t: await q(f"MATCH ()-[r:{t}]->() RETURN count(r)") for t in types}
    return totals, per_label, per_type


@pytest.fixture(scope="module")
def desk_sync(tmp_path_factory):
    """Graph mock over HTTP, resource mock over stdio, the ``run`` command twice."""
    tmp = tmp_path_factory.mktemp("desk")
    graph = subprocess.Popen([sys.executable, "-m", "mcp_mediator.mocks", "graph", "--http", "0"],
                             stderr=subprocess.PIPE, text=True)
    try:
        url = graph.stderr.readline().strip() + "/mcp"
        config = tmp / "servers.json"
        config.write_text(json.dumps({"servers": [
            {"name": "k8s", "command": sys.executable,
             "args": ["-m", "mcp_mediator.mocks", "resource", "--seed", "0",
                      "--namespaces", str(DESK_NAMESPACES), "--kinds", ",".join(DESK_KINDS)]},
            {"name": "graph", "transport": "streamable-http", "url": url},
        ]}))
        blueprint = tmp / "desk.json"
        blueprint.write_text(serialize_blueprint(make_sync_blueprint(DESK_SHAPE)))
        _, _, _, by_label, by_type = _expected_counts()
        runs = []
        for _ in range(2):
            t0 = time.perf_counter()
            proc = subprocess.run([sys.executable, "-m", "mcp_mediator", "run", str(blueprint), "--config",
                                   str(config), "--store", str(tmp / "store"), "--json"],
                                  capture_output=True, text=True, timeout=60)
            elapsed = time.perf_counter() - t0
            counts = run(_graph_counts(url, sorted(by_label), sorted(by_type)))
            runs.append((proc, elapsed, counts))
        yield runs
    finally:
        graph.terminate()
        graph.wait(5)


@pytest.mark.criterion(4, "desk-scale end-to-end sync equals brute-force oracle")
def test_desk_sync_matches_oracle(desk_sync):
    proc, elapsed, (totals, per_label, per_type) = desk_sync[0]
    assert proc.returncode == 0, proc.stderr
    result = json.loads(proc.stdout)
    assert result["status"] == "success"
    assert all(r["status"] == "ok" for r in result["stepResults"])
    bp = make_sync_blueprint(DESK_SHAPE)
    assert bp.error_strategy.on_step_failure == "continue"
    _, nodes, rels, by_label, by_type = _expected_counts()
    assert totals == (len(nodes), len(rels))
    assert per_label == by_label and per_type == by_type
    assert elapsed < 10.0
    # exact keyed contents, in-process
    fx = generate_fixture(seed=0, namespaces=DESK_NAMESPACES, kinds=DESK_KINDS)
    gs = GraphServer()
    assert run_bp(bp, servers=[ResourceServer(fx), gs]).status == "success"
    assert graph_contents(gs) == (nodes, rels)


@pytest.mark.criterion(5, "idempotent re-run")
def test_rerun_is_idempotent(desk_sync):
    (first, _, counts_1), (second, _, counts_2) = desk_sync
    assert first.returncode == 0 and second.returncode == 0
    assert json.loads(second.stdout)["status"] == "success"
    assert counts_2 == counts_1


# ------------------------------------------------------------------ 6


@pytest.mark.criterion(6, "single trigger: 1 upstream tools/call, all downstream calls done by the engine")
def test_single_trigger(tmp_path):
    fx, _, rels, by_label, _ = _expected_counts()
    # every call the sync expands to, counted from the fixture
    n = len(fx.namespaces)
    expanded = 3 + n + by_label["Node"] + sum(n + by_label[k] for k in DESK_SHAPE.namespaced_kinds) + len(rels)
    k8s, graph = ResourceServer(fx), GraphServer()
    store = WorkflowStore(tmp_path)
    bp = make_sync_blueprint(DESK_SHAPE)
    store.save(bp)

    async def go():
        pool = await in_process(k8s, graph).initialize()
        mediator = MediatorServer(store, pool)
        client, server_side = memory_pair()
        task = asyncio.create_task(mediator.serve(server_side))
        session = McpSession(client, "mediator")
        await session.initialize()
        result = await session.call_tool("run_workflow", {"id": bp.id})
        await session.close()
        await task
        await pool.close()
        return mediator, json.loads(result["content"][0]["text"])

    mediator, result = run(go())
    assert result["status"] == "success"
    downstream = k8s.received["tools/call"] + graph.received["tools/call"]
    assert mediator.received["tools/call"] == 1
    assert downstream >= expanded


# ------------------------------------------------------------------ 7


@pytest.mark.criterion(7, "parallel ablation: parallel < 0.6 x sequential")
def test_parallel_ablation():
    branches = [call(f"s{i}", "sleep_ms", ms=200) for i in range(3)]
    parallel = make_bp([{"id": "p", "type": "parallel", "branches": branches}], id="par")
    sequential = make_bp([{"id": "p", "type": "pipe", "steps": branches}], id="seq")

    async def timed(bp):
        async with in_process(ResourceServer()) as pool:
            t0 = time.perf_counter()
            result = await execute(bp, {}, pool)
            return result, time.perf_counter() - t0

    t_start = time.perf_counter()
    par, t_par = run(timed(parallel))
    seq, t_seq = run(timed(sequential))
    assert par.status == seq.status == "success"
    assert t_par < 0.6 * t_seq
    assert time.perf_counter() - t_start < 5.0


# ------------------------------------------------------------------ 8


@pytest.mark.criterion(8, "error strategies abort / continue+collectErrors / retry")
def test_error_strategies():
    steps = [call("s1", "echo", i=1), call("s2", "fail_n_times", n=99, key="a"), call("s3", "echo", i=3),
             call("s4", "fail_n_times", n=99, key="b"), call("s5", "echo", i=5)]

    def shape(r):
        return [(s.step_id, s.status, s.output) for s in r.step_results]

    aborted = run_bp(make_bp(steps))
    continued = run_bp(make_bp(steps, errorStrategy={"onStepFailure": "continue", "collectErrors": True}))
    # (a)
    assert aborted.status == "failure" and [s.step_id for s in aborted.step_results] == ["s1", "s2"]
    assert shape(continued)[:2] == shape(aborted)
    # (b)
    assert continued.status == "partial" and len(continued.step_results) == 5
    assert [(e["stepId"], e["code"]) for e in continued.collected_errors] == [("s2", "tool-error"), ("s4", "tool-error")]
    # (c)
    retried = run_bp(make_bp([call("r", "fail_n_times", n=2)],
                             errorStrategy={"onStepFailure": "retry", "maxRetries": 2, "retryDelayMs": 10}))
    step = retried.step_results[0]
    assert step.status == "ok" and step.error is None and step.attempts == 3


# ------------------------------------------------------------------ 9


def _random_json(rng, depth=0):
    roll = rng.random()
    if depth >= 4 or roll < 0.35:
        return rng.choice([None, True, False, rng.randint(-1000, 1000), rng.random() * 100,
                           "".join(rng.choice("abc xyz") for _ in range(rng.randint(0, 6)))])
    if roll < 0.65:
        return [_random_json(rng, depth + 1) for _ in range(rng.randint(0, 4))]
    return {rng.choice("abcdefgh") + str(rng.randint(0, 9)): _random_json(rng, depth + 1)
            for _ in range(rng.randint(0, 4))}


def _random_path(rng, doc):
    parts, node = [], doc
    while rng.random() < 0.8:
        if isinstance(node, dict) and node:
            key = rng.choice(sorted(node))
        elif isinstance(node, list) and node:
            key = str(rng.randrange(len(node)))
        else:
            break
        parts.append(key)
        node = node[key] if isinstance(node, dict) else node[int(key)]
    if rng.random() < 0.25:
        parts.append(rng.choice(["zz9", "7", "0", "missing"]))
    return parts


def _brute(doc, parts):
    for p in parts:
        if isinstance(doc, dict) and p in doc:
            doc = doc[p]
        elif isinstance(doc, list) and p.isdigit() and int(p) < len(doc):
            doc = doc[int(p)]
        else:
            raise LookupError(p)
    return doc


@pytest.mark.criterion(9, "resolver property suite (1,000 documents)")
def test_resolver_properties():
    rng = random.Random(20240601)
    agree = total = 0
    kinds_seen = set()
    for _ in range(1000):
        doc = {"root": _random_json(rng)}
        ctx = ResolverContext({}, {"s": doc})
        for _ in range(3):
            parts = _random_path(rng, doc)
            path = ".".join(["steps", "s", *parts])
            total += 1
            try:
                expected = _brute(doc, parts)
            except LookupError:
                try:
                    resolve_path(path, ctx)
                except ResolveError:
                    agree += 1
                continue
            try:
                got = resolve_path(path, ctx)
            except ResolveError:
                continue
            agree += got == expected and type(got) is type(expected)
        # whole-value type preservation and determinism
        value = doc["root"]
        kinds_seen.add(type(value).__name__)
        first = resolve_value("{{steps.s.root}}", ctx)
        assert first == value and type(first) is type(value)
        assert resolve_value({"a": "{{steps.s.root}}", "b": "x{{steps.s.root}}"}, ctx) == \
            resolve_value({"a": "{{steps.s.root}}", "b": "x{{steps.s.root}}"}, ctx)
    assert agree == total
    assert {"list", "dict", "int", "float", "bool", "NoneType"} <= kinds_seen


# ------------------------------------------------------------------ 10


@pytest.mark.criterion(10, "validation tiers: invalid never persisted, unknown tools warn but persist")
def test_validation_tiers(tmp_path):
    store = WorkflowStore(tmp_path / "store")
    store.save(make_bp([call("a", "echo")], id="existing"))

    def snapshot():
        return {p.name: p.read_bytes() for p in store.workflows_dir.iterdir()}

    invalid = blueprint_to_dict(make_bp([call("a", "echo"), call("a", "echo", v="{{params.nope}}")], id="bad"))
    unknown = blueprint_to_dict(make_bp([call("a", "not_a_real_tool")], id="good"))

    async def go():
        async with in_process(ResourceServer(), GraphServer()) as pool:
            mediator = MediatorServer(store, pool)
            before = snapshot()
            r1 = await mediator.call_tool("create_workflow", {"blueprint": invalid})
            after_invalid = snapshot()
            r2 = await mediator.call_tool("create_workflow", {"blueprint": unknown})
            return before, after_invalid, r1, r2

    before, after_invalid, r1, r2 = run(go())
    assert r1["isError"] and after_invalid == before
    body = json.loads(r2["content"][0]["text"])
    assert body["ok"] and len(body["warnings"]) >= 1
    assert store.exists("good")
