import asyncio
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcp_mediator.engine import EngineError, InvalidBlueprint, ParamError, RunRequest, RunResult, execute, merge_params
from mcp_mediator.mocks import ResourceServer
from mcp_mediator.pool import ClientPool

from helpers import call, in_process, make_bp, run, run_bp

CONTINUE = {"onStepFailure": "continue"}


def echo_args(server):
    return [c["arguments"] for c in server.call_log if c["name"] == "echo"]


class TestExecute:
    def test_zero_steps(self):
        result = run_bp(make_bp([]))
        assert result.status == "success" and result.step_results == []

    def test_abort_stops_at_first_error(self):
        bp = make_bp([call("s1", "fail_n_times", n=1), call("s2", "echo")])
        result = run_bp(bp)
        assert result.status == "failure"
        assert [r.step_id for r in result.step_results] == ["s1"]
        assert result.step_results[0].error["code"] == "tool-error"

    def test_continue_records_partial(self):
        bp = make_bp([call("s1", "fail_n_times", n=1), call("s2", "echo", a=1)], errorStrategy=CONTINUE)
        result = run_bp(bp)
        assert result.status == "partial"
        assert [r.status for r in result.step_results] == ["error", "ok"]
        assert result.collected_errors is None

    def test_collect_errors(self):
        bp = make_bp([call("s1", "fail_n_times", n=1), call("s2", "nope")],
                     errorStrategy={"onStepFailure": "continue", "collectErrors": True})
        result = run_bp(bp)
        assert [(e["stepId"], e["code"]) for e in result.collected_errors] == \
            [("s1", "tool-error"), ("s2", "tool-not-found")]

    def test_outputs_feed_later_steps(self):
        bp = make_bp([call("ns", "list_namespaces"), call("e", "echo", first="{{steps.ns[0]}}", all="{{steps.ns}}")])
        out = run_bp(bp).step_results[1].output
        assert out == {"first": "platform-core", "all": ["platform-core", "data-services", "ml-workloads"]}

    def test_pool_must_be_initialized(self):
        with pytest.raises(EngineError):
            run(execute(make_bp([]), {}, ClientPool([])))
        with pytest.raises(EngineError):
            run(execute(make_bp([]), {}, None))

    def test_invalid_blueprint_raises(self):
        with pytest.raises(InvalidBlueprint):
            run_bp(make_bp([call("a", "echo"), call("a", "echo")]))

    def test_request_id_mismatch(self):
        with pytest.raises(EngineError):
            run_bp(make_bp([]), RunRequest("other", {}))

    def test_result_shape(self):
        result = run_bp(make_bp([call("a", "echo", x=1)]))
        d = result.to_dict()
        assert list(d) == ["runId", "workflowId", "status", "startedAt", "finishedAt", "stepResults"]
        assert re.fullmatch(r"[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}", d["runId"])
        assert d["stepResults"][0]["status"] == "ok" and "error" not in d["stepResults"][0]
        assert RunResult.from_dict(d).to_dict() == d

    def test_run_ids_unique(self):
        bp = make_bp([])
        assert len({run_bp(bp).run_id for _ in range(5)}) == 5

    def test_resolve_error_is_step_error(self):
        bp = make_bp([call("a", "echo", v="{{params.p.missing}}")], params={"p": {"type": "object", "default": {}}})
        result = run_bp(bp)
        assert result.step_results[0].error["code"] == "resolve-error"


class TestCall:
    def test_echo_param(self):
        bp = make_bp([call("a", "echo", msg="{{params.graph}}")], params={"graph": {"type": "string"}})
        assert run_bp(bp, {"graph": "g1"}).step_results[0].output == {"msg": "g1"}

    def test_tool_not_found(self):
        r = run_bp(make_bp([call("a", "absent_tool")])).step_results[0]
        assert r.status == "error" and r.error["code"] == "tool-not-found"

    def test_qualified_tool(self):
        assert run_bp(make_bp([call("a", "k8s:echo", v=2)])).step_results[0].output == {"v": 2}

    def test_ambiguous_tool(self):
        r = run_bp(make_bp([call("a", "echo")]), servers=[ResourceServer(), ResourceServer(name="k8s-2")])
        assert r.step_results[0].error["code"] == "ambiguous-tool"

    def test_retry_then_success(self):
        bp = make_bp([call("a", "fail_n_times", n=2)],
                     errorStrategy={"onStepFailure": "retry", "maxRetries": 2, "retryDelayMs": 0})
        r = run_bp(bp)
        step = r.step_results[0]
        assert r.status == "success" and step.status == "ok" and step.error is None
        assert step.attempts == 3 and step.output["attempt"] == 3

    def test_retry_exhausted_degrades_to_continue(self):
        bp = make_bp([call("a", "fail_n_times", n=5), call("b", "echo")],
                     errorStrategy={"onStepFailure": "retry", "maxRetries": 2, "retryDelayMs": 0})
        r = run_bp(bp)
        assert r.status == "partial"
        assert r.step_results[0].error["attempts"] == 3
        assert r.step_results[1].ok

    def test_retry_then_abort(self):
        bp = make_bp([call("a", "fail_n_times", n=5), call("b", "echo")],
                     errorStrategy={"onStepFailure": "retry", "maxRetries": 1, "retryThenAbort": True})
        r = run_bp(bp)
        assert r.status == "failure" and len(r.step_results) == 1

    def test_retry_delay_fixed(self):
        bp = make_bp([call("a", "fail_n_times", n=2)],
                     errorStrategy={"onStepFailure": "retry", "maxRetries": 2, "retryDelayMs": 50})
        r = run_bp(bp)
        assert r.step_results[0].duration_ms >= 100

    def test_no_retry_for_route_errors(self):
        bp = make_bp([call("a", "missing")], errorStrategy={"onStepFailure": "retry", "maxRetries": 3})
        assert run_bp(bp).step_results[0].attempts == 1

    def test_continue_does_not_retry(self):
        bp = make_bp([call("a", "fail_n_times", n=1)], errorStrategy={"onStepFailure": "continue", "maxRetries": 3})
        assert run_bp(bp).step_results[0].attempts == 1


class TestLoop:
    def loop(self, over, do=None, as_="item"):
        return {"id": "l", "type": "loop", "over": over, "as": as_, "do": do or call("c", "echo", v="{{item}}")}

    def test_empty(self):
        k8s = ResourceServer()
        bp = make_bp([self.loop("{{params.xs}}")], params={"xs": {"type": "array", "default": []}})
        r = run_bp(bp, servers=[k8s])
        assert r.step_results[0].output == [] and k8s.call_log == []

    def test_order(self):
        bp = make_bp([self.loop("{{params.xs}}")], params={"xs": {"type": "array"}})
        xs = ["a", "b", "c"]
        assert run_bp(bp, {"xs": xs}).step_results[0].output == [{"v": x} for x in xs]

    def test_string_is_type_mismatch(self):
        bp = make_bp([self.loop("{{params.xs}}")], params={"xs": {"type": "string", "default": "abc"}})
        assert run_bp(bp).step_results[0].error["code"] == "type-mismatch"

    def test_binding_not_visible_after_loop(self):
        bp = make_bp([self.loop("{{params.xs}}"), call("after", "echo", v="{{item}}")],
                     params={"xs": {"type": "array", "default": [1]}}, errorStrategy=CONTINUE)
        r = run_bp(bp)
        assert r.step_results[1].error["code"] == "resolve-error"

    def test_nested_loop_restores_outer_binding(self):
        inner = {"id": "inner", "type": "loop", "over": "{{params.ys}}", "as": "y",
                 "do": call("c", "echo", x="{{x}}", y="{{y}}")}
        bp = make_bp([{"id": "outer", "type": "loop", "over": "{{params.xs}}", "as": "x", "do": inner}],
                     params={"xs": {"type": "array", "default": [1, 2]}, "ys": {"type": "array", "default": ["a"]}})
        assert run_bp(bp).step_results[0].output == [[{"x": 1, "y": "a"}], [{"x": 2, "y": "a"}]]

    def test_sequential(self):
        k8s = ResourceServer()
        bp = make_bp([self.loop("{{params.xs}}", call("c", "sleep_ms", ms="{{item}}"))],
                     params={"xs": {"type": "array", "default": [30, 30, 30]}})
        r = run_bp(bp, servers=[k8s])
        assert r.step_results[0].duration_ms >= 90

    def test_iteration_failure_continue(self):
        bp = make_bp([self.loop("{{params.xs}}", call("c", "fail_n_times", n=1, key="{{item}}"))],
                     params={"xs": {"type": "array", "default": ["a", "a", "b"]}}, errorStrategy=CONTINUE)
        step = run_bp(bp).step_results[0]
        assert step.error["code"] == "iteration-failed"
        assert [("error" in o) for o in step.output] == [True, False, True]

    def test_iteration_failure_abort_stops(self):
        k8s = ResourceServer()
        bp = make_bp([self.loop("{{params.xs}}", call("c", "fail_n_times", n=1, key="{{item}}"))],
                     params={"xs": {"type": "array", "default": ["a", "b", "c"]}})
        r = run_bp(bp, servers=[k8s])
        assert r.status == "failure" and len(r.step_results[0].output) == 1
        assert len(k8s.call_log) == 1


class TestParallel:
    def test_single_branch_equals_sequential(self):
        par = make_bp([{"id": "p", "type": "parallel", "branches": [call("a", "echo", v=1)]}])
        seq = make_bp([call("a", "echo", v=1)])
        assert run_bp(par).step_results[0].output == [run_bp(seq).step_results[0].output]

    def test_all_settled(self):
        bp = make_bp([{"id": "p", "type": "parallel", "branches": [
            call("a", "echo", v=1), call("b", "fail_n_times", n=1), call("c", "echo", v=3)]}],
            errorStrategy=CONTINUE)
        step = run_bp(bp).step_results[0]
        assert step.status == "error" and step.error["code"] == "branch-failed"
        assert step.output[0] == {"v": 1} and step.output[2] == {"v": 3}
        assert step.output[1]["error"]["code"] == "tool-error"

    def test_abort_lets_siblings_settle(self):
        k8s = ResourceServer()
        bp = make_bp([{"id": "p", "type": "parallel", "branches": [
            call("a", "fail_n_times", n=1), call("b", "sleep_ms", ms=50)]}, call("after", "echo")])
        r = run_bp(bp, servers=[k8s])
        assert r.status == "failure" and len(r.step_results) == 1
        assert r.step_results[0].output[1] == {"sleptMs": 50}

    def test_branch_outputs_published(self):
        bp = make_bp([{"id": "p", "type": "parallel", "branches": [call("a", "echo", v=1), call("b", "echo", v=2)]},
                      call("c", "echo", a="{{steps.a.v}}", b="{{steps.b.v}}")])
        assert run_bp(bp).step_results[1].output == {"a": 1, "b": 2}

    def test_concurrent(self):
        bp = make_bp([{"id": "p", "type": "parallel",
                       "branches": [call(f"s{i}", "sleep_ms", ms=150) for i in range(3)]}])
        assert run_bp(bp).step_results[0].duration_ms < 400

    def test_max_concurrency_bounds_calls(self):
        bp = make_bp([{"id": "p", "type": "parallel",
                       "branches": [call(f"s{i}", "sleep_ms", ms=100) for i in range(4)]}])
        assert run_bp(bp, max_concurrency=1).step_results[0].duration_ms >= 400


class TestPipe:
    def test_prev(self):
        k8s = ResourceServer()
        bp = make_bp([{"id": "p", "type": "pipe", "steps": [
            call("a", "echo", count=5), call("b", "echo", n="{{prev.count}}")]}])
        r = run_bp(bp, servers=[k8s])
        assert echo_args(k8s)[1] == {"n": 5}
        assert r.step_results[0].output == {"n": 5}

    def test_single_step(self):
        pipe = make_bp([{"id": "p", "type": "pipe", "steps": [call("a", "echo", v=1)]}])
        assert run_bp(pipe).step_results[0].output == {"v": 1}

    def test_failure_stops_chain(self):
        k8s = ResourceServer()
        bp = make_bp([{"id": "p", "type": "pipe", "steps": [
            call("a", "echo"), call("b", "fail_n_times", n=1), call("c", "echo")]}], errorStrategy=CONTINUE)
        r = run_bp(bp, servers=[k8s])
        assert r.step_results[0].error["code"] == "pipe-step-failed"
        assert [c["name"] for c in k8s.call_log] == ["echo", "fail_n_times"]

    def test_prev_not_visible_in_first_step(self):
        bp = make_bp([{"id": "p", "type": "pipe", "steps": [call("a", "echo", v="{{prev}}")]}])
        assert run_bp(bp).step_results[0].error["code"] == "pipe-step-failed"


class TestCollect:
    def test_ok(self):
        bp = make_bp([{"id": "c", "type": "collect", "into": "logs",
                       "steps": [call("a", "echo", v=1), call("b", "echo", v=2)]}])
        assert run_bp(bp).step_results[0].output == {"logs": [{"v": 1}, {"v": 2}], "errors": []}

    def test_error_captured_not_aborting(self):
        bp = make_bp([{"id": "c", "type": "collect", "into": "logs",
                       "steps": [call("a", "echo", v=1), call("b", "fail_n_times", n=1)]}, call("z", "echo")])
        r = run_bp(bp)
        out = r.step_results[0].output
        assert r.status == "success" and len(r.step_results) == 2
        assert out["logs"] == [{"v": 1}]
        assert [(e["stepId"], e["code"]) for e in out["errors"]] == [("b", "tool-error")]

    def test_empty(self):
        bp = make_bp([{"id": "c", "type": "collect", "into": "logs", "steps": []}])
        assert run_bp(bp).step_results[0].output == {"logs": [], "errors": []}


class TestMergeParams:
    BP = make_bp([], params={"graph": {"type": "string", "default": "cmdb-prod"}})

    def test_override(self):
        assert merge_params(self.BP, {"graph": "cmdb-staging"}) == {"graph": "cmdb-staging"}

    def test_defaults(self):
        assert merge_params(self.BP, {}) == {"graph": "cmdb-prod"}

    def test_unknown(self):
        with pytest.raises(ParamError, match="bogus"):
            merge_params(self.BP, {"bogus": 1})

    def test_type_mismatch(self):
        with pytest.raises(ParamError):
            merge_params(self.BP, {"graph": 3})

    def test_missing_required(self):
        with pytest.raises(ParamError):
            merge_params(make_bp([], params={"n": {"type": "number"}}), {})

    def test_optional_without_default_omitted(self):
        bp = make_bp([], params={"n": {"type": "number", "required": False}})
        assert merge_params(bp, None) == {}

    def test_integer_is_number_but_bool_is_not(self):
        bp = make_bp([], params={"n": {"type": "number"}})
        assert merge_params(bp, {"n": 3}) == {"n": 3}
        with pytest.raises(ParamError):
            merge_params(bp, {"n": True})


def test_concurrent_runs_isolated():
    bp = make_bp([call("a", "echo", v="{{params.v}}")], params={"v": {"type": "number"}})

    async def both():
        async with in_process(ResourceServer()) as pool:
            return await asyncio.gather(*(execute(bp, {"v": i}, pool) for i in range(10)))

    results = run(both())
    assert [r.step_results[0].output for r in results] == [{"v": i} for i in range(10)]


# ------------------------------------------------------------- properties

_outcomes = st.lists(st.sampled_from(["ok", "fail", "missing"]), min_size=1, max_size=6)


def _steps_for(outcomes):
    out = []
    for i, kind in enumerate(outcomes):
        if kind == "ok":
            out.append(call(f"s{i}", "echo", i=i))
        elif kind == "fail":
            out.append(call(f"s{i}", "fail_n_times", n=99, key=f"k{i}"))
        else:
            out.append(call(f"s{i}", "no_such_tool"))
    return out


def _shape(result):
    return [(r.step_id, r.status, r.output) for r in result.step_results]


@settings(max_examples=40, deadline=None)
@given(_outcomes)
def test_abort_is_prefix_of_continue(outcomes):
    steps = _steps_for(outcomes)
    aborted = _shape(run_bp(make_bp(steps)))
    continued = _shape(run_bp(make_bp(steps, errorStrategy=CONTINUE)))
    assert continued[: len(aborted)] == aborted
    errors = [i for i, r in enumerate(continued) if r[1] == "error"]
    assert len(aborted) == (errors[0] + 1 if errors else len(continued))


@settings(max_examples=30, deadline=None)
@given(_outcomes)
def test_deterministic_and_status_rule(outcomes):
    bp = make_bp(_steps_for(outcomes), errorStrategy=CONTINUE)
    a, b = run_bp(bp), run_bp(bp)
    assert _shape(a) == _shape(b)
    assert (a.status == "success") == all(r.status != "error" for r in a.step_results)
    for r in a.step_results:
        assert (r.error is not None) == (r.status == "error")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-5, 5) | st.text(max_size=3), max_size=8))
def test_loop_index_aligned(xs):
    bp = make_bp([{"id": "l", "type": "loop", "over": "{{params.xs}}", "as": "x", "do": call("c", "echo", v="{{x}}")}],
                 params={"xs": {"type": "array"}})
    assert run_bp(bp, {"xs": xs}).step_results[0].output == [{"v": x} for x in xs]
