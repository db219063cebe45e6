"""Blueprint execution.

Top-level steps run strictly in document order.  After each step its output
is stored at ``steps.<id>`` in the resolver context so later templates can
reference it.  Step-level failures are data (a StepResult with status
``error``); only infrastructure faults raise.
"""
from __future__ import annotations

import asyncio
import json
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Mapping, Protocol

from .blueprint import (
    CallStep,
    CollectStep,
    LoopStep,
    ParallelStep,
    PipeStep,
    Step,
    WorkflowBlueprint,
    conforms,
    validate_structure,
)
from .pool import RouteError, ToolCallOutcome
from .templates import ResolveError, ResolverContext, resolve_value

DEFAULT_MAX_CONCURRENCY = 8


class EngineError(RuntimeError):
    """Infrastructure fault that prevents a run from starting."""


class ParamError(ValueError):
    pass


class InvalidBlueprint(ValueError):
    def __init__(self, report) -> None:
        first = report.errors[0]
        super().__init__(f"blueprint has {len(report.errors)} structural error(s); first: {first.message}")
        self.report = report


class ToolCaller(Protocol):
    initialized: bool

    async def call_tool(self, tool_name: str, params: Any = None) -> ToolCallOutcome: ...


@dataclass
class RunRequest:
    workflow_id: str
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class StepResult:
    step_id: str
    status: str  # ok | error | skipped
    output: Any = None
    error: dict[str, Any] | None = None
    duration_ms: int = 0
    attempts: int | None = None
    truncated: bool = False

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"stepId": self.step_id, "status": self.status, "output": self.output}
        if self.error is not None:
            out["error"] = self.error
        if self.attempts is not None:
            out["attempts"] = self.attempts
        out["durationMs"] = self.duration_ms
        if self.truncated:
            out["truncated"] = True
        return out

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "StepResult":
        return cls(
            step_id=obj["stepId"],
            status=obj["status"],
            output=obj.get("output"),
            error=obj.get("error"),
            duration_ms=obj.get("durationMs", 0),
            attempts=obj.get("attempts"),
            truncated=obj.get("truncated", False),
        )


@dataclass
class RunResult:
    run_id: str
    workflow_id: str
    status: str  # success | failure | partial
    step_results: list[StepResult]
    started_at: str
    finished_at: str
    collected_errors: list[dict[str, Any]] | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "runId": self.run_id,
            "workflowId": self.workflow_id,
            "status": self.status,
            "startedAt": self.started_at,
            "finishedAt": self.finished_at,
            "stepResults": [r.to_dict() for r in self.step_results],
        }
        if self.collected_errors is not None:
            out["collectedErrors"] = self.collected_errors
        return out

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False)

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "RunResult":
        return cls(
            run_id=obj["runId"],
            workflow_id=obj["workflowId"],
            status=obj["status"],
            step_results=[StepResult.from_dict(r) for r in obj["stepResults"]],
            started_at=obj["startedAt"],
            finished_at=obj["finishedAt"],
            collected_errors=obj.get("collectedErrors"),
        )

    @property
    def errors(self) -> list[StepResult]:
        return [r for r in self.step_results if r.status == "error"]


def merge_params(bp: WorkflowBlueprint, given: Mapping[str, Any] | None) -> dict[str, Any]:
    """Overlay runtime params on declared defaults."""
    given = dict(given or {})
    unknown = sorted(set(given) - set(bp.params))
    if unknown:
        raise ParamError(f"unknown param(s): {', '.join(unknown)}")
    merged: dict[str, Any] = {}
    for name, spec in bp.params.items():
        if name in given:
            value = given[name]
            if not conforms(value, spec.type):
                raise ParamError(f"param {name!r} must be a {spec.type}, got {type(value).__name__}")
            merged[name] = value
        elif spec.has_default:
            merged[name] = spec.default
        elif spec.required:
            raise ParamError(f"missing required param {name!r}")
    return merged


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z")


def _error_record(step_id: str, code: str, message: str, attempts: int | None, path: str) -> dict[str, Any]:
    rec = {"stepId": step_id, "path": path, "code": code, "message": message}
    if attempts is not None:
        rec["attempts"] = attempts
    return rec


class _Run:
    def __init__(self, bp: WorkflowBlueprint, pool: ToolCaller, max_concurrency: int) -> None:
        self.bp = bp
        self.pool = pool
        self.strategy = bp.error_strategy
        self.limit = asyncio.Semaphore(max_concurrency)

    async def run_step(self, step: Step, ctx: ResolverContext, sink: list, scope: str) -> StepResult:
        start = time.monotonic()
        if isinstance(step, CallStep):
            result = await self.exec_call(step, ctx, sink, scope)
        elif isinstance(step, LoopStep):
            result = await self.exec_loop(step, ctx, sink, scope)
        elif isinstance(step, ParallelStep):
            result = await self.exec_parallel(step, ctx, sink, scope)
        elif isinstance(step, PipeStep):
            result = await self.exec_pipe(step, ctx, sink, scope)
        elif isinstance(step, CollectStep):
            result = await self.exec_collect(step, ctx, sink, scope)
        else:
            raise EngineError(f"unknown step type {type(step).__name__}")
        result.duration_ms = int((time.monotonic() - start) * 1000)
        ctx.store(step.id, result.output)
        return result

    def _fail(self, step: Step, sink: list, scope: str, code: str, message: str,
              attempts: int | None = None, output: Any = None) -> StepResult:
        """Failure that originates at this step; recorded in the error sink."""
        error = {"code": code, "message": message}
        if attempts is not None:
            error["attempts"] = attempts
        sink.append(_error_record(step.id, code, message, attempts, scope + step.id))
        return StepResult(step.id, "error", output, error, attempts=attempts)

    async def exec_call(self, step: CallStep, ctx: ResolverContext, sink: list, scope: str) -> StepResult:
        try:
            tool = resolve_value(step.tool, ctx)
            params = resolve_value(step.params, ctx)
        except ResolveError as exc:
            return self._fail(step, sink, scope, "resolve-error", str(exc), attempts=0)
        retries = self.strategy.retries
        attempts = 0
        while True:
            attempts += 1
            try:
                async with self.limit:
                    outcome = await self.pool.call_tool(tool, params)
            except RouteError as exc:
                return self._fail(step, sink, scope, exc.code, str(exc), attempts=attempts)
            if outcome.ok:
                return StepResult(step.id, "ok", outcome.content, attempts=attempts)
            if attempts > retries:
                code = "tool-error" if outcome.is_error else "transport-error"
                return self._fail(step, sink, scope, code, outcome.error or "tool call failed",
                                  attempts=attempts, output=outcome.content if outcome.is_error else None)
            if self.strategy.retry_delay_ms:
                await asyncio.sleep(self.strategy.retry_delay_ms / 1000)

    async def exec_loop(self, step: LoopStep, ctx: ResolverContext, sink: list, scope: str) -> StepResult:
        try:
            items = resolve_value(step.over, ctx)
        except ResolveError as exc:
            return self._fail(step, sink, scope, "resolve-error", str(exc))
        if not isinstance(items, list):
            return self._fail(step, sink, scope, "type-mismatch",
                              f"loop 'over' resolved to {type(items).__name__}, expected an array")
        outputs: list[Any] = []
        failed = 0
        for i, item in enumerate(items):
            inner = await self.run_step(step.do, ctx.child(**{step.as_: item}), sink, f"{scope}{step.id}[{i}]/")
            if inner.ok:
                outputs.append(inner.output)
                continue
            failed += 1
            outputs.append({"error": inner.error})
            if self.strategy.halts_on_error:
                break
        if failed:
            return StepResult(step.id, "error", outputs, {
                "code": "iteration-failed",
                "message": f"{failed} of {len(items)} iteration(s) failed",
            })
        return StepResult(step.id, "ok", outputs)

    async def exec_parallel(self, step: ParallelStep, ctx: ResolverContext, sink: list, scope: str) -> StepResult:
        snapshots = [ctx.snapshot() for _ in step.branches]
        settled = await asyncio.gather(
            *(self.run_step(b, snap, sink, scope) for b, snap in zip(step.branches, snapshots)),
            return_exceptions=True,
        )
        outputs: list[Any] = []
        failed = 0
        for branch, snap, res in zip(step.branches, snapshots, settled):
            if isinstance(res, BaseException):
                if isinstance(res, asyncio.CancelledError):
                    raise res
                res = self._fail(branch, sink, scope, "internal-error", f"{type(res).__name__}: {res}")
                snap.steps.setdefault(branch.id, None)
            if res.ok:
                outputs.append(res.output)
            else:
                failed += 1
                outputs.append({"error": res.error})
        # single merge point: publish every output the branches produced
        for snap in snapshots:
            for key, value in snap.steps.items():
                if key not in ctx.steps:
                    ctx.store(key, value)
        if failed:
            return StepResult(step.id, "error", outputs, {
                "code": "branch-failed",
                "message": f"{failed} of {len(step.branches)} branch(es) failed",
            })
        return StepResult(step.id, "ok", outputs)

    async def exec_pipe(self, step: PipeStep, ctx: ResolverContext, sink: list, scope: str) -> StepResult:
        last: Any = None
        for i, inner_step in enumerate(step.steps):
            inner_ctx = ctx.with_bindings(prev=last) if i else ctx
            inner = await self.run_step(inner_step, inner_ctx, sink, scope)
            if not inner.ok:
                return StepResult(step.id, "error", None, {
                    "code": "pipe-step-failed",
                    "message": f"pipe stopped at step {inner_step.id!r}: {inner.error.get('message', '')}",
                })
            last = inner.output
        return StepResult(step.id, "ok", last)

    async def exec_collect(self, step: CollectStep, ctx: ResolverContext, sink: list, scope: str) -> StepResult:
        captured: list[dict[str, Any]] = []
        outputs: list[Any] = []
        for inner_step in step.steps:
            inner = await self.run_step(inner_step, ctx, captured, scope)
            if inner.ok:
                outputs.append(inner.output)
        return StepResult(step.id, "ok", {step.into: outputs, "errors": captured})


async def execute(
    bp: WorkflowBlueprint,
    request: RunRequest | Mapping[str, Any] | None,
    pool: ToolCaller | None,
    *,
    max_concurrency: int = DEFAULT_MAX_CONCURRENCY,
) -> RunResult:
    """Run a blueprint to completion and return its structured result."""
    if pool is None or not getattr(pool, "initialized", False):
        raise EngineError("client pool is not initialized")
    report = validate_structure(bp)
    if report.errors:
        raise InvalidBlueprint(report)
    if isinstance(request, RunRequest):
        if request.workflow_id != bp.id:
            raise EngineError(f"request targets {request.workflow_id!r} but blueprint is {bp.id!r}")
        given = request.params
    else:
        given = request
    params = merge_params(bp, given)

    run = _Run(bp, pool, max_concurrency)
    ctx = ResolverContext(params=params)
    sink: list[dict[str, Any]] = []
    results: list[StepResult] = []
    started = _now()
    halted = False
    for step in bp.steps:
        result = await run.run_step(step, ctx, sink, "")
        results.append(result)
        if not result.ok and bp.error_strategy.halts_on_error:
            halted = True
            break
    if halted:
        status = "failure"
    elif any(not r.ok for r in results):
        status = "partial"
    else:
        status = "success"
    return RunResult(
        run_id=str(uuid.uuid4()),
        workflow_id=bp.id,
        status=status,
        step_results=results,
        started_at=started,
        finished_at=_now(),
        collected_errors=sink if bp.error_strategy.collect_errors else None,
    )
