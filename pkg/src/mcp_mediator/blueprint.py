"""Workflow blueprint data model, canonical JSON form, and two-tier validation.

A blueprint is parsed into frozen dataclasses.  Parsing only checks shape and
types; semantic problems (duplicate ids, dangling references, empty
containers) are reported by :func:`validate_structure` so that an agent gets
all of them in one report instead of one exception at a time.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Iterator, Mapping, Union

if TYPE_CHECKING:
    from .pool import ToolCatalog

BLUEPRINT_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")
IDENTIFIER_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

PARAM_TYPES = ("string", "number", "boolean", "array", "object")
FAILURE_MODES = ("abort", "continue", "retry")
STEP_TYPES = ("call", "loop", "parallel", "pipe", "collect")
RESERVED_ROOTS = ("params", "steps")
MAX_DEPTH = 16

_TOP_KEYS = ("id", "description", "version", "params", "errorStrategy", "steps")
_STRATEGY_KEYS = ("onStepFailure", "maxRetries", "retryDelayMs", "collectErrors", "retryThenAbort")
_PARAM_KEYS = ("type", "default", "required")
_STEP_KEYS = {
    "call": ("id", "type", "tool", "params"),
    "loop": ("id", "type", "over", "as", "do"),
    "parallel": ("id", "type", "branches"),
    "pipe": ("id", "type", "steps"),
    "collect": ("id", "type", "steps", "into"),
}


class ParseError(ValueError):
    """Blueprint JSON is malformed or has the wrong shape."""


class _NoDefault:
    def __repr__(self) -> str:
        return "NO_DEFAULT"

    def __reduce__(self):
        return "NO_DEFAULT"


NO_DEFAULT: Any = _NoDefault()


def conforms(value: Any, type_name: str) -> bool:
    """Return True if a JSON value matches a param type name."""
    if type_name == "string":
        return isinstance(value, str)
    if type_name == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if type_name == "boolean":
        return isinstance(value, bool)
    if type_name == "array":
        return isinstance(value, list)
    if type_name == "object":
        return isinstance(value, dict)
    return False


@dataclass(frozen=True)
class ParamSpec:
    type: str
    default: Any = NO_DEFAULT
    required: bool | None = None

    def __post_init__(self) -> None:
        if self.required is None:
            object.__setattr__(self, "required", not self.has_default)

    @property
    def has_default(self) -> bool:
        return self.default is not NO_DEFAULT


@dataclass(frozen=True)
class ErrorStrategy:
    on_step_failure: str = "abort"
    max_retries: int = 0
    retry_delay_ms: int = 0
    collect_errors: bool = False
    # retry exhaustion halts the run instead of degrading to continue
    retry_then_abort: bool = False

    @property
    def halts_on_error(self) -> bool:
        if self.on_step_failure == "abort":
            return True
        return self.on_step_failure == "retry" and self.retry_then_abort

    @property
    def retries(self) -> int:
        return self.max_retries if self.on_step_failure == "retry" else 0


@dataclass(frozen=True)
class CallStep:
    id: str
    tool: str
    params: Any = field(default_factory=dict)
    type: str = field(default="call", init=False)


@dataclass(frozen=True)
class LoopStep:
    id: str
    over: str | None
    as_: str | None
    do: "Step | None"
    type: str = field(default="loop", init=False)


@dataclass(frozen=True)
class ParallelStep:
    id: str
    branches: tuple["Step", ...]
    type: str = field(default="parallel", init=False)


@dataclass(frozen=True)
class PipeStep:
    id: str
    steps: tuple["Step", ...]
    type: str = field(default="pipe", init=False)


@dataclass(frozen=True)
class CollectStep:
    id: str
    steps: tuple["Step", ...]
    into: str = "results"
    type: str = field(default="collect", init=False)


Step = Union[CallStep, LoopStep, ParallelStep, PipeStep, CollectStep]


@dataclass(frozen=True)
class WorkflowBlueprint:
    id: str
    steps: tuple[Step, ...] = ()
    description: str = ""
    version: str = ""
    params: Mapping[str, ParamSpec] = field(default_factory=dict)
    error_strategy: ErrorStrategy = field(default_factory=ErrorStrategy)


def child_steps(step: Step) -> tuple[Step, ...]:
    if isinstance(step, LoopStep):
        return (step.do,) if step.do is not None else ()
    if isinstance(step, ParallelStep):
        return step.branches
    if isinstance(step, (PipeStep, CollectStep)):
        return step.steps
    return ()


def walk_steps(steps: tuple[Step, ...], path: str = "$.steps") -> Iterator[tuple[str, Step, int]]:
    """Yield (path, step, depth) for every step in document order, depth-first."""

    def visit(step: Step, p: str, depth: int):
        yield p, step, depth
        if isinstance(step, LoopStep):
            if step.do is not None:
                yield from visit(step.do, f"{p}.do", depth + 1)
        elif isinstance(step, ParallelStep):
            for i, b in enumerate(step.branches):
                yield from visit(b, f"{p}.branches[{i}]", depth + 1)
        elif isinstance(step, (PipeStep, CollectStep)):
            for i, s in enumerate(step.steps):
                yield from visit(s, f"{p}.steps[{i}]", depth + 1)

    for i, s in enumerate(steps):
        yield from visit(s, f"{path}[{i}]", 1)


# ---------------------------------------------------------------- parsing


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise ParseError(msg)


def _check_keys(obj: dict, allowed: tuple[str, ...], where: str) -> None:
    extra = [k for k in obj if k not in allowed]
    _expect(not extra, f"{where}: unknown key(s) {', '.join(map(repr, extra))}")


def _parse_int(value: Any, where: str) -> int:
    _expect(isinstance(value, int) and not isinstance(value, bool), f"{where} must be an integer")
    return value


def _parse_step(obj: Any, where: str) -> Step:
    _expect(isinstance(obj, dict), f"{where} must be an object")
    kind = obj.get("type")
    _expect(isinstance(kind, str), f"{where}.type must be a string")
    _expect(kind in STEP_TYPES, f"{where}: unknown step type {kind!r}")
    _check_keys(obj, _STEP_KEYS[kind], where)
    step_id = obj.get("id", "")
    _expect(isinstance(step_id, str), f"{where}.id must be a string")

    if kind == "call":
        tool = obj.get("tool", "")
        _expect(isinstance(tool, str), f"{where}.tool must be a string")
        return CallStep(id=step_id, tool=tool, params=obj.get("params", {}))
    if kind == "loop":
        over, as_ = obj.get("over"), obj.get("as")
        _expect(over is None or isinstance(over, str), f"{where}.over must be a string")
        _expect(as_ is None or isinstance(as_, str), f"{where}.as must be a string")
        do = obj.get("do")
        return LoopStep(
            id=step_id,
            over=over,
            as_=as_,
            do=None if do is None else _parse_step(do, f"{where}.do"),
        )

    key = "branches" if kind == "parallel" else "steps"
    items = obj.get(key, [])
    _expect(isinstance(items, list), f"{where}.{key} must be an array")
    children = tuple(_parse_step(s, f"{where}.{key}[{i}]") for i, s in enumerate(items))
    if kind == "parallel":
        return ParallelStep(id=step_id, branches=children)
    if kind == "pipe":
        return PipeStep(id=step_id, steps=children)
    into = obj.get("into", "results")
    _expect(isinstance(into, str) and into != "", f"{where}.into must be a non-empty string")
    return CollectStep(id=step_id, steps=children, into=into)


def blueprint_from_dict(obj: Any) -> WorkflowBlueprint:
    """Build a blueprint from an already-decoded JSON object."""
    _expect(isinstance(obj, dict), "blueprint must be a JSON object")
    _check_keys(obj, _TOP_KEYS, "blueprint")
    missing = [k for k in ("id", "steps") if k not in obj]
    _expect(not missing, f"blueprint: missing required field(s) {', '.join(missing)}")
    _expect(isinstance(obj["id"], str), "id must be a string")
    for key in ("description", "version"):
        _expect(isinstance(obj.get(key, ""), str), f"{key} must be a string")

    params_obj = obj.get("params", {})
    _expect(isinstance(params_obj, dict), "params must be an object")
    params: dict[str, ParamSpec] = {}
    for name, spec in params_obj.items():
        where = f"params.{name}"
        _expect(isinstance(spec, dict), f"{where} must be an object")
        _check_keys(spec, _PARAM_KEYS, where)
        ptype = spec.get("type")
        _expect(ptype in PARAM_TYPES, f"{where}.type must be one of {', '.join(PARAM_TYPES)}")
        default = spec.get("default", NO_DEFAULT)
        _expect(default is NO_DEFAULT or conforms(default, ptype), f"{where}.default is not a {ptype}")
        required = spec.get("required")
        _expect(required is None or isinstance(required, bool), f"{where}.required must be a boolean")
        params[name] = ParamSpec(type=ptype, default=default, required=required)

    es = obj.get("errorStrategy", {})
    _expect(isinstance(es, dict), "errorStrategy must be an object")
    _check_keys(es, _STRATEGY_KEYS, "errorStrategy")
    mode = es.get("onStepFailure", "abort")
    _expect(mode in FAILURE_MODES, f"errorStrategy.onStepFailure must be one of {', '.join(FAILURE_MODES)}")
    max_retries = _parse_int(es.get("maxRetries", 0), "errorStrategy.maxRetries")
    delay = _parse_int(es.get("retryDelayMs", 0), "errorStrategy.retryDelayMs")
    _expect(max_retries >= 0 and delay >= 0, "errorStrategy: maxRetries and retryDelayMs must be >= 0")
    for key in ("collectErrors", "retryThenAbort"):
        _expect(isinstance(es.get(key, False), bool), f"errorStrategy.{key} must be a boolean")
    strategy = ErrorStrategy(
        on_step_failure=mode,
        max_retries=max_retries,
        retry_delay_ms=delay,
        collect_errors=es.get("collectErrors", False),
        retry_then_abort=es.get("retryThenAbort", False),
    )

    _expect(isinstance(obj["steps"], list), "steps must be an array")
    steps = tuple(_parse_step(s, f"steps[{i}]") for i, s in enumerate(obj["steps"]))
    return WorkflowBlueprint(
        id=obj["id"],
        description=obj.get("description", ""),
        version=obj.get("version", ""),
        params=params,
        error_strategy=strategy,
        steps=steps,
    )


def parse_blueprint(data: bytes | str) -> WorkflowBlueprint:
    """Parse blueprint JSON text (UTF-8 bytes or str)."""
    try:
        text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
        obj = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"malformed JSON: {exc}") from exc
    return blueprint_from_dict(obj)


# ---------------------------------------------------------- serialization


def step_to_dict(step: Step) -> dict[str, Any]:
    out: dict[str, Any] = {"id": step.id, "type": step.type}
    if isinstance(step, CallStep):
        out["tool"] = step.tool
        out["params"] = step.params
    elif isinstance(step, LoopStep):
        if step.over is not None:
            out["over"] = step.over
        if step.as_ is not None:
            out["as"] = step.as_
        if step.do is not None:
            out["do"] = step_to_dict(step.do)
    elif isinstance(step, ParallelStep):
        out["branches"] = [step_to_dict(b) for b in step.branches]
    else:
        out["steps"] = [step_to_dict(s) for s in step.steps]
        if isinstance(step, CollectStep):
            out["into"] = step.into
    return out


def blueprint_to_dict(bp: WorkflowBlueprint) -> dict[str, Any]:
    params: dict[str, Any] = {}
    for name, spec in bp.params.items():
        p: dict[str, Any] = {"type": spec.type}
        if spec.has_default:
            p["default"] = spec.default
        if spec.required != (not spec.has_default):
            p["required"] = spec.required
        params[name] = p
    es = bp.error_strategy
    strategy: dict[str, Any] = {
        "onStepFailure": es.on_step_failure,
        "maxRetries": es.max_retries,
        "retryDelayMs": es.retry_delay_ms,
    }
    if es.collect_errors:
        strategy["collectErrors"] = True
    if es.retry_then_abort:
        strategy["retryThenAbort"] = True
    return {
        "id": bp.id,
        "description": bp.description,
        "version": bp.version,
        "params": params,
        "errorStrategy": strategy,
        "steps": [step_to_dict(s) for s in bp.steps],
    }


def serialize_blueprint(bp: WorkflowBlueprint) -> str:
    """Canonical JSON: 2-space indent, fixed top-level key order, trailing newline."""
    return json.dumps(blueprint_to_dict(bp), indent=2, ensure_ascii=False) + "\n"


# -------------------------------------------------------------- validation


@dataclass(frozen=True)
class Issue:
    path: str
    code: str
    message: str

    def to_dict(self) -> dict[str, str]:
        return {"path": self.path, "code": self.code, "message": self.message}


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[Issue, ...] = ()
    warnings: tuple[Issue, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict[str, Any]:
        return {
            "errors": [e.to_dict() for e in self.errors],
            "warnings": [w.to_dict() for w in self.warnings],
        }

    def merge(self, other: "ValidationReport") -> "ValidationReport":
        return ValidationReport(self.errors + other.errors, self.warnings + other.warnings)


# root-position references only: "item.steps.x" must not count
_PARAM_REF_RE = re.compile(r"(?<![\w.$@\"'-])params\.(?:\"([^\"]+)\"|([A-Za-z0-9_-]+))")
_STEP_REF_RE = re.compile(r"(?<![\w.$@\"'-])steps\.(?:\"([^\"]+)\"|([A-Za-z0-9_-]+))")


def template_strings(value: Any) -> Iterator[str]:
    """Yield every string inside a JSON value tree that contains ``{{``."""
    if isinstance(value, str):
        if "{{" in value:
            yield value
    elif isinstance(value, list):
        for v in value:
            yield from template_strings(v)
    elif isinstance(value, dict):
        for v in value.values():
            yield from template_strings(v)


def _outer_groups(text: str) -> tuple[list[str], bool]:
    """Return the bodies of outermost ``{{...}}`` groups and whether all were closed."""
    bodies: list[str] = []
    depth = 0
    start = 0
    i = 0
    while i < len(text):
        pair = text[i : i + 2]
        if pair == "{{":
            if depth == 0:
                start = i + 2
            depth += 1
            i += 2
        elif pair == "}}" and depth > 0:
            depth -= 1
            if depth == 0:
                bodies.append(text[start:i])
            i += 2
        else:
            i += 1
    return bodies, depth == 0


def references(text: str) -> tuple[set[str], set[str]]:
    """Return the (param names, step ids) referenced from template groups in text."""
    params: set[str] = set()
    steps: set[str] = set()
    for body in _outer_groups(text)[0]:
        for m in _PARAM_REF_RE.finditer(body):
            params.add(m.group(1) or m.group(2))
        for m in _STEP_REF_RE.finditer(body):
            steps.add(m.group(1) or m.group(2))
    return params, steps


def _step_templates(step: Step) -> list[str]:
    if isinstance(step, CallStep):
        return list(template_strings(step.params)) + list(template_strings(step.tool))
    if isinstance(step, LoopStep) and step.over is not None:
        return list(template_strings(step.over))
    return []


def validate_structure(bp: WorkflowBlueprint) -> ValidationReport:
    """Blocking structural checks; never raises."""
    errors: list[Issue] = []

    def err(path: str, code: str, message: str) -> None:
        errors.append(Issue(path, code, message))

    if not bp.id:
        err("$.id", "empty-blueprint-id", "blueprint id is empty")
    elif not BLUEPRINT_ID_RE.match(bp.id):
        err("$.id", "invalid-blueprint-id", f"blueprint id {bp.id!r} must match [A-Za-z0-9._-]+")

    seen: dict[str, str] = {}
    for path, step, depth in walk_steps(bp.steps):
        if depth > MAX_DEPTH:
            err(path, "nesting-too-deep", f"step nesting exceeds {MAX_DEPTH} levels")
        if not step.id:
            err(path, "empty-step-id", "step id is empty")
        elif step.id in seen:
            err(path, "duplicate-step-id", f"step id {step.id!r} already used at {seen[step.id]}")
        else:
            seen[step.id] = path
        if isinstance(step, CallStep) and not step.tool:
            err(path, "missing-tool", "call step has no tool")
        elif isinstance(step, LoopStep):
            for attr, key in (("over", "over"), ("as_", "as"), ("do", "do")):
                if getattr(step, attr) is None:
                    err(path, "loop-missing-field", f"loop step is missing {key!r}")
            if step.as_ is not None:
                if step.as_ in RESERVED_ROOTS:
                    err(path, "reserved-binding", f"loop binding {step.as_!r} shadows a reserved root")
                elif not IDENTIFIER_RE.match(step.as_):
                    err(path, "invalid-binding", f"loop binding {step.as_!r} is not an identifier")
        elif isinstance(step, ParallelStep) and not step.branches:
            err(path, "empty-parallel", "parallel step has no branches")
        elif isinstance(step, PipeStep) and not step.steps:
            err(path, "empty-pipe", "pipe step has no steps")
        elif isinstance(step, CollectStep) and step.into == "errors":
            err(path, "reserved-collect-label", "collect label 'errors' is reserved for captured errors")

    # Reference checks follow the engine's visibility rules: a step sees what
    # completed before it in its sequential container, never its siblings in
    # a parallel block and never its own container.
    def check_refs(step: Step, path: str, visible: frozenset[str]) -> None:
        for text in _step_templates(step):
            if not _outer_groups(text)[1]:
                err(path, "invalid-template", f"unterminated '{{{{' in {text!r}")
            param_refs, step_refs = references(text)
            for name in sorted(param_refs - set(bp.params)):
                err(path, "undeclared-param", f"template references undeclared param {name!r}")
            for sid in sorted(step_refs - visible):
                err(path, "forward-step-reference",
                    f"template references step {sid!r} which has not completed at this point")

    def visit(step: Step, path: str, visible: frozenset[str]) -> set[str]:
        """Check one step; return the step ids it publishes once complete."""
        check_refs(step, path, visible)
        published = {step.id}
        if isinstance(step, LoopStep):
            if step.do is not None:
                visit(step.do, f"{path}.do", visible)
        elif isinstance(step, ParallelStep):
            for i, b in enumerate(step.branches):
                published |= visit(b, f"{path}.branches[{i}]", visible)
        elif isinstance(step, (PipeStep, CollectStep)):
            published |= visit_sequence(step.steps, f"{path}.steps", visible)
        return published

    def visit_sequence(steps: tuple[Step, ...], path: str, visible: frozenset[str]) -> set[str]:
        published: set[str] = set()
        for i, s in enumerate(steps):
            published |= visit(s, f"{path}[{i}]", visible | published)
        return published

    visit_sequence(bp.steps, "$.steps", frozenset())
    return ValidationReport(errors=tuple(errors))


def validate_tools(bp: WorkflowBlueprint, catalog: "ToolCatalog") -> ValidationReport:
    """Non-blocking check that every call step's tool is routable."""
    from .pool import RouteError, route

    warnings = []
    for path, step, _ in walk_steps(bp.steps):
        if not isinstance(step, CallStep) or not step.tool:
            continue
        try:
            route(step.tool, catalog)
        except RouteError as exc:
            warnings.append(Issue(path, exc.code, str(exc)))
    return ValidationReport(warnings=tuple(warnings))


def count_steps(bp: WorkflowBlueprint) -> int:
    return sum(1 for _ in walk_steps(bp.steps))
