"""``{{expression}}`` resolution against an execution context.

Expressions are evaluated with JMESPath first.  If JMESPath rejects the
expression (step ids with dashes, numeric path segments such as
``steps.s1.0.name``) the resolver falls back to a plain dot-path walk.

A string that is exactly one template group resolves to the raw referenced
value, so arrays and objects flow between steps without being stringified.
Anywhere else a template is substituted as text.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

import jmespath
from jmespath.exceptions import JMESPathError

MAX_PASSES = 5

_TOKEN_RE = re.compile(r"(\{\{|\}\})")


class ResolveError(Exception):
    """A template could not be resolved against the context."""


@dataclass
class ResolverContext:
    params: Mapping[str, Any] = field(default_factory=dict)
    steps: dict[str, Any] = field(default_factory=dict)
    bindings: dict[str, Any] = field(default_factory=dict)

    def root(self) -> dict[str, Any]:
        doc = {"params": dict(self.params), "steps": self.steps}
        doc.update(self.bindings)
        return doc

    def lookup_root(self, name: str) -> Any:
        if name in self.bindings:
            return self.bindings[name]
        if name == "params":
            return dict(self.params)
        if name == "steps":
            return self.steps
        raise ResolveError(f"unknown root {name!r}")

    def store(self, step_id: str, output: Any) -> None:
        if step_id in self.steps:
            raise ResolveError(f"step output {step_id!r} already stored")
        self.steps[step_id] = output

    def child(self, **bindings: Any) -> "ResolverContext":
        """Context for a nested scope: outer outputs stay visible, new ones stay local."""
        return ResolverContext(self.params, dict(self.steps), {**self.bindings, **bindings})

    def with_bindings(self, **bindings: Any) -> "ResolverContext":
        """Same step outputs (shared, so new outputs land in this scope), extra bindings."""
        return ResolverContext(self.params, self.steps, {**self.bindings, **bindings})

    def snapshot(self) -> "ResolverContext":
        return ResolverContext(self.params, dict(self.steps), dict(self.bindings))


@dataclass(frozen=True)
class TemplateExpression:
    raw: str
    kind: str  # "whole-value" or "embedded"


def find_templates(text: str) -> list[TemplateExpression]:
    """List the outermost template groups of a string."""
    out = []
    depth = 0
    start = 0
    pieces = _TOKEN_RE.split(text)
    pos = 0
    for piece in pieces:
        if piece == "{{":
            if depth == 0:
                start = pos + 2
            depth += 1
        elif piece == "}}" and depth:
            depth -= 1
            if depth == 0:
                out.append((start, pos))
        pos += len(piece)
    whole = len(out) == 1 and out[0] == (2, len(text) - 2)
    kind = "whole-value" if whole else "embedded"
    return [TemplateExpression(text[a:b], kind) for a, b in out]


def render(value: Any) -> str:
    """Text form of a value substituted into a larger string."""
    if isinstance(value, str):
        return value
    return json.dumps(value, separators=(",", ":"), ensure_ascii=False)


# ---------------------------------------------------------------- paths


def walk_dot_path(expr: str, ctx: ResolverContext) -> Any:
    """Strict dot-path lookup: object keys and non-negative array indices."""
    parts = expr.split(".")
    if any(p == "" for p in parts):
        raise ResolveError(f"invalid path {expr!r}")
    value = ctx.lookup_root(parts[0])
    for i, part in enumerate(parts[1:], start=1):
        where = ".".join(parts[: i + 1])
        if isinstance(value, dict):
            if part not in value:
                raise ResolveError(f"missing path {where!r}")
            value = value[part]
        elif isinstance(value, list):
            if not part.isdigit() or not part.isascii():
                raise ResolveError(f"array index expected at {where!r}")
            idx = int(part)
            if idx >= len(value):
                raise ResolveError(f"index out of range at {where!r}")
            value = value[idx]
        else:
            raise ResolveError(f"cannot descend into {type(value).__name__} at {where!r}")
    return value


def resolve_path(expr: str, ctx: ResolverContext) -> Any:
    """Evaluate one template body."""
    expr = expr.strip()
    if not expr:
        raise ResolveError("empty template expression")
    try:
        result = jmespath.search(expr, ctx.root())
    except (JMESPathError, TypeError, ValueError):
        return walk_dot_path(expr, ctx)
    if result is not None:
        return result
    # JMESPath yields null for missing keys; a missing path must be an error,
    # while a path that exists and holds null is a legitimate value.
    try:
        return walk_dot_path(expr, ctx)
    except ResolveError as exc:
        raise ResolveError(f"{expr!r} resolved to nothing ({exc})") from None


# ---------------------------------------------------------------- values

_OPEN = object()
_CLOSE = object()


def _atoms(text: str) -> list[Any]:
    atoms: list[Any] = []
    for piece in _TOKEN_RE.split(text):
        if piece == "{{":
            atoms.append(_OPEN)
        elif piece == "}}":
            atoms.append(_CLOSE)
        elif piece:
            atoms.append(piece)
    return atoms


class _Data:
    # substituted text; never scanned for template delimiters again
    __slots__ = ("text",)

    def __init__(self, text: str) -> None:
        self.text = text


def _atom_text(atom: Any) -> str:
    if atom is _OPEN:
        return "{{"
    if atom is _CLOSE:
        return "}}"
    if isinstance(atom, _Data):
        return atom.text
    return atom


def resolve_string(text: str, ctx: ResolverContext) -> Any:
    if "{{" not in text:
        return text
    atoms = _atoms(text)
    for _ in range(MAX_PASSES):
        if not any(a is _OPEN for a in atoms):
            break
        # innermost groups: an open whose matching close encloses no other open
        groups: list[tuple[int, int]] = []
        stack: list[list[Any]] = []
        for i, atom in enumerate(atoms):
            if atom is _OPEN:
                if stack:
                    stack[-1][1] = True
                stack.append([i, False])
            elif atom is _CLOSE and stack:
                start, nested = stack.pop()
                if not nested:
                    groups.append((start, i))
        if stack or not groups:
            raise ResolveError(f"unterminated template in {text!r}")
        if len(groups) == 1 and groups[0] == (0, len(atoms) - 1):
            body = "".join(_atom_text(a) for a in atoms[1:-1])
            return resolve_path(body, ctx)
        for start, end in reversed(groups):
            body = "".join(_atom_text(a) for a in atoms[start + 1 : end])
            atoms[start : end + 1] = [_Data(render(resolve_path(body, ctx)))]
    else:
        if any(a is _OPEN for a in atoms):
            raise ResolveError(f"template nesting exceeds {MAX_PASSES} passes in {text!r}")
    return "".join(_atom_text(a) for a in atoms)


def resolve_value(value: Any, ctx: ResolverContext) -> Any:
    """Resolve every template in a JSON value tree; returns a new tree."""
    if isinstance(value, str):
        return resolve_string(value, ctx)
    if isinstance(value, list):
        return [resolve_value(v, ctx) for v in value]
    if isinstance(value, dict):
        return {k: resolve_value(v, ctx) for k, v in value.items()}
    return value
