"""Flat-file storage for blueprints and run summaries.

Layout::

    <root>/workflows/<id>.json   canonical blueprint JSON
    <root>/runs/<runId>.json     run summaries, step outputs capped in size
"""
from __future__ import annotations

import json
import os
import tempfile
import threading
from dataclasses import replace
from pathlib import Path
from typing import Any

from .blueprint import (
    ParseError,
    ValidationReport,
    WorkflowBlueprint,
    parse_blueprint,
    serialize_blueprint,
    validate_structure,
)
from .engine import RunResult

STORE_ENV = "MCP_MEDIATOR_STORE"
DEFAULT_STORE = "~/.mcp-mediator"
DEFAULT_OUTPUT_CAP = 64 * 1024


class StoreError(OSError):
    pass


class NotFound(KeyError):
    def __init__(self, what: str, ident: str) -> None:
        super().__init__(ident)
        self.what = what
        self.ident = ident

    def __str__(self) -> str:
        return f"{self.what} not found: {self.ident}"


class PreconditionError(ValueError):
    def __init__(self, report: ValidationReport) -> None:
        super().__init__(f"blueprint has {len(report.errors)} structural error(s)")
        self.report = report


def default_root() -> Path:
    return Path(os.environ.get(STORE_ENV) or DEFAULT_STORE).expanduser()


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def cap_output(output: Any, cap: int) -> tuple[Any, bool]:
    """Return ``output`` unchanged if its JSON fits in ``cap`` bytes, else a text prefix."""
    text = json.dumps(output, ensure_ascii=False, separators=(",", ":"))
    data = text.encode("utf-8")
    if len(data) <= cap:
        return output, False
    return data[:cap].decode("utf-8", errors="ignore"), True


class WorkflowStore:
    def __init__(self, root: str | Path | None = None, output_cap: int = DEFAULT_OUTPUT_CAP) -> None:
        self.root = Path(root).expanduser() if root is not None else default_root()
        self.output_cap = output_cap
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    @property
    def workflows_dir(self) -> Path:
        return self.root / "workflows"

    @property
    def runs_dir(self) -> Path:
        return self.root / "runs"

    def _lock(self, ident: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(ident, threading.Lock())

    def path_for(self, workflow_id: str) -> Path:
        return self.workflows_dir / f"{workflow_id}.json"

    def _checked_path(self, workflow_id: str) -> Path:
        # ids that fail validation never reach the filesystem
        if not isinstance(workflow_id, str) or not workflow_id or "/" in workflow_id \
                or "\\" in workflow_id or workflow_id.startswith("."):
            raise NotFound("workflow", str(workflow_id))
        return self.path_for(workflow_id)

    def save(self, bp: WorkflowBlueprint) -> Path:
        report = validate_structure(bp)
        if report.errors:
            raise PreconditionError(report)
        path = self.path_for(bp.id)
        try:
            with self._lock(bp.id):
                _atomic_write(path, serialize_blueprint(bp))
        except OSError as exc:
            raise StoreError(f"cannot write {path}: {exc}") from exc
        return path

    def load(self, workflow_id: str) -> WorkflowBlueprint:
        path = self._checked_path(workflow_id)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise NotFound("workflow", workflow_id) from None
        except OSError as exc:
            raise StoreError(f"cannot read {path}: {exc}") from exc
        try:
            return parse_blueprint(data)
        except ParseError as exc:
            raise StoreError(f"corrupt blueprint file {path}: {exc}") from exc

    def exists(self, workflow_id: str) -> bool:
        try:
            return self._checked_path(workflow_id).is_file()
        except NotFound:
            return False

    def list(self) -> list[dict[str, Any]]:
        if not self.workflows_dir.is_dir():
            return []
        out = []
        for path in sorted(self.workflows_dir.glob("*.json")):
            try:
                bp = parse_blueprint(path.read_bytes())
            except (OSError, ParseError):
                continue
            out.append({"id": bp.id, "description": bp.description, "version": bp.version,
                        "stepCount": len(bp.steps)})
        return sorted(out, key=lambda s: s["id"])

    def delete(self, workflow_id: str) -> None:
        path = self._checked_path(workflow_id)
        with self._lock(workflow_id):
            try:
                path.unlink()
            except FileNotFoundError:
                raise NotFound("workflow", workflow_id) from None
            except OSError as exc:
                raise StoreError(f"cannot delete {path}: {exc}") from exc

    def record_run(self, result: RunResult) -> Path:
        capped = []
        for step in result.step_results:
            output, cut = cap_output(step.output, self.output_cap)
            capped.append(replace(step, output=output, truncated=step.truncated or cut))
        summary = replace(result, step_results=capped)
        path = self.runs_dir / f"{result.run_id}.json"
        try:
            _atomic_write(path, summary.to_json() + "\n")
        except OSError as exc:
            raise StoreError(f"cannot write {path}: {exc}") from exc
        return path

    def load_run(self, run_id: str) -> RunResult:
        path = self.runs_dir / f"{run_id}.json"
        try:
            return RunResult.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise NotFound("run", run_id) from None
