"""The upward-facing MCP server: six workflow tools backed by store, engine and pool."""
from __future__ import annotations

import logging
from typing import Any, Callable

from .blueprint import (
    Issue,
    ParseError,
    ValidationReport,
    blueprint_from_dict,
    blueprint_to_dict,
    validate_structure,
    validate_tools,
)
from .engine import EngineError, InvalidBlueprint, ParamError, RunRequest, execute
from .pool import ClientPool, ToolCatalog
from .protocol import McpServer, run_server, text_result
from .store import NotFound, PreconditionError, StoreError, WorkflowStore

log = logging.getLogger(__name__)

_ID_SCHEMA = {
    "type": "object",
    "properties": {"id": {"type": "string", "description": "Workflow id"}},
    "required": ["id"],
    "additionalProperties": False,
}
_BLUEPRINT_SCHEMA = {
    "type": "object",
    "properties": {"blueprint": {"type": "object", "description": "Workflow blueprint document"}},
    "required": ["blueprint"],
    "additionalProperties": False,
}

TOOL_SURFACE: dict[str, tuple[str, dict[str, Any]]] = {
    "create_workflow": ("Validate and save a workflow blueprint.", _BLUEPRINT_SCHEMA),
    "run_workflow": ("Run a saved workflow and return its run result.", {
        "type": "object",
        "properties": {
            "id": {"type": "string", "description": "Workflow id"},
            "params": {"type": "object", "description": "Parameter overrides"},
        },
        "required": ["id"],
        "additionalProperties": False,
    }),
    "list_workflows": ("List saved workflows.", {"type": "object", "properties": {}, "additionalProperties": False}),
    "get_workflow": ("Return a saved workflow blueprint.", _ID_SCHEMA),
    "validate_workflow": ("Check a blueprint without saving it.", _BLUEPRINT_SCHEMA),
    "delete_workflow": ("Delete a saved workflow.", _ID_SCHEMA),
}


def _failure(code: str, message: str, **extra: Any) -> dict[str, Any]:
    return text_result({"ok": False, "error": {"code": code, "message": message, **extra}}, is_error=True)


class MediatorServer(McpServer):
    def __init__(self, store: WorkflowStore, pool: ClientPool | None = None,
                 name: str = "mcp-mediator", version: str = "0.1.0") -> None:
        super().__init__(name, version)
        self.store = store
        self.pool = pool
        handlers: dict[str, Callable[[dict[str, Any]], Any]] = {
            "create_workflow": self.create_workflow,
            "run_workflow": self.run_workflow,
            "list_workflows": self.list_workflows,
            "get_workflow": self.get_workflow,
            "validate_workflow": self.validate_workflow,
            "delete_workflow": self.delete_workflow,
        }
        for tool, (description, schema) in TOOL_SURFACE.items():
            self.add_tool(tool, handlers[tool], description, schema)

    @property
    def catalog(self) -> ToolCatalog:
        return self.pool.catalog if self.pool is not None else ToolCatalog()

    def _check(self, blueprint: Any) -> tuple[Any, ValidationReport]:
        try:
            bp = blueprint_from_dict(blueprint)
        except ParseError as exc:
            return None, ValidationReport(errors=(Issue("$", "parse-error", str(exc)),))
        report = validate_structure(bp)
        if report.errors:
            return bp, report
        return bp, report.merge(validate_tools(bp, self.catalog))

    @staticmethod
    def _report(report: ValidationReport) -> dict[str, Any]:
        return {
            "errors": [e.to_dict() for e in report.errors],
            "warnings": [w.to_dict() for w in report.warnings],
        }

    def create_workflow(self, args: dict[str, Any]) -> Any:
        bp, report = self._check(args.get("blueprint"))
        body = self._report(report)
        if report.errors:
            return text_result({"ok": False, **body}, is_error=True)
        try:
            self.store.save(bp)
        except PreconditionError as exc:  # pragma: no cover - already checked above
            return text_result({"ok": False, **self._report(exc.report)}, is_error=True)
        except StoreError as exc:
            return _failure("store-error", str(exc))
        return {"ok": True, "id": bp.id, "warnings": body["warnings"]}

    async def run_workflow(self, args: dict[str, Any]) -> Any:
        workflow_id = args.get("id")
        params = args.get("params") or {}
        if not isinstance(workflow_id, str):
            return _failure("invalid-arguments", "id must be a string")
        if not isinstance(params, dict):
            return _failure("param-error", "params must be an object")
        try:
            bp = self.store.load(workflow_id)
        except NotFound as exc:
            return _failure("not-found", str(exc), id=workflow_id)
        except StoreError as exc:
            return _failure("store-error", str(exc))
        try:
            result = await execute(bp, RunRequest(bp.id, params), self.pool)
        except ParamError as exc:
            return _failure("param-error", str(exc))
        except InvalidBlueprint as exc:
            return text_result({"ok": False, **self._report(exc.report)}, is_error=True)
        except EngineError as exc:
            return _failure("engine-error", str(exc))
        try:
            self.store.record_run(result)
        except StoreError as exc:
            log.warning("could not record run %s: %s", result.run_id, exc)
        return result.to_dict()

    def list_workflows(self, args: dict[str, Any]) -> Any:
        return {"workflows": self.store.list()}

    def get_workflow(self, args: dict[str, Any]) -> Any:
        workflow_id = args.get("id")
        try:
            return blueprint_to_dict(self.store.load(workflow_id))
        except NotFound as exc:
            return _failure("not-found", str(exc), id=workflow_id)
        except StoreError as exc:
            return _failure("store-error", str(exc))

    def validate_workflow(self, args: dict[str, Any]) -> Any:
        _, report = self._check(args.get("blueprint"))
        return {"ok": not report.errors, **self._report(report)}

    def delete_workflow(self, args: dict[str, Any]) -> Any:
        workflow_id = args.get("id")
        try:
            self.store.delete(workflow_id)
        except NotFound as exc:
            return _failure("not-found", str(exc), id=workflow_id)
        except StoreError as exc:
            return _failure("store-error", str(exc))
        return {"ok": True, "id": workflow_id}


async def serve(pool: ClientPool, store: WorkflowStore, transport: str = "stdio",
                host: str = "127.0.0.1", port: int = 0,
                on_ready: Callable[[str], None] | None = None) -> None:
    """Initialize the pool (if needed), serve until shutdown, then close the pool."""
    if not pool.initialized:
        await pool.initialize()
    try:
        await run_server(MediatorServer(store, pool), transport, host, port, on_ready)
    finally:
        await pool.close()
