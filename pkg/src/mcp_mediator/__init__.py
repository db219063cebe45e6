"""MCP mediator: run declarative multi-step tool workflows with a single call."""
from .blueprint import (
    CallStep,
    CollectStep,
    ErrorStrategy,
    LoopStep,
    ParallelStep,
    ParamSpec,
    ParseError,
    PipeStep,
    ValidationReport,
    WorkflowBlueprint,
    blueprint_from_dict,
    parse_blueprint,
    serialize_blueprint,
    validate_structure,
    validate_tools,
)
from .engine import RunRequest, RunResult, StepResult, execute
from .pool import ClientPool, ServerConfig, load_config
from .server import MediatorServer
from .store import WorkflowStore
from .templates import ResolverContext, resolve_path, resolve_value

__version__ = "0.1.0"

__all__ = [
    "CallStep", "ClientPool", "CollectStep", "ErrorStrategy", "LoopStep", "MediatorServer",
    "ParallelStep", "ParamSpec", "ParseError", "PipeStep", "ResolverContext", "RunRequest",
    "RunResult", "ServerConfig", "StepResult", "ValidationReport", "WorkflowBlueprint",
    "WorkflowStore", "blueprint_from_dict", "execute", "load_config", "parse_blueprint",
    "resolve_path", "resolve_value", "serialize_blueprint", "validate_structure", "validate_tools",
]
