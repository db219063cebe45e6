"""Downstream MCP connections, tool discovery, and routing."""
from __future__ import annotations

import asyncio
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping

from .protocol import McpServer, McpSession, RpcError
from .transports import (
    ProcessTransport,
    SseTransport,
    StreamableHttpTransport,
    Transport,
    TransportError,
    memory_pair,
)

log = logging.getLogger(__name__)

TRANSPORTS = ("stdio", "sse", "streamable-http")


class ConfigError(ValueError):
    pass


class ConnectError(Exception):
    def __init__(self, server_name: str, cause: str) -> None:
        super().__init__(f"cannot connect to server {server_name!r}: {cause}")
        self.server_name = server_name
        self.cause = cause


class RouteError(LookupError):
    def __init__(self, code: str, tool: str, candidates: tuple[str, ...] = ()) -> None:
        if code == "ambiguous-tool":
            msg = f"tool {tool!r} is ambiguous; qualify it as one of: {', '.join(candidates)}"
        else:
            msg = f"tool {tool!r} not found on any connected server"
        super().__init__(msg)
        self.code = code
        self.tool = tool
        self.candidates = candidates

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class ServerConfig:
    name: str
    transport: str = "stdio"
    command: str | None = None
    args: tuple[str, ...] = ()
    env: Mapping[str, str] = field(default_factory=dict)
    url: str | None = None
    headers: Mapping[str, str] = field(default_factory=dict)
    connect_timeout_ms: int = 10_000
    # in-process server object; only settable from code, never from a config file
    server: McpServer | None = field(default=None, compare=False, repr=False)

    @classmethod
    def in_process(cls, name: str, server: McpServer) -> "ServerConfig":
        return cls(name=name, transport="inprocess", server=server)

    @classmethod
    def from_dict(cls, obj: Any) -> "ServerConfig":
        if not isinstance(obj, dict):
            raise ConfigError("server entry must be an object")
        allowed = {"name", "transport", "command", "args", "env", "url", "headers", "connectTimeoutMs"}
        extra = set(obj) - allowed
        if extra:
            raise ConfigError(f"unknown server config key(s): {', '.join(sorted(extra))}")
        name = obj.get("name")
        if not isinstance(name, str) or not name:
            raise ConfigError("server entry needs a non-empty name")
        transport = obj.get("transport", "stdio")
        if transport not in TRANSPORTS:
            raise ConfigError(f"server {name!r}: transport must be one of {', '.join(TRANSPORTS)}")
        if transport == "stdio" and not isinstance(obj.get("command"), str):
            raise ConfigError(f"server {name!r}: stdio transport needs a command")
        if transport != "stdio" and not isinstance(obj.get("url"), str):
            raise ConfigError(f"server {name!r}: {transport} transport needs a url")
        args = obj.get("args", [])
        if not isinstance(args, list) or not all(isinstance(a, str) for a in args):
            raise ConfigError(f"server {name!r}: args must be a list of strings")
        timeout = obj.get("connectTimeoutMs", 10_000)
        if not isinstance(timeout, int) or timeout <= 0:
            raise ConfigError(f"server {name!r}: connectTimeoutMs must be a positive integer")
        return cls(
            name=name,
            transport=transport,
            command=obj.get("command"),
            args=tuple(args),
            env={str(k): str(v) for k, v in (obj.get("env") or {}).items()},
            url=obj.get("url"),
            headers={str(k): str(v) for k, v in (obj.get("headers") or {}).items()},
            connect_timeout_ms=timeout,
        )


def load_config(path: str | Path) -> list[ServerConfig]:
    """Read ``{"servers": [...]}`` from a JSON file."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("servers"), list):
        raise ConfigError("config must be an object with a 'servers' array")
    return [ServerConfig.from_dict(s) for s in obj["servers"]]


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    server: str
    input_schema: Mapping[str, Any] = field(default_factory=dict)
    description: str = ""

    @property
    def qualified_name(self) -> str:
        return f"{self.server}:{self.name}"


@dataclass(frozen=True)
class ToolCatalog:
    entries: Mapping[str, ToolDescriptor] = field(default_factory=dict)
    index: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    @classmethod
    def build(cls, descriptors: Iterable[ToolDescriptor]) -> "ToolCatalog":
        entries: dict[str, ToolDescriptor] = {}
        index: dict[str, list[str]] = {}
        for d in descriptors:
            entries[d.qualified_name] = d
            index.setdefault(d.name, []).append(d.qualified_name)
        return cls(MappingProxyType(entries), MappingProxyType({k: tuple(v) for k, v in index.items()}))

    def __len__(self) -> int:
        return len(self.entries)


def route(tool_name: str, catalog: ToolCatalog) -> str:
    """Resolve a bare or ``server:tool`` name to a qualified catalog key."""
    if tool_name in catalog.entries:
        return tool_name
    candidates = catalog.index.get(tool_name, ())
    if len(candidates) == 1:
        return candidates[0]
    if len(candidates) > 1:
        raise RouteError("ambiguous-tool", tool_name, tuple(sorted(candidates)))
    raise RouteError("tool-not-found", tool_name)


@dataclass
class ToolCallOutcome:
    ok: bool
    content: Any
    is_error: bool = False
    raw: Any = None
    error: str | None = None


def outcome_from_result(result: Any) -> ToolCallOutcome:
    """Convert a ``tools/call`` result; text blocks are joined and parsed as JSON when possible."""
    if not isinstance(result, dict):
        return ToolCallOutcome(False, None, raw=result, error="malformed tools/call result")
    is_error = bool(result.get("isError", False))
    blocks = result.get("content") or []
    texts = [b.get("text", "") for b in blocks if isinstance(b, dict) and b.get("type") == "text"]
    if texts:
        text = "".join(texts)
        try:
            content = json.loads(text)
        except json.JSONDecodeError:
            content = text
    else:
        content = result.get("structuredContent")
    error = None
    if is_error:
        error = content if isinstance(content, str) else json.dumps(content)
    return ToolCallOutcome(not is_error, content, is_error, result, error)


class _Connection:
    def __init__(self, config: ServerConfig) -> None:
        self.config = config
        self.session: McpSession | None = None
        self.tools: list[ToolDescriptor] = []
        self._serve_task: asyncio.Task | None = None

    async def open(self) -> None:
        cfg = self.config
        timeout = cfg.connect_timeout_ms / 1000
        transport: Transport
        if cfg.transport == "inprocess":
            client_side, server_side = memory_pair()
            self._serve_task = asyncio.create_task(cfg.server.serve(server_side))
            transport = client_side
        elif cfg.transport == "stdio":
            transport = await ProcessTransport.spawn(cfg.command, cfg.args, dict(cfg.env))
        elif cfg.transport == "streamable-http":
            transport = StreamableHttpTransport(cfg.url, dict(cfg.headers), timeout=timeout)
        elif cfg.transport == "sse":
            transport = SseTransport(cfg.url, dict(cfg.headers), timeout=timeout)
            await transport.connect()
        else:
            raise TransportError(f"unsupported transport {cfg.transport!r}")
        self.session = McpSession(transport, cfg.name)
        await self.session.initialize()
        await self.discover()

    async def discover(self) -> list[ToolDescriptor]:
        timeout = self.config.connect_timeout_ms / 1000
        raw = await self.session.list_tools(timeout=timeout)
        self.tools = [
            ToolDescriptor(t["name"], self.config.name, t.get("inputSchema") or {}, t.get("description") or "")
            for t in raw
            if isinstance(t, dict) and isinstance(t.get("name"), str)
        ]
        return self.tools

    async def close(self) -> None:
        if self.session is not None:
            await self.session.close()
        if self._serve_task is not None:
            try:
                await asyncio.wait_for(self._serve_task, 1.0)
            except (asyncio.TimeoutError, asyncio.CancelledError):
                self._serve_task.cancel()


class ClientPool:
    """Connections to every configured downstream server plus the routing catalog.

    ``call_tool`` is safe to invoke concurrently; requests to one server are
    pipelined over a single connection and correlated by JSON-RPC id.
    """

    def __init__(self, configs: Iterable[ServerConfig]) -> None:
        self.configs = list(configs)
        self._conns: dict[str, _Connection] = {}
        self._catalog = ToolCatalog()
        self.initialized = False
        self.warnings: list[str] = []
        self.calls: Counter[str] = Counter()

    @property
    def catalog(self) -> ToolCatalog:
        return self._catalog

    async def initialize(self) -> "ClientPool":
        names = [c.name for c in self.configs]
        for name in names:
            if names.count(name) > 1:
                raise ConnectError(name, "duplicate server name in configuration")
        conns = [_Connection(c) for c in self.configs]

        async def open_one(conn: _Connection) -> None:
            try:
                await asyncio.wait_for(conn.open(), conn.config.connect_timeout_ms / 1000)
            except asyncio.TimeoutError:
                raise ConnectError(conn.config.name, f"timed out after {conn.config.connect_timeout_ms} ms") from None
            except (TransportError, RpcError, OSError, KeyError, TypeError, AttributeError) as exc:
                raise ConnectError(conn.config.name, str(exc) or type(exc).__name__) from exc

        results = await asyncio.gather(*(open_one(c) for c in conns), return_exceptions=True)
        failures = [r for r in results if isinstance(r, BaseException)]
        if failures:
            await asyncio.gather(*(c.close() for c in conns), return_exceptions=True)
            raise failures[0]
        self._conns = {c.config.name: c for c in conns}
        self._catalog = ToolCatalog.build(d for c in conns for d in c.tools)
        self.initialized = True
        return self

    async def refresh_catalog(self) -> ToolCatalog:
        """Re-list tools everywhere; a server that fails keeps its previous entries."""

        async def refresh(conn: _Connection) -> None:
            try:
                await conn.discover()
            except (TransportError, RpcError, asyncio.TimeoutError) as exc:
                self.warnings.append(f"refresh of server {conn.config.name!r} failed: {exc}; keeping stale entries")

        await asyncio.gather(*(refresh(c) for c in self._conns.values()))
        self._catalog = ToolCatalog.build(d for c in self._conns.values() for d in c.tools)
        return self._catalog

    def route(self, tool_name: str) -> str:
        return route(tool_name, self._catalog)

    async def call_tool(self, tool_name: str, params: Any = None) -> ToolCallOutcome:
        """Invoke a downstream tool.  Raises RouteError; transport trouble is a failed outcome."""
        catalog = self._catalog
        descriptor = catalog.entries[route(tool_name, catalog)]
        conn = self._conns.get(descriptor.server)
        if conn is None or conn.session is None:
            return ToolCallOutcome(False, None, error=f"server {descriptor.server!r} is not connected")
        self.calls[descriptor.server] += 1
        try:
            result = await conn.session.call_tool(descriptor.name, params if params is not None else {})
        except RpcError as exc:
            return ToolCallOutcome(False, None, error=f"JSON-RPC error {exc.code}: {exc.message}")
        except TransportError as exc:
            return ToolCallOutcome(False, None, error=f"transport error: {exc}")
        return outcome_from_result(result)

    async def close(self) -> None:
        await asyncio.gather(*(c.close() for c in self._conns.values()), return_exceptions=True)
        self._conns = {}
        self.initialized = False

    async def __aenter__(self) -> "ClientPool":
        if not self.initialized:
            await self.initialize()
        return self

    async def __aexit__(self, *exc: Any) -> None:
        await self.close()


async def initialize(configs: Iterable[ServerConfig]) -> ClientPool:
    return await ClientPool(configs).initialize()
