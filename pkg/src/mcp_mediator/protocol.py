"""MCP over JSON-RPC 2.0: a pipelining client, a client session, and a tool server."""
from __future__ import annotations

import asyncio
import inspect
import itertools
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Awaitable, Callable

from .transports import HttpServer, MalformedMessage, StdioServerTransport, Transport, TransportError

log = logging.getLogger(__name__)

PROTOCOL_VERSION = "2025-03-26"
SUPPORTED_VERSIONS = ("2024-11-05", "2025-03-26", "2025-06-18")

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
INTERNAL_ERROR = -32603


class RpcError(Exception):
    def __init__(self, code: int, message: str, data: Any = None) -> None:
        super().__init__(message)
        self.code = code
        self.message = message
        self.data = data


class RpcClient:
    """JSON-RPC requester with id correlation; many requests may be in flight."""

    def __init__(self, transport: Transport, name: str = "") -> None:
        self.transport = transport
        self.name = name
        self.sent: Counter[str] = Counter()
        self._ids = itertools.count(1)
        self._pending: dict[int, asyncio.Future] = {}
        self._reader: asyncio.Task | None = None
        self._closed_reason: str | None = None

    def start(self) -> None:
        if self._reader is None:
            self._reader = asyncio.create_task(self._read_loop())

    async def _read_loop(self) -> None:
        reason = "connection closed"
        try:
            while True:
                msg = await self.transport.receive()
                if msg is None:
                    break
                for m in msg if isinstance(msg, list) else [msg]:
                    await self._dispatch(m)
        except TransportError as exc:
            reason = str(exc)
        except asyncio.CancelledError:
            reason = "client closed"
        finally:
            self._closed_reason = reason
            for fut in self._pending.values():
                if not fut.done():
                    fut.set_exception(TransportError(f"{self.name or 'server'}: {reason}"))
            self._pending.clear()

    async def _dispatch(self, msg: Any) -> None:
        if not isinstance(msg, dict):
            return
        if "method" in msg:
            # server-initiated traffic: answer pings, refuse other requests
            if "id" in msg:
                if msg["method"] == "ping":
                    reply = {"jsonrpc": "2.0", "id": msg["id"], "result": {}}
                else:
                    reply = {"jsonrpc": "2.0", "id": msg["id"],
                             "error": {"code": METHOD_NOT_FOUND, "message": "method not found"}}
                await self.transport.send(reply)
            return
        fut = self._pending.pop(msg.get("id"), None)
        if fut is None or fut.done():
            return
        if "error" in msg:
            err = msg["error"] or {}
            fut.set_exception(RpcError(err.get("code", INTERNAL_ERROR), err.get("message", ""), err.get("data")))
        else:
            fut.set_result(msg.get("result"))

    async def request(self, method: str, params: Any = None, timeout: float | None = None) -> Any:
        if self._closed_reason is not None:
            raise TransportError(f"{self.name or 'server'}: {self._closed_reason}")
        self.start()
        req_id = next(self._ids)
        fut = asyncio.get_running_loop().create_future()
        self._pending[req_id] = fut
        message = {"jsonrpc": "2.0", "id": req_id, "method": method}
        if params is not None:
            message["params"] = params
        self.sent[method] += 1
        try:
            await self.transport.send(message)
            return await asyncio.wait_for(fut, timeout) if timeout else await fut
        finally:
            self._pending.pop(req_id, None)

    async def notify(self, method: str, params: Any = None) -> None:
        message = {"jsonrpc": "2.0", "method": method}
        if params is not None:
            message["params"] = params
        self.sent[method] += 1
        await self.transport.send(message)

    async def close(self) -> None:
        await self.transport.close()
        if self._reader is not None:
            self._reader.cancel()
            try:
                await self._reader
            except asyncio.CancelledError:
                pass


class McpSession:
    """Client side of one MCP connection."""

    def __init__(self, transport: Transport, name: str = "", client_name: str = "mcp-mediator") -> None:
        self.rpc = RpcClient(transport, name)
        self.client_name = client_name
        self.server_info: dict[str, Any] = {}

    async def initialize(self, timeout: float | None = None) -> dict[str, Any]:
        result = await self.rpc.request("initialize", {
            "protocolVersion": PROTOCOL_VERSION,
            "capabilities": {},
            "clientInfo": {"name": self.client_name, "version": "0.1.0"},
        }, timeout=timeout)
        self.server_info = result or {}
        await self.rpc.notify("notifications/initialized")
        return self.server_info

    async def list_tools(self, timeout: float | None = None) -> list[dict[str, Any]]:
        tools: list[dict[str, Any]] = []
        cursor = None
        while True:
            params = {"cursor": cursor} if cursor else {}
            result = await self.rpc.request("tools/list", params, timeout=timeout)
            tools.extend(result.get("tools", []))
            cursor = result.get("nextCursor")
            if not cursor:
                return tools

    async def call_tool(self, name: str, arguments: Any = None, timeout: float | None = None) -> dict[str, Any]:
        return await self.rpc.request("tools/call", {"name": name, "arguments": arguments or {}}, timeout=timeout)

    async def close(self) -> None:
        await self.rpc.close()


# ------------------------------------------------------------------ server


class ToolError(Exception):
    """Raised by a tool handler to produce an ``isError`` result."""


def text_result(value: Any, is_error: bool = False) -> dict[str, Any]:
    text = value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)
    return {"content": [{"type": "text", "text": text}], "isError": is_error}


@dataclass
class Tool:
    name: str
    handler: Callable[..., Any]
    description: str = ""
    input_schema: dict[str, Any] = field(default_factory=lambda: {"type": "object"})

    def descriptor(self) -> dict[str, Any]:
        return {"name": self.name, "description": self.description, "inputSchema": self.input_schema}


class McpServer:
    """Tool-serving MCP endpoint independent of transport.

    ``received`` counts inbound messages by method and ``call_log`` keeps the
    params of every ``tools/call`` so tests can inspect traffic.
    """

    def __init__(self, name: str, version: str = "0.1.0") -> None:
        self.name = name
        self.version = version
        self.tools: dict[str, Tool] = {}
        self.received: Counter[str] = Counter()
        self.call_log: list[dict[str, Any]] = []

    def add_tool(self, name: str, handler: Callable[..., Any], description: str = "",
                 input_schema: dict[str, Any] | None = None) -> None:
        self.tools[name] = Tool(name, handler, description, input_schema or {"type": "object"})

    def remove_tool(self, name: str) -> None:
        self.tools.pop(name, None)

    async def handle(self, message: Any) -> Any | None:
        """Handle one decoded message (or batch); return the response or None."""
        if isinstance(message, MalformedMessage):
            return _error(None, PARSE_ERROR, "parse error")
        if isinstance(message, list):
            if not message:
                return _error(None, INVALID_REQUEST, "empty batch")
            replies = await asyncio.gather(*(self.handle(m) for m in message))
            replies = [r for r in replies if r is not None]
            return replies or None
        if not isinstance(message, dict) or not isinstance(message.get("method"), str):
            return _error(message.get("id") if isinstance(message, dict) else None,
                          INVALID_REQUEST, "invalid request")
        method = message["method"]
        self.received[method] += 1
        if "id" not in message:
            return None
        msg_id = message["id"]
        try:
            result = await self._dispatch(method, message.get("params") or {})
        except RpcError as exc:
            return _error(msg_id, exc.code, exc.message)
        except Exception as exc:  # handler bug; keep the server alive
            log.exception("internal error handling %s", method)
            return _error(msg_id, INTERNAL_ERROR, str(exc))
        return {"jsonrpc": "2.0", "id": msg_id, "result": result}

    async def _dispatch(self, method: str, params: dict[str, Any]) -> Any:
        if method == "initialize":
            requested = params.get("protocolVersion")
            version = requested if requested in SUPPORTED_VERSIONS else PROTOCOL_VERSION
            return {
                "protocolVersion": version,
                "capabilities": {"tools": {"listChanged": False}},
                "serverInfo": {"name": self.name, "version": self.version},
            }
        if method == "ping":
            return {}
        if method == "tools/list":
            return {"tools": [t.descriptor() for t in self.tools.values()]}
        if method == "tools/call":
            self.call_log.append(params)
            return await self.call_tool(params.get("name"), params.get("arguments") or {})
        raise RpcError(METHOD_NOT_FOUND, f"method not found: {method}")

    async def call_tool(self, name: Any, arguments: dict[str, Any]) -> dict[str, Any]:
        tool = self.tools.get(name) if isinstance(name, str) else None
        if tool is None:
            raise RpcError(INVALID_PARAMS, f"unknown tool: {name}")
        if not isinstance(arguments, dict):
            raise RpcError(INVALID_PARAMS, "tool arguments must be an object")
        try:
            value = tool.handler(arguments)
            if inspect.isawaitable(value):
                value = await value
        except ToolError as exc:
            return text_result(str(exc), is_error=True)
        except Exception as exc:
            log.debug("tool %s failed", name, exc_info=True)
            return text_result(f"{type(exc).__name__}: {exc}", is_error=True)
        if isinstance(value, dict) and "content" in value and "isError" in value:
            return value
        return text_result(value)

    async def serve(self, transport: Transport) -> None:
        """Serve one stream-like connection until the peer closes it."""
        tasks: set[asyncio.Task] = set()

        async def answer(msg: Any) -> None:
            reply = await self.handle(msg)
            if reply is not None:
                try:
                    await transport.send(reply)
                except TransportError:
                    pass

        try:
            while True:
                msg = await transport.receive()
                if msg is None:
                    break
                task = asyncio.create_task(answer(msg))
                tasks.add(task)
                task.add_done_callback(tasks.discard)
        except TransportError:
            pass
        if tasks:
            await asyncio.gather(*tasks, return_exceptions=True)


def _error(msg_id: Any, code: int, message: str) -> dict[str, Any]:
    return {"jsonrpc": "2.0", "id": msg_id, "error": {"code": code, "message": message}}


Handler = Callable[[dict[str, Any]], Awaitable[Any] | Any]


async def run_server(server: McpServer, transport: str = "stdio", host: str = "127.0.0.1",
                     port: int = 0, on_ready: Callable[[str], None] | None = None) -> None:
    """Serve ``server`` on stdio or HTTP until the peer or the process stops."""
    if transport == "stdio":
        await server.serve(StdioServerTransport())
        return
    http = HttpServer(server.handle, host, port)
    await http.start()
    if on_ready:
        on_ready(http.url)
    try:
        await http.serve_forever()
    finally:
        await http.close()
