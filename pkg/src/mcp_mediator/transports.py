"""Message transports for MCP JSON-RPC traffic.

Every transport moves whole JSON-RPC messages (decoded dicts or batch lists):
``send`` writes one, ``receive`` returns the next or ``None`` at end of
stream.  Stream-based transports frame messages as newline-delimited JSON.
"""
from __future__ import annotations

import asyncio
import json
import logging
import os
import sys
import threading
import uuid
from typing import Any
from urllib.parse import parse_qs, urljoin, urlsplit

import httpx

log = logging.getLogger(__name__)

STREAM_LIMIT = 64 * 1024 * 1024


class TransportError(ConnectionError):
    """The transport failed or the peer went away."""


class Transport:
    async def send(self, message: Any) -> None:
        raise NotImplementedError

    async def receive(self) -> Any | None:
        raise NotImplementedError

    async def close(self) -> None:
        pass


def _decode_line(line: bytes) -> Any:
    try:
        return json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return MalformedMessage(line.decode("utf-8", "replace"))


class MalformedMessage:
    """A frame that was not valid JSON; servers answer it with a parse error."""

    def __init__(self, text: str) -> None:
        self.text = text


class StreamTransport(Transport):
    """Newline-delimited JSON over an asyncio reader/writer pair."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._reader = reader
        self._writer = writer
        self._lock = asyncio.Lock()

    async def send(self, message: Any) -> None:
        data = json.dumps(message, separators=(",", ":"), ensure_ascii=False).encode() + b"\n"
        async with self._lock:
            try:
                self._writer.write(data)
                await self._writer.drain()
            except (ConnectionError, RuntimeError) as exc:
                raise TransportError(f"write failed: {exc}") from exc

    async def receive(self) -> Any | None:
        while True:
            try:
                line = await self._reader.readline()
            except (ConnectionError, asyncio.LimitOverrunError, ValueError) as exc:
                raise TransportError(f"read failed: {exc}") from exc
            if not line:
                return None
            if line.strip():
                return _decode_line(line)

    async def close(self) -> None:
        try:
            self._writer.close()
        except RuntimeError:
            pass


class ProcessTransport(StreamTransport):
    """Child process speaking newline-delimited JSON-RPC on stdin/stdout."""

    def __init__(self, proc: asyncio.subprocess.Process) -> None:
        assert proc.stdout is not None and proc.stdin is not None
        super().__init__(proc.stdout, proc.stdin)
        self.proc = proc

    @classmethod
    async def spawn(cls, command: str, args: list[str] | tuple[str, ...] = (),
                    env: dict[str, str] | None = None) -> "ProcessTransport":
        try:
            proc = await asyncio.create_subprocess_exec(
                command, *args,
                stdin=asyncio.subprocess.PIPE,
                stdout=asyncio.subprocess.PIPE,
                env={**os.environ, **(env or {})},
                limit=STREAM_LIMIT,
            )
        except OSError as exc:
            raise TransportError(f"cannot start {command!r}: {exc}") from exc
        return cls(proc)

    async def close(self) -> None:
        if self.proc.returncode is not None:
            return
        try:
            self.proc.stdin.close()
            await asyncio.wait_for(self.proc.wait(), 2.0)
        except (asyncio.TimeoutError, ConnectionError, RuntimeError):
            self.proc.kill()
            await self.proc.wait()


class MemoryTransport(Transport):
    """One end of an in-process pipe.  Messages are JSON-encoded in transit so
    neither side can share mutable objects with the other."""

    def __init__(self, inbox: asyncio.Queue, outbox: asyncio.Queue) -> None:
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    async def send(self, message: Any) -> None:
        if self._closed:
            raise TransportError("transport closed")
        await self._outbox.put(json.dumps(message))

    async def receive(self) -> Any | None:
        item = await self._inbox.get()
        if item is None:
            self._inbox.put_nowait(None)
            return None
        return json.loads(item)

    async def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put_nowait(None)
            self._inbox.put_nowait(None)


def memory_pair() -> tuple[MemoryTransport, MemoryTransport]:
    a: asyncio.Queue = asyncio.Queue()
    b: asyncio.Queue = asyncio.Queue()
    return MemoryTransport(a, b), MemoryTransport(b, a)


class StdioServerTransport(Transport):
    """Server side of the stdio transport, bound to this process's stdin/stdout."""

    def __init__(self, stdin=None, stdout=None) -> None:
        self._stdin = stdin or sys.stdin.buffer
        self._stdout = stdout or sys.stdout.buffer
        self._write_lock = threading.Lock()

    async def send(self, message: Any) -> None:
        data = json.dumps(message, separators=(",", ":"), ensure_ascii=False).encode() + b"\n"

        def write() -> None:
            with self._write_lock:
                self._stdout.write(data)
                self._stdout.flush()

        await asyncio.get_running_loop().run_in_executor(None, write)

    async def receive(self) -> Any | None:
        loop = asyncio.get_running_loop()
        while True:
            line = await loop.run_in_executor(None, self._stdin.readline)
            if not line:
                return None
            if line.strip():
                return _decode_line(line)


# ------------------------------------------------------------------ HTTP


async def _iter_sse(lines):
    """Yield (event, data) pairs from an async iterator of SSE lines."""
    event, data = "message", []
    async for line in lines:
        if line == "":
            if data:
                yield event, "\n".join(data)
            event, data = "message", []
        elif line.startswith(":"):
            continue
        else:
            name, _, value = line.partition(":")
            value = value[1:] if value.startswith(" ") else value
            if name == "event":
                event = value
            elif name == "data":
                data.append(value)
    if data:
        yield event, "\n".join(data)


class StreamableHttpTransport(Transport):
    """Client side of the streamable-HTTP transport: one POST per message."""

    def __init__(self, url: str, headers: dict[str, str] | None = None, timeout: float | None = None) -> None:
        self.url = url
        self._headers = dict(headers or {})
        self._client = httpx.AsyncClient(timeout=httpx.Timeout(timeout, connect=timeout))
        self._inbox: asyncio.Queue = asyncio.Queue()
        self._session_id: str | None = None

    async def send(self, message: Any) -> None:
        headers = {**self._headers, "Accept": "application/json, text/event-stream"}
        if self._session_id:
            headers["Mcp-Session-Id"] = self._session_id
        try:
            async with self._client.stream("POST", self.url, json=message, headers=headers) as resp:
                if resp.status_code >= 400:
                    raise TransportError(f"HTTP {resp.status_code} from {self.url}")
                self._session_id = resp.headers.get("mcp-session-id", self._session_id)
                ctype = resp.headers.get("content-type", "")
                if ctype.startswith("text/event-stream"):
                    async for _, data in _iter_sse(resp.aiter_lines()):
                        await self._inbox.put(json.loads(data))
                elif resp.status_code not in (202, 204):
                    body = json.loads(await resp.aread())
                    for m in body if isinstance(body, list) else [body]:
                        await self._inbox.put(m)
        except httpx.HTTPError as exc:
            raise TransportError(f"POST {self.url} failed: {exc}") from exc

    async def receive(self) -> Any | None:
        return await self._inbox.get()

    async def close(self) -> None:
        self._inbox.put_nowait(None)
        await self._client.aclose()


class SseTransport(Transport):
    """Client side of the legacy HTTP+SSE transport."""

    def __init__(self, url: str, headers: dict[str, str] | None = None, timeout: float | None = None) -> None:
        self.url = url
        self._headers = dict(headers or {})
        self._client = httpx.AsyncClient(timeout=httpx.Timeout(timeout, connect=timeout, read=None))
        self._inbox: asyncio.Queue = asyncio.Queue()
        self._endpoint: asyncio.Future | None = None
        self._task: asyncio.Task | None = None

    async def connect(self) -> None:
        self._endpoint = asyncio.get_running_loop().create_future()
        self._task = asyncio.create_task(self._read_stream())
        await self._endpoint

    async def _read_stream(self) -> None:
        assert self._endpoint is not None
        try:
            headers = {**self._headers, "Accept": "text/event-stream"}
            async with self._client.stream("GET", self.url, headers=headers) as resp:
                if resp.status_code >= 400:
                    raise TransportError(f"HTTP {resp.status_code} from {self.url}")
                async for event, data in _iter_sse(resp.aiter_lines()):
                    if event == "endpoint" and not self._endpoint.done():
                        self._endpoint.set_result(urljoin(self.url, data))
                    elif event == "message":
                        await self._inbox.put(json.loads(data))
        except (httpx.HTTPError, TransportError) as exc:
            if not self._endpoint.done():
                self._endpoint.set_exception(TransportError(f"SSE stream failed: {exc}"))
        finally:
            if not self._endpoint.done():
                self._endpoint.set_exception(TransportError("SSE stream ended before endpoint event"))
            self._inbox.put_nowait(None)

    async def send(self, message: Any) -> None:
        if self._endpoint is None or not self._endpoint.done():
            raise TransportError("SSE transport not connected")
        try:
            resp = await self._client.post(self._endpoint.result(), json=message, headers=self._headers)
        except httpx.HTTPError as exc:
            raise TransportError(f"POST failed: {exc}") from exc
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code} from message endpoint")

    async def receive(self) -> Any | None:
        return await self._inbox.get()

    async def close(self) -> None:
        if self._task:
            self._task.cancel()
            try:
                await self._task
            except (asyncio.CancelledError, Exception):
                pass
        await self._client.aclose()


class HttpServer:
    """Minimal HTTP/1.1 front end for an MCP server.

    Serves streamable-HTTP on ``POST /mcp`` and the legacy SSE transport on
    ``GET /sse`` + ``POST /messages?session_id=...``.  Each non-SSE response
    closes the connection.
    """

    def __init__(self, handler, host: str = "127.0.0.1", port: int = 0) -> None:
        self._handle = handler  # async (message) -> response | None
        self.host = host
        self.port = port
        self._server: asyncio.base_events.Server | None = None
        self._sessions: dict[str, asyncio.Queue] = {}

    async def start(self) -> int:
        self._server = await asyncio.start_server(self._on_conn, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        return self.port

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    async def close(self) -> None:
        if self._server:
            self._server.close()
            await self._server.wait_closed()
        for q in self._sessions.values():
            q.put_nowait(None)

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        await self._server.serve_forever()

    async def _on_conn(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            head = await reader.readuntil(b"\r\n\r\n")
            lines = head.decode("latin-1").split("\r\n")
            method, target, _ = lines[0].split(" ", 2)
            headers = {}
            for line in lines[1:]:
                if ":" in line:
                    k, v = line.split(":", 1)
                    headers[k.strip().lower()] = v.strip()
            length = int(headers.get("content-length", "0"))
            body = await reader.readexactly(length) if length else b""
            parts = urlsplit(target)
            if method == "GET" and parts.path == "/sse":
                await self._sse_stream(reader, writer)
                return
            if method == "POST" and parts.path == "/mcp":
                await self._post_mcp(body, writer)
            elif method == "POST" and parts.path == "/messages":
                sid = parse_qs(parts.query).get("session_id", [""])[0]
                await self._post_message(sid, body, writer)
            else:
                self._respond(writer, 404, b"not found", "text/plain")
            await writer.drain()
        except (asyncio.IncompleteReadError, ConnectionError, ValueError) as exc:
            log.debug("http connection error: %s", exc)
        finally:
            writer.close()

    def _respond(self, writer, status: int, body: bytes, ctype: str, extra: dict | None = None) -> None:
        reason = {200: "OK", 202: "Accepted", 400: "Bad Request", 404: "Not Found"}.get(status, "")
        head = [f"HTTP/1.1 {status} {reason}", f"Content-Type: {ctype}",
                f"Content-Length: {len(body)}", "Connection: close"]
        head += [f"{k}: {v}" for k, v in (extra or {}).items()]
        writer.write(("\r\n".join(head) + "\r\n\r\n").encode() + body)

    async def _post_mcp(self, body: bytes, writer) -> None:
        try:
            message = json.loads(body)
        except json.JSONDecodeError:
            message = MalformedMessage(body.decode("utf-8", "replace"))
        response = await self._handle(message)
        extra = {}
        if isinstance(message, dict) and message.get("method") == "initialize":
            extra["Mcp-Session-Id"] = uuid.uuid4().hex
        if response is None:
            self._respond(writer, 202, b"", "application/json", extra)
        else:
            self._respond(writer, 200, json.dumps(response).encode(), "application/json", extra)

    async def _post_message(self, sid: str, body: bytes, writer) -> None:
        queue = self._sessions.get(sid)
        if queue is None:
            self._respond(writer, 404, b"unknown session", "text/plain")
            return
        try:
            message = json.loads(body)
        except json.JSONDecodeError:
            self._respond(writer, 400, b"invalid JSON", "text/plain")
            return
        self._respond(writer, 202, b"", "text/plain")

        async def answer() -> None:
            response = await self._handle(message)
            if response is not None:
                await queue.put(response)

        asyncio.create_task(answer())

    async def _sse_stream(self, reader, writer) -> None:
        sid = uuid.uuid4().hex
        queue: asyncio.Queue = asyncio.Queue()
        self._sessions[sid] = queue
        writer.write(b"HTTP/1.1 200 OK\r\nContent-Type: text/event-stream\r\n"
                     b"Cache-Control: no-cache\r\nConnection: keep-alive\r\n\r\n")
        writer.write(f"event: endpoint\ndata: /messages?session_id={sid}\n\n".encode())
        await writer.drain()
        eof = asyncio.create_task(reader.read())
        try:
            while True:
                item = asyncio.create_task(queue.get())
                done, _ = await asyncio.wait({item, eof}, return_when=asyncio.FIRST_COMPLETED)
                if item not in done:
                    item.cancel()
                    break
                msg = item.result()
                if msg is None:
                    break
                writer.write(f"event: message\ndata: {json.dumps(msg)}\n\n".encode())
                await writer.drain()
        except ConnectionError:
            pass
        finally:
            eof.cancel()
            self._sessions.pop(sid, None)
            writer.close()
