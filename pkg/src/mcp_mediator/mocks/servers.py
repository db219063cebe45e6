"""Mock downstream MCP servers: a cluster-inventory server and a graph server."""
from __future__ import annotations

import asyncio
from collections import Counter
from typing import Any

from ..protocol import McpServer, ToolError
from .fixture import ALL_KINDS, CLUSTER_KINDS, ResourceFixture, generate_fixture
from .graph import GraphQueryError, PropertyGraph

_OBJ = {"type": "object"}


class ResourceServer(McpServer):
    """Serves a :class:`ResourceFixture` read-only, plus test-only failure and latency tools."""

    def __init__(self, fixture: ResourceFixture | None = None, name: str = "k8s") -> None:
        super().__init__(name)
        self.fixture = fixture or generate_fixture()
        self.failures: Counter[str] = Counter()
        self.add_tool("list_namespaces", self.list_namespaces, "List namespace names.", _OBJ)
        self.add_tool("list_nodes", self.list_nodes, "List worker nodes.", _OBJ)
        self.add_tool("list_resources", self.list_resources, "List resources of a kind.", {
            "type": "object",
            "properties": {"kind": {"type": "string"}, "namespace": {"type": "string"}},
            "required": ["kind"],
        })
        self.add_tool("echo", lambda args: args, "Return the arguments unchanged.", _OBJ)
        self.add_tool("fail_n_times", self.fail_n_times,
                      "Fail the first n invocations per key, then succeed (test only).", {
                          "type": "object",
                          "properties": {"n": {"type": "integer"}, "key": {"type": "string"}},
                          "required": ["n"],
                      })
        self.add_tool("sleep_ms", self.sleep_ms, "Sleep for ms milliseconds (test only).", {
            "type": "object", "properties": {"ms": {"type": "integer"}}, "required": ["ms"],
        })

    def list_namespaces(self, args: dict[str, Any]) -> list[str]:
        return list(self.fixture.namespaces)

    def list_nodes(self, args: dict[str, Any]) -> list[dict[str, Any]]:
        return self.fixture.records("Node")

    def list_resources(self, args: dict[str, Any]) -> list[dict[str, Any]]:
        kind = args.get("kind")
        namespace = args.get("namespace")
        if kind not in ALL_KINDS:
            raise ToolError(f"unknown kind {kind!r}")
        if kind in CLUSTER_KINDS:
            return self.fixture.records(kind)
        if namespace is None:
            raise ToolError(f"kind {kind!r} is namespaced; namespace is required")
        if namespace not in self.fixture.namespaces:
            raise ToolError(f"unknown namespace {namespace!r}")
        return self.fixture.records(kind, namespace)

    def fail_n_times(self, args: dict[str, Any]) -> dict[str, Any]:
        n = args.get("n", 0)
        key = str(args.get("key", "default"))
        self.failures[key] += 1
        attempt = self.failures[key]
        if attempt <= n:
            raise ToolError(f"injected failure {attempt} of {n} for key {key!r}")
        return {"ok": True, "attempt": attempt, "key": key}

    async def sleep_ms(self, args: dict[str, Any]) -> dict[str, Any]:
        ms = args.get("ms", 0)
        await asyncio.sleep(ms / 1000)
        return {"sleptMs": ms}


class GraphServer(McpServer):
    """Named property graphs behind a ``run_query`` tool."""

    def __init__(self, name: str = "graph") -> None:
        super().__init__(name)
        self.graphs: dict[str, PropertyGraph] = {}
        self.add_tool("run_query", self.run_query, "Run a MERGE/MATCH query against a named graph.", {
            "type": "object",
            "properties": {"query": {"type": "string"}, "graph": {"type": "string"}},
            "required": ["query"],
        })

    def graph(self, name: str = "default") -> PropertyGraph:
        return self.graphs.setdefault(name, PropertyGraph())

    def run_query(self, args: dict[str, Any]) -> dict[str, Any]:
        query = args.get("query")
        if not isinstance(query, str):
            raise ToolError("query must be a string")
        try:
            return self.graph(str(args.get("graph", "default"))).run(query)
        except GraphQueryError as exc:
            raise ToolError(f"query error: {exc}") from None
