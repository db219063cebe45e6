"""Shared test plumbing: run coroutines, build blueprints, wire in-process mocks."""
from __future__ import annotations

import asyncio
from typing import Any, Iterable

from mcp_mediator.blueprint import WorkflowBlueprint, blueprint_from_dict
from mcp_mediator.engine import RunResult, execute
from mcp_mediator.mocks import GraphServer, ResourceServer
from mcp_mediator.mocks.fixture import ResourceFixture
from mcp_mediator.pool import ClientPool, ServerConfig
from mcp_mediator.protocol import McpServer


def run(coro):
    return asyncio.run(coro)


def make_bp(steps: list[dict[str, Any]], **top: Any) -> WorkflowBlueprint:
    return blueprint_from_dict({"id": top.pop("id", "t"), "steps": steps, **top})


def call(step_id: str, tool: str, **params: Any) -> dict[str, Any]:
    return {"id": step_id, "type": "call", "tool": tool, "params": params}


def in_process(*servers: McpServer) -> ClientPool:
    return ClientPool([ServerConfig.in_process(s.name, s) for s in servers])


async def execute_with(bp: WorkflowBlueprint, params: dict | None = None,
                       servers: Iterable[McpServer] | None = None, **kw: Any) -> RunResult:
    servers = list(servers) if servers is not None else [ResourceServer(), GraphServer()]
    async with in_process(*servers) as pool:
        return await execute(bp, params or {}, pool, **kw)


def run_bp(bp: WorkflowBlueprint, params: dict | None = None,
           servers: Iterable[McpServer] | None = None, **kw: Any) -> RunResult:
    return run(execute_with(bp, params, servers, **kw))


# Independent oracle for the sync workflow: which record field links which
# labels.  Written from the fixture's field meanings, not from the generator.
ORACLE_LINKS = {
    "CONTAINS_DEPLOYMENT": ("Deployment", "namespaceUid", "Namespace", "in"),
    "CONTAINS_STATEFULSET": ("StatefulSet", "namespaceUid", "Namespace", "in"),
    "CONTAINS_DAEMONSET": ("DaemonSet", "namespaceUid", "Namespace", "in"),
    "CONTAINS_SERVICE": ("Service", "namespaceUid", "Namespace", "in"),
    "CONTAINS_CONFIGMAP": ("ConfigMap", "namespaceUid", "Namespace", "in"),
    "CONTAINS_SECRET": ("Secret", "namespaceUid", "Namespace", "in"),
    "CONTAINS_JOB": ("Job", "namespaceUid", "Namespace", "in"),
    "MANAGES_REPLICASET": ("ReplicaSet", "ownerUid", "Deployment", "in"),
    "MANAGES_POD": ("Pod", "ownerUid", "ReplicaSet", "in"),
    "SCHEDULED_ON": ("Pod", "nodeUid", "Node", "out"),
    "EXPOSES_VIA_SERVICE": ("Service", "targetUid", "Deployment", "in"),
    "ROUTES_TO": ("Ingress", "serviceUid", "Service", "out"),
    "USES_CONFIGMAP": ("Pod", "configMapUid", "ConfigMap", "out"),
    "USES_SECRET": ("Pod", "secretUid", "Secret", "out"),
    "RUNS_AS": ("Pod", "serviceAccountUid", "ServiceAccount", "out"),
    "CLAIMS_VOLUME": ("Pod", "claimUid", "PersistentVolumeClaim", "out"),
    "BOUND_TO": ("PersistentVolumeClaim", "volumeUid", "PersistentVolume", "out"),
    "USES_STORAGE_CLASS": ("PersistentVolume", "storageClassUid", "StorageClass", "out"),
}


def oracle_graph(fx: ResourceFixture, kinds: Iterable[str], rel_types: Iterable[str],
                 namespaces: Iterable[str] | None = None) -> tuple[set, set]:
    """Brute-force (nodes, relationships) the sync should produce from ``fx``."""
    namespaces = list(fx.namespaces if namespaces is None else namespaces)
    cluster = ("Cluster", f"Cluster:{fx.cluster_name}")
    nodes = {cluster} | {("Namespace", f"Namespace:{ns}") for ns in namespaces}
    records: dict[str, list[dict]] = {}
    for kind in kinds:
        if kind in ("Node", "StorageClass", "PersistentVolume", "ClusterRole", "ClusterRoleBinding",
                    "CustomResourceDefinition", "PriorityClass"):
            records[kind] = list(fx.records(kind))
        else:
            records[kind] = [r for ns in namespaces for r in fx.records(kind, ns)]
        nodes |= {(kind, r["uid"]) for r in records[kind]}
    rels = set()
    for rel in rel_types:
        if rel == "HAS_NAMESPACE":
            rels |= {(rel, cluster, ("Namespace", f"Namespace:{ns}")) for ns in namespaces}
        elif rel == "HAS_NODE":
            rels |= {(rel, cluster, ("Node", r["uid"])) for r in records["Node"]}
        else:
            kind, fld, other, direction = ORACLE_LINKS[rel]
            for r in records[kind]:
                if r.get(fld):
                    me, them = (kind, r["uid"]), (other, r[fld])
                    rels.add((rel, me, them) if direction == "out" else (rel, them, me))
    return nodes, rels


def graph_contents(gs: GraphServer, name: str = "cmdb-prod") -> tuple[set, set]:
    g = gs.graph(name)
    return set(g.nodes), set(g.relationships)
