"""Generator for cluster-to-graph sync blueprints.

The blueprint has three phases:

1. cluster-scoped: MERGE the Cluster node, then one fetch call per
   cluster-scoped kind;
2. namespace-scoped: list namespaces, MERGE them, MERGE the cluster-scoped
   records, then per namespaced kind a fetch loop over namespaces and a MERGE
   loop over the flattened results;
3. relationships: one loop per relationship type, MERGEing an edge for every
   record that references the other end.

Step counts are ``1 + C``, ``2 + C + 2N`` and ``R`` for C cluster-scoped
kinds, N namespaced kinds and R relationship types.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

from ..blueprint import CallStep, ErrorStrategy, LoopStep, ParamSpec, Step, WorkflowBlueprint
from .fixture import CLUSTER_KINDS, NAMESPACED_KINDS


@dataclass(frozen=True)
class RelDef:
    type: str
    source: str  # kind whose records drive the loop, or "Namespace"
    other_label: str
    other_field: str | None  # record field holding the other end's uid
    outgoing: bool  # True: record -> other; False: other -> record


RELATIONSHIPS: dict[str, RelDef] = {r.type: r for r in (
    RelDef("HAS_NODE", "Node", "Cluster", None, False),
    RelDef("HAS_NAMESPACE", "Namespace", "Cluster", None, False),
    RelDef("CONTAINS_DEPLOYMENT", "Deployment", "Namespace", "namespaceUid", False),
    RelDef("MANAGES_REPLICASET", "ReplicaSet", "Deployment", "ownerUid", False),
    RelDef("MANAGES_POD", "Pod", "ReplicaSet", "ownerUid", False),
    RelDef("SCHEDULED_ON", "Pod", "Node", "nodeUid", True),
    RelDef("EXPOSES_VIA_SERVICE", "Service", "Deployment", "targetUid", False),
    RelDef("ROUTES_TO", "Ingress", "Service", "serviceUid", True),
    RelDef("USES_CONFIGMAP", "Pod", "ConfigMap", "configMapUid", True),
    RelDef("USES_SECRET", "Pod", "Secret", "secretUid", True),
    RelDef("RUNS_AS", "Pod", "ServiceAccount", "serviceAccountUid", True),
    RelDef("CLAIMS_VOLUME", "Pod", "PersistentVolumeClaim", "claimUid", True),
    RelDef("BOUND_TO", "PersistentVolumeClaim", "PersistentVolume", "volumeUid", True),
    RelDef("USES_STORAGE_CLASS", "PersistentVolume", "StorageClass", "storageClassUid", True),
    RelDef("CONTAINS_STATEFULSET", "StatefulSet", "Namespace", "namespaceUid", False),
    RelDef("CONTAINS_DAEMONSET", "DaemonSet", "Namespace", "namespaceUid", False),
    RelDef("CONTAINS_SERVICE", "Service", "Namespace", "namespaceUid", False),
    RelDef("CONTAINS_CONFIGMAP", "ConfigMap", "Namespace", "namespaceUid", False),
    RelDef("CONTAINS_SECRET", "Secret", "Namespace", "namespaceUid", False),
    RelDef("CONTAINS_JOB", "Job", "Namespace", "namespaceUid", False),
)}


@dataclass(frozen=True)
class SyncShape:
    cluster_kinds: tuple[str, ...]
    namespaced_kinds: tuple[str, ...]
    relationships: tuple[str, ...]
    single_namespace: bool = False

    @property
    def kinds(self) -> tuple[str, ...]:
        return self.cluster_kinds + self.namespaced_kinds

    @property
    def phase_sizes(self) -> tuple[int, int, int]:
        c, n = len(self.cluster_kinds), len(self.namespaced_kinds)
        return 1 + c, 2 + c + 2 * n, len(self.relationships)


FULL_SHAPE = SyncShape(CLUSTER_KINDS, NAMESPACED_KINDS, tuple(RELATIONSHIPS))

SINGLE_NAMESPACE_SHAPE = SyncShape(
    ("Node",),
    ("Deployment", "ReplicaSet", "Pod", "Service", "ConfigMap", "Secret", "ServiceAccount"),
    ("HAS_NODE", "HAS_NAMESPACE", "CONTAINS_DEPLOYMENT", "MANAGES_REPLICASET",
     "MANAGES_POD", "SCHEDULED_ON", "EXPOSES_VIA_SERVICE", "USES_CONFIGMAP"),
    single_namespace=True,
)

DESK_SHAPE = SyncShape(
    ("Node",),
    ("Deployment", "ReplicaSet", "Pod"),
    ("HAS_NODE", "HAS_NAMESPACE", "CONTAINS_DEPLOYMENT", "MANAGES_REPLICASET",
     "MANAGES_POD", "SCHEDULED_ON"),
)

SHAPES = {"full": FULL_SHAPE, "single-namespace": SINGLE_NAMESPACE_SHAPE, "desk": DESK_SHAPE}


def snake(kind: str) -> str:
    return re.sub(r"(?<!^)(?=[A-Z])", "_", kind).lower()


def _merge_node(label: str, uid_tpl: str, props: dict[str, str]) -> str:
    sets = ", ".join(f"n.{k} = '{v}'" for k, v in props.items())
    query = f"MERGE (n:{label} {{uid: '{uid_tpl}'}})"
    return f"{query} SET {sets}" if sets else query


def _query_call(step_id: str, query: str) -> CallStep:
    return CallStep(step_id, "run_query", {"graph": "{{params.graph}}", "query": query})


def _loop(step_id: str, over: str, as_: str, do: Step) -> LoopStep:
    return LoopStep(step_id, over, as_, do)


def make_sync_blueprint(shape: SyncShape = FULL_SHAPE, blueprint_id: str = "cluster-cmdb-sync") -> WorkflowBlueprint:
    kinds = set(shape.kinds)
    for rel_type in shape.relationships:
        rel = RELATIONSHIPS[rel_type]
        needed = {rel.source, rel.other_label} - {"Namespace", "Cluster"}
        if not needed <= kinds:
            raise ValueError(f"relationship {rel_type} needs kinds {sorted(needed - kinds)}")

    cluster_uid = "Cluster:{{params.cluster}}"
    if shape.single_namespace:
        namespaces = "{{steps.list_namespaces[?@ == '{{params.namespace}}']}}"
    else:
        namespaces = "{{steps.list_namespaces}}"

    steps: list[Step] = [
        _query_call("merge_cluster", _merge_node("Cluster", cluster_uid, {"name": "{{params.cluster}}"})),
    ]
    for kind in shape.cluster_kinds:
        if kind == "Node":
            steps.append(CallStep("fetch_node", "list_nodes", {}))
        else:
            steps.append(CallStep(f"fetch_{snake(kind)}", "list_resources", {"kind": kind}))

    steps.append(CallStep("list_namespaces", "list_namespaces", {}))
    steps.append(_loop("merge_namespaces", namespaces, "ns", _query_call(
        "merge_namespace",
        _merge_node("Namespace", "Namespace:{{ns}}", {"name": "{{ns}}", "cluster": "{{params.cluster}}"}),
    )))
    for kind in shape.cluster_kinds:
        s = snake(kind)
        steps.append(_loop(f"merge_{s}", f"{{{{steps.fetch_{s}}}}}", "item", _query_call(
            f"merge_{s}_item", _merge_node(kind, "{{item.uid}}", {"name": "{{item.name}}"}),
        )))
    for kind in shape.namespaced_kinds:
        s = snake(kind)
        steps.append(_loop(f"fetch_{s}", namespaces, "ns", CallStep(
            f"fetch_{s}_ns", "list_resources", {"kind": kind, "namespace": "{{ns}}"},
        )))
        steps.append(_loop(f"merge_{s}", f"{{{{steps.fetch_{s}[]}}}}", "item", _query_call(
            f"merge_{s}_item",
            _merge_node(kind, "{{item.uid}}", {"name": "{{item.name}}", "namespace": "{{item.namespace}}"}),
        )))

    for rel_type in shape.relationships:
        rel = RELATIONSHIPS[rel_type]
        link_id = f"link_{rel_type.lower()}"
        if rel.source == "Namespace":
            over, as_, record = namespaces, "ns", ("Namespace", "Namespace:{{ns}}")
        else:
            s = snake(rel.source)
            flat = "[]" if rel.source in NAMESPACED_KINDS else ""
            flt = f" | [?{rel.other_field}]" if rel.other_field else ""
            over, as_, record = f"{{{{steps.fetch_{s}{flat}{flt}}}}}", "item", (rel.source, "{{item.uid}}")
        other = (rel.other_label, cluster_uid if rel.other_label == "Cluster" else f"{{{{item.{rel.other_field}}}}}")
        src, dst = (record, other) if rel.outgoing else (other, record)
        query = (f"MERGE (a:{src[0]} {{uid: '{src[1]}'}}) MERGE (b:{dst[0]} {{uid: '{dst[1]}'}}) "
                 f"MERGE (a)-[:{rel_type}]->(b)")
        steps.append(_loop(link_id, over, as_, _query_call(f"{link_id}_item", query)))

    params: dict[str, ParamSpec] = {
        "graph": ParamSpec("string", "cmdb-prod"),
        "cluster": ParamSpec("string", "atlas-prod"),
    }
    if shape.single_namespace:
        params["namespace"] = ParamSpec("string", "platform-core")
    return WorkflowBlueprint(
        id=blueprint_id,
        description="Sync Kubernetes cluster inventory into a CMDB graph",
        version="2.0.0",
        params=params,
        error_strategy=ErrorStrategy("continue", max_retries=2, retry_delay_ms=1000),
        steps=tuple(steps),
    )


def phase_of(step_id: str, blueprint: WorkflowBlueprint) -> int:
    """Phase number (1-3) of a top-level step in a generated sync blueprint."""
    ids = [s.id for s in blueprint.steps]
    if step_id.startswith("link_"):
        return 3
    return 1 if ids.index(step_id) < ids.index("list_namespaces") else 2
