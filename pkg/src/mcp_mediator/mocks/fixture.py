"""Deterministic cluster-inventory fixture for the mock resource server.

Every record carries a ``uid`` (``Kind:name`` for cluster-scoped kinds,
``Kind:namespace/name`` for namespaced ones) and, where the kind has a
relationship to another kind, a ``*Uid`` field naming the other end.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any

CLUSTER_KINDS = (
    "Node", "StorageClass", "PersistentVolume", "ClusterRole",
    "ClusterRoleBinding", "CustomResourceDefinition", "PriorityClass",
)
NAMESPACED_KINDS = (
    "Deployment", "StatefulSet", "DaemonSet", "ReplicaSet", "Pod", "Service",
    "Ingress", "ConfigMap", "Secret", "ServiceAccount", "PersistentVolumeClaim",
    "Role", "RoleBinding", "Job", "CronJob",
)
ALL_KINDS = CLUSTER_KINDS + NAMESPACED_KINDS
DESK_KINDS = ("Node", "Deployment", "ReplicaSet", "Pod")

NAMESPACE_NAMES = (
    "platform-core", "data-services", "ml-workloads", "observability", "ingress-system",
    "payments", "identity", "search", "messaging", "analytics", "batch-jobs", "edge-gateway",
)

_APPS = ("api", "worker", "web", "cache", "broker", "scheduler", "indexer", "gateway", "auth", "etl")


def namespace_names(count: int) -> list[str]:
    names = list(NAMESPACE_NAMES[:count])
    names += [f"team-{i:02d}" for i in range(len(names) + 1, count + 1)]
    return names


def uid(kind: str, name: str, namespace: str | None = None) -> str:
    return f"{kind}:{namespace}/{name}" if namespace else f"{kind}:{name}"


@dataclass
class ResourceFixture:
    cluster_name: str
    nodes: list[str]
    namespaces: list[str]
    kinds: tuple[str, ...]
    # (namespace or "", kind) -> records; cluster-scoped kinds use ""
    resources: dict[tuple[str, str], list[dict[str, Any]]] = field(default_factory=dict)

    def records(self, kind: str, namespace: str = "") -> list[dict[str, Any]]:
        return self.resources.get((namespace, kind), [])

    def all_records(self, kind: str) -> list[dict[str, Any]]:
        if kind in CLUSTER_KINDS:
            return list(self.records(kind))
        return [r for ns in self.namespaces for r in self.records(kind, ns)]


def generate_fixture(
    seed: int = 0,
    namespaces: int = 3,
    kinds: tuple[str, ...] | list[str] = DESK_KINDS,
    nodes: int = 3,
    cluster_name: str = "atlas-prod",
    deployments_per_namespace: int = 2,
) -> ResourceFixture:
    """Build a fixture; the same arguments always produce the same content."""
    unknown = set(kinds) - set(ALL_KINDS)
    if unknown:
        raise ValueError(f"unknown kind(s): {', '.join(sorted(unknown))}")
    kinds = tuple(k for k in ALL_KINDS if k in set(kinds))
    rng = random.Random(seed)
    has = set(kinds).__contains__
    fx = ResourceFixture(
        cluster_name=cluster_name,
        nodes=[f"node-alpha-{i:02d}" for i in range(1, nodes + 1)],
        namespaces=namespace_names(namespaces),
        kinds=kinds,
    )
    cluster_uid = uid("Cluster", cluster_name)

    def add(kind: str, ns: str, name: str, **extra: Any) -> dict[str, Any]:
        rec = {
            "kind": kind,
            "name": name,
            "namespace": ns or None,
            "uid": uid(kind, name, ns or None),
            "labels": extra.pop("labels", {}),
            "ownerRef": extra.pop("ownerRef", None),
        }
        if ns:
            rec["namespaceUid"] = uid("Namespace", ns)
        rec.update({k: v for k, v in extra.items() if v is not None})
        fx.resources.setdefault((ns, kind), []).append(rec)
        return rec

    def suffix(n: int = 5) -> str:
        return "".join(rng.choice("bcdfghjklmnpqrstvwxz2456789") for _ in range(n))

    if has("Node"):
        for name in fx.nodes:
            add("Node", "", name, clusterUid=cluster_uid,
                labels={"topology.zone": rng.choice(["zone-a", "zone-b", "zone-c"])})
    storage_classes = []
    if has("StorageClass"):
        for name in ("standard", "fast-ssd"):
            storage_classes.append(add("StorageClass", "", name))
    for kind, count in (("ClusterRole", 2), ("ClusterRoleBinding", 2),
                        ("CustomResourceDefinition", 1), ("PriorityClass", 1)):
        if has(kind):
            for i in range(count):
                add(kind, "", f"{kind.lower()}-{i + 1}")

    node_uids = [uid("Node", n) for n in fx.nodes] if has("Node") else []
    claims: list[dict[str, Any]] = []
    for ns in fx.namespaces:
        def pick(kind: str) -> str | None:
            pool = fx.records(kind, ns)
            return rng.choice(pool)["uid"] if pool else None

        for kind in ("ConfigMap", "Secret", "ServiceAccount"):
            if has(kind):
                for i in range(rng.randint(1, 2)):
                    add(kind, ns, f"{kind.lower()}-{i + 1}")
        if has("PersistentVolumeClaim"):
            claims.append(add("PersistentVolumeClaim", ns, f"data-{suffix(4)}"))

        def pod(name: str, owner: dict[str, Any] | None) -> None:
            add("Pod", ns, name,
                ownerRef={"kind": owner["kind"], "name": owner["name"]} if owner else None,
                ownerUid=owner["uid"] if owner and owner["kind"] == "ReplicaSet" else None,
                nodeUid=rng.choice(node_uids) if node_uids else None,
                configMapUid=pick("ConfigMap"),
                secretUid=pick("Secret"),
                serviceAccountUid=pick("ServiceAccount"),
                claimUid=pick("PersistentVolumeClaim") if rng.random() < 0.5 else None,
                labels=dict(owner["labels"]) if owner else {})

        apps = rng.sample(_APPS, k=deployments_per_namespace)
        for app in apps:
            labels = {"app": app}
            dep = add("Deployment", ns, app, labels=labels) if has("Deployment") else None
            if has("ReplicaSet"):
                rs = add("ReplicaSet", ns, f"{app}-{suffix(8)}", labels=labels,
                         ownerRef={"kind": "Deployment", "name": app} if dep else None,
                         ownerUid=dep["uid"] if dep else None)
                if has("Pod"):
                    for _ in range(rng.randint(1, 2)):
                        pod(f"{rs['name']}-{suffix()}", rs)
            elif has("Pod"):
                pod(f"{app}-{suffix()}", None)
            if has("Service"):
                add("Service", ns, f"{app}-svc", labels=labels, targetUid=dep["uid"] if dep else None)
        if has("StatefulSet"):
            sts = add("StatefulSet", ns, "store")
            if has("Pod"):
                pod("store-0", sts)
        if has("DaemonSet"):
            add("DaemonSet", ns, "log-agent")
        if has("Ingress"):
            services = fx.records("Service", ns)
            add("Ingress", ns, "public", serviceUid=services[0]["uid"] if services else None)
        if has("Role"):
            add("Role", ns, "reader")
        if has("RoleBinding"):
            add("RoleBinding", ns, "reader-binding")
        if has("CronJob"):
            cron = add("CronJob", ns, "nightly")
        else:
            cron = None
        if has("Job"):
            add("Job", ns, f"nightly-{rng.randint(1000, 9999)}",
                ownerRef={"kind": "CronJob", "name": cron["name"]} if cron else None)

    if has("PersistentVolume"):
        for claim in claims:
            pv = add("PersistentVolume", "", f"pv-{suffix(6)}",
                     storageClassUid=rng.choice(storage_classes)["uid"] if storage_classes else None)
            claim["volumeUid"] = pv["uid"]
    return fx
