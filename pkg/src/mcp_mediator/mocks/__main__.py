"""Run a mock server, or print a generated sync blueprint.

    python -m mcp_mediator.mocks resource [--seed N] [--http PORT]
    python -m mcp_mediator.mocks graph [--http PORT]
    python -m mcp_mediator.mocks blueprint [--shape desk|single-namespace|full]
"""
from __future__ import annotations

import argparse
import asyncio
import os
import sys

from ..blueprint import serialize_blueprint
from ..protocol import run_server
from .fixture import ALL_KINDS, DESK_KINDS, generate_fixture
from .servers import GraphServer, ResourceServer
from .sync import SHAPES, make_sync_blueprint


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="python -m mcp_mediator.mocks")
    ap.add_argument("server", choices=("resource", "graph", "blueprint"))
    ap.add_argument("--seed", type=int, default=int(os.environ.get("MOCK_SEED", "0")))
    ap.add_argument("--namespaces", type=int, default=3)
    ap.add_argument("--nodes", type=int, default=3)
    ap.add_argument("--kinds", default=",".join(DESK_KINDS),
                    help="comma-separated kinds, or 'all'")
    ap.add_argument("--name", help="server name reported on initialize")
    ap.add_argument("--http", type=int, metavar="PORT", help="serve HTTP instead of stdio (0 = any port)")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--shape", choices=sorted(SHAPES), default="desk")
    args = ap.parse_args(argv)

    if args.server == "blueprint":
        sys.stdout.write(serialize_blueprint(make_sync_blueprint(SHAPES[args.shape])))
        return 0

    if args.server == "resource":
        kinds = ALL_KINDS if args.kinds == "all" else tuple(k for k in args.kinds.split(",") if k)
        fixture = generate_fixture(seed=args.seed, namespaces=args.namespaces, kinds=kinds, nodes=args.nodes)
        server = ResourceServer(fixture, name=args.name or "k8s")
    else:
        server = GraphServer(name=args.name or "graph")

    def ready(url: str) -> None:
        print(url, file=sys.stderr, flush=True)

    try:
        asyncio.run(run_server(server, "stdio" if args.http is None else "http",
                               args.host, args.http or 0, ready))
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
