"""Command-line entry point.

Exit codes:
    0  ok
    2  invalid input (config file, blueprint file, arguments)
    3  a downstream server could not be reached
    4  run finished with status failure or partial
    5  workflow not found
    6  parameter error
"""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import cost
from .blueprint import ParseError, WorkflowBlueprint, blueprint_to_dict, parse_blueprint, validate_structure, validate_tools
from .engine import InvalidBlueprint, ParamError, RunRequest, RunResult, execute
from .pool import ClientPool, ConfigError, ConnectError, load_config
from .store import NotFound, PreconditionError, StoreError, WorkflowStore

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONNECT = 3
EXIT_RUN_FAILED = 4
EXIT_NOT_FOUND = 5
EXIT_PARAM = 6

DEFAULT_KS = "1,2,5,10,50,365"

log = logging.getLogger("mcp_mediator")


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


def _err(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def _store(args: argparse.Namespace) -> WorkflowStore:
    return WorkflowStore(args.store)


def _pool(config: str | None) -> ClientPool:
    if not config:
        return ClientPool([])
    try:
        return ClientPool(load_config(config))
    except ConfigError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None


async def _open(pool: ClientPool) -> ClientPool:
    try:
        return await pool.initialize()
    except ConnectError as exc:
        raise CliError(EXIT_CONNECT, str(exc)) from None


def _read_blueprint(path: str) -> WorkflowBlueprint:
    try:
        return parse_blueprint(Path(path).read_bytes())
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {path}: {exc}") from None
    except ParseError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from None


def parse_param_args(pairs: Sequence[str], bp: WorkflowBlueprint) -> dict[str, Any]:
    """``k=v`` pairs; values of non-string params are read as JSON."""
    out: dict[str, Any] = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise CliError(EXIT_PARAM, f"--param expects key=value, got {pair!r}")
        spec = bp.params.get(key)
        if spec is None or spec.type == "string":
            out[key] = raw
            continue
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            raise CliError(EXIT_PARAM, f"param {key!r} expects a {spec.type} (JSON), got {raw!r}") from None
    return out


def _print_report(report, as_json: bool) -> None:
    if as_json:
        print(json.dumps(report.to_dict(), indent=2))
        return
    for issue in report.errors:
        print(f"error    {issue.path}  [{issue.code}] {issue.message}")
    for issue in report.warnings:
        print(f"warning  {issue.path}  [{issue.code}] {issue.message}")
    print(f"{len(report.errors)} error(s), {len(report.warnings)} warning(s)")


def render_run(result: RunResult) -> str:
    lines = [f"run {result.run_id}  workflow {result.workflow_id}  status {result.status}"]
    width = max([len(r.step_id) for r in result.step_results] + [4])
    for r in result.step_results:
        line = f"  {r.step_id:<{width}}  {r.status:<7} {r.duration_ms:>7} ms"
        if r.error:
            line += f"  [{r.error.get('code')}] {r.error.get('message')}"
        lines.append(line)
    if result.collected_errors:
        lines.append(f"collected errors: {len(result.collected_errors)}")
        for e in result.collected_errors:
            lines.append(f"  {e.get('path') or e.get('stepId')}  [{e.get('code')}] {e.get('message')}")
    return "\n".join(lines)


# ------------------------------------------------------------ commands


def cmd_serve(args: argparse.Namespace) -> int:
    from .server import serve

    pool = _pool(args.config)
    store = _store(args)

    async def main() -> None:
        await _open(pool)
        await serve(pool, store, "http" if args.transport == "http" else "stdio", args.host, args.port,
                    on_ready=lambda url: print(f"serving on {url}/mcp", file=sys.stderr, flush=True))

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    store = _store(args)
    source = Path(args.workflow)
    if source.suffix == ".json" and source.is_file():
        bp = _read_blueprint(args.workflow)
    else:
        try:
            bp = store.load(args.workflow)
        except NotFound as exc:
            raise CliError(EXIT_NOT_FOUND, str(exc)) from None
        except StoreError as exc:
            raise CliError(EXIT_INPUT, str(exc)) from None
    params = parse_param_args(args.param, bp)
    pool = _pool(args.config)

    async def main() -> RunResult:
        await _open(pool)
        try:
            return await execute(bp, RunRequest(bp.id, params), pool, max_concurrency=args.max_concurrency)
        finally:
            await pool.close()

    try:
        result = asyncio.run(main())
    except ParamError as exc:
        raise CliError(EXIT_PARAM, str(exc)) from None
    except InvalidBlueprint as exc:
        for issue in exc.report.errors:
            _err(f"{issue.path} [{issue.code}] {issue.message}")
        raise CliError(EXIT_INPUT, str(exc)) from None
    if not args.no_record:
        try:
            store.record_run(result)
        except StoreError as exc:
            log.warning("could not record run: %s", exc)
    print(result.to_json() if args.json else render_run(result))
    return EXIT_OK if result.status == "success" else EXIT_RUN_FAILED


def cmd_validate(args: argparse.Namespace) -> int:
    bp = _read_blueprint(args.file)
    report = validate_structure(bp)
    if args.config and not report.errors:
        pool = _pool(args.config)

        async def catalog():
            await _open(pool)
            try:
                return pool.catalog
            finally:
                await pool.close()

        report = report.merge(validate_tools(bp, asyncio.run(catalog())))
    _print_report(report, args.json)
    return EXIT_INPUT if report.errors else EXIT_OK


def cmd_create(args: argparse.Namespace) -> int:
    bp = _read_blueprint(args.file)
    try:
        path = _store(args).save(bp)
    except PreconditionError as exc:
        _print_report(exc.report, False)
        return EXIT_INPUT
    except StoreError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    print(f"saved {bp.id} to {path}")
    return EXIT_OK


def cmd_get(args: argparse.Namespace) -> int:
    try:
        bp = _store(args).load(args.id)
    except NotFound as exc:
        raise CliError(EXIT_NOT_FOUND, str(exc)) from None
    print(json.dumps(blueprint_to_dict(bp), indent=2))
    return EXIT_OK


def cmd_list(args: argparse.Namespace) -> int:
    rows = _store(args).list()
    if args.json:
        print(json.dumps(rows, indent=2))
        return EXIT_OK
    for row in rows:
        print(f"{row['id']:<32} {row['version']:<10} {row['stepCount']:>4} steps  {row['description']}")
    return EXIT_OK


def cmd_delete(args: argparse.Namespace) -> int:
    try:
        _store(args).delete(args.id)
    except NotFound as exc:
        raise CliError(EXIT_NOT_FOUND, str(exc)) from None
    print(f"deleted {args.id}")
    return EXIT_OK


def parse_ks(text: str) -> list[int]:
    ks = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if not part.isdigit() or int(part) < 1:
            raise CliError(EXIT_INPUT, f"--k expects positive integers, got {part!r}")
        ks.append(int(part))
    return ks


def cmd_cost(args: argparse.Namespace) -> int:
    inputs = cost.PRESETS[args.preset]
    ks = parse_ks(args.k)
    if args.csv:
        sys.stdout.write(cost.emit_tables(inputs, ks))
        return EXIT_OK
    print(f"preset {args.preset}: agent cost per run {inputs.agent_cost:,} tokens, "
          f"design {inputs.design_cost:,}, per execution {inputs.exec_cost:,}")
    if ks:
        print(cost.render_table(inputs, ks))
    print(f"break-even K* = {cost.format_fixed(cost.break_even(inputs), 4)}")
    print(f"marginal savings = {cost.format_percent(cost.marginal_savings(inputs), 3)}%")
    return EXIT_OK


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcp-mediator", description="Declarative MCP workflow mediator.")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="log to stderr (-vv for debug)")
    sub = ap.add_subparsers(dest="command", required=True)

    def store_arg(p: argparse.ArgumentParser) -> None:
        p.add_argument("--store", help="store directory (default: $MCP_MEDIATOR_STORE or ~/.mcp-mediator)")

    p = sub.add_parser("serve", help="serve the six workflow tools over MCP")
    p.add_argument("--config", help="downstream servers JSON file")
    store_arg(p)
    p.add_argument("--transport", choices=("stdio", "http"), default="stdio")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("run", help="run a stored workflow or a blueprint file directly")
    p.add_argument("workflow", help="workflow id, or path to a .json blueprint")
    p.add_argument("--param", "-p", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--config", help="downstream servers JSON file")
    store_arg(p)
    p.add_argument("--json", action="store_true", help="print the run result as JSON")
    p.add_argument("--max-concurrency", type=int, default=8)
    p.add_argument("--no-record", action="store_true", help="do not persist the run summary")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="validate a blueprint file")
    p.add_argument("file")
    p.add_argument("--config", help="also check tool names against these servers")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("create", help="validate and save a blueprint file to the store")
    p.add_argument("file")
    store_arg(p)
    p.set_defaults(func=cmd_create)

    p = sub.add_parser("get", help="print a stored blueprint")
    p.add_argument("id")
    store_arg(p)
    p.set_defaults(func=cmd_get)

    p = sub.add_parser("list", help="list stored workflows")
    store_arg(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_list)

    p = sub.add_parser("delete", help="delete a stored workflow")
    p.add_argument("id")
    store_arg(p)
    p.set_defaults(func=cmd_delete)

    p = sub.add_parser("cost", help="print the amortized token cost table")
    p.add_argument("--preset", choices=sorted(cost.PRESETS), default="table")
    p.add_argument("--k", default=DEFAULT_KS, help="comma-separated run counts")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_cost)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        _err(str(exc))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
