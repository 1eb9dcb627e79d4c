"""Command line interface: ``ctxtree {query,curate,search,status,serve}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import find_config, resolve_project_root
from .daemon import DaemonClient, default_socket_path, serve
from .engine import ContextEngine
from .errors import CtxTreeError, DaemonUnreachable

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_OOD = 2
EXIT_UNREACHABLE = 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--root", help="project root (default: $CTXTREE_PROJECT_ROOT or cwd)")
    p.add_argument("--config", help="JSON config file (default: <root>/.brv/config.json)")
    p.add_argument("--socket", help="daemon socket path (default: <root>/.brv/daemon.sock)")
    p.add_argument("--standalone", action="store_true", help="run in-process instead of via the daemon")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxtree", description="File-based agent memory engine.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("query", help="answer a question from the context tree")
    q.add_argument("question")
    q.add_argument("--plain", action="store_true", help="print only the answer text")
    q.add_argument("--strict", action="store_true", help="exit 2 when the query is out of domain")
    _add_common(q)

    c = sub.add_parser("curate", help="store knowledge from files or explicit operations")
    c.add_argument("--files", nargs="+", default=[], metavar="FILE")
    c.add_argument("--message", "-m", default="")
    c.add_argument("--ops", help="JSON file holding a list of curate operations ('-' for stdin)")
    _add_common(c)

    s = sub.add_parser("search", help="ranked full-text search")
    s.add_argument("question")
    s.add_argument("--limit", type=int, default=None)
    _add_common(s)

    st = sub.add_parser("status", help="tree size, fingerprint, queue depth, cache stats")
    _add_common(st)

    sv = sub.add_parser("serve", help="run the daemon in the foreground")
    sv.add_argument("--root")
    sv.add_argument("--config")
    sv.add_argument("--socket")
    return parser


def _load_ops(source: str) -> list[dict]:
    text = sys.stdin.read() if source == "-" else Path(source).read_text(encoding="utf-8")
    data = json.loads(text)
    if isinstance(data, dict):
        data = data.get("operations", [])
    if not isinstance(data, list):
        raise ValueError("--ops must hold a JSON list of operations")
    return data


def _request(args: argparse.Namespace) -> tuple[str, dict]:
    if args.command == "query":
        return "query", {"q": args.question}
    if args.command == "search":
        params: dict[str, Any] = {"q": args.question}
        if args.limit is not None:
            params["limit"] = args.limit
        return "search", params
    if args.command == "curate":
        if args.ops:
            return "curate", {"operations": _load_ops(args.ops)}
        if not args.files:
            raise ValueError("curate needs --files or --ops")
        return "curate", {"files": [str(Path(f).resolve()) for f in args.files],
                          "message": args.message}
    return "status", {}


def _run_standalone(args: argparse.Namespace, root: Path, op: str, params: dict) -> Any:
    from .daemon import run_task

    engine = ContextEngine(root, find_config(root, args.config))
    try:
        return run_task(engine, op, params)
    finally:
        engine.close()


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    root = resolve_project_root(args.root)

    if args.command == "serve":
        try:
            serve(root, args.socket, config=find_config(root, args.config))
        except CtxTreeError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_ERROR
        return EXIT_OK

    try:
        op, params = _request(args)
        if args.standalone:
            result = _run_standalone(args, root, op, params)
        else:
            sock = args.socket or default_socket_path(root)
            with DaemonClient(sock, root=root) as client:
                result = client.request(op, params)
    except DaemonUnreachable as exc:
        print(f"error: daemon unreachable ({exc}); start it with 'ctxtree serve' "
              "or pass --standalone", file=sys.stderr)
        return EXIT_UNREACHABLE
    except (CtxTreeError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR

    if op == "query" and args.plain:
        print(result["answer"])
    else:
        print(json.dumps(result, indent=2, ensure_ascii=False))
    if op == "query" and args.strict and result.get("ood"):
        return EXIT_OOD
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
