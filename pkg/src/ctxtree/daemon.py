"""Local daemon: one session per project, one sequential task queue per session.

Transport is newline-delimited JSON over a Unix domain socket. A request
frame is ``{"id", "op", "params"}`` and the reply is
``{"id", "ok": true, "result"}`` or ``{"id", "ok": false, "error": {"type", "message"}}``.
See PROTOCOL.md.
"""

from __future__ import annotations

import asyncio
import contextlib
import itertools
import json
import logging
import os
import socket
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import xxhash

from . import errors
from .config import Config, find_config
from .engine import ContextEngine
from .errors import CtxTreeError, DaemonUnreachable, QueueFull, SocketInUse
from .retrieval import canonicalize_query

logger = logging.getLogger(__name__)

DEFAULT_SOCKET_NAME = Path(".brv") / "daemon.sock"
TASK_KINDS = ("query", "curate", "search", "status")
MAX_FRAME_BYTES = 64 * 1024 * 1024


def default_socket_path(project_root: str | os.PathLike) -> Path:
    return Path(project_root) / DEFAULT_SOCKET_NAME


def dedup_key(kind: str, payload: Mapping[str, Any]) -> str:
    if kind in ("query", "search"):
        canon: Any = {**payload, "q": canonicalize_query(str(payload.get("q", "")))}
    else:
        canon = payload
    text = json.dumps([kind, canon], sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return xxhash.xxh3_128_hexdigest(text.encode("utf-8"))


@dataclass
class Task:
    id: str
    kind: str
    payload: dict
    dedup_key: str
    submitted_at: float
    future: asyncio.Future = field(repr=False, default=None)  # type: ignore[assignment]
    submitters: int = 1


def run_task(engine: ContextEngine, kind: str, payload: Mapping[str, Any]) -> Any:
    """Execute one task against an engine; returns a JSON-ready result."""
    if kind == "query":
        return engine.query(str(payload["q"])).to_dict()
    if kind == "search":
        res = engine.search(str(payload["q"]), int(payload.get("limit", engine.config.max_results)))
        return {"query": res.query, "total": res.total_hits, "hits": [h.to_dict() for h in res.hits]}
    if kind == "curate":
        if "operations" in payload:
            return engine.curate(payload["operations"]).to_dict()
        return engine.curate_sources(payload.get("files", []), str(payload.get("message", ""))).to_dict()
    if kind == "status":
        return engine.status()
    raise ValueError(f"unknown task kind {kind!r}")


class ProjectSession:
    """Engine plus FIFO queue; tasks run one at a time on a dedicated thread."""

    def __init__(self, engine: ContextEngine, *, queue_limit: int = 1024) -> None:
        self.engine = engine
        self.queue_limit = queue_limit
        self._queue: deque[Task] = deque()
        self._pending: dict[str, Task] = {}
        self._wakeup = asyncio.Event()
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="session")
        self._ids = itertools.count(1)
        self._worker: asyncio.Task | None = None
        self._closing = False
        self.running: Task | None = None
        self.counters = {"submitted": 0, "executed": 0, "deduplicated": 0, "failed": 0}
        # hook for tests: called with (task) just before execution
        self.on_execute: Callable[[Task], None] | None = None

    @property
    def project_root(self) -> Path:
        return self.engine.project_root

    @property
    def depth(self) -> int:
        return len(self._queue)

    def start(self) -> None:
        if self._worker is None:
            self._worker = asyncio.get_running_loop().create_task(self._run())

    def submit(self, kind: str, payload: Mapping[str, Any]) -> asyncio.Future:
        if kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {kind!r}")
        if self._closing:
            raise CtxTreeError("session is shutting down")
        key = dedup_key(kind, payload)
        self.counters["submitted"] += 1
        existing = self._pending.get(key)
        if existing is not None:
            existing.submitters += 1
            self.counters["deduplicated"] += 1
            return existing.future
        if len(self._queue) >= self.queue_limit:
            self.counters["submitted"] -= 1
            raise QueueFull(f"queue holds {len(self._queue)} pending tasks (limit {self.queue_limit})")
        loop = asyncio.get_running_loop()
        task = Task(f"t{next(self._ids)}", kind, dict(payload), key, time.time(), loop.create_future())
        self._queue.append(task)
        self._pending[key] = task
        self._wakeup.set()
        self.start()
        return task.future

    async def _run(self) -> None:
        loop = asyncio.get_running_loop()
        while True:
            while not self._queue:
                if self._closing:
                    return
                self._wakeup.clear()
                await self._wakeup.wait()
            task = self._queue.popleft()
            # once started, a task is no longer a dedup target
            self._pending.pop(task.dedup_key, None)
            self.running = task
            try:
                if self.on_execute is not None:
                    self.on_execute(task)
                result = await loop.run_in_executor(self._executor, run_task, self.engine,
                                                    task.kind, task.payload)
            except Exception as exc:
                self.counters["failed"] += 1
                if not task.future.done():
                    task.future.set_exception(exc)
            else:
                if not task.future.done():
                    task.future.set_result(result)
            finally:
                self.counters["executed"] += 1
                self.running = None

    async def drain(self) -> None:
        """Stop accepting work and wait until every queued task has finished."""
        self._closing = True
        self._wakeup.set()
        if self._worker is not None:
            await self._worker
        await asyncio.get_running_loop().run_in_executor(self._executor, self.engine.close)
        self._executor.shutdown(wait=True)

    def stats(self) -> dict:
        return {**self.counters, "depth": self.depth, "running": self.running is not None}


def error_payload(exc: BaseException) -> dict:
    return {"type": type(exc).__name__, "message": str(exc)}


class Daemon:
    """Serves any number of projects; sessions are created on first use."""

    def __init__(self, project_root: str | os.PathLike, socket_path: str | os.PathLike | None = None, *,
                 config: Config | None = None,
                 engine_factory: Callable[[Path], ContextEngine] | None = None) -> None:
        self.project_root = Path(project_root).resolve()
        self.socket_path = Path(socket_path) if socket_path else default_socket_path(self.project_root)
        self._config = config
        self._engine_factory = engine_factory
        self.sessions: dict[Path, ProjectSession] = {}
        self._server: asyncio.AbstractServer | None = None
        self._stopping: asyncio.Event | None = None
        self._connections: set[asyncio.Task] = set()

    def _make_engine(self, root: Path) -> ContextEngine:
        if self._engine_factory is not None:
            return self._engine_factory(root)
        config = self._config if root == self.project_root and self._config else find_config(root)
        return ContextEngine(root, config)

    def session(self, root: str | os.PathLike | None = None) -> ProjectSession:
        key = Path(root).resolve() if root else self.project_root
        s = self.sessions.get(key)
        if s is None:
            engine = self._make_engine(key)
            s = ProjectSession(engine, queue_limit=engine.config.queue_limit)
            self.sessions[key] = s
        return s

    # -- socket lifecycle ------------------------------------------------------

    def _claim_socket(self) -> None:
        path = self.socket_path
        path.parent.mkdir(parents=True, exist_ok=True)
        if not path.exists():
            return
        probe = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            probe.connect(str(path))
        except OSError:
            path.unlink()  # stale socket from a dead daemon
        else:
            raise SocketInUse(f"a daemon is already listening on {path}")
        finally:
            probe.close()

    async def start(self) -> None:
        self._claim_socket()
        self._stopping = asyncio.Event()
        self.session()  # load the home project eagerly
        self._server = await asyncio.start_unix_server(self._handle, path=str(self.socket_path),
                                                       limit=MAX_FRAME_BYTES)

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        assert self._stopping is not None
        await self._stopping.wait()
        await self.shutdown()

    def request_stop(self) -> None:
        if self._stopping is not None:
            self._stopping.set()

    async def shutdown(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        for s in list(self.sessions.values()):
            await s.drain()
        for t in list(self._connections):
            t.cancel()
        if self._connections:
            await asyncio.gather(*self._connections, return_exceptions=True)
        with contextlib.suppress(FileNotFoundError):
            self.socket_path.unlink()

    # -- connection handling ---------------------------------------------------

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        me = asyncio.current_task()
        if me is not None:
            self._connections.add(me)
            me.add_done_callback(self._connections.discard)
        write_lock = asyncio.Lock()
        inflight: set[asyncio.Task] = set()

        async def send(frame: dict) -> None:
            data = (json.dumps(frame, ensure_ascii=False) + "\n").encode("utf-8")
            async with write_lock:
                writer.write(data)
                with contextlib.suppress(ConnectionError):
                    await writer.drain()

        async def answer(req_id: Any, fut: asyncio.Future) -> None:
            try:
                result = await asyncio.shield(fut)
            except Exception as exc:
                await send({"id": req_id, "ok": False, "error": error_payload(exc)})
            else:
                await send({"id": req_id, "ok": True, "result": result})

        try:
            while True:
                line = await reader.readline()
                if not line:
                    break
                try:
                    frame = json.loads(line)
                    if not isinstance(frame, dict):
                        raise ValueError("frame must be a JSON object")
                except ValueError as exc:
                    await send({"id": None, "ok": False, "error": error_payload(exc)})
                    continue
                req_id = frame.get("id")
                op = frame.get("op")
                params = frame.get("params") or {}
                try:
                    fut = self._dispatch(op, params)
                except Exception as exc:
                    await send({"id": req_id, "ok": False, "error": error_payload(exc)})
                    continue
                t = asyncio.ensure_future(answer(req_id, fut))
                inflight.add(t)
                t.add_done_callback(inflight.discard)
            if inflight:
                await asyncio.gather(*inflight, return_exceptions=True)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            writer.close()
            with contextlib.suppress(Exception):
                await writer.wait_closed()

    def _dispatch(self, op: Any, params: Mapping[str, Any]) -> asyncio.Future:
        loop = asyncio.get_running_loop()
        if op == "ping":
            fut = loop.create_future()
            fut.set_result({"pong": True})
            return fut
        if op == "shutdown":
            fut = loop.create_future()
            fut.set_result({"stopping": True})
            loop.call_soon(self.request_stop)
            return fut
        if op == "stats":
            fut = loop.create_future()
            fut.set_result({str(root): s.stats() for root, s in self.sessions.items()})
            return fut
        if not isinstance(params, Mapping):
            raise ValueError("params must be an object")
        payload = {k: v for k, v in params.items() if k != "root"}
        session = self.session(params.get("root"))
        if op == "status":
            return self._status(session)
        return session.submit(str(op), payload)

    def _status(self, session: ProjectSession) -> asyncio.Future:
        fut = session.submit("status", {})
        out = asyncio.get_running_loop().create_future()

        def done(f: asyncio.Future) -> None:
            if f.exception() is not None:
                out.set_exception(f.exception())
            else:
                out.set_result({**f.result(), "queue": session.stats()})

        fut.add_done_callback(done)
        return out


def serve(project_root: str | os.PathLike, socket_path: str | os.PathLike | None = None, *,
          config: Config | None = None) -> None:
    """Run a daemon in the foreground until a shutdown request or SIGINT/SIGTERM."""
    import signal

    async def main() -> None:
        daemon = Daemon(project_root, socket_path, config=config)
        await daemon.start()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            with contextlib.suppress(NotImplementedError, RuntimeError):
                loop.add_signal_handler(sig, daemon.request_stop)
        logger.info("listening on %s", daemon.socket_path)
        await daemon.serve_forever()

    asyncio.run(main())


class BackgroundDaemon:
    """Run a :class:`Daemon` on its own event-loop thread (tests, embedding)."""

    def __init__(self, daemon: Daemon) -> None:
        self.daemon = daemon
        self.loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._main, name="ctxtree-daemon", daemon=True)
        self._ready = threading.Event()
        self._error: BaseException | None = None

    def _main(self) -> None:
        asyncio.set_event_loop(self.loop)
        try:
            try:
                self.loop.run_until_complete(self.daemon.start())
            except BaseException as exc:
                self._error = exc
                return
            finally:
                self._ready.set()
            self.loop.run_until_complete(self.daemon.serve_forever())
        finally:
            self.loop.run_until_complete(self.loop.shutdown_asyncgens())
            self.loop.close()

    def start(self) -> BackgroundDaemon:
        self._thread.start()
        self._ready.wait()
        if self._error is not None:
            raise self._error
        return self

    def call(self, fn: Callable[[], Any]) -> Any:
        """Run `fn` on the daemon loop and return its result."""
        async def wrapper() -> Any:
            return fn()
        return asyncio.run_coroutine_threadsafe(wrapper(), self.loop).result()

    def stop(self, timeout: float = 60.0) -> None:
        self.loop.call_soon_threadsafe(self.daemon.request_stop)
        self._thread.join(timeout)

    def __enter__(self) -> BackgroundDaemon:
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------

class RemoteError(CtxTreeError):
    def __init__(self, type_name: str, message: str) -> None:
        super().__init__(f"{type_name}: {message}")
        self.type_name = type_name
        self.message = message


def _rebuild_error(payload: Mapping[str, Any]) -> Exception:
    name = str(payload.get("type", "CtxTreeError"))
    message = str(payload.get("message", ""))
    cls = getattr(errors, name, None)
    if isinstance(cls, type) and issubclass(cls, CtxTreeError):
        return cls(message)
    return RemoteError(name, message)


class DaemonClient:
    """Blocking client; one socket, requests may be pipelined with :meth:`send`."""

    def __init__(self, socket_path: str | os.PathLike, *, timeout: float | None = 120.0,
                 root: str | os.PathLike | None = None) -> None:
        self.socket_path = str(socket_path)
        self.root = str(root) if root else None
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.settimeout(timeout)
        try:
            self._sock.connect(self.socket_path)
        except OSError as exc:
            self._sock.close()
            raise DaemonUnreachable(f"cannot connect to {self.socket_path}: {exc}") from None
        self._file = self._sock.makefile("rb")
        self._ids = itertools.count(1)
        self._buffered: dict[Any, dict] = {}

    def send(self, op: str, params: Mapping[str, Any] | None = None) -> int:
        req_id = next(self._ids)
        p = dict(params or {})
        if self.root and "root" not in p:
            p["root"] = self.root
        frame = json.dumps({"id": req_id, "op": op, "params": p}, ensure_ascii=False) + "\n"
        try:
            self._sock.sendall(frame.encode("utf-8"))
        except OSError as exc:
            raise DaemonUnreachable(f"send failed: {exc}") from None
        return req_id

    def receive(self, req_id: int) -> dict:
        """Raw response frame for `req_id`."""
        while req_id not in self._buffered:
            try:
                line = self._file.readline()
            except OSError as exc:
                raise DaemonUnreachable(f"receive failed: {exc}") from None
            if not line:
                raise DaemonUnreachable("daemon closed the connection")
            frame = json.loads(line)
            self._buffered[frame.get("id")] = frame
        return self._buffered.pop(req_id)

    def result(self, req_id: int) -> Any:
        frame = self.receive(req_id)
        if frame.get("ok"):
            return frame.get("result")
        raise _rebuild_error(frame.get("error") or {})

    def request(self, op: str, params: Mapping[str, Any] | None = None) -> Any:
        return self.result(self.send(op, params))

    def query(self, q: str) -> dict:
        return self.request("query", {"q": q})

    def search(self, q: str, limit: int | None = None) -> dict:
        params: dict[str, Any] = {"q": q}
        if limit is not None:
            params["limit"] = limit
        return self.request("search", params)

    def curate(self, operations: list[dict]) -> dict:
        return self.request("curate", {"operations": operations})

    def curate_files(self, files: list[str], message: str = "") -> dict:
        return self.request("curate", {"files": [str(Path(f).resolve()) for f in files],
                                       "message": message})

    def status(self) -> dict:
        return self.request("status")

    def close(self) -> None:
        with contextlib.suppress(OSError):
            self._file.close()
            self._sock.close()

    def __enter__(self) -> DaemonClient:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
