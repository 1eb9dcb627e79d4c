"""Per-project engine: the read/write API over one context tree.

``query``/``retrieve`` read, ``curate``/``update`` write. Writes take an
exclusive lock and publish a new (snapshot, index) view with a single
reference swap, so a concurrent reader always sees one consistent tree.
"""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import replace
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .adapter import HttpChatAdapter, LLMAdapter, StubAdapter, ToolSpec
from .config import Config, find_config
from .curation import CurateOperation, CurateReport, Curator, curate_sources
from .entry import LifecycleState, serialize_entry, utcnow
from .errors import UnknownPath
from .lifecycle import EventKind, LifecycleEvent, apply_event
from .retrieval import QueryCache, QueryOutcome, RetrievalView, Retriever
from .search import MAX_RESULTS, RankedResultSet, build_index
from .store import ContextTreeStore, FaultHook, TreeSnapshot

logger = logging.getLogger(__name__)


def build_adapter(spec: Mapping[str, Any] | None) -> LLMAdapter | None:
    """Adapter from the config's ``adapter`` block, else from the environment."""
    if spec is None:
        return HttpChatAdapter.from_env()
    kind = spec.get("kind", "stub")
    if kind == "stub":
        return StubAdapter.from_json(spec.get("script", []))
    if kind == "http":
        return HttpChatAdapter(spec["base_url"], spec["model"],
                               spec.get("api_key") or os.environ.get("CTXTREE_LLM_API_KEY"),
                               float(spec.get("timeout", 30.0)))
    if kind == "none":
        return None
    raise ValueError(f"unknown adapter kind {kind!r}")


class ContextEngine:
    def __init__(self, project_root: str | os.PathLike, config: Config | None = None, *,
                 adapter: LLMAdapter | None = None, use_config_adapter: bool = True,
                 fault_hook: FaultHook | None = None,
                 clock: Callable[[], datetime] = utcnow) -> None:
        self.project_root = Path(project_root).resolve()
        self.config = config if config is not None else find_config(self.project_root)
        self.store = ContextTreeStore(self.project_root / self.config.tree_dir, fault_hook=fault_hook)
        if adapter is None and use_config_adapter:
            adapter = build_adapter(self.config.adapter)
        self.adapter = adapter
        self._clock = clock
        self._write_lock = threading.RLock()
        self._access_lock = threading.Lock()
        self._access: dict[str, LifecycleState] = {}
        snap = self.store.snapshot
        self._view = RetrievalView(snap, build_index(snap.entries.values()))
        c = self.config
        self.cache = QueryCache(enabled=c.cache_enabled, ttl_seconds=c.cache_ttl_seconds,
                                max_entries=c.cache_max_entries, fuzzy_scan=c.fuzzy_cache_scan,
                                fuzzy_threshold=c.thresholds.fuzzy_cache)
        self.retriever = Retriever(lambda: self._view, c, self.cache, adapter=adapter,
                                   lifecycle_of=self.lifecycle_of, record_access=self.record_access,
                                   clock=clock)
        self.curator = Curator(self.store, c, adapter=adapter, clock=clock)

    # -- views ---------------------------------------------------------------

    @property
    def snapshot(self) -> TreeSnapshot:
        return self._view.snapshot

    @property
    def tree_root(self) -> Path:
        return self.store.root

    def _publish(self, snapshot: TreeSnapshot, reindex: bool = True) -> None:
        index = build_index(snapshot.entries.values()) if reindex else self._view.index
        self._view = RetrievalView(snapshot, index)

    # -- reads -----------------------------------------------------------------

    def query(self, q: str) -> QueryOutcome:
        return self.retriever.query(q)

    retrieve = query

    def search(self, q: str, limit: int = MAX_RESULTS) -> RankedResultSet:
        return self._view.index.search(q, limit)

    def read_entry(self, path: str) -> str:
        entry = self._view.snapshot.entries.get(path)
        if entry is None:
            raise UnknownPath(f"no entry at {path}")
        return serialize_entry(entry)

    # -- lifecycle overlay -----------------------------------------------------

    def lifecycle_of(self, path: str, now: datetime | None = None) -> LifecycleState:
        with self._access_lock:
            state = self._access.get(path)
        if state is not None:
            return state
        entry = self._view.snapshot.entries.get(path)
        if entry is None:
            raise UnknownPath(f"no entry at {path}")
        return entry.lifecycle

    def record_access(self, paths: Iterable[str]) -> None:
        """Apply access events in memory; they reach disk on the next write turn."""
        now = self._clock()
        entries = self._view.snapshot.entries
        with self._access_lock:
            for path in paths:
                entry = entries.get(path)
                if entry is None:
                    continue
                state = self._access.get(path, entry.lifecycle)
                at = max(now, state.created_at, state.touched_at)
                self._access[path] = apply_event(state, LifecycleEvent(EventKind.ACCESS, at), at)

    def _flush_into_working_copy(self) -> bool:
        with self._access_lock:
            pending, self._access = self._access, {}
        wrote = False
        for path, state in sorted(pending.items()):
            entry = self.store.get(path)
            if entry is None:
                continue
            self.store.write_entry(replace(entry, lifecycle=state, warnings=[]))
            wrote = True
        return wrote

    def flush_access(self) -> None:
        with self._write_lock:
            try:
                if self._flush_into_working_copy():
                    # lifecycle fields are not indexed, so the index is reused
                    self._publish(self.store.commit(), reindex=False)
            except BaseException:
                self._publish(self.store.rollback())
                raise

    # -- writes ----------------------------------------------------------------

    def curate(self, operations: Sequence[CurateOperation | Mapping[str, Any]]) -> CurateReport:
        ops = [op if isinstance(op, CurateOperation) else CurateOperation.from_dict(op)
               for op in operations]
        with self._write_lock:
            try:
                self._flush_into_working_copy()
                report = self.curator.apply_operations(ops)
                self._publish(self.store.snapshot)
            except BaseException:
                self._publish(self.store.rollback())
                raise
        return report

    update = curate

    def curate_sources(self, files: Sequence[str | os.PathLike], message: str = "") -> CurateReport:
        with self._write_lock:
            try:
                self._flush_into_working_copy()
                report = curate_sources(self.curator, [Path(f) for f in files], message,
                                        adapter=self.adapter, tools=self._curation_tools())
                self._publish(self.store.commit())
            except BaseException:
                self._publish(self.store.rollback())
                raise
        return report

    def _curation_tools(self) -> dict[str, ToolSpec]:
        store = self.store

        def search_knowledge(query: str) -> list[dict]:
            idx = build_index(store.get(p) for p in store.entry_paths())
            return [h.to_dict() for h in idx.search(query, self.config.max_results).hits]

        def read_entry(path: str) -> str:
            entry = store.get(path)
            if entry is None:
                raise KeyError(f"no entry at {path}")
            return serialize_entry(entry)

        def list_tree() -> str:
            return store.render_tree_overview()

        return {
            "search_knowledge": ToolSpec("search_knowledge", search_knowledge, {"query": str}, ("query",)),
            "read_entry": ToolSpec("read_entry", read_entry, {"path": str}, ("path",)),
            "list_tree": ToolSpec("list_tree", list_tree),
        }

    def reload(self) -> None:
        with self._write_lock:
            self._publish(self.store.reload())

    # -- status ----------------------------------------------------------------

    def status(self) -> dict:
        snap = self._view.snapshot
        with self._access_lock:
            pending = len(self._access)
        return {
            "projectRoot": str(self.project_root),
            "treeRoot": str(self.store.root),
            "docs": len(snap.entries),
            "summaries": len(snap.summaries),
            "fingerprint": snap.fingerprint.digest,
            "warnings": len(snap.warnings),
            "errors": dict(snap.errors),
            "pendingAccessEvents": pending,
            "cache": {"size": len(self.cache), **self.cache.stats},
            "tiers": {str(i): n for i, n in enumerate(self.retriever.tier_counts)},
            "ood": self.retriever.ood_count,
            "adapter": type(self.adapter).__name__ if self.adapter is not None else None,
        }

    def close(self) -> None:
        self.flush_access()
        self.retriever.close()

    def __enter__(self) -> ContextEngine:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
