"""On-disk context tree: loading, indexing, crash-safe writes, summaries.

Layout::

    <root>/<domain>/<topic>[/<subtopic>]/<entry>.md
    <root>/<domain>[/<topic>[/<subtopic>]]/context.md   (generated)

Readers work against an immutable :class:`TreeSnapshot`. Writers mutate
a working copy through :class:`ContextTreeStore` and publish a fresh
snapshot with :meth:`ContextTreeStore.commit`.
"""

from __future__ import annotations

import enum
import logging
import os
import shutil
import uuid
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Literal

import xxhash

from .entry import (
    MAX_PATH_SEGMENTS,
    SUMMARY_FILENAME,
    KnowledgeEntry,
    path_error,
    parse_entry,
    serialize_entry,
)
from .errors import CtxTreeError, InvalidPath, IoFailure, PathEscapesRoot, RootNotFound, UnknownPath

logger = logging.getLogger(__name__)

DEFAULT_TREE_DIR = Path(".brv") / "context-tree"
OVERVIEW_MAX_ENTRIES = 200
SEARCH_TOOL_HINT = (
    "Knowledge is stored in the context tree; call search_knowledge to find relevant entries."
)

# Called with a step name before each filesystem side effect; raising aborts the write.
FaultHook = Callable[[str], None]


class SymbolKind(enum.IntEnum):
    DOMAIN = 1
    TOPIC = 2
    SUBTOPIC = 3
    CONTEXT = 4
    SUMMARY = 5


_DIR_KINDS = {1: SymbolKind.DOMAIN, 2: SymbolKind.TOPIC, 3: SymbolKind.SUBTOPIC}


@dataclass
class SymbolNode:
    kind: SymbolKind
    name: str
    path: str
    children: dict[str, SymbolNode] = field(default_factory=dict)
    entry_path: str | None = None


class SymbolTree:
    def __init__(self, entry_paths: Iterable[str] = (), summary_paths: Iterable[str] = ()) -> None:
        self.root = SymbolNode(SymbolKind.DOMAIN, "", "")
        self._by_path: dict[str, SymbolNode] = {}
        for p in entry_paths:
            self._insert(p, SymbolKind.CONTEXT)
        for p in summary_paths:
            self._insert(p, SymbolKind.SUMMARY)

    def _insert(self, path: str, leaf_kind: SymbolKind) -> None:
        parts = path.split("/")
        node = self.root
        for depth, seg in enumerate(parts[:-1], start=1):
            child = node.children.get(seg)
            if child is None:
                child_path = "/".join(parts[:depth])
                child = SymbolNode(_DIR_KINDS[depth], seg, child_path)
                node.children[seg] = child
                self._by_path[child_path] = child
            node = child
        leaf = SymbolNode(leaf_kind, parts[-1], path, entry_path=path)
        node.children[parts[-1]] = leaf
        self._by_path[path] = leaf

    def lookup(self, path: str) -> SymbolNode | None:
        return self._by_path.get(path.strip("/"))

    def __contains__(self, path: str) -> bool:
        return path in self._by_path

    def nodes(self) -> Iterable[SymbolNode]:
        return self._by_path.values()

    def domains(self) -> list[SymbolNode]:
        return [self.root.children[k] for k in sorted(self.root.children)
                if self.root.children[k].kind is SymbolKind.DOMAIN]


@dataclass
class ReferenceIndex:
    forward: dict[str, frozenset[str]]
    backward: dict[str, frozenset[str]]

    @classmethod
    def build(cls, entries: dict[str, KnowledgeEntry]) -> ReferenceIndex:
        forward: dict[str, frozenset[str]] = {}
        backward: dict[str, set[str]] = {}
        for path, entry in entries.items():
            targets = frozenset(entry.relation_targets)
            if targets:
                forward[path] = targets
            for t in targets:
                backward.setdefault(t, set()).add(path)
        return cls(forward, {k: frozenset(v) for k, v in backward.items()})

    def outgoing(self, path: str) -> frozenset[str]:
        return self.forward.get(path, frozenset())

    def incoming(self, path: str) -> frozenset[str]:
        return self.backward.get(path, frozenset())

    def is_consistent(self) -> bool:
        for p, targets in self.forward.items():
            if any(p not in self.backward.get(q, ()) for q in targets):
                return False
        for q, sources in self.backward.items():
            if any(q not in self.forward.get(p, ()) for p in sources):
                return False
        return True


@dataclass(frozen=True)
class TreeFingerprint:
    digest: str

    def __str__(self) -> str:
        return self.digest


def content_hash(data: bytes) -> str:
    return xxhash.xxh3_128_hexdigest(data)


def compute_fingerprint(hashes: dict[str, str]) -> TreeFingerprint:
    h = xxhash.xxh3_128()
    for path in sorted(hashes):
        h.update(path.encode("utf-8"))
        h.update(b"\0")
        h.update(hashes[path].encode("ascii"))
        h.update(b"\n")
    return TreeFingerprint(h.hexdigest())


# ---------------------------------------------------------------------------
# Crash-safe filesystem primitives
# ---------------------------------------------------------------------------

def resolve_in_root(root: Path, rel_path: str) -> Path:
    if not rel_path or rel_path.startswith("/") or "\\" in rel_path:
        raise PathEscapesRoot(f"{rel_path!r} is not a relative tree path")
    if any(seg in ("..", ".", "") for seg in rel_path.split("/")):
        raise PathEscapesRoot(f"{rel_path!r} escapes the tree root")
    return root / rel_path


def _fsync_dir(directory: Path) -> None:
    try:
        fd = os.open(directory, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def atomic_write(root: Path, rel_path: str, content: bytes | str,
                 fault_hook: FaultHook | None = None) -> Path:
    """Write via a temp file in the target directory, then rename over the target."""
    hook = fault_hook or (lambda step: None)
    target = resolve_in_root(Path(root), rel_path)
    data = content.encode("utf-8") if isinstance(content, str) else content
    tmp = target.parent / f".{target.name}.{uuid.uuid4().hex[:12]}.tmp"
    try:
        hook("mkdir")
        target.parent.mkdir(parents=True, exist_ok=True)
        hook("open_temp")
        with open(tmp, "wb") as fh:
            half = len(data) // 2
            fh.write(data[:half])
            fh.flush()
            hook("write_partial")
            fh.write(data[half:])
            fh.flush()
            hook("fsync")
            os.fsync(fh.fileno())
        hook("rename")
        os.replace(tmp, target)
        hook("fsync_dir")
        _fsync_dir(target.parent)
    except OSError as exc:
        try:
            tmp.unlink()
        except OSError:
            pass
        raise IoFailure(f"writing {rel_path}: {exc}") from exc
    return target


def remove_path(root: Path, rel_path: str, fault_hook: FaultHook | None = None) -> list[str]:
    """Delete a file or a directory subtree; returns the removed entry paths."""
    hook = fault_hook or (lambda step: None)
    target = resolve_in_root(Path(root), rel_path)
    try:
        if target.is_dir():
            removed = sorted(
                p.relative_to(root).as_posix()
                for p in target.rglob("*.md")
                if p.name != SUMMARY_FILENAME and not p.name.startswith(".")
            )
            hook("rmtree")
            shutil.rmtree(target)
        else:
            removed = [rel_path]
            hook("unlink")
            target.unlink()
        hook("fsync_dir")
        _fsync_dir(target.parent)
    except OSError as exc:
        raise IoFailure(f"removing {rel_path}: {exc}") from exc
    return removed


# ---------------------------------------------------------------------------
# Snapshot / loading
# ---------------------------------------------------------------------------

@dataclass
class TreeSnapshot:
    root: Path
    entries: dict[str, KnowledgeEntry]
    hashes: dict[str, str]
    summaries: frozenset[str]
    symbols: SymbolTree
    references: ReferenceIndex
    fingerprint: TreeFingerprint
    warnings: list[str] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)

    @classmethod
    def build(cls, root: Path, entries: dict[str, KnowledgeEntry], hashes: dict[str, str],
              summaries: Iterable[str], errors: dict[str, str] | None = None,
              warnings: list[str] | None = None) -> TreeSnapshot:
        summaries = frozenset(summaries)
        refs = ReferenceIndex.build(entries)
        warnings = list(warnings or [])
        for src, targets in sorted(refs.forward.items()):
            for t in sorted(targets):
                if t not in entries:
                    warnings.append(f"{src}: dangling relation to {t}")
        return cls(
            root=root,
            entries=entries,
            hashes=hashes,
            summaries=summaries,
            symbols=SymbolTree(entries, summaries),
            references=refs,
            fingerprint=compute_fingerprint(hashes),
            warnings=warnings,
            errors=dict(errors or {}),
        )

    def lookup(self, path: str) -> SymbolNode | None:
        return self.symbols.lookup(path)

    def neighbors(self, path: str, direction: Literal["out", "in", "both"] = "out",
                  depth: int = 1) -> list[str]:
        if path not in self.entries:
            raise UnknownPath(path)
        if direction not in ("out", "in", "both"):
            raise ValueError(f"direction must be out, in or both, not {direction!r}")
        seen = {path}
        frontier = deque([(path, 0)])
        found: set[str] = set()
        while frontier:
            node, d = frontier.popleft()
            if d >= depth:
                continue
            nxt: set[str] = set()
            if direction in ("out", "both"):
                nxt |= self.references.outgoing(node)
            if direction in ("in", "both"):
                nxt |= self.references.incoming(node)
            for n in sorted(nxt):
                if n in seen or n not in self.entries:
                    continue
                seen.add(n)
                found.add(n)
                frontier.append((n, d + 1))
        return sorted(found)

    def directories(self) -> list[str]:
        return sorted(n.path for n in self.symbols.nodes() if n.kind <= SymbolKind.SUBTOPIC)

    def render_tree_overview(self, max_entries: int = OVERVIEW_MAX_ENTRIES,
                             search_available: bool = False) -> str:
        if search_available:
            return SEARCH_TOOL_HINT
        lines: list[str] = []
        for domain in self.symbols.domains():
            lines.append(f"{domain.name}/")
            for name in sorted(domain.children):
                child = domain.children[name]
                if child.kind is SymbolKind.TOPIC:
                    lines.append(f"{domain.name}/{name}/")
        if len(lines) > max_entries:
            hidden = len(lines) - max_entries
            lines = lines[:max_entries] + [f"... ({hidden} more not shown)"]
        return "\n".join(lines)


def _walk(root: Path) -> tuple[list[str], list[str], list[str]]:
    entries: list[str] = []
    summaries: list[str] = []
    skipped: list[str] = []
    for dirpath, dirnames, filenames in os.walk(root):
        rel_dir = Path(dirpath).relative_to(root)
        depth = 0 if str(rel_dir) == "." else len(rel_dir.parts)
        dirnames[:] = sorted(d for d in dirnames if not d.startswith("."))
        if depth >= MAX_PATH_SEGMENTS - 1:
            dirnames[:] = []
        for name in sorted(filenames):
            if name.startswith(".") or not name.endswith(".md"):
                continue
            rel = name if depth == 0 else f"{rel_dir.as_posix()}/{name}"
            if name == SUMMARY_FILENAME:
                if depth >= 1:
                    summaries.append(rel)
                continue
            if path_error(rel) is None:
                entries.append(rel)
            else:
                skipped.append(rel)
    return entries, summaries, skipped


def load_tree(root: str | os.PathLike) -> TreeSnapshot:
    root = Path(root)
    if not root.is_dir():
        raise RootNotFound(str(root))
    paths, summaries, skipped = _walk(root)
    entries: dict[str, KnowledgeEntry] = {}
    hashes: dict[str, str] = {}
    errors: dict[str, str] = {}
    warnings = [f"{p}: not a valid entry location, ignored" for p in skipped]
    for rel in paths:
        try:
            data = (root / rel).read_bytes()
            entry = parse_entry(data, rel)
        except (CtxTreeError, OSError) as exc:
            errors[rel] = f"{type(exc).__name__}: {exc}"
            logger.warning("skipping %s: %s", rel, exc)
            continue
        entries[rel] = entry
        hashes[rel] = content_hash(data)
        warnings.extend(f"{rel}: {w}" for w in entry.warnings)
    return TreeSnapshot.build(root, entries, hashes, summaries, errors, warnings)


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

def _humanize(name: str) -> str:
    return name.replace("_", " ").replace("-", " ")


def render_summary(rel_dir: str, entries: dict[str, KnowledgeEntry], subdirs: Iterable[str]) -> str:
    lines = [f"# {rel_dir}"]
    bullets = [f"- {d}/: {_humanize(d)}" for d in sorted(subdirs)]
    for path in sorted(entries):
        bullets.append(f"- {path.rsplit('/', 1)[-1]}: {entries[path].title}")
    if bullets:
        lines.append("")
        lines.extend(bullets)
    return "\n".join(lines) + "\n"


def ancestor_dirs(path: str) -> list[str]:
    parts = path.strip("/").split("/")
    if path.endswith(".md"):
        parts = parts[:-1]
    return ["/".join(parts[:i]) for i in range(1, len(parts) + 1)]


# ---------------------------------------------------------------------------
# Mutable store
# ---------------------------------------------------------------------------

class ContextTreeStore:
    """Single-writer store; readers use :attr:`snapshot`."""

    def __init__(self, root: str | os.PathLike, *, create: bool = True,
                 fault_hook: FaultHook | None = None) -> None:
        self.root = Path(root)
        if create:
            self.root.mkdir(parents=True, exist_ok=True)
        self.fault_hook = fault_hook
        self._snapshot = load_tree(self.root)
        self._reset_working()

    def _reset_working(self) -> None:
        snap = self._snapshot
        self._entries = dict(snap.entries)
        self._hashes = dict(snap.hashes)
        self._summaries = set(snap.summaries)
        self._dirty = False

    @property
    def snapshot(self) -> TreeSnapshot:
        return self._snapshot

    def reload(self) -> TreeSnapshot:
        self._snapshot = load_tree(self.root)
        self._reset_working()
        return self._snapshot

    # read helpers over the working copy (what the current batch sees)
    def get(self, path: str) -> KnowledgeEntry | None:
        return self._entries.get(path)

    def exists(self, path: str) -> bool:
        return path in self._entries

    def entry_paths(self) -> list[str]:
        return sorted(self._entries)

    def is_directory(self, rel_dir: str) -> bool:
        prefix = rel_dir.strip("/") + "/"
        return any(p.startswith(prefix) for p in self._entries) or (self.root / rel_dir).is_dir()

    def lookup(self, path: str) -> SymbolNode | None:
        return self._snapshot.lookup(path)

    def neighbors(self, path: str, direction: Literal["out", "in", "both"] = "out",
                  depth: int = 1) -> list[str]:
        return self._snapshot.neighbors(path, direction, depth)

    def fingerprint(self) -> TreeFingerprint:
        return self._snapshot.fingerprint

    def render_tree_overview(self, max_entries: int = OVERVIEW_MAX_ENTRIES,
                             search_available: bool = False) -> str:
        return self._snapshot.render_tree_overview(max_entries, search_available)

    def atomic_write(self, rel_path: str, content: bytes | str) -> Path:
        return atomic_write(self.root, rel_path, content, self.fault_hook)

    def write_entry(self, entry: KnowledgeEntry) -> None:
        problem = path_error(entry.path)
        if problem is not None:
            raise InvalidPath(f"{entry.path!r}: {problem}")
        data = serialize_entry(entry).encode("utf-8")
        self.atomic_write(entry.path, data)
        self._entries[entry.path] = entry
        self._hashes[entry.path] = content_hash(data)
        self._dirty = True

    def delete(self, rel_path: str) -> list[str]:
        removed = remove_path(self.root, rel_path, self.fault_hook)
        target_dir = rel_path.strip("/") + "/"
        for p in list(self._entries):
            if p == rel_path or p.startswith(target_dir):
                self._entries.pop(p, None)
                self._hashes.pop(p, None)
        self._summaries = {s for s in self._summaries if not s.startswith(target_dir)}
        self._dirty = True
        return removed

    def regenerate_summaries(self, affected: Iterable[str]) -> list[str]:
        """Rewrite `context.md` in every directory above the affected paths."""
        dirs: set[str] = set()
        for p in affected:
            dirs.update(ancestor_dirs(p))
        written: list[str] = []
        failures: list[str] = []
        for rel_dir in sorted(dirs):
            if not (self.root / rel_dir).is_dir():
                continue
            prefix = rel_dir + "/"
            direct = {p: e for p, e in self._entries.items()
                      if p.startswith(prefix) and "/" not in p[len(prefix):]}
            subdirs = {p[len(prefix):].split("/", 1)[0] for p in self._entries
                       if p.startswith(prefix) and "/" in p[len(prefix):]}
            subdirs |= {d.name for d in (self.root / rel_dir).iterdir()
                        if d.is_dir() and not d.name.startswith(".")}
            text = render_summary(rel_dir, direct, subdirs)
            summary_path = f"{rel_dir}/{SUMMARY_FILENAME}"
            target = self.root / summary_path
            try:
                if target.is_file() and target.read_text(encoding="utf-8") == text:
                    self._summaries.add(summary_path)
                    continue
                self.atomic_write(summary_path, text)
            except (IoFailure, OSError) as exc:
                failures.append(f"{summary_path}: {exc}")
                continue
            self._summaries.add(summary_path)
            written.append(summary_path)
            self._dirty = True
        if failures:
            logger.warning("summary regeneration failures: %s", failures)
        return written

    def commit(self) -> TreeSnapshot:
        """Publish the working copy as the new snapshot (single reference swap)."""
        if self._dirty:
            snap = TreeSnapshot.build(self.root, dict(self._entries), dict(self._hashes),
                                      self._summaries)
            self._snapshot = snap
            self._dirty = False
        return self._snapshot

    def rollback(self) -> TreeSnapshot:
        """Discard the working copy and resynchronize with what is on disk."""
        return self.reload()
