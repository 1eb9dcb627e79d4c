"""Curate operations, source preprocessing and escalated compression."""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .adapter import (
    CompletionRequest,
    LLMAdapter,
    ToolSpec,
    VerdictKind,
    count_tokens,
    run_tool_loop,
)
from .config import Config
from .entry import (
    KnowledgeEntry,
    LifecycleState,
    Maturity,
    RelationRef,
    extract_relations,
    parse_entry,
    path_error,
    utcnow,
)
from .errors import (
    AdapterError,
    BinaryFileRejected,
    CtxTreeError,
    EntryFormatError,
    InvalidPath,
    PathEscapesRoot,
    SourceFileNotFound,
    TooManyFiles,
)
from .lifecycle import EventKind, LifecycleEvent, apply_event
from .store import ContextTreeStore

logger = logging.getLogger(__name__)

MAX_SOURCE_FILES = 5
MAX_SOURCE_CHARS = 40_000
MAX_CODE_LINES = 2000
L2_BUDGET_RATIO = 0.6
FALLBACK_DIR = "inbox/notes"

CODE_EXTENSIONS = frozenset({
    ".py", ".pyi", ".js", ".jsx", ".ts", ".tsx", ".mjs", ".cjs", ".java", ".kt", ".scala",
    ".go", ".rs", ".c", ".h", ".cc", ".cpp", ".hpp", ".cs", ".rb", ".php", ".swift", ".m",
    ".sh", ".bash", ".zsh", ".sql", ".lua", ".r", ".jl", ".dart", ".ex", ".exs", ".erl",
    ".hs", ".ml", ".clj", ".vue", ".svelte",
})
BINARY_EXTENSIONS = frozenset({".pdf", ".png", ".jpg", ".jpeg", ".gif", ".zip", ".gz", ".exe", ".so"})


class OpType(str, enum.Enum):
    ADD = "ADD"
    UPDATE = "UPDATE"
    UPSERT = "UPSERT"
    MERGE = "MERGE"
    DELETE = "DELETE"


_SUMMARY_BUCKET = {
    OpType.ADD: "added",
    OpType.UPDATE: "updated",
    # tallied as updated on both paths, as in the published feedback example
    OpType.UPSERT: "updated",
    OpType.MERGE: "merged",
    OpType.DELETE: "deleted",
}


@dataclass(frozen=True)
class CurateOperation:
    type: OpType
    path: str
    content: str | None = None
    source_path: str | None = None
    reason: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.type, OpType):
            object.__setattr__(self, "type", OpType(str(self.type).upper()))
        if not self.reason or not self.reason.strip():
            raise ValueError(f"{self.type.value} {self.path}: reason must be non-empty")
        if self.type is OpType.MERGE:
            if not self.source_path:
                raise ValueError("MERGE needs a source_path")
            if self.source_path == self.path:
                raise ValueError("MERGE source_path must differ from path")
        elif self.source_path is not None:
            raise ValueError(f"{self.type.value} does not take a source_path")
        if self.type is OpType.DELETE and self.content is not None:
            raise ValueError("DELETE does not take content")
        if self.type in (OpType.ADD, OpType.UPDATE, OpType.UPSERT) and self.content is None:
            raise ValueError(f"{self.type.value} needs content")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CurateOperation:
        return cls(
            type=OpType(str(data["type"]).upper()),
            path=str(data["path"]),
            content=data.get("content"),
            source_path=data.get("sourcePath", data.get("source_path")),
            reason=str(data.get("reason", "")),
        )

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"type": self.type.value, "path": self.path}
        if self.source_path is not None:
            out["sourcePath"] = self.source_path
        if self.content is not None:
            out["content"] = self.content
        out["reason"] = self.reason
        return out


@dataclass
class AppliedOperation:
    type: OpType
    path: str
    status: str  # success | failed
    message: str | None = None

    def to_dict(self) -> dict:
        out = {"type": self.type.value, "path": self.path, "status": self.status}
        if self.message is not None:
            out["message"] = self.message
        return out


@dataclass
class CurateReport:
    applied: list[AppliedOperation] = field(default_factory=list)

    @property
    def summary(self) -> dict[str, int]:
        counts = {"added": 0, "deleted": 0, "updated": 0, "merged": 0, "failed": 0}
        for item in self.applied:
            if item.status == "success":
                counts[_SUMMARY_BUCKET[item.type]] += 1
            else:
                counts["failed"] += 1
        return counts

    def extend(self, other: CurateReport) -> None:
        self.applied.extend(other.applied)

    def to_dict(self) -> dict:
        return {"applied": [a.to_dict() for a in self.applied], "summary": self.summary}

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False)


# ---------------------------------------------------------------------------
# Source preprocessing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreparedSource:
    path: str
    text: str
    truncated: bool = False


def _looks_binary(data: bytes) -> bool:
    if b"\0" in data[:8192]:
        return True
    try:
        data.decode("utf-8")
    except UnicodeDecodeError:
        return True
    return False


def preprocess_sources(files: Sequence[str | Path]) -> list[PreparedSource]:
    if len(files) > MAX_SOURCE_FILES:
        raise TooManyFiles(f"{len(files)} files given, at most {MAX_SOURCE_FILES} accepted")
    out = []
    for name in files:
        p = Path(name)
        if not p.is_file():
            raise SourceFileNotFound(f"source file not found: {name}")
        if p.suffix.lower() in BINARY_EXTENSIONS:
            raise BinaryFileRejected(f"{name}: binary formats are not accepted (convert to text first)")
        data = p.read_bytes()
        if _looks_binary(data):
            raise BinaryFileRejected(f"{name}: not a UTF-8 text file")
        text = data.decode("utf-8")
        original = text
        if p.suffix.lower() in CODE_EXTENSIONS:
            text = "".join(text.splitlines(keepends=True)[:MAX_CODE_LINES])
        text = text[:MAX_SOURCE_CHARS]
        out.append(PreparedSource(str(name), text, text != original))
    return out


# ---------------------------------------------------------------------------
# Escalated compression
# ---------------------------------------------------------------------------

class CompressionLevel(str, enum.Enum):
    NONE = "none"
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"


@dataclass(frozen=True)
class CompressionBudget:
    max_tokens: int
    level: CompressionLevel = CompressionLevel.L1

    def __post_init__(self) -> None:
        if self.max_tokens <= 0:
            raise ValueError("compression budget must be positive")

    def for_level(self, level: CompressionLevel) -> int:
        if level is CompressionLevel.L2:
            # 0.6x in integer arithmetic
            return max(1, self.max_tokens * 3 // 5)
        return self.max_tokens


@dataclass
class CompressionResult:
    text: str
    level: CompressionLevel
    tokens: int
    probes: int = 0


def longest_prefix_within(text: str, budget: int,
                          token_counter: Callable[[str], int] = count_tokens) -> tuple[str, int]:
    """Binary search for the longest prefix whose token count fits; returns (prefix, probes).

    Assumes ``token_counter`` is monotone over prefixes and that the full
    text is over budget, so the answer lies in ``[0, len(text) - 1]``.
    """
    lo, hi = 0, len(text) - 1
    probes = 0
    while lo < hi:
        mid = (lo + hi + 1) // 2
        probes += 1
        if token_counter(text[:mid]) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return text[:lo], probes


def _summarize(adapter: LLMAdapter, text: str, budget: int, temperature: float,
               purpose: str) -> str | None:
    prompt = (f"Summarize the following source material in at most {budget} tokens. "
              f"Keep facts, names and numbers.\n\n{text}")
    try:
        verdict = adapter.complete(CompletionRequest(prompt, budget, temperature, purpose=purpose))
    except AdapterError as exc:
        logger.info("%s summarization unavailable: %s", purpose, exc)
        return None
    return verdict.text if verdict.kind is VerdictKind.ANSWER else None


def compress_with_report(text: str, budget: int | CompressionBudget, *,
                         token_counter: Callable[[str], int] = count_tokens,
                         adapter: LLMAdapter | None = None,
                         temperature: float = 0.0) -> CompressionResult:
    if not isinstance(budget, CompressionBudget):
        budget = CompressionBudget(int(budget))
    limit = budget.max_tokens
    tokens = token_counter(text)
    if tokens <= limit:
        return CompressionResult(text, CompressionLevel.NONE, tokens)
    if adapter is not None:
        for level in (CompressionLevel.L1, CompressionLevel.L2):
            summary = _summarize(adapter, text, budget.for_level(level), temperature,
                                 f"compress_{level.value.lower()}")
            if summary is not None:
                n = token_counter(summary)
                if n <= limit:
                    return CompressionResult(summary, level, n)
    prefix, probes = longest_prefix_within(text, limit, token_counter)
    return CompressionResult(prefix, CompressionLevel.L3, token_counter(prefix), probes)


def compress(text: str, budget: int | CompressionBudget, token_counter: Callable[[str], int] = count_tokens,
             *, adapter: LLMAdapter | None = None, temperature: float = 0.0) -> str:
    return compress_with_report(text, budget, token_counter=token_counter, adapter=adapter,
                                temperature=temperature).text


# ---------------------------------------------------------------------------
# Entry construction and merging
# ---------------------------------------------------------------------------

def normalize_entry_path(path: str) -> str:
    p = path.strip()
    if any(seg == ".." for seg in p.split("/")) or p.startswith("/"):
        raise PathEscapesRoot(f"Path escapes the tree root: {path}")
    if not p.endswith(".md"):
        p += ".md"
    problem = path_error(p)
    if problem is not None:
        raise InvalidPath(f"Invalid path {path!r}: {problem}")
    return p


def humanize_stem(path: str) -> str:
    stem = path.rsplit("/", 1)[-1]
    if stem.endswith(".md"):
        stem = stem[:-3]
    return re.sub(r"[_\-]+", " ", stem).strip().capitalize() or stem


_SECTION_HEADER = re.compile(r"^##[ \t]+(relations|raw concept|narrative|snippets)[ \t]*$", re.I | re.M)


def entry_from_content(content: str, path: str, *, fallback_title: str | None = None) -> KnowledgeEntry:
    """Build an entry from curate content: a full entry file or bare text.

    Lifecycle metadata in the content is ignored by callers; the engine owns it.
    """
    text = content.replace("\r\n", "\n")
    if text.startswith("---\n"):
        entry = parse_entry(text, path)
        if fallback_title and not re.search(r"^title:", text, re.M):
            entry.title = fallback_title
    elif _SECTION_HEADER.search(text):
        entry = parse_entry("---\n---\n\n" + text, path)
        entry.title = fallback_title or humanize_stem(path)
    else:
        entry = KnowledgeEntry(path=path, title=fallback_title or humanize_stem(path),
                               narrative=text.strip("\n"))
    entry.relations = [r for r in extract_relations(entry, entry.warnings) if r.target_path != path]
    entry.related = entry.relation_targets
    entry.extra = {k: v for k, v in entry.extra.items() if k != "accessedAt"}
    return entry


def _union(a: Iterable[str], b: Iterable[str]) -> list[str]:
    return list(dict.fromkeys([*a, *b]))


def _join_with_provenance(target_text: str, source_text: str, source_path: str) -> str:
    if not source_text:
        return target_text
    if not target_text:
        return source_text
    return f"{target_text}\n\n<!-- merged from {source_path} -->\n{source_text}"


def merge_entries(target: KnowledgeEntry, source: KnowledgeEntry, now: datetime | None = None, *,
                  synthesize: Callable[[KnowledgeEntry, KnowledgeEntry], str] | None = None) -> KnowledgeEntry:
    now = now or utcnow()
    relations = [RelationRef(t) for t in _union(target.relation_targets, source.relation_targets)
                 if t not in (target.path, source.path)]
    a, b = target.lifecycle, source.lifecycle
    lifecycle = LifecycleState(
        importance=max(a.importance, b.importance),
        maturity=a.maturity if a.importance >= b.importance else b.maturity,
        recency=1.0,
        access_count=a.access_count + b.access_count,
        update_count=a.update_count + b.update_count,
        created_at=min(a.created_at, b.created_at),
        updated_at=max(now, a.updated_at, b.updated_at),
    )
    narrative = None
    if synthesize is not None:
        try:
            narrative = synthesize(target, source)
        except AdapterError as exc:
            logger.info("merge synthesis unavailable, concatenating: %s", exc)
    if narrative is None:
        narrative = _join_with_provenance(target.narrative, source.narrative, source.path)
    snippets = target.snippets
    if source.snippets:
        snippets = _join_with_provenance(target.snippets or "", source.snippets, source.path)
    return replace(
        target,
        tags=_union(target.tags, source.tags),
        keywords=_union(target.keywords, source.keywords),
        relations=relations,
        related=[r.target_path for r in relations],
        raw_concept=_join_with_provenance(target.raw_concept, source.raw_concept, source.path),
        narrative=narrative,
        snippets=snippets,
        lifecycle=lifecycle,
        extra=dict(target.extra),
        warnings=[],
    )


# ---------------------------------------------------------------------------
# Operation executor
# ---------------------------------------------------------------------------

class OperationFailed(CtxTreeError):
    pass


class Curator:
    """Applies curate batches to a store's working copy, then publishes once."""

    def __init__(self, store: ContextTreeStore, config: Config = Config(), *,
                 adapter: LLMAdapter | None = None, clock: Callable[[], datetime] = utcnow) -> None:
        self.store = store
        self.config = config
        self.adapter = adapter
        self._clock = clock

    # -- individual operations ---------------------------------------------

    def _new_lifecycle(self, now: datetime) -> LifecycleState:
        return LifecycleState(importance=self.config.initial_importance, maturity=Maturity.DRAFT,
                              recency=1.0, created_at=now, updated_at=now)

    def _updated_lifecycle(self, state: LifecycleState, now: datetime) -> LifecycleState:
        return apply_event(state, LifecycleEvent(EventKind.UPDATE, max(now, state.created_at)),
                           max(now, state.created_at))

    def _build(self, op: CurateOperation, path: str, existing: KnowledgeEntry | None) -> KnowledgeEntry:
        try:
            return entry_from_content(op.content or "", path,
                                      fallback_title=existing.title if existing else None)
        except EntryFormatError as exc:
            raise OperationFailed(f"Invalid content: {exc}") from None

    def _add(self, op: CurateOperation, now: datetime) -> set[str]:
        path = normalize_entry_path(op.path)
        if self.store.exists(path):
            raise OperationFailed("Entry already exists")
        entry = self._build(op, path, None)
        entry.lifecycle = self._new_lifecycle(now)
        self.store.write_entry(entry)
        return {path}

    def _update(self, op: CurateOperation, now: datetime) -> set[str]:
        path = normalize_entry_path(op.path)
        existing = self.store.get(path)
        if existing is None:
            raise OperationFailed("Entry not found")
        entry = self._build(op, path, existing)
        entry.lifecycle = self._updated_lifecycle(existing.lifecycle, now)
        self.store.write_entry(entry)
        return {path}

    def _upsert(self, op: CurateOperation, now: datetime) -> set[str]:
        path = normalize_entry_path(op.path)
        if self.store.exists(path):
            return self._update(op, now)
        return self._add(op, now)

    def _synthesizer(self) -> Callable[[KnowledgeEntry, KnowledgeEntry], str] | None:
        adapter = self.adapter
        if adapter is None:
            return None

        def synthesize(target: KnowledgeEntry, source: KnowledgeEntry) -> str:
            prompt = ("Combine these two knowledge entries into one narrative without losing facts.\n\n"
                      f"[{target.path}]\n{target.narrative}\n\n[{source.path}]\n{source.narrative}")
            verdict = adapter.complete(CompletionRequest(prompt, self.config.compression_budget,
                                                         self.config.curate_temperature,
                                                         purpose="merge"))
            if verdict.kind is not VerdictKind.ANSWER:
                raise AdapterError("merge synthesis returned no answer")
            return verdict.text

        return synthesize

    def _merge(self, op: CurateOperation, now: datetime) -> set[str]:
        assert op.source_path is not None
        source_path = normalize_entry_path(op.source_path)
        target_path = normalize_entry_path(op.path)
        source = self.store.get(source_path)
        if source is None:
            raise OperationFailed("Source file not found")
        target = self.store.get(target_path)
        if target is None:
            raise OperationFailed("Target file not found")
        merged = merge_entries(target, source, now, synthesize=self._synthesizer())
        if op.content is not None:
            merged.narrative = self._build(op, target_path, target).narrative
        merged.lifecycle = self._updated_lifecycle(merged.lifecycle, now)
        self.store.write_entry(merged)
        touched = {target_path, source_path}
        # referrers of the source now point at the target
        for path in self.store.entry_paths():
            if path in (source_path, target_path):
                continue
            entry = self.store.get(path)
            if entry is None or source_path not in entry.relation_targets:
                continue
            targets = _union((target_path if t == source_path else t for t in entry.relation_targets), ())
            targets = [t for t in targets if t != path]
            refs = [RelationRef(t) for t in targets]
            self.store.write_entry(replace(entry, relations=refs, related=targets, warnings=[]))
            touched.add(path)
        self.store.delete(source_path)
        return touched

    def _delete(self, op: CurateOperation, now: datetime) -> tuple[set[str], str | None]:
        raw = op.path.strip().strip("/")
        if any(seg == ".." for seg in raw.split("/")) or op.path.startswith("/"):
            raise PathEscapesRoot(f"Path escapes the tree root: {op.path}")
        if raw.endswith(".md"):
            candidates = [raw]
        else:
            candidates = [raw, raw + ".md"]
        for cand in candidates:
            if cand.endswith(".md"):
                if self.store.exists(cand):
                    self.store.delete(cand)
                    return {cand}, None
            elif raw and (self.store.root / cand).is_dir():
                removed = self.store.delete(cand)
                noun = "entry" if len(removed) == 1 else "entries"
                detail = f"removed {len(removed)} {noun}"
                if removed:
                    detail += ": " + ", ".join(removed)
                return set(removed) | {cand + "/"}, detail
        raise OperationFailed("Entry not found")

    # -- batch ---------------------------------------------------------------

    def apply_operations(self, ops: Sequence[CurateOperation]) -> CurateReport:
        """Apply `ops` strictly in order; failures are reported, never raised.

        Only :class:`CtxTreeError` counts as a per-operation failure; anything
        else (including injected crashes) propagates to the caller.
        """
        report = CurateReport()
        affected: set[str] = set()
        now = self._clock()
        for op in ops:
            message: str | None = None
            try:
                if op.type is OpType.ADD:
                    touched = self._add(op, now)
                elif op.type is OpType.UPDATE:
                    touched = self._update(op, now)
                elif op.type is OpType.UPSERT:
                    touched = self._upsert(op, now)
                elif op.type is OpType.MERGE:
                    touched = self._merge(op, now)
                else:
                    touched, message = self._delete(op, now)
            except CtxTreeError as exc:
                report.applied.append(AppliedOperation(op.type, op.path, "failed", str(exc)))
                continue
            affected |= touched
            report.applied.append(AppliedOperation(op.type, op.path, "success", message))
        if affected:
            self.store.regenerate_summaries(affected)
        self.store.commit()
        return report


def parse_operations(raw: Iterable[Mapping[str, Any]]) -> list[CurateOperation]:
    return [CurateOperation.from_dict(item) for item in raw]


# ---------------------------------------------------------------------------
# Source-driven curation (agentic, with a deterministic fallback)
# ---------------------------------------------------------------------------

CURATE_SYSTEM = (
    "You maintain a hierarchical knowledge tree (domain/topic[/subtopic]/entry.md). "
    "Read the sources, check existing knowledge with search_knowledge and read_entry, "
    "then call curate with ADD/UPDATE/UPSERT/MERGE/DELETE operations, each with a reason. "
    "Finish with a short answer summarizing what you stored."
)


def fallback_operations(sources: Sequence[PreparedSource], texts: Sequence[str],
                        message: str) -> list[CurateOperation]:
    ops = []
    for src, text in zip(sources, texts):
        stem = re.sub(r"[^a-z0-9]+", "_", Path(src.path).stem.lower()).strip("_") or "note"
        raw = f"Source: {Path(src.path).name}"
        if message:
            raw += f"\n{message}"
        body = f"## Raw Concept\n{raw}\n\n## Narrative\n{text.strip()}\n"
        ops.append(CurateOperation(OpType.UPSERT, f"{FALLBACK_DIR}/{stem}.md", body,
                                   reason=message or f"curated from {Path(src.path).name}"))
    return ops


def curate_sources(curator: Curator, files: Sequence[str | Path], message: str = "", *,
                   adapter: LLMAdapter | None = None,
                   tools: Mapping[str, ToolSpec] | None = None) -> CurateReport:
    """Preprocess and compress `files`, then let the adapter curate them.

    Without an adapter, or when the adapter produces no operations, each
    source is upserted under ``inbox/notes/``.
    """
    sources = preprocess_sources(files)
    budget = curator.config.compression_budget
    texts = [compress(s.text, budget, adapter=adapter, temperature=curator.config.curate_temperature)
             for s in sources]
    report = CurateReport()
    if adapter is not None:
        def curate(operations: list) -> dict:
            try:
                ops = parse_operations(operations)
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"invalid operations: {exc}") from None
            batch = curator.apply_operations(ops)
            report.extend(batch)
            return batch.to_dict()

        specs = dict(tools or {})
        specs["curate"] = ToolSpec("curate", curate, {"operations": list}, ("operations",))
        material = "\n\n".join(f"### Source: {s.path}\n{t}" for s, t in zip(sources, texts))
        question = f"{message}\n\n{material}" if message else material
        try:
            run_tool_loop(adapter, question, specs, max_iterations=curator.config.max_iterations,
                          temperature=curator.config.curate_temperature,
                          system=CURATE_SYSTEM, purpose="curate")
        except AdapterError as exc:
            logger.info("agentic curation unavailable: %s", exc)
    if not report.applied:
        report.extend(curator.apply_operations(fallback_operations(sources, texts, message)))
    return report
