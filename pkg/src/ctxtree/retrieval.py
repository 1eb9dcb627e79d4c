"""Five-tier progressive retrieval.

Tiers, in the order they are tried:

0. exact query cache (canonicalized text, valid tree fingerprint)
1. fuzzy query cache (word-set Jaccard >= 0.6)
   -- out-of-domain gate --
2. direct answer from search results when the top hit is dominant
3. a single LLM call over prefetched entries
4. a multi-turn tool loop

Tiers 0-2 and the out-of-domain rejection never call the adapter.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import OrderedDict
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Callable, Sequence

import xxhash

from .adapter import (
    TIER3_MAX_TOKENS,
    TIER3_TEMPERATURE,
    TIER4_MAX_TOKENS,
    TIER4_TEMPERATURE,
    CompletionRequest,
    DeadlineAdapter,
    LLMAdapter,
    ToolSpec,
    VerdictKind,
    run_tool_loop,
)
from .config import Config, TierThresholds
from .entry import KnowledgeEntry, LifecycleState, serialize_entry, utcnow
from .errors import AdapterTimeout, AdapterUnavailable
from .lifecycle import compound_score, current_importance, recency
from .search import RankedResultSet, SearchCancelled, SearchHit, SearchIndex, significant_terms, tokenize
from .store import TreeFingerprint, TreeSnapshot

logger = logging.getLogger(__name__)

OOD_MESSAGE = "This query appears outside the scope of stored knowledge."


@dataclass
class QueryOutcome:
    answer: str
    tier: int
    sources: list[str] = field(default_factory=list)
    ood: bool = False
    latency_ms: float = 0.0
    incomplete: bool = False

    def to_dict(self) -> dict:
        out = {
            "answer": self.answer,
            "tier": self.tier,
            "sources": list(self.sources),
            "ood": self.ood,
            "latencyMs": int(round(self.latency_ms)),
        }
        if self.incomplete:
            out["incomplete"] = True
        return out


# ---------------------------------------------------------------------------
# Query cache
# ---------------------------------------------------------------------------

def canonicalize_query(q: str) -> str:
    return " ".join(q.lower().split())


def query_hash(q: str) -> str:
    return xxhash.xxh3_128_hexdigest(canonicalize_query(q).encode("utf-8"))


def jaccard(a: str, b: str) -> float:
    sa, sb = set(tokenize(a)), set(tokenize(b))
    if not sa and not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)


@dataclass
class CacheEntry:
    query_hash: str
    query_text: str
    answer: QueryOutcome
    fingerprint: TreeFingerprint
    created_at: float
    tokens: frozenset[str] = frozenset()


class QueryCache:
    """Answers keyed by canonical query, valid only for the fingerprint they were built on."""

    def __init__(self, *, enabled: bool = True, ttl_seconds: float = 0.0,
                 max_entries: int = 10_000, fuzzy_scan: int = 1000,
                 fuzzy_threshold: float = 0.6, clock: Callable[[], float] = time.monotonic) -> None:
        self.enabled = enabled
        self.ttl_seconds = ttl_seconds
        self.max_entries = max_entries
        self.fuzzy_scan = fuzzy_scan
        self.fuzzy_threshold = fuzzy_threshold
        self._clock = clock
        self._entries: OrderedDict[str, CacheEntry] = OrderedDict()
        self._lock = threading.Lock()
        self.stats = {"exactHits": 0, "fuzzyHits": 0, "misses": 0, "evictions": 0, "inserts": 0}

    def __len__(self) -> int:
        return len(self._entries)

    def _expired(self, entry: CacheEntry) -> bool:
        return self.ttl_seconds > 0 and self._clock() - entry.created_at > self.ttl_seconds

    def _usable(self, entry: CacheEntry, fingerprint: TreeFingerprint) -> bool:
        return entry.fingerprint == fingerprint and not self._expired(entry)

    def check_exact(self, q: str, fingerprint: TreeFingerprint) -> CacheEntry | None:
        if not self.enabled:
            return None
        h = query_hash(q)
        with self._lock:
            entry = self._entries.get(h)
            if entry is None:
                return None
            if not self._usable(entry, fingerprint):
                del self._entries[h]
                self.stats["evictions"] += 1
                return None
            self.stats["exactHits"] += 1
            return entry

    def check_fuzzy(self, q: str, fingerprint: TreeFingerprint) -> tuple[CacheEntry, float] | None:
        if not self.enabled:
            return None
        tokens = frozenset(tokenize(q))
        if not tokens:
            return None
        best: CacheEntry | None = None
        best_sim = -1.0
        stale: list[str] = []
        with self._lock:
            for i, (h, entry) in enumerate(reversed(self._entries.items())):
                if i >= self.fuzzy_scan:
                    break
                if not self._usable(entry, fingerprint):
                    stale.append(h)
                    continue
                union = len(tokens | entry.tokens)
                sim = len(tokens & entry.tokens) / union if union else 0.0
                if sim > best_sim:
                    best, best_sim = entry, sim
            for h in stale:
                del self._entries[h]
            self.stats["evictions"] += len(stale)
            if best is not None and best_sim >= self.fuzzy_threshold:
                self.stats["fuzzyHits"] += 1
                return best, best_sim
            self.stats["misses"] += 1
        return None

    def put(self, q: str, outcome: QueryOutcome, fingerprint: TreeFingerprint) -> None:
        if not self.enabled:
            return
        h = query_hash(q)
        entry = CacheEntry(h, q, replace(outcome, sources=list(outcome.sources)), fingerprint,
                           self._clock(), frozenset(tokenize(q)))
        with self._lock:
            self._entries.pop(h, None)
            self._entries[h] = entry
            self.stats["inserts"] += 1
            while len(self._entries) > self.max_entries:
                self._entries.popitem(last=False)
                self.stats["evictions"] += 1

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()


# ---------------------------------------------------------------------------
# Gating rules
# ---------------------------------------------------------------------------

def detect_ood(q: str, results: RankedResultSet, thresholds: TierThresholds = TierThresholds()) -> bool:
    """True when the query should be rejected as outside the stored knowledge."""
    kept = results.filtered(thresholds.min_relevance)
    if not kept.hits:
        return True
    sig = significant_terms(q)
    unmatched = [t for t in sig if not results.term_matches.get(t, False)]
    if sig and len(unmatched) == len(sig):
        return True
    return bool(unmatched) and kept.top_score < thresholds.ood


def direct_response_fires(top: float, second: float,
                          thresholds: TierThresholds = TierThresholds()) -> bool:
    if top >= thresholds.high:
        return True
    return top >= thresholds.min_direct and top - second >= thresholds.gap


# ---------------------------------------------------------------------------
# Retriever
# ---------------------------------------------------------------------------

TIER3_SYSTEM = (
    "Answer the question using only the knowledge entries below. "
    "If they do not contain the answer, reply with exactly INSUFFICIENT_CONTEXT."
)
TIER4_SYSTEM = (
    "Answer the question from the context tree. Use search_knowledge, read_entry and "
    "list_tree to navigate it, then give a final answer."
)


def format_entry_for_answer(entry: KnowledgeEntry) -> str:
    parts = [f"## {entry.title}", f"({entry.path})"]
    for block in (entry.raw_concept, entry.narrative, entry.snippets):
        if block:
            parts.append(block)
    return "\n".join(parts)


@dataclass
class RetrievalView:
    snapshot: TreeSnapshot
    index: SearchIndex


class Retriever:
    def __init__(self, view: Callable[[], RetrievalView], config: Config, cache: QueryCache, *,
                 adapter: LLMAdapter | None = None,
                 lifecycle_of: Callable[[str, datetime], LifecycleState] | None = None,
                 record_access: Callable[[list[str]], None] | None = None,
                 clock: Callable[[], datetime] = utcnow) -> None:
        self._view = view
        self.config = config
        self.thresholds = config.thresholds
        self.cache = cache
        self.adapter = adapter
        self._lifecycle_of = lifecycle_of
        self._record_access = record_access or (lambda paths: None)
        self._clock = clock
        self._executor = (ThreadPoolExecutor(max_workers=4, thread_name_prefix="search")
                          if config.concurrent_search else None)
        self.tier_counts = [0, 0, 0, 0, 0]
        self.ood_count = 0

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=False, cancel_futures=True)

    # -- cache tiers -------------------------------------------------------

    def check_exact_cache(self, q: str) -> CacheEntry | None:
        return self.cache.check_exact(q, self._view().snapshot.fingerprint)

    def check_fuzzy_cache(self, q: str) -> CacheEntry | None:
        hit = self.cache.check_fuzzy(q, self._view().snapshot.fingerprint)
        return hit[0] if hit else None

    # -- search tiers ------------------------------------------------------

    def _lifecycle(self, snapshot: TreeSnapshot, path: str, now: datetime) -> LifecycleState:
        if self._lifecycle_of is not None:
            return self._lifecycle_of(path, now)
        return snapshot.entries[path].lifecycle

    def rank_by_compound(self, snapshot: TreeSnapshot, hits: Sequence[SearchHit]) -> list[str]:
        now = self._clock()
        scored = []
        for hit in hits:
            if hit.path not in snapshot.entries:
                continue
            state = self._lifecycle(snapshot, hit.path, now)
            r = recency(state.updated_at, max(now, state.updated_at))
            score = compound_score(hit.normalized_score, current_importance(state, now), r,
                                   self.config.weights)
            scored.append((-score, hit.path))
        return [p for _, p in sorted(scored)]

    def tier2_direct(self, q: str, results: RankedResultSet,
                     view: RetrievalView | None = None) -> QueryOutcome | None:
        if not results.hits or not direct_response_fires(results.top_score, results.second_score,
                                                          self.thresholds):
            return None
        snapshot = (view or self._view()).snapshot
        # the gate is decided on BM25, so the documents that passed it are the ones returned
        ranked = self.rank_by_compound(snapshot, results.hits[: self.config.direct_max_docs])
        answer = "\n\n".join(format_entry_for_answer(snapshot.entries[p]) for p in ranked)
        return QueryOutcome(answer=answer, tier=2, sources=ranked)

    def _require_adapter(self) -> LLMAdapter:
        if self.adapter is None:
            raise AdapterUnavailable("query needs an LLM tier but no adapter is configured")
        return self.adapter

    def tier3_llm(self, q: str, results: RankedResultSet,
                  view: RetrievalView | None = None) -> QueryOutcome | None:
        if not results.hits or results.top_score < self.thresholds.med:
            return None
        adapter = DeadlineAdapter(self._require_adapter(), self.config.tier3_timeout)
        snapshot = (view or self._view()).snapshot
        prefetched = [h.path for h in results.hits[: self.config.prefetch_docs]
                      if h.path in snapshot.entries]
        context = "\n\n".join(format_entry_for_answer(snapshot.entries[p]) for p in prefetched)
        prompt = f"{TIER3_SYSTEM}\n\n{context}\n\nQuestion: {q}"
        request = CompletionRequest(prompt, TIER3_MAX_TOKENS, TIER3_TEMPERATURE, purpose="tier3")
        try:
            verdict = adapter.complete(request)
        except AdapterTimeout as exc:
            logger.info("tier 3 escalating: %s", exc)
            return None
        if verdict.kind is not VerdictKind.ANSWER:
            return None
        return QueryOutcome(answer=verdict.text, tier=3, sources=prefetched)

    def _tier4_tools(self, view: RetrievalView, read: list[str]) -> dict[str, ToolSpec]:
        snapshot, index = view.snapshot, view.index

        def search_knowledge(query: str) -> list[dict]:
            try:
                res = index.search(query, self.config.max_results)
            except ValueError as exc:
                return [{"error": str(exc)}]
            return [{"path": h.path, "title": snapshot.entries[h.path].title,
                     "score": round(h.normalized_score, 4)}
                    for h in res.hits if h.path in snapshot.entries]

        def read_entry(path: str) -> str:
            entry = snapshot.entries.get(path)
            if entry is None:
                raise KeyError(f"no entry at {path}")
            if path not in read:
                read.append(path)
            return serialize_entry(entry)

        def list_tree() -> str:
            return snapshot.render_tree_overview()

        return {
            "search_knowledge": ToolSpec("search_knowledge", search_knowledge, {"query": str}, ("query",)),
            "read_entry": ToolSpec("read_entry", read_entry, {"path": str}, ("path",)),
            "list_tree": ToolSpec("list_tree", list_tree),
        }

    def tier4_agentic(self, q: str, view: RetrievalView | None = None) -> QueryOutcome:
        view = view or self._view()
        adapter = DeadlineAdapter(self._require_adapter(), self.config.tier4_timeout)
        read: list[str] = []
        result = run_tool_loop(adapter, q, self._tier4_tools(view, read),
                               max_iterations=self.config.max_iterations,
                               max_output_tokens=TIER4_MAX_TOKENS,
                               temperature=TIER4_TEMPERATURE,
                               system=TIER4_SYSTEM, purpose="tier4")
        return QueryOutcome(answer=result.answer, tier=4, sources=read,
                            incomplete=result.incomplete)

    # -- orchestration -----------------------------------------------------

    def _start_search(self, index: SearchIndex, q: str,
                      cancel: threading.Event) -> Future | None:
        if self._executor is None:
            return None
        return self._executor.submit(index.search, q, self.config.max_results, cancel=cancel)

    def query(self, q: str) -> QueryOutcome:
        started = time.perf_counter()
        view = self._view()
        fingerprint = view.snapshot.fingerprint

        def done(outcome: QueryOutcome) -> QueryOutcome:
            outcome.latency_ms = (time.perf_counter() - started) * 1000.0
            self.tier_counts[outcome.tier] += 1
            return outcome

        hit = self.cache.check_exact(q, fingerprint)
        if hit is not None:
            return done(replace(hit.answer, tier=0, sources=list(hit.answer.sources)))

        cancel = threading.Event()
        future = None
        if tokenize(q):
            future = self._start_search(view.index, q, cancel)

        fuzzy = self.cache.check_fuzzy(q, fingerprint)
        if fuzzy is not None:
            cancel.set()
            if future is not None:
                future.cancel()
            entry = fuzzy[0]
            return done(replace(entry.answer, tier=1, sources=list(entry.answer.sources)))

        if not tokenize(q):
            results = RankedResultSet(q, (), [], {}, 0)
        elif future is not None:
            try:
                results = future.result()
            except SearchCancelled:
                results = view.index.search(q, self.config.max_results)
        else:
            results = view.index.search(q, self.config.max_results)

        if detect_ood(q, results, self.thresholds):
            self.ood_count += 1
            return done(QueryOutcome(answer=OOD_MESSAGE, tier=2, sources=[], ood=True))

        kept = results.filtered(self.thresholds.min_relevance)
        outcome = self.tier2_direct(q, kept, view)
        if outcome is None:
            outcome = self.tier3_llm(q, kept, view)
        if outcome is None:
            outcome = self.tier4_agentic(q, view)

        if outcome.sources:
            self._record_access(list(outcome.sources))
        if not outcome.incomplete:
            self.cache.put(q, outcome, fingerprint)
        return done(outcome)
