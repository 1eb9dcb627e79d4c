"""In-memory full-text index with field-boosted BM25.

Each document has three fields: ``title`` (boost 5), ``content`` (1) and
``path`` (1.5). A query term matches vocabulary terms exactly, by prefix,
or within an edit distance of ``ceil(0.2 * len(term))``. Non-exact
matches contribute with a reduced weight. See SEARCH.md for the exact
scoring formula.
"""

from __future__ import annotations

import bisect
import heapq
import math
import re
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from rapidfuzz import process
from rapidfuzz.distance import Levenshtein

from .entry import KnowledgeEntry
from .errors import EmptyQuery, NegativeScore

FIELDS = ("title", "content", "path")
FIELD_BOOSTS: Mapping[str, float] = {"title": 5.0, "content": 1.0, "path": 1.5}
MAX_CONTENT_CHARS = 8000
MAX_RESULTS = 32
K1 = 1.2
B = 0.75
FUZZY_RATIO = 0.2
PREFIX_WEIGHT = 0.375
FUZZY_WEIGHT = 0.45
SIGNIFICANT_TERM_LENGTH = 4

_TOKEN_RE = re.compile(r"[^\W_]+")


class SearchCancelled(Exception):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def significant_terms(query: str) -> set[str]:
    return {t for t in tokenize(query) if len(t) >= SIGNIFICANT_TERM_LENGTH}


def normalize_score(raw: float) -> float:
    if raw < 0:
        raise NegativeScore(f"raw score must be >= 0, got {raw}")
    return raw / (1.0 + raw)


def max_edit_distance(term: str) -> int:
    # ceil(0.2 * len) in integer arithmetic; 0.2 * 15 is 3.0000000000000004 in floats
    return -(-len(term) // 5)


@dataclass(frozen=True)
class IndexedDocument:
    id: str
    title: str
    content: str
    path_text: str

    @classmethod
    def from_entry(cls, entry: KnowledgeEntry) -> IndexedDocument:
        path_text = entry.path[:-3] if entry.path.endswith(".md") else entry.path
        return cls(entry.path, entry.title, entry.body_text()[:MAX_CONTENT_CHARS], path_text)


@dataclass(frozen=True)
class SearchHit:
    path: str
    raw_score: float
    normalized_score: float
    matched_terms: frozenset[str]
    field_matches: Mapping[str, bool] = field(hash=False)

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "score": round(self.normalized_score, 6),
            "rawScore": round(self.raw_score, 6),
            "matchedTerms": sorted(self.matched_terms),
            "fields": [f for f in FIELDS if self.field_matches.get(f)],
        }


@dataclass
class RankedResultSet:
    query: str
    terms: tuple[str, ...]
    hits: list[SearchHit]
    # query term -> matched at least one indexed document (any match kind)
    term_matches: dict[str, bool]
    total_hits: int = 0

    def __len__(self) -> int:
        return len(self.hits)

    def __iter__(self):
        return iter(self.hits)

    @property
    def top_score(self) -> float:
        return self.hits[0].normalized_score if self.hits else 0.0

    @property
    def second_score(self) -> float:
        return self.hits[1].normalized_score if len(self.hits) > 1 else 0.0

    def filtered(self, min_score: float) -> RankedResultSet:
        kept = [h for h in self.hits if h.normalized_score >= min_score]
        return RankedResultSet(self.query, self.terms, kept, self.term_matches, len(kept))


class SearchIndex:
    """Immutable once built; build a new one to reflect corpus changes."""

    def __init__(self, documents: Iterable[IndexedDocument], *, k1: float = K1, b: float = B,
                 boosts: Mapping[str, float] = FIELD_BOOSTS) -> None:
        self.k1 = k1
        self.b = b
        self.boosts = dict(boosts)
        docs = sorted(documents, key=lambda d: d.id)
        self.documents: list[IndexedDocument] = docs
        self.ids = [d.id for d in docs]
        self.postings: dict[str, dict[str, dict[int, int]]] = {f: {} for f in FIELDS}
        self.field_lengths: dict[str, list[int]] = {f: [] for f in FIELDS}
        for idx, doc in enumerate(docs):
            for f, text in (("title", doc.title), ("content", doc.content), ("path", doc.path_text)):
                tokens = tokenize(text)
                self.field_lengths[f].append(len(tokens))
                plist = self.postings[f]
                for tok in tokens:
                    bucket = plist.get(tok)
                    if bucket is None:
                        bucket = plist[tok] = {}
                    bucket[idx] = bucket.get(idx, 0) + 1
        n = len(docs)
        self.avg_lengths = {f: (sum(ls) / n if n else 0.0) for f, ls in self.field_lengths.items()}
        self._norms = {
            f: [k1 * (1 - b + b * dl / self.avg_lengths[f]) if self.avg_lengths[f] else k1
                for dl in self.field_lengths[f]]
            for f in FIELDS
        }
        vocab: set[str] = set()
        for f in FIELDS:
            vocab.update(self.postings[f])
        self.vocabulary = vocab
        self._sorted_vocab = sorted(vocab)

    def __len__(self) -> int:
        return len(self.documents)

    def idf(self, df: int) -> float:
        n = len(self.documents)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def with_prefix(self, prefix: str) -> list[str]:
        vocab = self._sorted_vocab
        out = []
        for i in range(bisect.bisect_left(vocab, prefix), len(vocab)):
            if not vocab[i].startswith(prefix):
                break
            out.append(vocab[i])
        return out

    def expand(self, term: str, *, prefix: bool = True, fuzzy: bool = True,
               cancel: threading.Event | None = None) -> dict[str, float]:
        """Vocabulary terms matched by `term`, with their match weights."""
        weights: dict[str, float] = {}
        if term in self.vocabulary:
            weights[term] = 1.0
        if prefix:
            for t in self.with_prefix(term):
                if t != term:
                    weights[t] = max(weights.get(t, 0.0), PREFIX_WEIGHT * len(term) / len(t))
        if fuzzy:
            if cancel is not None and cancel.is_set():
                raise SearchCancelled
            for t, dist, _ in process.extract(term, self._sorted_vocab, scorer=Levenshtein.distance,
                                              score_cutoff=max_edit_distance(term), limit=None):
                if t != term:
                    similarity = 1.0 - dist / max(len(term), len(t))
                    weights[t] = max(weights.get(t, 0.0), FUZZY_WEIGHT * similarity)
        return weights

    def search(self, query: str, max_results: int = MAX_RESULTS, *, prefix: bool = True,
               fuzzy: bool = True, cancel: threading.Event | None = None) -> RankedResultSet:
        terms = tuple(dict.fromkeys(tokenize(query)))
        if not terms:
            raise EmptyQuery("query has no searchable terms")
        scores: dict[int, float] = {}
        matched: dict[int, set[str]] = {}
        fields_hit: dict[int, set[str]] = {}
        term_matches: dict[str, bool] = {}
        k1 = self.k1
        for term in terms:
            if cancel is not None and cancel.is_set():
                raise SearchCancelled
            expansions = self.expand(term, prefix=prefix, fuzzy=fuzzy, cancel=cancel)
            term_matches[term] = bool(expansions)
            for vterm, weight in expansions.items():
                for f in FIELDS:
                    plist = self.postings[f].get(vterm)
                    if not plist:
                        continue
                    idf = self.idf(len(plist))
                    scale = weight * self.boosts[f]
                    norms = self._norms[f]
                    for doc, tf in plist.items():
                        s = scale * (idf * tf * (k1 + 1) / (tf + norms[doc]))
                        scores[doc] = scores.get(doc, 0.0) + s
                        matched.setdefault(doc, set()).add(term)
                        fields_hit.setdefault(doc, set()).add(f)
        ids = self.ids
        best = heapq.nsmallest(max_results, scores.items(), key=lambda kv: (-kv[1], ids[kv[0]]))
        hits = [
            SearchHit(
                path=ids[doc],
                raw_score=score,
                normalized_score=normalize_score(score),
                matched_terms=frozenset(matched[doc]),
                field_matches={f: f in fields_hit[doc] for f in FIELDS},
            )
            for doc, score in best
        ]
        return RankedResultSet(query, terms, hits, term_matches, len(scores))


def build_index(entries: Iterable[KnowledgeEntry], **kwargs) -> SearchIndex:
    return SearchIndex((IndexedDocument.from_entry(e) for e in entries), **kwargs)
