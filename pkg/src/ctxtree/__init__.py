"""File-based agent memory: a markdown context tree with lifecycle-weighted,
tiered retrieval and crash-safe curation."""

from .adapter import AdapterVerdict, CompletionRequest, HttpChatAdapter, StubAdapter, run_tool_loop
from .config import Config, TierThresholds, load_config
from .curation import CurateOperation, CurateReport, OpType, compress, merge_entries, preprocess_sources
from .engine import ContextEngine
from .entry import KnowledgeEntry, LifecycleState, Maturity, parse_entry, serialize_entry
from .lifecycle import ScoreWeights, apply_event, compound_score, evaluate_maturity, recency
from .retrieval import QueryOutcome
from .search import SearchIndex, build_index, normalize_score
from .store import ContextTreeStore, TreeSnapshot, load_tree

__version__ = "0.1.0"

__all__ = [
    "AdapterVerdict", "CompletionRequest", "Config", "ContextEngine", "ContextTreeStore",
    "CurateOperation", "CurateReport", "HttpChatAdapter", "KnowledgeEntry", "LifecycleState",
    "Maturity", "OpType", "QueryOutcome", "ScoreWeights", "SearchIndex", "StubAdapter",
    "TierThresholds", "TreeSnapshot", "apply_event", "build_index", "compound_score", "compress",
    "evaluate_maturity", "load_config", "load_tree", "merge_entries", "normalize_score",
    "parse_entry", "preprocess_sources", "recency", "run_tool_loop", "serialize_entry",
]
