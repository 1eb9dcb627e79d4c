"""Engine configuration (JSON file, all keys optional). See CONFIG.md."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .lifecycle import INITIAL_IMPORTANCE, ScoreWeights

PROJECT_ROOT_ENV = "CTXTREE_PROJECT_ROOT"
DEFAULT_CONFIG_NAME = Path(".brv") / "config.json"


@dataclass(frozen=True)
class TierThresholds:
    fuzzy_cache: float = 0.6
    high: float = 0.93
    min_direct: float = 0.85
    gap: float = 0.08
    med: float = 0.6
    ood: float = 0.85
    min_relevance: float = 0.6

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"threshold {f.name}={value} outside [0, 1]")
        if self.min_direct > self.high:
            raise ValueError("min_direct must not exceed high")


@dataclass(frozen=True)
class Config:
    tree_dir: str = str(Path(".brv") / "context-tree")
    weights: ScoreWeights = field(default_factory=ScoreWeights)
    thresholds: TierThresholds = field(default_factory=TierThresholds)
    initial_importance: float = INITIAL_IMPORTANCE
    max_results: int = 32
    direct_max_docs: int = 3
    prefetch_docs: int = 5
    cache_enabled: bool = True
    # 0 means entries never expire by age; the tree fingerprint still invalidates them
    cache_ttl_seconds: float = 0.0
    cache_max_entries: int = 10_000
    fuzzy_cache_scan: int = 1000
    concurrent_search: bool = True
    tier3_timeout: float = 10.0
    tier4_timeout: float = 20.0
    max_iterations: int = 50
    compression_budget: int = 4000
    curate_temperature: float = 0.0
    queue_limit: int = 1024
    # {"kind": "stub", "script": [...]} or {"kind": "http", "base_url": ..., "model": ...}
    adapter: Mapping[str, Any] | None = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Config:
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "weights" in data:
            data["weights"] = ScoreWeights(**data["weights"])
        if "thresholds" in data:
            data["thresholds"] = TierThresholds(**data["thresholds"])
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **changes: Any) -> Config:
        return replace(self, **changes)


def load_config(path: str | os.PathLike | None) -> Config:
    if path is None:
        return Config()
    with open(path, encoding="utf-8") as fh:
        return Config.from_dict(json.load(fh))


def resolve_project_root(explicit: str | os.PathLike | None = None) -> Path:
    if explicit:
        return Path(explicit).resolve()
    env = os.environ.get(PROJECT_ROOT_ENV)
    if env:
        return Path(env).resolve()
    return Path.cwd().resolve()


def find_config(project_root: Path, explicit: str | os.PathLike | None = None) -> Config:
    if explicit:
        return load_config(explicit)
    candidate = project_root / DEFAULT_CONFIG_NAME
    return load_config(candidate) if candidate.is_file() else Config()
