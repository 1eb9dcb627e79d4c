from __future__ import annotations

import random
from datetime import datetime, timezone
from pathlib import Path

import pytest

from ctxtree.entry import KnowledgeEntry, LifecycleState, RelationRef, serialize_entry

FIXTURES = Path(__file__).parent / "fixtures"
T0 = datetime(2026, 1, 1, tzinfo=timezone.utc)

WORDS = (
    "auth billing cache queue index token latency socket daemon ledger merge vector graph "
    "schema module router session payment invoice refund gateway replica shard cluster kernel "
    "parser lexer compiler runtime memory thread mutex channel stream buffer packet header "
    "cookie tenant quota budget report metric alert trace span sample window bucket filter"
).split()


@pytest.fixture
def fig3_text() -> str:
    return (FIXTURES / "auth_billing_cycle.md").read_text(encoding="utf-8")


def make_entry(path: str, title: str, narrative: str = "", *, raw: str = "",
               relations: tuple[str, ...] = (), importance: float = 50.0,
               tags: tuple[str, ...] = ()) -> KnowledgeEntry:
    return KnowledgeEntry(
        path=path, title=title, tags=list(tags), relations=[RelationRef(r) for r in relations],
        related=list(relations), raw_concept=raw, narrative=narrative,
        lifecycle=LifecycleState(importance=importance, created_at=T0, updated_at=T0),
    )


def write_tree(root: Path, entries: list[KnowledgeEntry]) -> None:
    for e in entries:
        target = root / e.path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(serialize_entry(e), encoding="utf-8")


def random_corpus(rng: random.Random, n_docs: int, vocab: list[str] | None = None) -> list[KnowledgeEntry]:
    vocab = vocab or WORDS
    out = []
    for i in range(n_docs):
        domain = rng.choice(["arch", "ops", "data"])
        topic = rng.choice(["core", "edge", "misc"])
        title = " ".join(rng.choice(vocab) for _ in range(rng.randint(1, 4)))
        body = " ".join(rng.choice(vocab) for _ in range(rng.randint(0, 40)))
        out.append(make_entry(f"{domain}/{topic}/doc_{i:04d}.md", title, body))
    return out


@pytest.fixture
def rng() -> random.Random:
    return random.Random(1234)
