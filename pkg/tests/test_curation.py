from __future__ import annotations

import json
import math
import random
from datetime import timedelta

import pytest

from ctxtree.adapter import AdapterVerdict, StubAdapter, count_tokens
from ctxtree.config import Config
from ctxtree.curation import (
    CompressionBudget,
    CompressionLevel,
    CurateOperation,
    Curator,
    OpType,
    compress,
    compress_with_report,
    curate_sources,
    entry_from_content,
    merge_entries,
    preprocess_sources,
)
from ctxtree.entry import Maturity
from ctxtree.errors import BinaryFileRejected, SourceFileNotFound, TooManyFiles
from ctxtree.store import ContextTreeStore, load_tree

from conftest import T0, make_entry
from oracles import longest_prefix_linear


def op(kind, path, content=None, source=None, reason="test"):
    return CurateOperation(OpType(kind), path, content, source, reason)


@pytest.fixture
def curator(tmp_path):
    return Curator(ContextTreeStore(tmp_path / "ctx"), Config(), clock=lambda: T0 + timedelta(days=1))


def test_published_feedback_example(curator):
    report = curator.apply_operations([
        op("UPSERT", "analysis/semi", "semiconductor notes"),
        op("MERGE", "analysis/energy", source="analysis/missing"),
    ])
    assert report.to_dict() == {
        "applied": [
            {"type": "UPSERT", "path": "analysis/semi", "status": "success"},
            {"type": "MERGE", "path": "analysis/energy", "status": "failed", "message": "Source file not found"},
        ],
        "summary": {"added": 0, "deleted": 0, "updated": 1, "merged": 0, "failed": 1},
    }
    assert list(json.loads(report.to_json())) == ["applied", "summary"]


def test_add_twice(curator):
    report = curator.apply_operations([op("ADD", "a/x.md", "one"), op("ADD", "a/x.md", "two")])
    assert [a.status for a in report.applied] == ["success", "failed"]
    assert curator.store.snapshot.entries["a/x.md"].narrative == "one"


def test_order_sensitivity(curator):
    r1 = curator.apply_operations([op("ADD", "a/p.md", "x"), op("UPDATE", "a/p.md", "y")])
    assert [a.status for a in r1.applied] == ["success", "success"]
    r2 = curator.apply_operations([op("UPDATE", "a/q.md", "y"), op("ADD", "a/q.md", "x")])
    assert [a.status for a in r2.applied] == ["failed", "success"]


def test_update_applies_lifecycle_bonus(curator):
    curator.apply_operations([op("ADD", "a/p.md", "x")])
    added = curator.store.snapshot.entries["a/p.md"].lifecycle
    assert (added.importance, added.maturity) == (50, Maturity.DRAFT)
    curator.apply_operations([op("UPDATE", "a/p.md", "y")])
    updated = curator.store.snapshot.entries["a/p.md"].lifecycle
    assert updated.importance == 55 and updated.update_count == 1


def test_full_entry_content_keeps_sections_but_not_lifecycle(curator, fig3_text):
    path = "architecture/module_boundaries/auth_billing_cycle.md"
    curator.apply_operations([op("ADD", path, fig3_text)])
    e = curator.store.snapshot.entries[path]
    assert e.title == "Auth-Billing Circular Dependency" and len(e.relations) == 3
    assert e.related == e.relation_targets
    assert e.lifecycle.importance == 50


def test_delete_entry_and_subtree(curator):
    curator.apply_operations([op("ADD", "a/b/x.md", "x"), op("ADD", "a/b/y.md", "y"), op("ADD", "a/z.md", "z")])
    report = curator.apply_operations([op("DELETE", "a/b"), op("DELETE", "a/z"), op("DELETE", "a/none.md")])
    assert [a.status for a in report.applied] == ["success", "success", "failed"]
    assert report.applied[0].message == "removed 2 entries: a/b/x.md, a/b/y.md"
    assert report.summary["deleted"] == 2 and report.summary["failed"] == 1
    assert not curator.store.snapshot.entries


def test_path_escape_is_reported_in_band(curator):
    report = curator.apply_operations([op("ADD", "../evil.md", "x"), op("DELETE", "../../etc"),
                                       op("ADD", "a/ok.md", "fine")])
    assert [a.status for a in report.applied] == ["failed", "failed", "success"]
    assert "escapes" in report.applied[0].message


def test_merge_rewrites_backlinks(curator):
    curator.apply_operations([
        op("ADD", "a/target.md", "## Relations\n@a/other.md\n\n## Narrative\ntarget body"),
        op("ADD", "a/source.md", "## Relations\n@a/other.md\n@a/target.md\n\n## Narrative\nsource body"),
        op("ADD", "a/referrer.md", "## Relations\n@a/source.md\n\n## Narrative\nref"),
        op("ADD", "a/other.md", "other"),
    ])
    report = curator.apply_operations([op("MERGE", "a/target.md", source="a/source.md")])
    assert report.summary["merged"] == 1
    snap = curator.store.snapshot
    assert "a/source.md" not in snap.entries
    merged = snap.entries["a/target.md"]
    assert merged.relation_targets == ["a/other.md"]
    assert "target body" in merged.narrative and "source body" in merged.narrative
    assert snap.references.incoming("a/target.md") == {"a/referrer.md"}
    assert snap.references.is_consistent()


def test_merge_missing_target(curator):
    curator.apply_operations([op("ADD", "a/s.md", "s")])
    report = curator.apply_operations([op("MERGE", "a/t.md", source="a/s.md")])
    assert report.applied[0].message == "Target file not found"


def test_merge_entries_rules():
    a = make_entry("a/t.md", "T", "one", relations=("x/y.md",), importance=82, tags=("a", "b"))
    b = make_entry("a/s.md", "S", "two", relations=("x/y.md",), importance=40, tags=("c",))
    a.lifecycle.access_count, b.lifecycle.access_count = 2, 3
    b.lifecycle.created_at = T0 - timedelta(days=5)
    now = T0 + timedelta(days=2)
    m = merge_entries(a, b, now)
    assert m.lifecycle.importance == 82
    assert m.tags == ["a", "b", "c"]
    assert m.relation_targets == ["x/y.md"]
    assert m.lifecycle.access_count == 5
    assert m.lifecycle.created_at == T0 - timedelta(days=5) and m.lifecycle.updated_at == now
    assert m.path == "a/t.md"
    assert merge_entries(a, a, now).relation_targets == a.relation_targets


def test_merge_uses_adapter_synthesis_when_available(tmp_path):
    stub = StubAdapter([AdapterVerdict.answer("synthesized")])
    cur = Curator(ContextTreeStore(tmp_path), Config(), adapter=stub)
    cur.apply_operations([op("ADD", "a/t.md", "t"), op("ADD", "a/s.md", "s")])
    cur.apply_operations([op("MERGE", "a/t.md", source="a/s.md")])
    assert cur.store.snapshot.entries["a/t.md"].narrative == "synthesized"
    assert stub.requests[0].purpose == "merge"


def test_operation_validation():
    with pytest.raises(ValueError):
        CurateOperation(OpType.ADD, "a/b.md", "x", reason="")
    with pytest.raises(ValueError):
        CurateOperation(OpType.MERGE, "a/b.md", reason="r")
    with pytest.raises(ValueError):
        CurateOperation(OpType.MERGE, "a/b.md", source_path="a/b.md", reason="r")
    with pytest.raises(ValueError):
        CurateOperation(OpType.DELETE, "a/b.md", "x", reason="r")
    assert CurateOperation.from_dict({"type": "upsert", "path": "a/b", "content": "c",
                                      "reason": "r"}).type is OpType.UPSERT


def test_report_accounting_on_random_batches(tmp_path):
    rng = random.Random(3)
    cur = Curator(ContextTreeStore(tmp_path), Config())
    paths = [f"d/t/e{i}.md" for i in range(6)]
    for _ in range(30):
        ops = []
        for _ in range(rng.randint(1, 8)):
            kind = rng.choice(list(OpType))
            p = rng.choice(paths)
            if kind is OpType.MERGE:
                s = rng.choice([x for x in paths if x != p])
                ops.append(op("MERGE", p, source=s))
            elif kind is OpType.DELETE:
                ops.append(op("DELETE", p))
            else:
                ops.append(op(kind.value, p, f"body {rng.random()}"))
        report = cur.apply_operations(ops)
        tally = {"added": 0, "deleted": 0, "updated": 0, "merged": 0, "failed": 0}
        bucket = {"ADD": "added", "UPDATE": "updated", "UPSERT": "updated", "MERGE": "merged", "DELETE": "deleted"}
        for item in report.applied:
            tally["failed" if item.status == "failed" else bucket[item.type.value]] += 1
        assert report.summary == tally
        assert len(report.applied) == len(ops)
        snap = load_tree(tmp_path)
        assert not snap.errors and sorted(snap.entries) == sorted(cur.store.snapshot.entries)


def test_entry_from_bare_text():
    e = entry_from_content("just a note", "inbox/notes/my_note.md")
    assert e.title == "My note" and e.narrative == "just a note" and not e.warnings


# -- preprocessing ------------------------------------------------------------------

def test_too_many_files(tmp_path):
    files = []
    for i in range(6):
        p = tmp_path / f"f{i}.txt"
        p.write_text("x")
        files.append(p)
    with pytest.raises(TooManyFiles):
        preprocess_sources(files)
    assert len(preprocess_sources(files[:5])) == 5


def test_character_and_line_caps(tmp_path):
    text = tmp_path / "big.txt"
    text.write_text("a" * 50_000)
    code = tmp_path / "big.py"
    code.write_text("".join(f"x{i} = {i}\n" for i in range(3000)))
    t, c = preprocess_sources([text, code])
    assert len(t.text) == 40_000 and t.truncated
    assert c.text.count("\n") == 2000 and c.text.endswith("x1999 = 1999\n")


def test_missing_and_binary_files(tmp_path):
    with pytest.raises(SourceFileNotFound):
        preprocess_sources([tmp_path / "nope.txt"])
    b = tmp_path / "blob.bin"
    b.write_bytes(b"\x00\x01\x02")
    with pytest.raises(BinaryFileRejected):
        preprocess_sources([b])
    pdf = tmp_path / "doc.pdf"
    pdf.write_text("%PDF-1.4")
    with pytest.raises(BinaryFileRejected):
        preprocess_sources([pdf])


# -- compression --------------------------------------------------------------------

def test_within_budget_is_untouched():
    r = compress_with_report("a b c", 5)
    assert r.text == "a b c" and r.level is CompressionLevel.NONE


def test_l3_matches_linear_oracle_and_probe_bound():
    rng = random.Random(11)
    for _ in range(40):
        words = [rng.choice(["ab", "c", "defg", "h"]) for _ in range(rng.randint(2, 60))]
        text = "".join(w + rng.choice([" ", "  ", "\n"]) for w in words)
        budget = rng.randint(1, max(1, len(words) - 1))
        r = compress_with_report(text, budget)
        assert count_tokens(r.text) <= budget
        assert r.text == longest_prefix_linear(text, budget)
        assert r.probes <= math.ceil(math.log2(len(text)))


def test_l3_large_input_converges():
    text = " ".join(f"w{i}" for i in range(10_000))
    r = compress_with_report(text, 1000)
    assert r.level is CompressionLevel.L3 and count_tokens(r.text) == 1000
    assert r.probes <= math.ceil(math.log2(len(text)))


def test_l1_then_l2_then_l3():
    text = " ".join(["w"] * 100)
    assert compress_with_report(text, 10, adapter=StubAdapter([AdapterVerdict.answer("short")])).level \
        is CompressionLevel.L1
    stub = StubAdapter([AdapterVerdict.insufficient(), AdapterVerdict.answer("y y")])
    r = compress_with_report(text, 10, adapter=stub)
    assert r.level is CompressionLevel.L2
    assert [q.max_output_tokens for q in stub.requests] == [10, 6]
    r = compress_with_report(text, 10, adapter=StubAdapter([]))
    assert r.level is CompressionLevel.L3 and count_tokens(r.text) == 10


def test_budget_validation():
    assert CompressionBudget(1000).for_level(CompressionLevel.L2) == 600
    with pytest.raises(ValueError):
        compress("x", 0)


# -- source curation ----------------------------------------------------------------

def test_curate_sources_fallback_without_adapter(tmp_path):
    src = tmp_path / "Meeting Notes.md"
    src.write_text("We agreed to shard the ledger.")
    cur = Curator(ContextTreeStore(tmp_path / "ctx"), Config())
    report = curate_sources(cur, [src], "weekly sync")
    assert report.to_dict()["applied"] == [
        {"type": "UPSERT", "path": "inbox/notes/meeting_notes.md", "status": "success"}]
    e = cur.store.snapshot.entries["inbox/notes/meeting_notes.md"]
    assert "shard the ledger" in e.narrative and "weekly sync" in e.raw_concept


def test_curate_sources_agentic(tmp_path):
    src = tmp_path / "n.txt"
    src.write_text("Billing retries happen three times.")
    stub = StubAdapter([
        AdapterVerdict.call("curate", operations=[{"type": "ADD", "path": "billing/retries/policy",
                                                   "content": "Retries: 3", "reason": "from notes"}]),
        AdapterVerdict.answer("stored"),
    ])
    cur = Curator(ContextTreeStore(tmp_path / "ctx"), Config())
    report = curate_sources(cur, [src], "", adapter=stub)
    assert report.summary["added"] == 1
    assert "billing/retries/policy.md" in cur.store.snapshot.entries
    assert "Billing retries" in stub.requests[0].prompt
