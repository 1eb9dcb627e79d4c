"""Knowledge entry model and the on-disk markdown format.

An entry file is a YAML-subset frontmatter block followed by fixed
sections::

    ---
    title: ...
    tags: [a, b]
    ...
    ---

    ## Relations
    @domain/topic/other.md

    ## Raw Concept
    ...

    ## Narrative
    ...

    ## Snippets        (optional)
    ...

Only the subset of YAML we need is understood: plain or quoted scalars,
flow lists (``[a, b]``) and flat block lists (``  - item``). Anchors,
tags and block scalars are rejected. Files already in canonical layout
round-trip byte for byte through :func:`parse_entry` and
:func:`serialize_entry`; FORMAT.md describes the layout in full.
"""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Iterable

from .errors import ImportanceOutOfRange, InvalidPath, InvalidTimestamp, MalformedFrontmatter

logger = logging.getLogger(__name__)

SUMMARY_FILENAME = "context.md"
MIN_PATH_SEGMENTS = 2
MAX_PATH_SEGMENTS = 4

# Frontmatter keys in the order they are written.
FRONTMATTER_KEYS = (
    "title",
    "tags",
    "keywords",
    "related",
    "importance",
    "maturity",
    "recency",
    "accessCount",
    "updateCount",
    "createdAt",
    "updatedAt",
)

SECTION_RELATIONS = "Relations"
SECTION_RAW_CONCEPT = "Raw Concept"
SECTION_NARRATIVE = "Narrative"
SECTION_SNIPPETS = "Snippets"
_SECTIONS = {
    name.lower(): name
    for name in (SECTION_RELATIONS, SECTION_RAW_CONCEPT, SECTION_NARRATIVE, SECTION_SNIPPETS)
}


class Maturity(str, enum.Enum):
    DRAFT = "draft"
    VALIDATED = "validated"
    CORE = "core"


def utcnow() -> datetime:
    return datetime.now(timezone.utc).replace(microsecond=0)


@dataclass
class LifecycleState:
    importance: float = 50.0
    maturity: Maturity = Maturity.DRAFT
    recency: float = 1.0
    access_count: int = 0
    update_count: int = 0
    created_at: datetime = field(default_factory=utcnow)
    updated_at: datetime = field(default_factory=utcnow)
    # last time importance was re-evaluated; None means "same as updated_at"
    accessed_at: datetime | None = None

    @property
    def touched_at(self) -> datetime:
        if self.accessed_at is None:
            return self.updated_at
        return max(self.accessed_at, self.updated_at)


@dataclass(frozen=True)
class RelationRef:
    target_path: str

    def __str__(self) -> str:
        return self.target_path


@dataclass
class KnowledgeEntry:
    path: str = ""
    title: str = ""
    tags: list[str] = field(default_factory=list)
    keywords: list[str] = field(default_factory=list)
    relations: list[RelationRef] = field(default_factory=list)
    raw_concept: str = ""
    narrative: str = ""
    snippets: str | None = None
    lifecycle: LifecycleState = field(default_factory=LifecycleState)
    # frontmatter `related:` mirror; `## Relations` is authoritative for edges
    related: list[str] = field(default_factory=list)
    # unknown frontmatter keys, raw lines kept verbatim for round-trip
    extra: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list, compare=False)

    @property
    def relation_targets(self) -> list[str]:
        return [r.target_path for r in self.relations]

    def body_text(self) -> str:
        """Searchable body: everything below the frontmatter."""
        parts = [*self.relation_targets, self.raw_concept, self.narrative]
        if self.snippets:
            parts.append(self.snippets)
        return "\n".join(p for p in parts if p)


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------

_BAD_SEGMENT = re.compile(r"[\\\x00:*?\"<>|]")


def path_error(path: str) -> str | None:
    """Return why `path` is not a valid tree-relative entry path, or None."""
    if not isinstance(path, str) or not path:
        return "empty path"
    if path.startswith("/"):
        return "absolute path"
    if not path.endswith(".md"):
        return "missing .md extension"
    segments = path.split("/")
    for seg in segments:
        if seg in ("", ".", ".."):
            return f"invalid segment {seg!r}"
        if seg.startswith("."):
            return f"hidden segment {seg!r}"
        if _BAD_SEGMENT.search(seg) or seg != seg.strip():
            return f"invalid characters in {seg!r}"
    if not MIN_PATH_SEGMENTS <= len(segments) <= MAX_PATH_SEGMENTS:
        return f"depth {len(segments)} outside {MIN_PATH_SEGMENTS}..{MAX_PATH_SEGMENTS}"
    if segments[-1] == SUMMARY_FILENAME:
        return f"{SUMMARY_FILENAME} is reserved for summaries"
    return None


def is_valid_entry_path(path: str) -> bool:
    return path_error(path) is None


def validate_entry_path(path: str) -> str:
    problem = path_error(path)
    if problem is not None:
        raise InvalidPath(f"{path!r}: {problem}")
    return path


# ---------------------------------------------------------------------------
# Scalars
# ---------------------------------------------------------------------------

_TS_RE = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})[T ](\d{2}):(\d{2}):(\d{2})(?:\.\d+)?(Z|[+-]\d{2}:?\d{2})$"
)
_PLAIN_FORBIDDEN_START = set("-?:,[]{}#&*!|>'\"%@`")
_FLOW_FORBIDDEN = set(",[]{}")


def parse_timestamp(text: str) -> datetime:
    m = _TS_RE.match(text.strip())
    if not m:
        raise InvalidTimestamp(f"not an ISO-8601 timestamp: {text!r}")
    year, month, day, hour, minute, second, tz = m.groups()
    if tz == "Z":
        offset = timedelta(0)
    else:
        sign = 1 if tz[0] == "+" else -1
        digits = tz[1:].replace(":", "")
        offset = sign * timedelta(hours=int(digits[:2]), minutes=int(digits[2:]))
    try:
        dt = datetime(int(year), int(month), int(day), int(hour), int(minute), int(second),
                      tzinfo=timezone(offset))
    except ValueError as exc:
        raise InvalidTimestamp(f"{text!r}: {exc}") from None
    return dt.astimezone(timezone.utc)


def format_timestamp(dt: datetime) -> str:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def format_number(value: float) -> str:
    value = round(float(value), 3)
    if value == int(value):
        return str(int(value))
    return f"{value:.3f}".rstrip("0").rstrip(".")


def _needs_quotes(text: str, in_flow: bool) -> bool:
    if not text or text != text.strip() or "\n" in text:
        return True
    if text[0] in _PLAIN_FORBIDDEN_START:
        return True
    if ": " in text or " #" in text or text.endswith(":"):
        return True
    if in_flow and any(c in _FLOW_FORBIDDEN for c in text):
        return True
    return False


def format_scalar(text: str, in_flow: bool = False) -> str:
    if _needs_quotes(text, in_flow):
        return json.dumps(text, ensure_ascii=False)
    return text


def _parse_scalar(raw: str) -> str:
    raw = raw.strip()
    if raw.startswith('"'):
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            raise MalformedFrontmatter(f"bad double-quoted scalar: {raw!r}") from None
        if not isinstance(value, str):
            raise MalformedFrontmatter(f"bad double-quoted scalar: {raw!r}")
        return value
    if raw.startswith("'"):
        if len(raw) < 2 or not raw.endswith("'"):
            raise MalformedFrontmatter(f"unterminated single-quoted scalar: {raw!r}")
        return raw[1:-1].replace("''", "'")
    if raw[:1] in ("&", "*", "!", "|", ">"):
        raise MalformedFrontmatter(f"unsupported YAML feature in {raw!r}")
    return raw


def _parse_flow_list(raw: str) -> list[str]:
    raw = raw.strip()
    if not (raw.startswith("[") and raw.endswith("]")):
        raise MalformedFrontmatter(f"expected flow list, got {raw!r}")
    inner = raw[1:-1].strip()
    if not inner:
        return []
    items: list[str] = []
    buf: list[str] = []
    quote: str | None = None
    i = 0
    while i < len(inner):
        ch = inner[i]
        if quote:
            buf.append(ch)
            if ch == "\\" and quote == '"' and i + 1 < len(inner):
                buf.append(inner[i + 1])
                i += 1
            elif ch == quote:
                quote = None
        elif ch in ('"', "'") and not "".join(buf).strip():
            quote = ch
            buf.append(ch)
        elif ch == ",":
            items.append(_parse_scalar("".join(buf)))
            buf = []
        elif ch in "[]{}":
            raise MalformedFrontmatter(f"nested collections are not supported: {raw!r}")
        else:
            buf.append(ch)
        i += 1
    if quote:
        raise MalformedFrontmatter(f"unterminated quote in {raw!r}")
    items.append(_parse_scalar("".join(buf)))
    return items


def format_flow_list(items: Iterable[str]) -> str:
    return "[" + ", ".join(format_scalar(i, in_flow=True) for i in items) + "]"


# ---------------------------------------------------------------------------
# Frontmatter
# ---------------------------------------------------------------------------

_KEY_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_-]*):(?:[ \t]+(.*?))?[ \t]*$")
_ITEM_RE = re.compile(r"^[ \t]*- (.*)$")


@dataclass
class _RawKey:
    name: str
    value: str | None  # inline value, None when the key opens a block
    items: list[str]
    lines: list[str]


def _split_frontmatter(text: str) -> tuple[list[str], str]:
    if not text.startswith("---\n"):
        raise MalformedFrontmatter("file does not start with a '---' frontmatter block")
    end = text.find("\n---\n", 3)
    if end == -1:
        if text.endswith("\n---"):
            end = len(text) - 4
        else:
            raise MalformedFrontmatter("frontmatter block is not terminated")
    fm = text[4:end + 1] if end >= 4 else ""
    body = text[end + 5:]
    return fm.splitlines(), body


def _scan_keys(lines: list[str]) -> list[_RawKey]:
    keys: list[_RawKey] = []
    current: _RawKey | None = None
    for line in lines:
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        m = _KEY_RE.match(line)
        if m and not line[0].isspace():
            current = _RawKey(m.group(1), m.group(2) or None, [], [line])
            keys.append(current)
            continue
        if current is None:
            raise MalformedFrontmatter(f"unexpected frontmatter line: {line!r}")
        item = _ITEM_RE.match(line)
        if item and current.value is None:
            current.items.append(item.group(1))
            current.lines.append(line)
            continue
        raise MalformedFrontmatter(f"unsupported frontmatter construct: {line!r}")
    return keys


def _list_value(key: _RawKey) -> list[str]:
    if key.value is None:
        return [_parse_scalar(i) for i in key.items]
    return _parse_flow_list(key.value)


def _scalar_value(key: _RawKey) -> str:
    if key.value is None:
        if key.items:
            raise MalformedFrontmatter(f"{key.name}: expected a scalar, got a list")
        return ""
    return _parse_scalar(key.value)


def _number(key: _RawKey) -> float:
    text = _scalar_value(key)
    try:
        return float(text)
    except ValueError:
        raise MalformedFrontmatter(f"{key.name}: not a number: {text!r}") from None


def _count(key: _RawKey) -> int:
    value = _number(key)
    if value < 0 or value != int(value):
        raise MalformedFrontmatter(f"{key.name}: expected a nonnegative integer")
    return int(value)


# ---------------------------------------------------------------------------
# Body sections
# ---------------------------------------------------------------------------

_HEADER_RE = re.compile(r"^##[ \t]+(.+?)[ \t]*$")
_FENCE_RE = re.compile(r"^[ \t]*(```|~~~)")


def _split_sections(body: str) -> tuple[dict[str, str], str, list[str]]:
    sections: dict[str, list[str]] = {}
    preamble: list[str] = []
    warnings: list[str] = []
    current: list[str] = preamble
    fence: str | None = None
    for line in body.split("\n"):
        fm = _FENCE_RE.match(line)
        if fm:
            if fence is None:
                fence = fm.group(1)
            elif fm.group(1) == fence:
                fence = None
        elif fence is None:
            hm = _HEADER_RE.match(line)
            if hm and hm.group(1).lower() in _SECTIONS:
                name = _SECTIONS[hm.group(1).lower()]
                if name in sections:
                    warnings.append(f"duplicate section '## {name}' merged")
                    current = sections[name]
                    current.append("")
                else:
                    current = sections[name] = []
                continue
        current.append(line)
    joined = {name: "\n".join(lines).strip("\n") for name, lines in sections.items()}
    return joined, "\n".join(preamble).strip(), warnings


def parse_relation_lines(text: str) -> tuple[list[RelationRef], list[str]]:
    """Parse `@target` lines, dropping duplicates and invalid targets."""
    refs: list[RelationRef] = []
    seen: set[str] = set()
    warnings: list[str] = []
    for line in text.split("\n"):
        stripped = line.strip()
        if not stripped.startswith("@"):
            continue
        target = stripped[1:].strip()
        problem = path_error(target)
        if problem is not None:
            warnings.append(f"skipped relation {stripped!r}: {problem}")
            continue
        if target not in seen:
            seen.add(target)
            refs.append(RelationRef(target))
    return refs, warnings


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def parse_entry(content: bytes | str, path: str = "") -> KnowledgeEntry:
    if isinstance(content, bytes):
        try:
            text = content.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedFrontmatter(f"entry is not UTF-8: {exc}") from None
    else:
        text = content

    fm_lines, body = _split_frontmatter(text)
    keys = _scan_keys(fm_lines)
    by_name: dict[str, _RawKey] = {}
    for key in keys:
        if key.name in by_name:
            raise MalformedFrontmatter(f"duplicate frontmatter key {key.name!r}")
        by_name[key.name] = key

    entry = KnowledgeEntry(path=path)
    lc = entry.lifecycle
    if "title" in by_name:
        entry.title = _scalar_value(by_name["title"])
    elif path:
        entry.title = path.rsplit("/", 1)[-1][:-3]
    if "tags" in by_name:
        entry.tags = _list_value(by_name["tags"])
    if "keywords" in by_name:
        entry.keywords = _list_value(by_name["keywords"])
    if "related" in by_name:
        entry.related = _list_value(by_name["related"])
    if "importance" in by_name:
        lc.importance = _number(by_name["importance"])
        if not 0.0 <= lc.importance <= 100.0:
            raise ImportanceOutOfRange(f"importance {lc.importance} outside [0, 100]")
    if "maturity" in by_name:
        raw = _scalar_value(by_name["maturity"]).lower()
        try:
            lc.maturity = Maturity(raw)
        except ValueError:
            raise MalformedFrontmatter(f"unknown maturity {raw!r}") from None
    if "recency" in by_name:
        lc.recency = _number(by_name["recency"])
    if "accessCount" in by_name:
        lc.access_count = _count(by_name["accessCount"])
    if "updateCount" in by_name:
        lc.update_count = _count(by_name["updateCount"])
    if "createdAt" in by_name:
        lc.created_at = parse_timestamp(_scalar_value(by_name["createdAt"]))
    if "updatedAt" in by_name:
        lc.updated_at = parse_timestamp(_scalar_value(by_name["updatedAt"]))
    elif "createdAt" in by_name:
        lc.updated_at = lc.created_at
    if "createdAt" not in by_name:
        lc.created_at = lc.updated_at
    if lc.updated_at < lc.created_at:
        raise InvalidTimestamp("updatedAt precedes createdAt")
    if "accessedAt" in by_name:
        lc.accessed_at = parse_timestamp(_scalar_value(by_name["accessedAt"]))

    for key in keys:
        if key.name not in FRONTMATTER_KEYS and key.name != "accessedAt":
            entry.extra[key.name] = "\n".join(key.lines)

    sections, preamble, warnings = _split_sections(body)
    if preamble:
        warnings.append("text before the first section was ignored")
    entry.relations, rel_warnings = parse_relation_lines(sections.get(SECTION_RELATIONS, ""))
    warnings.extend(rel_warnings)
    entry.raw_concept = sections.get(SECTION_RAW_CONCEPT, "")
    entry.narrative = sections.get(SECTION_NARRATIVE, "")
    entry.snippets = sections.get(SECTION_SNIPPETS)
    entry.warnings = warnings
    for w in warnings:
        logger.warning("%s: %s", path or "<entry>", w)
    return entry


def serialize_entry(entry: KnowledgeEntry) -> str:
    lc = entry.lifecycle
    out = ["---", f"title: {format_scalar(entry.title)}"]
    out.append(f"tags: {format_flow_list(entry.tags)}")
    out.append(f"keywords: {format_flow_list(entry.keywords)}")
    if entry.related:
        out.append("related:")
        out.extend(f"  - {format_scalar(r)}" for r in entry.related)
    else:
        out.append("related: []")
    out.append(f"importance: {format_number(lc.importance)}")
    out.append(f"maturity: {Maturity(lc.maturity).value}")
    out.append(f"recency: {format_number(lc.recency)}")
    out.append(f"accessCount: {lc.access_count}")
    out.append(f"updateCount: {lc.update_count}")
    out.append(f"createdAt: {format_timestamp(lc.created_at)}")
    out.append(f"updatedAt: {format_timestamp(lc.updated_at)}")
    if lc.accessed_at is not None:
        out.append(f"accessedAt: {format_timestamp(lc.accessed_at)}")
    out.extend(entry.extra.values())
    out.append("---")
    frontmatter = "\n".join(out) + "\n"

    sections = [
        (SECTION_RELATIONS, "\n".join("@" + t for t in entry.relation_targets)),
        (SECTION_RAW_CONCEPT, entry.raw_concept),
        (SECTION_NARRATIVE, entry.narrative),
    ]
    if entry.snippets is not None:
        sections.append((SECTION_SNIPPETS, entry.snippets))
    rendered = [f"## {name}\n{body}\n" if body else f"## {name}\n" for name, body in sections]
    return frontmatter + "\n" + "\n".join(rendered)


def extract_relations(entry: KnowledgeEntry, warnings: list[str] | None = None) -> list[RelationRef]:
    """Deduplicated, order-preserving relation targets with invalid ones dropped."""
    seen: set[str] = set()
    out: list[RelationRef] = []
    for ref in entry.relations:
        target = ref.target_path.lstrip("@").strip()
        problem = path_error(target)
        if problem is not None:
            msg = f"skipped relation {ref.target_path!r}: {problem}"
            logger.warning("%s: %s", entry.path or "<entry>", msg)
            if warnings is not None:
                warnings.append(msg)
            continue
        if target not in seen:
            seen.add(target)
            out.append(RelationRef(target))
    return out
