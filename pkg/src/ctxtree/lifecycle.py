"""Adaptive knowledge lifecycle: importance, maturity tiers, recency.

Importance decays continuously (``0.995 ** days``) and is only brought
up to date when something happens to the entry, so no background sweep
is needed.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from datetime import datetime

from .entry import LifecycleState, Maturity
from .errors import EventBeforeCreation, NegativeElapsed, NowBeforeUpdate, WeightsNotNormalized

ACCESS_BONUS = 3.0
UPDATE_BONUS = 5.0
DAILY_DECAY = 0.995
RECENCY_TAU_DAYS = 30.0
IMPORTANCE_MIN = 0.0
IMPORTANCE_MAX = 100.0
INITIAL_IMPORTANCE = 50.0

# (promote at >=, demote below)
VALIDATED_PROMOTE = 65.0
VALIDATED_DEMOTE = 35.0
CORE_PROMOTE = 85.0
CORE_DEMOTE = 60.0

_SECONDS_PER_DAY = 86400.0


class EventKind(str, enum.Enum):
    ACCESS = "access"
    UPDATE = "update"


_BONUS = {EventKind.ACCESS: ACCESS_BONUS, EventKind.UPDATE: UPDATE_BONUS}


@dataclass(frozen=True)
class LifecycleEvent:
    kind: EventKind
    at: datetime


@dataclass(frozen=True)
class ScoreWeights:
    relevance: float = 0.7
    importance: float = 0.2
    recency: float = 0.1

    def __post_init__(self) -> None:
        parts = (self.relevance, self.importance, self.recency)
        if any(w < 0 for w in parts) or abs(sum(parts) - 1.0) > 1e-9:
            raise WeightsNotNormalized(f"weights must be nonnegative and sum to 1, got {parts}")


def days_between(earlier: datetime, later: datetime) -> float:
    return (later - earlier).total_seconds() / _SECONDS_PER_DAY


def clamp_importance(value: float) -> float:
    return min(IMPORTANCE_MAX, max(IMPORTANCE_MIN, value))


def decay_importance(importance: float, elapsed_days: float) -> float:
    if elapsed_days < 0:
        raise NegativeElapsed(f"elapsed_days must be >= 0, got {elapsed_days}")
    return clamp_importance(importance * DAILY_DECAY ** elapsed_days)


def evaluate_maturity(current: Maturity, importance: float) -> Maturity:
    """Move at most one tier, with hysteresis between promote/demote points."""
    current = Maturity(current)
    if current is Maturity.DRAFT:
        return Maturity.VALIDATED if importance >= VALIDATED_PROMOTE else current
    if current is Maturity.VALIDATED:
        if importance >= CORE_PROMOTE:
            return Maturity.CORE
        if importance < VALIDATED_DEMOTE:
            return Maturity.DRAFT
        return current
    return Maturity.VALIDATED if importance < CORE_DEMOTE else current


def recency(updated_at: datetime, now: datetime) -> float:
    elapsed = days_between(updated_at, now)
    if elapsed < 0:
        raise NowBeforeUpdate(f"now {now} precedes updated_at {updated_at}")
    return math.exp(-elapsed / RECENCY_TAU_DAYS)


def current_importance(state: LifecycleState, now: datetime) -> float:
    """Importance decayed up to `now` without recording anything."""
    return decay_importance(state.importance, max(0.0, days_between(state.touched_at, now)))


def apply_event(state: LifecycleState, event: LifecycleEvent, now: datetime) -> LifecycleState:
    if event.at > now:
        raise ValueError("event is in the future")
    if event.at < state.created_at:
        raise EventBeforeCreation(f"event at {event.at} precedes creation {state.created_at}")
    kind = EventKind(event.kind)
    elapsed = max(0.0, days_between(state.touched_at, event.at))
    importance = clamp_importance(decay_importance(state.importance, elapsed) + _BONUS[kind])
    if kind is EventKind.UPDATE:
        new = replace(
            state,
            importance=importance,
            update_count=state.update_count + 1,
            updated_at=max(state.updated_at, event.at),
            accessed_at=state.accessed_at if state.accessed_at and state.accessed_at > event.at else None,
        )
    else:
        new = replace(
            state,
            importance=importance,
            access_count=state.access_count + 1,
            accessed_at=max(state.touched_at, event.at),
        )
    new.maturity = evaluate_maturity(state.maturity, importance)
    new.recency = recency(new.updated_at, max(now, new.updated_at))
    return new


def compound_score(bm25_normalized: float, importance: float, recency_score: float,
                   weights: ScoreWeights = ScoreWeights()) -> float:
    """Blend normalized relevance with lifecycle signals; importance is on 0..100."""
    return (weights.relevance * bm25_normalized
            + weights.importance * (importance / IMPORTANCE_MAX)
            + weights.recency * recency_score)
