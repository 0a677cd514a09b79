"""Compile queries into dynamic-programming inference plans; confidence filtering.

A plan tracks one saturating counter per constrained class plus an optional
partial-sum counter.  Counter encoding: an interval [a, inf) saturates at a
(accept when the counter reached a); a finite interval [a, b) caps the counter
at b-1 and any transition past the cap is dropped, since exceeding an upper
bound can never be repaired.  The state count is the product of (cap+1) over
tracked counters times (sum target + 1) when a sum is tracked.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .core import (
    And,
    BudgetError,
    CountConstraints,
    InputError,
    Interval,
    LabelVocab,
    Presence,
    Query,
    QueryProbError,
    SceneRecord,
    Sum,
)

DEFAULT_STATE_LIMIT = 10**7
DEFAULT_WORLD_LIMIT = 2 * 10**6


class QueryTooComplex(BudgetError):
    pass


class InvalidDelta(InputError):
    pass


class QueryUnsatisfiableAfterClamp(QueryProbError):
    """A clamped fact forces P(query) = 0; explicit signal rather than silence."""


@dataclass(frozen=True)
class TrackedCounter:
    class_index: int
    cap: int
    interval: Interval
    saturating: bool

    def accepts(self, count: int) -> bool:
        if self.saturating:
            return count == self.cap
        return count >= self.interval.lo


@dataclass(frozen=True)
class TransitionGroup:
    """Classes sharing one DP transition: same counter slot and sum value."""

    classes: tuple[int, ...]
    slot: Optional[int]
    value: int


@dataclass(frozen=True)
class ResolvedQuery:
    """Query flattened to per-class intervals plus closed-mode restrictions."""

    intervals: tuple[tuple[int, Interval], ...]
    permitted: Optional[frozenset[int]]  # None = all classes allowed
    sum_target: Optional[int]
    impossible: bool
    closed: bool


@dataclass(frozen=True)
class InferencePlan:
    kind: str  # count_dp | sum_dp | product_dp | enumeration
    n: int
    num_classes: int
    mode: str
    tracked: tuple[TrackedCounter, ...]
    sum_cap: Optional[int]
    values: tuple[int, ...]
    transitions: tuple[TransitionGroup, ...]
    state_count: int
    resolved: ResolvedQuery


def resolve_query(query: Query, vocab: LabelVocab) -> ResolvedQuery:
    """Merge a (possibly conjunctive) query into one acceptance structure."""
    intervals: dict[int, Interval] = {}
    order: list[int] = []
    permitted: Optional[set[int]] = None
    sum_target: Optional[int] = None
    impossible = False
    closed = False

    def narrow(idx: int, interval: Interval):
        nonlocal impossible
        if idx in intervals:
            old = intervals[idx]
            lo = max(old.lo, interval.lo)
            if old.hi is None:
                hi = interval.hi
            elif interval.hi is None:
                hi = old.hi
            else:
                hi = min(old.hi, interval.hi)
            if hi is not None and hi <= lo:
                impossible = True
                intervals[idx] = Interval(lo, lo + 1)
                return
            intervals[idx] = Interval(lo, hi)
        else:
            intervals[idx] = interval
            order.append(idx)

    def walk(q: Query):
        nonlocal permitted, sum_target, impossible, closed
        if isinstance(q, CountConstraints):
            for name, interval in q.items:
                narrow(vocab.index(name), interval)
            if q.mode == "closed":
                closed = True
                listed = {vocab.index(name) for name, _ in q.items}
                allowed = listed | set(vocab.ignored_indices)
                permitted = allowed if permitted is None else permitted & allowed
        elif isinstance(q, Presence):
            for name in q.classes:
                narrow(vocab.index(name), Interval(1, None))
        elif isinstance(q, Sum):
            if sum_target is None:
                sum_target = q.target
            elif sum_target != q.target:
                impossible = True
        elif isinstance(q, And):
            for part in q.parts:
                walk(part)
        else:
            raise InputError(f"not a query: {q!r}")

    walk(query)

    if permitted is not None:
        # a constrained class outside the permitted set can never be counted
        for idx in order:
            if idx not in permitted and intervals[idx].lo > 0:
                impossible = True
    return ResolvedQuery(
        intervals=tuple((idx, intervals[idx]) for idx in order),
        permitted=None if permitted is None else frozenset(permitted),
        sum_target=sum_target,
        impossible=impossible,
        closed=closed,
    )


def _counter(idx: int, interval: Interval) -> TrackedCounter:
    if interval.hi is None:
        return TrackedCounter(idx, interval.lo, interval, saturating=True)
    return TrackedCounter(idx, interval.hi - 1, interval, saturating=False)


def _build_transitions(
    tracked: tuple[TrackedCounter, ...],
    resolved: ResolvedQuery,
    vocab: LabelVocab,
) -> tuple[TransitionGroup, ...]:
    slot_of = {c.class_index: t for t, c in enumerate(tracked)}
    with_sum = resolved.sum_target is not None
    groups: list[TransitionGroup] = []
    for counter in tracked:
        idx = counter.class_index
        if resolved.permitted is not None and idx not in resolved.permitted:
            continue  # forbidden by a closed conjunct; its worlds contribute 0
        groups.append(
            TransitionGroup((idx,), slot_of[idx], vocab.values[idx] if with_sum else 0)
        )
    others = [
        k
        for k in range(vocab.size)
        if k not in slot_of
        and (resolved.permitted is None or k in resolved.permitted)
    ]
    if others:
        if with_sum:
            by_value: dict[int, list[int]] = {}
            for k in others:
                by_value.setdefault(vocab.values[k], []).append(k)
            for value in sorted(by_value):
                groups.append(TransitionGroup(tuple(by_value[value]), None, value))
        else:
            groups.append(TransitionGroup(tuple(others), None, 0))
    return tuple(groups)


def compile(
    query: Query,
    vocab: LabelVocab,
    n: int,
    limit_states: int = DEFAULT_STATE_LIMIT,
    limit_worlds: int = DEFAULT_WORLD_LIMIT,
) -> InferencePlan:
    """Choose and build the evaluation strategy for a query over n objects."""
    resolved = resolve_query(query, vocab)
    tracked = tuple(_counter(idx, interval) for idx, interval in resolved.intervals)
    state_count = 1
    for counter in tracked:
        state_count *= counter.cap + 1
    if resolved.sum_target is not None:
        state_count *= resolved.sum_target + 1

    if resolved.sum_target is None:
        kind = "count_dp"
    elif not tracked and not resolved.closed:
        kind = "sum_dp"
    else:
        kind = "product_dp"

    mode = "closed" if resolved.closed else "open"
    if state_count > limit_states:
        worlds = vocab.size**n
        if worlds <= limit_worlds:
            return InferencePlan(
                kind="enumeration",
                n=n,
                num_classes=vocab.size,
                mode=mode,
                tracked=tracked,
                sum_cap=resolved.sum_target,
                values=vocab.values,
                transitions=(),
                state_count=worlds,
                resolved=resolved,
            )
        raise QueryTooComplex(
            f"{state_count} DP states and {worlds} worlds both exceed budgets "
            f"({limit_states}, {limit_worlds})"
        )
    return InferencePlan(
        kind=kind,
        n=n,
        num_classes=vocab.size,
        mode=mode,
        tracked=tracked,
        sum_cap=resolved.sum_target,
        values=vocab.values,
        transitions=_build_transitions(tracked, resolved, vocab),
        state_count=state_count,
        resolved=resolved,
    )


def plan_cost(plan: InferencePlan) -> int:
    return plan.state_count


# ---------------------------------------------------------------------------
# Confidence filtering


@dataclass(frozen=True)
class FilterResult:
    clamped: tuple[tuple[int, int], ...]  # (object index, class index)
    residual_scene: SceneRecord
    residual_query: Query
    skipped: tuple[int, ...]


def _decrement(query: Query, name: str, value: int) -> Query:
    """Residual query after one object was clamped to class ``name``."""
    if isinstance(query, CountConstraints):
        items = []
        for item_name, interval in query.items:
            if item_name == name:
                lo = max(interval.lo - 1, 0)
                hi = None if interval.hi is None else interval.hi - 1
                items.append((item_name, Interval(lo, hi)))
            else:
                items.append((item_name, interval))
        return CountConstraints(tuple(items), query.mode)
    if isinstance(query, Presence):
        return Presence(tuple(c for c in query.classes if c != name))
    if isinstance(query, Sum):
        return Sum(query.target - value)
    if isinstance(query, And):
        return And(tuple(_decrement(part, name, value) for part in query.parts))
    raise InputError(f"not a query: {query!r}")


def _clamp_consistent(query: Query, name: str, idx: int, value: int, vocab: LabelVocab) -> bool:
    """Would fixing one object to ``name`` keep the query satisfiable locally?

    Checks the upper budget of every count constraint on the class, the
    closed-mode listings, and the remaining sum target.
    """
    if isinstance(query, CountConstraints):
        for item_name, interval in query.items:
            if item_name == name and interval.hi is not None and interval.hi <= 1:
                return False
        if query.mode == "closed" and name not in vocab.ignored:
            if all(item_name != name for item_name, _ in query.items):
                return False
        return True
    if isinstance(query, Presence):
        return True
    if isinstance(query, Sum):
        return query.target >= value
    if isinstance(query, And):
        return all(_clamp_consistent(part, name, idx, value, vocab) for part in query.parts)
    raise InputError(f"not a query: {query!r}")


def _check_satisfiable(query: Query, vocab: LabelVocab, n: int):
    resolved = resolve_query(query, vocab)
    if resolved.impossible:
        raise QueryUnsatisfiableAfterClamp("clamping emptied a count interval")
    need = sum(interval.lo for _, interval in resolved.intervals)
    if need > n:
        raise QueryUnsatisfiableAfterClamp(
            f"{need} objects required by count lower bounds, {n} remain"
        )
    if resolved.sum_target is not None:
        allowed = range(vocab.size) if resolved.permitted is None else resolved.permitted
        max_value = max((vocab.values[k] for k in allowed), default=0)
        if resolved.sum_target > n * max_value:
            raise QueryUnsatisfiableAfterClamp(
                f"sum target {resolved.sum_target} unreachable with {n} objects"
            )


def filter_probs(
    probs: Sequence[Sequence[float]], query: Query, vocab: LabelVocab, delta: float
) -> tuple[tuple[int, ...], Query, tuple[tuple[int, int], ...], tuple[int, ...]]:
    """Row-level filtering shared by :func:`filter_scene` and the trainer.

    Returns (kept object indices, residual query, clamped pairs, skipped).
    Raises :class:`QueryUnsatisfiableAfterClamp` when the clamps force P = 0.
    """
    if not (0.5 < delta <= 1.0):
        raise InvalidDelta(f"delta must be in (0.5, 1], got {delta}")
    clamped: list[tuple[int, int]] = []
    skipped: list[int] = []
    kept: list[int] = []
    residual_query = query
    for i, row in enumerate(probs):
        best = max(range(len(row)), key=lambda k: (row[k], -k))
        if row[best] < delta:
            kept.append(i)
            continue
        name = vocab.classes[best]
        if _clamp_consistent(residual_query, name, best, vocab.values[best], vocab):
            clamped.append((i, best))
            residual_query = _decrement(residual_query, name, vocab.values[best])
        else:
            skipped.append(i)
            kept.append(i)
    if clamped:
        _check_satisfiable(residual_query, vocab, len(kept))
    return tuple(kept), residual_query, tuple(clamped), tuple(skipped)


def filter_scene(
    scene: SceneRecord, query: Query, vocab: LabelVocab, delta: float
) -> FilterResult:
    """Clamp high-confidence objects to certainty and shrink the query.

    An object whose maximum class probability is at least ``delta`` is removed
    and the query budget for its class is decremented, but only when that
    class is consistent with the remaining budget; inconsistent confident
    objects are reported in ``skipped`` and kept for inference so the engine
    can learn from the error.
    """
    kept, residual_query, clamped, skipped = filter_probs(
        [b.probs for b in scene.beliefs], query, vocab, delta
    )
    if not clamped:
        return FilterResult((), scene, query, skipped)
    residual_scene = replace(
        scene,
        beliefs=tuple(scene.beliefs[i] for i in kept),
        features=None
        if scene.features is None
        else tuple(scene.features[i] for i in kept),
        gold_labels=None
        if scene.gold_labels is None
        else tuple(scene.gold_labels[i] for i in kept),
        query=None if scene.query is None else residual_query,
    )
    return FilterResult(clamped, residual_scene, residual_query, skipped)
