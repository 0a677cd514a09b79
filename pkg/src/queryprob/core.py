"""Shared domain types: label vocabulary, beliefs, scenes, queries.

Everything here is immutable after validation so scenes and queries can be
shared freely between workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

NORMALIZATION_TOLERANCE = 1e-6


class QueryProbError(Exception):
    """Base class for all errors raised by this package."""


class InputError(QueryProbError):
    """Malformed query text, config, or argument (CLI exit code 2)."""


class DataError(QueryProbError):
    """Inconsistent scene / belief / label data (CLI exit code 3)."""


class BudgetError(QueryProbError):
    """Computation exceeds a configured state or world budget (CLI exit code 4)."""


class BeliefNotNormalized(DataError):
    pass


class NegativeProbability(DataError):
    pass


class LengthMismatch(DataError):
    pass


class UnknownClass(DataError):
    pass


class InvalidIndicator(InputError):
    pass


# ---------------------------------------------------------------------------
# Vocabulary


@dataclass(frozen=True)
class LabelVocab:
    """Ordered class vocabulary of size K.

    ``ignored`` classes (e.g. a no-object class) are exempt from count
    constraints and from closed-mode restrictions.  ``values`` are the integer
    weights used by sum queries; they default to the class index, except for
    ignored classes which default to 0.
    """

    classes: tuple[str, ...]
    ignored: frozenset[str] = frozenset()
    values: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.classes:
            raise UnknownClass("vocabulary must contain at least one class")
        if len(set(self.classes)) != len(self.classes):
            raise UnknownClass("class names must be unique")
        if any(not c for c in self.classes):
            raise UnknownClass("class names must be non-empty")
        unknown = self.ignored - set(self.classes)
        if unknown:
            raise UnknownClass(f"ignored classes not in vocabulary: {sorted(unknown)}")
        if not self.values:
            values = tuple(
                0 if c in self.ignored else k for k, c in enumerate(self.classes)
            )
            object.__setattr__(self, "values", values)
        if len(self.values) != len(self.classes):
            raise LengthMismatch(
                f"values has length {len(self.values)}, expected {len(self.classes)}"
            )
        if any(v < 0 for v in self.values):
            # sum-query DP assumes nonnegative per-class weights
            raise InputError("class values must be nonnegative integers")

    @property
    def size(self) -> int:
        return len(self.classes)

    def index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise UnknownClass(f"unknown class {name!r}") from None

    def is_ignored_index(self, k: int) -> bool:
        return self.classes[k] in self.ignored

    @property
    def ignored_indices(self) -> frozenset[int]:
        return frozenset(k for k, c in enumerate(self.classes) if c in self.ignored)


# ---------------------------------------------------------------------------
# Intervals and queries


@dataclass(frozen=True)
class Interval:
    """Half-open count interval [lo, hi); ``hi=None`` means unbounded."""

    lo: int
    hi: Optional[int] = None

    def __post_init__(self):
        if self.lo < 0:
            raise InputError(f"interval lower bound must be >= 0, got {self.lo}")
        if self.hi is not None and self.hi <= self.lo:
            raise InputError(f"empty interval [{self.lo}, {self.hi})")

    def contains(self, count: int) -> bool:
        return count >= self.lo and (self.hi is None or count < self.hi)

    @property
    def is_exact(self) -> bool:
        return self.hi is not None and self.hi == self.lo + 1

    def intersect(self, other: "Interval") -> "Interval":
        lo = max(self.lo, other.lo)
        if self.hi is None:
            hi = other.hi
        elif other.hi is None:
            hi = self.hi
        else:
            hi = min(self.hi, other.hi)
        return Interval(lo, hi)


def indicator_to_interval(count: int, indicator: int) -> Interval:
    """Map a (count, indicator) pair to an interval.

    Indicator 0 means exactly ``count``; 1 means strictly more than ``count``;
    -1 means strictly fewer.  Mirrors the three-way comparison convention of
    range count queries.
    """
    if indicator not in (-1, 0, 1):
        raise InvalidIndicator(f"indicator must be -1, 0 or 1, got {indicator}")
    if count < 0:
        raise InvalidIndicator(f"count must be >= 0, got {count}")
    if indicator == 0:
        return Interval(count, count + 1)
    if indicator == 1:
        return Interval(count + 1, None)
    if count == 0:
        raise InvalidIndicator("no count is strictly below 0")
    return Interval(0, count)


@dataclass(frozen=True)
class CountConstraints:
    """Per-class count intervals.

    In ``open`` mode unlisted classes are unconstrained; in ``closed`` mode
    every non-ignored object must take one of the listed classes.
    """

    items: tuple[tuple[str, Interval], ...]
    mode: str = "open"

    def __post_init__(self):
        if self.mode not in ("open", "closed"):
            raise InputError(f"mode must be 'open' or 'closed', got {self.mode!r}")
        names = [name for name, _ in self.items]
        if len(set(names)) != len(names):
            raise InputError(f"duplicate class in count constraints: {names}")


@dataclass(frozen=True)
class Sum:
    """The values of all object labels must add up to exactly ``target``."""

    target: int

    def __post_init__(self):
        if self.target < 0:
            raise InputError(f"sum target must be >= 0, got {self.target}")


@dataclass(frozen=True)
class Presence:
    """Each listed class must appear at least once (interval [1, inf))."""

    classes: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise InputError(f"duplicate class in presence query: {self.classes}")


@dataclass(frozen=True)
class And:
    """Conjunction of sub-queries; a world must satisfy every part."""

    parts: tuple["Query", ...]

    def __post_init__(self):
        if not self.parts:
            raise InputError("and() requires at least one sub-query")


Query = Union[CountConstraints, Sum, Presence, And]


@dataclass(frozen=True)
class Assignment:
    """One possible world: a class index for every object."""

    labels: tuple[int, ...]


# ---------------------------------------------------------------------------
# Scenes


@dataclass(frozen=True)
class CategoricalBelief:
    """One object's probability vector over the K classes."""

    probs: tuple[float, ...]


@dataclass(frozen=True)
class SceneRecord:
    """One image's worth of data: beliefs plus optional features/labels/query."""

    id: str
    beliefs: tuple[CategoricalBelief, ...]
    features: Optional[tuple[tuple[float, ...], ...]] = None
    gold_labels: Optional[tuple[str, ...]] = None
    query: Optional[Query] = None

    @property
    def n_objects(self) -> int:
        return len(self.beliefs)


def _renormalize(probs: Sequence[float]) -> tuple[float, ...]:
    total = math.fsum(probs)
    scaled = [p / total for p in probs]
    residual = 1.0 - math.fsum(scaled)
    if residual != 0.0:
        top = max(range(len(scaled)), key=lambda k: (scaled[k], -k))
        scaled[top] += residual
    return tuple(scaled)


def validate_scene(scene: SceneRecord, vocab: LabelVocab) -> SceneRecord:
    """Check a scene against the vocabulary and renormalize its beliefs.

    Belief vectors may deviate from sum 1 by at most ``NORMALIZATION_TOLERANCE``;
    they are then rescaled and the residual is folded into the largest entry so
    that the result sums to exactly 1.0.  Validation is idempotent.
    """
    k = vocab.size
    beliefs = []
    for i, belief in enumerate(scene.beliefs):
        probs = belief.probs
        if len(probs) != k:
            raise LengthMismatch(
                f"scene {scene.id!r} object {i}: belief has {len(probs)} entries, vocab has {k}"
            )
        for p in probs:
            if not math.isfinite(p):
                raise NegativeProbability(
                    f"scene {scene.id!r} object {i}: non-finite probability {p}"
                )
            if p < 0.0:
                raise NegativeProbability(
                    f"scene {scene.id!r} object {i}: negative probability {p}"
                )
        total = math.fsum(probs)
        if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
            raise BeliefNotNormalized(
                f"scene {scene.id!r} object {i}: probabilities sum to {total!r}"
            )
        beliefs.append(CategoricalBelief(_renormalize(probs)))
    n = len(beliefs)
    if scene.features is not None and len(scene.features) != n:
        raise LengthMismatch(
            f"scene {scene.id!r}: {len(scene.features)} feature rows for {n} objects"
        )
    if scene.gold_labels is not None:
        if len(scene.gold_labels) != n:
            raise LengthMismatch(
                f"scene {scene.id!r}: {len(scene.gold_labels)} gold labels for {n} objects"
            )
        for name in scene.gold_labels:
            vocab.index(name)
    if scene.query is not None:
        validate_query(scene.query, vocab)
    return replace(scene, beliefs=tuple(beliefs))


def validate_query(query: Query, vocab: LabelVocab) -> Query:
    """Resolve class names in a query against the vocabulary.

    Rejects unknown classes and constraints on ignored classes.  Returns the
    query unchanged (queries keep class names; indices are resolved when a
    plan is compiled).
    """
    if isinstance(query, CountConstraints):
        for name, _ in query.items:
            vocab.index(name)
            if name in vocab.ignored:
                raise InputError(f"ignored class {name!r} cannot be constrained")
    elif isinstance(query, Presence):
        for name in query.classes:
            vocab.index(name)
            if name in vocab.ignored:
                raise InputError(f"ignored class {name!r} cannot be constrained")
    elif isinstance(query, Sum):
        pass
    elif isinstance(query, And):
        for part in query.parts:
            validate_query(part, vocab)
    else:
        raise InputError(f"not a query: {query!r}")
    return query


def satisfies(query: Query, labels: Sequence[int], vocab: LabelVocab) -> bool:
    """Acceptance predicate: does a fully labeled world satisfy the query?"""
    if isinstance(query, CountConstraints):
        for name, interval in query.items:
            idx = vocab.index(name)
            if not interval.contains(sum(1 for l in labels if l == idx)):
                return False
        if query.mode == "closed":
            listed = {vocab.index(name) for name, _ in query.items}
            for l in labels:
                if l not in listed and not vocab.is_ignored_index(l):
                    return False
        return True
    if isinstance(query, Presence):
        return all(
            any(l == vocab.index(name) for l in labels) for name in query.classes
        )
    if isinstance(query, Sum):
        return sum(vocab.values[l] for l in labels) == query.target
    if isinstance(query, And):
        return all(satisfies(part, labels, vocab) for part in query.parts)
    raise InputError(f"not a query: {query!r}")
