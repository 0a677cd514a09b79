"""Most-probable-world inference via assignment matching, and pseudo-labeling.

When a query fixes the exact multiset of labels, the single most probable
compatible world is an assignment of objects to label slots.  With cost
-log p per (object, slot) pair, the minimum-cost assignment is the true
argmax of the world probability; the 1-p cost variant (which minimizes the
sum rather than the product criterion) is also provided since both appear in
practice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .core import (
    Assignment,
    CountConstraints,
    DataError,
    LabelVocab,
    Query,
    SceneRecord,
    satisfies,
)

NEGLOG_SATURATION = 1e9  # stands in for -log 0; forbids zero-probability slots
_TIE_TOLERANCE = 1e-12


class NonSquare(DataError):
    pass


class NonFinite(DataError):
    pass


class QueryNotExactMultiset(DataError):
    pass


class SlotCountMismatch(DataError):
    pass


class StrategyUnsupportedForQuery(DataError):
    pass


@dataclass(frozen=True)
class MatchResult:
    assignment: Assignment
    world_probability: float
    total_cost: float
    cost_variant: str


def _solve_lap(cost: Sequence[Sequence[float]]) -> list[int]:
    """Jonker-Volgenant shortest augmenting path; returns row -> column."""
    n = len(cost)
    INF = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)  # match[j] = row assigned to column j (1-based, 0 = free)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = INF
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = [0] * n
    for j in range(1, n + 1):
        if match[j]:
            perm[match[j] - 1] = j - 1
    return perm


def _total(cost: Sequence[Sequence[float]], perm: Sequence[int]) -> float:
    total = 0.0
    for i, j in enumerate(perm):
        total += cost[i][j]
    return total


def hungarian(cost: Sequence[Sequence[float]]) -> tuple[tuple[int, ...], float]:
    """Minimum-cost assignment on a square matrix.

    Returns (permutation, total cost) where permutation[i] is the column
    assigned to row i.  Among cost-optimal assignments the lexicographically
    smallest permutation is returned, so ties resolve deterministically.
    """
    n = len(cost)
    for row in cost:
        if len(row) != n:
            raise NonSquare(f"matrix is {n}x{len(row)}")
        for entry in row:
            if not math.isfinite(entry):
                raise NonFinite(f"non-finite cost entry {entry!r}")
    if n == 0:
        return (), 0.0
    best_perm = _solve_lap(cost)
    best_total = _total(cost, best_perm)
    tolerance = _TIE_TOLERANCE

    # Greedy lexicographic refinement: for each row, adopt the smallest column
    # that still completes to an optimal assignment.
    completion = list(best_perm)
    chosen: list[int] = []
    available = sorted(range(n))
    prefix_cost = 0.0
    for i in range(n):
        for j in available:
            if j == completion[i]:
                break
            rest_rows = range(i + 1, n)
            rest_cols = [c for c in available if c != j]
            sub = [[cost[r][c] for c in rest_cols] for r in rest_rows]
            sub_perm = _solve_lap(sub) if sub else []
            candidate = prefix_cost + cost[i][j] + _total(sub, sub_perm)
            if candidate <= best_total + tolerance:
                completion[i] = j
                for offset, r in enumerate(rest_rows):
                    completion[r] = rest_cols[sub_perm[offset]]
                break
        chosen.append(completion[i])
        prefix_cost += cost[i][completion[i]]
        available.remove(completion[i])
    return tuple(chosen), _total(cost, chosen)


def _exact_multiset_slots(query: Query, vocab: LabelVocab, n: int) -> list[int]:
    if not isinstance(query, CountConstraints):
        raise QueryNotExactMultiset(f"{type(query).__name__} is not an exact count query")
    slots: list[int] = []
    for name, interval in query.items:
        if not interval.is_exact:
            raise QueryNotExactMultiset(
                f"class {name!r} has interval [{interval.lo}, {interval.hi}), not an exact count"
            )
        slots.extend([vocab.index(name)] * interval.lo)
    if len(slots) != n:
        raise SlotCountMismatch(f"query fixes {len(slots)} labels for {n} objects")
    return slots


def most_probable_world(
    scene: SceneRecord,
    query: Query,
    vocab: LabelVocab,
    variant: str = "neglog",
) -> MatchResult:
    """Single best world for an exact-multiset query, by assignment matching."""
    if variant not in ("neglog", "one_minus_p"):
        raise DataError(f"unknown cost variant {variant!r}")
    n = scene.n_objects
    slots = _exact_multiset_slots(query, vocab, n)
    cost = []
    for belief in scene.beliefs:
        row = []
        for slot_class in slots:
            p = belief.probs[slot_class]
            if variant == "neglog":
                row.append(-math.log(p) if p > 0.0 else NEGLOG_SATURATION)
            else:
                row.append(1.0 - p)
        cost.append(row)
    perm, total = hungarian(cost)
    labels = tuple(slots[j] for j in perm)
    probability = 1.0
    for i, label in enumerate(labels):
        probability *= scene.beliefs[i].probs[label]
    return MatchResult(Assignment(labels), probability, total, variant)


def pseudo_labels(
    scene: SceneRecord,
    query: Query,
    vocab: LabelVocab,
    strategy: str = "argmax_compliance",
) -> Optional[tuple[int, ...]]:
    """Query-compliant labels for relabeling, or None when the scene is rejected.

    ``argmax_compliance`` keeps the per-object argmax labels only if they
    satisfy the query.  ``forced_matching`` (exact-multiset queries only)
    returns the most probable compliant world, which never rejects.
    """
    if strategy == "argmax_compliance":
        labels = tuple(
            max(range(len(b.probs)), key=lambda k: (b.probs[k], -k))
            for b in scene.beliefs
        )
        return labels if satisfies(query, labels, vocab) else None
    if strategy == "forced_matching":
        try:
            _exact_multiset_slots(query, vocab, scene.n_objects)
        except QueryNotExactMultiset as exc:
            raise StrategyUnsupportedForQuery(
                f"forced_matching needs an exact label multiset: {exc}"
            ) from None
        return most_probable_world(scene, query, vocab).assignment.labels
    raise DataError(f"unknown strategy {strategy!r}")
