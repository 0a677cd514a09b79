"""Exact query probability, its gradient, and the query NLL loss.

The probability of a query is the total probability of the worlds (joint
label assignments) that satisfy it.  Plans compiled by :mod:`queryprob.planner`
evaluate this with a forward DP over objects; the probability is multilinear
in each object's belief vector, so the gradient entry (i, j) equals the
probability of the query with object i clamped to class j.

All arithmetic is 64-bit floating point in the linear domain and accumulates
in a fixed order (object index, then state index), so results are
bit-reproducible across runs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import DataError, LabelVocab, SceneRecord
from .planner import InferencePlan, ResolvedQuery, TransitionGroup

LOG_FLOOR = 1e-12


class PlanSceneMismatch(DataError):
    pass


@dataclass(frozen=True)
class QueryProbability:
    value: float
    plan_kind: str
    filtered: bool = False


ProbRows = Sequence[Sequence[float]]


def _check_match(plan: InferencePlan, n: int, k: int):
    if n != plan.n:
        raise PlanSceneMismatch(f"plan built for {plan.n} objects, scene has {n}")
    if k != plan.num_classes:
        raise PlanSceneMismatch(
            f"plan built for {plan.num_classes} classes, beliefs have {k}"
        )


def _initial_state(plan: InferencePlan) -> tuple[int, ...]:
    size = len(plan.tracked) + (1 if plan.sum_cap is not None else 0)
    return (0,) * size


def _bump(
    plan: InferencePlan, state: tuple[int, ...], group: TransitionGroup
) -> Optional[tuple[int, ...]]:
    new = list(state)
    if group.slot is not None:
        counter = plan.tracked[group.slot]
        count = state[group.slot]
        if counter.saturating:
            new[group.slot] = min(count + 1, counter.cap)
        elif count + 1 > counter.cap:
            return None  # past the upper bound, unrecoverable
        else:
            new[group.slot] = count + 1
    if plan.sum_cap is not None:
        total = state[-1] + group.value
        if total > plan.sum_cap:
            return None
        new[-1] = total
    return tuple(new)


def _accepts_state(plan: InferencePlan, state: tuple[int, ...]) -> bool:
    for t, counter in enumerate(plan.tracked):
        if not counter.accepts(state[t]):
            return False
    if plan.sum_cap is not None and state[-1] != plan.sum_cap:
        return False
    return True


def _group_weights(plan: InferencePlan, row: Sequence[float]) -> list[float]:
    weights = []
    for group in plan.transitions:
        weight = 0.0
        for c in group.classes:
            weight += row[c]
        weights.append(weight)
    return weights


def _forward(plan: InferencePlan, probs: ProbRows) -> list[dict[tuple[int, ...], float]]:
    layers = [{_initial_state(plan): 1.0}]
    for i in range(plan.n):
        weights = _group_weights(plan, probs[i])
        nxt: dict[tuple[int, ...], float] = {}
        for state in sorted(layers[-1]):
            mass = layers[-1][state]
            for group, weight in zip(plan.transitions, weights):
                target = _bump(plan, state, group)
                if target is None:
                    continue
                nxt[target] = nxt.get(target, 0.0) + mass * weight
        layers.append(nxt)
    return layers


def _accepted_mass(plan: InferencePlan, layer: dict[tuple[int, ...], float]) -> float:
    total = 0.0
    for state in sorted(layer):
        if _accepts_state(plan, state):
            total += layer[state]
    return total


def _accepts_labels(
    resolved: ResolvedQuery, labels: tuple[int, ...], values: tuple[int, ...]
) -> bool:
    if resolved.impossible:
        return False
    for idx, interval in resolved.intervals:
        if not interval.contains(sum(1 for l in labels if l == idx)):
            return False
    if resolved.permitted is not None:
        if any(l not in resolved.permitted for l in labels):
            return False
    if resolved.sum_target is not None:
        if sum(values[l] for l in labels) != resolved.sum_target:
            return False
    return True


def _enumerate_probability(plan: InferencePlan, probs: ProbRows) -> float:
    total = 0.0
    for labels in itertools.product(range(plan.num_classes), repeat=plan.n):
        if not _accepts_labels(plan.resolved, labels, plan.values):
            continue
        product = 1.0
        for i, label in enumerate(labels):
            product *= probs[i][label]
        total += product
    return total


def evaluate_probs(plan: InferencePlan, probs: ProbRows) -> float:
    """Probability of the plan's query given one probability row per object."""
    _check_match(plan, len(probs), len(probs[0]) if len(probs) else plan.num_classes)
    if plan.resolved.impossible:
        return 0.0
    if plan.kind == "enumeration":
        return _enumerate_probability(plan, probs)
    return _accepted_mass(plan, _forward(plan, probs)[-1])


def evaluate(plan: InferencePlan, scene: SceneRecord, filtered: bool = False) -> QueryProbability:
    value = evaluate_probs(plan, [b.probs for b in scene.beliefs])
    return QueryProbability(value, plan.kind, filtered)


# ---------------------------------------------------------------------------
# Gradients


def _gradient_clamp(plan: InferencePlan, probs: ProbRows) -> np.ndarray:
    n, k = plan.n, plan.num_classes
    grad = np.zeros((n, k))
    rows = [list(row) for row in probs]
    for i in range(n):
        saved = rows[i]
        for j in range(k):
            rows[i] = [0.0] * k
            rows[i][j] = 1.0
            grad[i, j] = evaluate_probs(plan, rows)
        rows[i] = saved
    return grad


def _gradient_reverse_dp(plan: InferencePlan, probs: ProbRows) -> np.ndarray:
    n, k = plan.n, plan.num_classes
    forward = _forward(plan, probs)
    backward: list[dict[tuple[int, ...], float]] = [dict() for _ in range(n + 1)]
    backward[n] = {
        state: 1.0 if _accepts_state(plan, state) else 0.0 for state in forward[n]
    }
    for i in range(n - 1, -1, -1):
        weights = _group_weights(plan, probs[i])
        layer: dict[tuple[int, ...], float] = {}
        for state in sorted(forward[i]):
            total = 0.0
            for group, weight in zip(plan.transitions, weights):
                target = _bump(plan, state, group)
                if target is None:
                    continue
                total += weight * backward[i + 1].get(target, 0.0)
            layer[state] = total
        backward[i] = layer
    grad = np.zeros((n, k))
    for i in range(n):
        for group in plan.transitions:
            value = 0.0
            for state in sorted(forward[i]):
                target = _bump(plan, state, group)
                if target is None:
                    continue
                value += forward[i][state] * backward[i + 1].get(target, 0.0)
            for c in group.classes:
                grad[i, c] = value
    return grad


def _gradient_reverse_enum(plan: InferencePlan, probs: ProbRows) -> np.ndarray:
    n, k = plan.n, plan.num_classes
    grad = np.zeros((n, k))
    for labels in itertools.product(range(k), repeat=n):
        if not _accepts_labels(plan.resolved, labels, plan.values):
            continue
        prefix = [1.0] * (n + 1)
        for i, label in enumerate(labels):
            prefix[i + 1] = prefix[i] * probs[i][label]
        suffix = [1.0] * (n + 1)
        for i in range(n - 1, -1, -1):
            suffix[i] = suffix[i + 1] * probs[i][labels[i]]
        for i, label in enumerate(labels):
            grad[i, label] += prefix[i] * suffix[i + 1]
    return grad


def gradient_probs(
    plan: InferencePlan, probs: ProbRows, method: str = "reverse"
) -> np.ndarray:
    """n x K matrix of dP/dp_ij.

    ``clamp`` re-evaluates with object i forced to class j (P is multilinear,
    so the partial derivative is exactly that conditional probability);
    ``reverse`` computes every entry from one forward and one backward sweep.
    """
    _check_match(plan, len(probs), len(probs[0]) if len(probs) else plan.num_classes)
    if plan.resolved.impossible:
        return np.zeros((plan.n, plan.num_classes))
    if method == "clamp":
        return _gradient_clamp(plan, probs)
    if method == "reverse":
        if plan.kind == "enumeration":
            return _gradient_reverse_enum(plan, probs)
        return _gradient_reverse_dp(plan, probs)
    raise DataError(f"unknown gradient method {method!r}")


def gradient(plan: InferencePlan, scene: SceneRecord, method: str = "reverse") -> np.ndarray:
    return gradient_probs(plan, [b.probs for b in scene.beliefs], method)


# ---------------------------------------------------------------------------
# Sum distribution and batch loss


def sum_distribution(scene: SceneRecord, vocab: LabelVocab) -> np.ndarray:
    """Distribution of the value-weighted label sum, by sequential convolution.

    Entry s of the result is P(sum = s); the array covers 0 .. max achievable
    sum and totals 1.
    """
    return sum_distribution_probs([b.probs for b in scene.beliefs], vocab)


def sum_distribution_probs(probs: ProbRows, vocab: LabelVocab) -> np.ndarray:
    max_value = max(vocab.values) if vocab.values else 0
    dist = np.array([1.0])
    for row in probs:
        step = np.zeros(max_value + 1)
        for k, p in enumerate(row):
            step[vocab.values[k]] += p
        dist = np.convolve(dist, step)
    return dist


@dataclass(frozen=True)
class NllResult:
    loss: float
    gradients: tuple[np.ndarray, ...]
    probabilities: tuple[float, ...]
    zero_probability: tuple[bool, ...]  # scenes floored at the log clamp


def nll_loss(
    batch: Sequence[tuple[InferencePlan, SceneRecord]], method: str = "reverse"
) -> NllResult:
    """Negative log-likelihood of a batch of (plan, scene) pairs.

    Scenes with zero query probability contribute -log(LOG_FLOOR) and a zero
    gradient matrix; they are flagged so callers can diagnose them.
    Accumulation follows scene order for determinism.
    """
    loss = 0.0
    gradients = []
    probabilities = []
    flags = []
    for plan, scene in batch:
        probs = [b.probs for b in scene.beliefs]
        value = evaluate_probs(plan, probs)
        probabilities.append(value)
        if value <= 0.0:
            loss += -math.log(LOG_FLOOR)
            gradients.append(np.zeros((plan.n, plan.num_classes)))
            flags.append(True)
            continue
        clamped = max(value, LOG_FLOOR)
        loss += -math.log(clamped)
        gradients.append(-gradient_probs(plan, probs, method) / clamped)
        flags.append(False)
    return NllResult(loss, tuple(gradients), tuple(probabilities), tuple(flags))
