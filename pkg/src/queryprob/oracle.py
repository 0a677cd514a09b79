"""Brute-force reference implementations used to certify the engine.

Everything here enumerates the full K^n world space directly from the query
AST, independently of the planner/engine DP path, so the two can be checked
against each other.
"""

from __future__ import annotations

import numpy as np

from .core import (
    And,
    BudgetError,
    CountConstraints,
    DataError,
    InputError,
    LabelVocab,
    Presence,
    Query,
    SceneRecord,
    Sum,
)

DEFAULT_WORLD_LIMIT = 2 * 10**6


class TooManyWorlds(BudgetError):
    pass


class NoCompatibleWorld(DataError):
    pass


class StepOutOfRange(InputError):
    pass


def _world_table(n: int, k: int) -> np.ndarray:
    """All K^n assignments, one per row, in lexicographic (mixed-radix) order."""
    if n == 0:
        return np.zeros((1, 0), dtype=np.int64)
    grids = np.meshgrid(*([np.arange(k)] * n), indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


def _world_products(probs: np.ndarray, worlds: np.ndarray) -> np.ndarray:
    if worlds.shape[1] == 0:
        return np.ones(worlds.shape[0])
    picked = probs[np.arange(worlds.shape[1])[None, :], worlds]
    return picked.prod(axis=1)


def _satisfied(query: Query, worlds: np.ndarray, vocab: LabelVocab) -> np.ndarray:
    if isinstance(query, CountConstraints):
        mask = np.ones(worlds.shape[0], dtype=bool)
        for name, interval in query.items:
            counts = (worlds == vocab.index(name)).sum(axis=1)
            mask &= counts >= interval.lo
            if interval.hi is not None:
                mask &= counts < interval.hi
        if query.mode == "closed":
            allowed = {vocab.index(name) for name, _ in query.items}
            allowed |= set(vocab.ignored_indices)
            if worlds.shape[1]:
                mask &= np.isin(worlds, sorted(allowed)).all(axis=1)
        return mask
    if isinstance(query, Presence):
        mask = np.ones(worlds.shape[0], dtype=bool)
        for name in query.classes:
            mask &= (worlds == vocab.index(name)).any(axis=1)
        return mask
    if isinstance(query, Sum):
        values = np.asarray(vocab.values)
        if worlds.shape[1] == 0:
            sums = np.zeros(worlds.shape[0], dtype=np.int64)
        else:
            sums = values[worlds].sum(axis=1)
        return sums == query.target
    if isinstance(query, And):
        mask = np.ones(worlds.shape[0], dtype=bool)
        for part in query.parts:
            mask &= _satisfied(part, worlds, vocab)
        return mask
    raise InputError(f"not a query: {query!r}")


def _check_budget(n: int, k: int, limit: int) -> int:
    worlds = k**n
    if worlds > limit:
        raise TooManyWorlds(f"{k}^{n} = {worlds} worlds exceed the limit {limit}")
    return worlds


def _belief_matrix(scene: SceneRecord) -> np.ndarray:
    return np.array([b.probs for b in scene.beliefs], dtype=np.float64)


def enumerate_probability(
    scene: SceneRecord,
    query: Query,
    vocab: LabelVocab,
    limit: int = DEFAULT_WORLD_LIMIT,
) -> float:
    """Sum of world probabilities over all assignments satisfying the query."""
    n = scene.n_objects
    _check_budget(n, vocab.size, limit)
    worlds = _world_table(n, vocab.size)
    products = _world_products(_belief_matrix(scene), worlds)
    mask = _satisfied(query, worlds, vocab)
    return float(products[mask].sum())


def enumerate_best_world(
    scene: SceneRecord,
    query: Query,
    vocab: LabelVocab,
    limit: int = DEFAULT_WORLD_LIMIT,
) -> tuple[tuple[int, ...], float]:
    """Most probable satisfying assignment; lexicographically first among ties."""
    n = scene.n_objects
    _check_budget(n, vocab.size, limit)
    worlds = _world_table(n, vocab.size)
    mask = _satisfied(query, worlds, vocab)
    if not mask.any():
        raise NoCompatibleWorld("no assignment satisfies the query")
    products = _world_products(_belief_matrix(scene), worlds)
    candidates = np.flatnonzero(mask)
    best = candidates[np.argmax(products[candidates])]  # argmax keeps first tie
    return tuple(int(v) for v in worlds[best]), float(products[best])


def sum_distribution_enum(scene: SceneRecord, vocab: LabelVocab,
                          limit: int = DEFAULT_WORLD_LIMIT) -> np.ndarray:
    """Sum distribution by direct world enumeration (convolution reference)."""
    n = scene.n_objects
    _check_budget(n, vocab.size, limit)
    worlds = _world_table(n, vocab.size)
    products = _world_products(_belief_matrix(scene), worlds)
    values = np.asarray(vocab.values)
    max_value = int(values.max()) if vocab.values else 0
    if n == 0:
        sums = np.zeros(1, dtype=np.int64)
    else:
        sums = values[worlds].sum(axis=1)
    return np.bincount(sums, weights=products, minlength=n * max_value + 1)


def finite_diff_gradient(
    scene: SceneRecord,
    query: Query,
    vocab: LabelVocab,
    h: float = 1e-6,
    limit: int = DEFAULT_WORLD_LIMIT,
) -> np.ndarray:
    """Central differences of P on each raw belief coordinate.

    No renormalization is applied to the perturbed coordinate: P is
    multilinear in the beliefs, so the raw partial derivative is the quantity
    the engine's gradient reports.
    """
    if not (1e-8 <= h <= 1e-3):
        raise StepOutOfRange(f"step must be in [1e-8, 1e-3], got {h}")
    n = scene.n_objects
    _check_budget(n, vocab.size, limit)
    worlds = _world_table(n, vocab.size)
    mask = _satisfied(query, worlds, vocab)
    probs = _belief_matrix(scene)
    grad = np.zeros((n, vocab.size))
    for i in range(n):
        for j in range(vocab.size):
            saved = probs[i, j]
            probs[i, j] = saved + h
            upper = float(_world_products(probs, worlds)[mask].sum())
            probs[i, j] = saved - h
            lower = float(_world_products(probs, worlds)[mask].sum())
            probs[i, j] = saved
            grad[i, j] = (upper - lower) / (2.0 * h)
    return grad
