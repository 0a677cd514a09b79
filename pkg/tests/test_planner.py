import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from generators import random_instance
from queryprob import (
    And,
    CategoricalBelief,
    CountConstraints,
    Interval,
    LabelVocab,
    SceneRecord,
    Sum,
    compile,
    filter_scene,
    plan_cost,
    validate_scene,
)
from queryprob import oracle
from queryprob.planner import (
    InvalidDelta,
    QueryTooComplex,
    QueryUnsatisfiableAfterClamp,
)

AB = LabelVocab(("A", "B"))
DIGITS = LabelVocab(tuple(str(d) for d in range(10)))


def scene(vocab, beliefs):
    return validate_scene(
        SceneRecord(id="s", beliefs=tuple(CategoricalBelief(tuple(r)) for r in beliefs)),
        vocab,
    )


def counts(vocab, mode="open", **per_class):
    items = tuple((name, Interval(c, c + 1)) for name, c in per_class.items())
    return CountConstraints(items, mode)


class TestCompile:
    def test_exact_pair_counts(self):
        plan = compile(counts(AB, A=1, B=1), AB, n=2)
        assert plan.kind == "count_dp"
        assert tuple(c.cap for c in plan.tracked) == (1, 1)
        assert plan.state_count == 4

    def test_sum_plan(self):
        plan = compile(Sum(8), DIGITS, n=2)
        assert plan.kind == "sum_dp"
        assert plan.sum_cap == 8
        assert plan.state_count == 9

    def test_product_plan(self):
        query = And((counts(DIGITS, **{"0": 2}), Sum(5)))
        plan = compile(query, DIGITS, n=3)
        assert plan.kind == "product_dp"
        assert plan.state_count == (2 + 1) * (5 + 1)

    def test_saturating_and_finite_caps(self):
        query = CountConstraints(
            (
                ("A", Interval(4, 5)),
                ("B", Interval(4, None)),
            ),
            "open",
        )
        plan = compile(query, AB, n=9)
        assert tuple(c.cap for c in plan.tracked) == (4, 4)
        assert plan.tracked[0].saturating is False
        assert plan.tracked[1].saturating is True

    def test_plan_cost_examples(self):
        vocab = LabelVocab(("A", "B", "C"))
        plan = compile(
            CountConstraints(
                (("A", Interval(4, 5)), ("B", Interval(4, 5)), ("C", Interval(3, 4))),
                "open",
            ),
            vocab,
            n=11,
        )
        assert plan_cost(plan) == 100  # 5 * 5 * 4
        assert plan_cost(compile(Sum(12), DIGITS, n=3)) == 13

    def test_enumeration_fallback(self):
        vocab = LabelVocab(tuple(f"c{i}" for i in range(5)))
        query = CountConstraints(
            tuple((f"c{i}", Interval(0, 200)) for i in range(5)), "open"
        )
        plan = compile(query, vocab, n=6, limit_states=10)
        assert plan.kind == "enumeration"
        assert plan.state_count == 5**6 == 15625

    def test_query_too_complex(self):
        vocab = LabelVocab(tuple(f"c{i}" for i in range(5)))
        query = CountConstraints(
            tuple((f"c{i}", Interval(0, 200)) for i in range(5)), "open"
        )
        with pytest.raises(QueryTooComplex):
            compile(query, vocab, n=6, limit_states=10, limit_worlds=10)


class TestFilterScene:
    def test_clamps_confident_consistent_object(self):
        s = scene(AB, [[0.99, 0.01], [0.6, 0.4]])
        query = counts(AB, A=1, B=1)
        result = filter_scene(s, query, AB, 0.95)
        assert result.clamped == ((0, 0),)
        assert result.residual_scene.n_objects == 1
        assert result.residual_query == CountConstraints(
            (("A", Interval(0, 1)), ("B", Interval(1, 2))), "open"
        )

    def test_delta_one_is_identity_without_onehots(self):
        s = scene(AB, [[0.99, 0.01], [0.6, 0.4]])
        query = counts(AB, A=1, B=1)
        result = filter_scene(s, query, AB, 1.0)
        assert result.clamped == ()
        assert result.residual_scene is s
        assert result.residual_query is query

    def test_inconsistent_confident_object_is_skipped(self):
        s = scene(AB, [[0.99, 0.01]])
        query = counts(AB, mode="closed", B=1)
        result = filter_scene(s, query, AB, 0.95)
        assert result.clamped == ()
        assert result.skipped == (0,)
        assert result.residual_scene.n_objects == 1

    def test_exhausted_budget_marks_skipped(self):
        s = scene(AB, [[0.99, 0.01], [0.98, 0.02]])
        query = counts(AB, A=1)
        result = filter_scene(s, query, AB, 0.95)
        assert result.clamped == ((0, 0),)
        assert result.skipped == (1,)

    def test_sum_budget_decremented(self):
        s = scene(DIGITS, [[0.0] * 7 + [1.0, 0.0, 0.0], [0.1] * 10])
        result = filter_scene(s, Sum(9), DIGITS, 0.99)
        assert result.clamped == ((0, 7),)
        assert result.residual_query == Sum(2)

    def test_sum_overdraw_is_skipped(self):
        s = scene(DIGITS, [[0.0] * 7 + [1.0, 0.0, 0.0]])
        result = filter_scene(s, Sum(3), DIGITS, 0.99)
        assert result.clamped == ()
        assert result.skipped == (0,)

    def test_invalid_delta(self):
        s = scene(AB, [[0.5, 0.5]])
        for delta in (0.5, 0.0, 1.5, -1.0):
            with pytest.raises(InvalidDelta):
                filter_scene(s, counts(AB, A=1), AB, delta)

    def test_unsatisfiable_after_clamp_is_explicit(self):
        s = scene(AB, [[0.99, 0.01], [0.99, 0.01]])
        query = counts(AB, B=2)  # open mode: clamping A objects is consistent
        with pytest.raises(QueryUnsatisfiableAfterClamp):
            filter_scene(s, query, AB, 0.95)

    def test_presence_constraint_dropped_once_satisfied(self):
        from queryprob import Presence

        s = scene(AB, [[0.99, 0.01], [0.4, 0.6]])
        result = filter_scene(s, Presence(("A",)), AB, 0.95)
        assert result.clamped == ((0, 0),)
        assert result.residual_query == Presence(())


@settings(max_examples=120, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1), st.sampled_from((0.8, 0.95, 1.0)))
def test_filtering_never_enlarges_the_plan(seed, delta):
    rng = np.random.default_rng(seed)
    vocab, s, query = random_instance(rng)
    original = compile(query, vocab, s.n_objects)
    try:
        result = filter_scene(s, query, vocab, delta)
    except QueryUnsatisfiableAfterClamp:
        return
    residual = compile(result.residual_query, vocab, result.residual_scene.n_objects)
    assert residual.state_count <= original.state_count


@settings(max_examples=120, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_onehot_clamping_preserves_probability(seed):
    rng = np.random.default_rng(seed)
    vocab, s, query = random_instance(rng)
    if s.n_objects == 0:
        return
    # make one object exactly one-hot on a class consistent with clamping
    beliefs = list(s.beliefs)
    onehot = [0.0] * vocab.size
    onehot[int(rng.integers(vocab.size))] = 1.0
    beliefs[0] = CategoricalBelief(tuple(onehot))
    s = validate_scene(SceneRecord(id="t", beliefs=tuple(beliefs)), vocab)
    before = oracle.enumerate_probability(s, query, vocab)
    try:
        result = filter_scene(s, query, vocab, 1.0)
    except QueryUnsatisfiableAfterClamp:
        assert before == pytest.approx(0.0, abs=1e-12)
        return
    if not result.clamped:
        return
    after = oracle.enumerate_probability(result.residual_scene, result.residual_query, vocab)
    assert after == pytest.approx(before, abs=1e-12)
