import math

import pytest
from hypothesis import given, strategies as st

from queryprob import (
    CategoricalBelief,
    CountConstraints,
    Interval,
    LabelVocab,
    Presence,
    SceneRecord,
    Sum,
    indicator_to_interval,
    satisfies,
    validate_scene,
)
from queryprob.core import (
    BeliefNotNormalized,
    InputError,
    InvalidIndicator,
    LengthMismatch,
    NegativeProbability,
    UnknownClass,
)

AB = LabelVocab(("A", "B"))


def scene(beliefs, **kwargs):
    return SceneRecord(
        id="s", beliefs=tuple(CategoricalBelief(tuple(row)) for row in beliefs), **kwargs
    )


class TestValidateScene:
    def test_renormalizes_within_tolerance(self):
        out = validate_scene(scene([[0.5, 0.5000004]]), AB)
        probs = out.beliefs[0].probs
        assert probs[0] == pytest.approx(0.4999998, abs=1e-9)
        assert probs[1] == pytest.approx(0.5000002, abs=1e-9)
        assert math.fsum(probs) == 1.0

    def test_rejects_sum_outside_tolerance(self):
        with pytest.raises(BeliefNotNormalized):
            validate_scene(scene([[0.5, 0.6]]), AB)

    def test_rejects_negative_probability(self):
        with pytest.raises(NegativeProbability):
            validate_scene(scene([[1.1, -0.1]]), AB)

    def test_rejects_gold_label_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            validate_scene(scene([[1.0, 0.0]], gold_labels=("A", "B")), AB)

    def test_rejects_unknown_gold_label(self):
        with pytest.raises(UnknownClass):
            validate_scene(scene([[1.0, 0.0]], gold_labels=("Z",)), AB)

    def test_rejects_wrong_belief_width(self):
        with pytest.raises(LengthMismatch):
            validate_scene(scene([[1.0, 0.0, 0.0]]), AB)

    def test_rejects_feature_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            validate_scene(scene([[1.0, 0.0]], features=((0.0,), (1.0,))), AB)

    def test_empty_scene_is_valid(self):
        assert validate_scene(scene([]), AB).n_objects == 0

    @given(
        st.lists(
            st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=2, max_size=2),
            min_size=1,
            max_size=4,
        )
    )
    def test_idempotent_bit_for_bit(self, raw):
        rows = []
        for row in raw:
            total = math.fsum(row)
            rows.append([v / total for v in row])
        once = validate_scene(scene(rows), AB)
        twice = validate_scene(once, AB)
        assert once.beliefs == twice.beliefs
        for belief in once.beliefs:
            assert math.fsum(belief.probs) == 1.0


class TestVocab:
    def test_duplicate_classes_rejected(self):
        with pytest.raises(UnknownClass):
            LabelVocab(("A", "A"))

    def test_ignored_must_be_subset(self):
        with pytest.raises(UnknownClass):
            LabelVocab(("A",), ignored=frozenset({"B"}))

    def test_default_values_are_indices_with_ignored_zeroed(self):
        vocab = LabelVocab(("bg", "x", "y"), ignored=frozenset({"bg"}))
        assert vocab.values == (0, 1, 2)
        vocab2 = LabelVocab(("x", "bg", "y"), ignored=frozenset({"bg"}))
        assert vocab2.values == (0, 0, 2)

    def test_values_length_checked(self):
        with pytest.raises(LengthMismatch):
            LabelVocab(("A", "B"), values=(1,))


class TestIndicatorToInterval:
    def test_exact(self):
        assert indicator_to_interval(4, 0) == Interval(4, 5)

    def test_strictly_more(self):
        assert indicator_to_interval(4, 1) == Interval(5, None)

    def test_strictly_fewer(self):
        assert indicator_to_interval(3, -1) == Interval(0, 3)

    def test_below_zero_impossible(self):
        with pytest.raises(InvalidIndicator):
            indicator_to_interval(0, -1)

    def test_bad_indicator(self):
        with pytest.raises(InvalidIndicator):
            indicator_to_interval(2, 2)

    def test_negative_count(self):
        with pytest.raises(InvalidIndicator):
            indicator_to_interval(-1, 0)

    @given(st.integers(min_value=0, max_value=50), st.sampled_from((-1, 0, 1)))
    def test_total_on_valid_domain(self, count, indicator):
        if count == 0 and indicator == -1:
            return
        interval = indicator_to_interval(count, indicator)
        assert interval.hi is None or interval.lo < interval.hi


class TestSatisfies:
    def test_open_ignores_unlisted(self):
        q = CountConstraints((("A", Interval(1, 2)),), "open")
        assert satisfies(q, (0, 1), AB)
        assert not satisfies(q, (0, 0), AB)

    def test_closed_forbids_unlisted(self):
        q = CountConstraints((("A", Interval(1, 2)),), "closed")
        assert not satisfies(q, (0, 1), AB)
        assert satisfies(q, (0,), AB)

    def test_closed_allows_ignored(self):
        vocab = LabelVocab(("A", "B", "bg"), ignored=frozenset({"bg"}))
        q = CountConstraints((("A", Interval(1, 2)),), "closed")
        assert satisfies(q, (0, 2), vocab)

    def test_presence_and_sum(self):
        vocab = LabelVocab(("0", "1", "2"))
        assert satisfies(Presence(("2",)), (0, 2), vocab)
        assert not satisfies(Presence(("2",)), (0, 1), vocab)
        assert satisfies(Sum(3), (1, 2), vocab)
        assert not satisfies(Sum(4), (1, 2), vocab)

    def test_empty_world(self):
        assert satisfies(Sum(0), (), AB)
        assert satisfies(CountConstraints((), "open"), (), AB)
        assert not satisfies(Presence(("A",)), (), AB)


class TestQueryInvariants:
    def test_interval_must_be_nonempty(self):
        with pytest.raises(InputError):
            Interval(3, 3)

    def test_duplicate_constraint_classes_rejected(self):
        with pytest.raises(InputError):
            CountConstraints((("A", Interval(0, 1)), ("A", Interval(1, 2))), "open")

    def test_negative_sum_target_rejected(self):
        with pytest.raises(InputError):
            Sum(-1)
