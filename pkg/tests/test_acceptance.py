"""Acceptance suite: one test per criterion, fixed seeds, pinned tolerances.

Each test prints a PASS line with its measured headline numbers (visible with
``pytest -s`` or on failure).  The binding-parity criterion for the optional
frontend package lives in frontend/src/*.test.ts and runs via ``npm test``;
everything here runs without the frontend built.
"""

import dataclasses
import time

import numpy as np
import pytest

from generators import random_instance, random_multiset_instance, random_vocab
from queryprob import (
    And,
    CategoricalBelief,
    CountConstraints,
    Interval,
    LabelVocab,
    Presence,
    SceneRecord,
    Sum,
    compile,
    evaluate,
    filter_scene,
    gradient,
    most_probable_world,
    parse,
    print_query,
    sum_distribution,
    validate_scene,
)
from queryprob import oracle, pipeline
from queryprob.engine import evaluate_probs
from queryprob.planner import QueryUnsatisfiableAfterClamp


def test_criterion_1_oracle_equivalence():
    rng = np.random.default_rng(10_001)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        vocab, scene, query = random_instance(rng, max_n=6)
        plan = compile(query, vocab, scene.n_objects)
        value = evaluate(plan, scene).value
        expected = oracle.enumerate_probability(scene, query, vocab)
        worst = max(worst, abs(value - expected))
        assert abs(value - expected) <= 1e-9
    elapsed = time.perf_counter() - start
    assert elapsed <= 30.0
    print(f"PASS criterion 1: 1000 instances, max |engine - oracle| = {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_gradient_suite():
    rng = np.random.default_rng(10_002)
    worst_methods = worst_findiff = worst_lemma = 0.0
    checked = 0
    while checked < 300:
        vocab, scene, query = random_instance(rng, max_n=5)
        if scene.n_objects == 0:
            continue
        checked += 1
        plan = compile(query, vocab, scene.n_objects)
        g_clamp = gradient(plan, scene, "clamp")
        g_reverse = gradient(plan, scene, "reverse")
        worst_methods = max(worst_methods, float(np.abs(g_clamp - g_reverse).max()))
        assert np.abs(g_clamp - g_reverse).max() <= 1e-9

        g_fd = oracle.finite_diff_gradient(scene, query, vocab, h=1e-6)
        mask = np.abs(g_clamp) > 1e-8
        if mask.any():
            rel = np.abs(g_fd[mask] - g_clamp[mask]) / np.abs(g_clamp[mask])
            worst_findiff = max(worst_findiff, float(rel.max()))
            assert rel.max() <= 1e-4

        rows = [list(b.probs) for b in scene.beliefs]
        for i in range(scene.n_objects):
            saved = rows[i]
            for j in range(vocab.size):
                rows[i] = [1.0 if c == j else 0.0 for c in range(vocab.size)]
                clamped_value = evaluate_probs(plan, rows)
                worst_lemma = max(worst_lemma, abs(clamped_value - g_reverse[i, j]))
                assert abs(clamped_value - g_reverse[i, j]) <= 1e-12
            rows[i] = saved
    print(
        "PASS criterion 2: 300 instances, clamp-vs-reverse "
        f"{worst_methods:.2e}, findiff rel {worst_findiff:.2e}, identity {worst_lemma:.2e}"
    )


def test_criterion_3_hungarian_correctness():
    rng = np.random.default_rng(10_003)
    worst = 0.0
    for _ in range(500):
        vocab, scene, query = random_multiset_instance(rng, max_n=7)
        result = most_probable_world(scene, query, vocab, variant="neglog")
        _, best = oracle.enumerate_best_world(scene, query, vocab)
        worst = max(worst, abs(result.world_probability - best))
        assert abs(result.world_probability - best) <= 1e-12
        plan = compile(query, vocab, scene.n_objects)
        total = evaluate(plan, scene).value
        assert result.world_probability <= total * (1 + 1e-12) + 1e-15
    print(f"PASS criterion 3: 500 multiset instances, max |matcher - oracle| = {worst:.2e}")


def test_criterion_4_sum_convolution():
    digits = LabelVocab(tuple(str(d) for d in range(10)))
    uniform = SceneRecord(
        id="u", beliefs=tuple(CategoricalBelief((0.1,) * 10) for _ in range(2))
    )
    uniform = validate_scene(uniform, digits)
    dist = sum_distribution(uniform, digits)
    assert abs(dist[8] - 0.09) <= 1e-12  # 9 of the 100 digit pairs sum to 8

    rng = np.random.default_rng(10_004)
    worst = 0.0
    for _ in range(200):
        vocab, scene, _ = random_instance(rng, max_n=5)
        dist = sum_distribution(scene, vocab)
        reference = oracle.sum_distribution_enum(scene, vocab)
        worst = max(worst, float(np.abs(dist - reference).max()))
        assert np.abs(dist - reference).max() <= 1e-12
    print(f"PASS criterion 4: P(sum=8) = 0.09 exact, convolution vs enumeration {worst:.2e}")


def test_criterion_5_normalization():
    from itertools import product as iproduct

    rng = np.random.default_rng(10_005)
    for _ in range(200):
        vocab, scene, _ = random_instance(rng, max_n=6)
        assert abs(sum_distribution(scene, vocab).sum() - 1.0) <= 1e-9

    worst = 0.0
    for trial in range(20):
        k = int(rng.integers(2, 5))
        n = int(rng.integers(0, 6))
        vocab = LabelVocab(tuple(f"c{i}" for i in range(k)))
        scene = validate_scene(
            SceneRecord(
                id=f"p{trial}",
                beliefs=tuple(
                    CategoricalBelief(tuple(rng.dirichlet(np.ones(k)))) for _ in range(n)
                ),
            ),
            vocab,
        )
        total = 0.0
        for combo in iproduct(range(n + 1), repeat=k):
            if sum(combo) != n:
                continue
            query = CountConstraints(
                tuple((vocab.classes[i], Interval(c, c + 1)) for i, c in enumerate(combo)),
                "closed",
            )
            total += evaluate(compile(query, vocab, n), scene).value
        worst = max(worst, abs(total - 1.0))
        assert abs(total - 1.0) <= 1e-9
    print(f"PASS criterion 5: sum distributions and closed partitions normalize, worst {worst:.2e}")


def test_criterion_6_filtering():
    rng = np.random.default_rng(10_006)
    checked_identity = checked_preserved = 0
    for _ in range(400):
        vocab, scene, query = random_instance(rng, max_n=6)

        # delta = 1 with no exactly-one-hot beliefs: bitwise identity
        if all(max(b.probs) < 1.0 for b in scene.beliefs):
            result = filter_scene(scene, query, vocab, 1.0)
            assert result.residual_scene is scene
            assert result.residual_query is query
            assert result.clamped == ()
            checked_identity += 1

        # exactly-one-hot clamps preserve the probability
        if scene.n_objects:
            beliefs = list(scene.beliefs)
            hot = [0.0] * vocab.size
            hot[int(rng.integers(vocab.size))] = 1.0
            beliefs[0] = CategoricalBelief(tuple(hot))
            hot_scene = validate_scene(
                SceneRecord(id="h", beliefs=tuple(beliefs)), vocab
            )
            before = oracle.enumerate_probability(hot_scene, query, vocab)
            try:
                result = filter_scene(hot_scene, query, vocab, 1.0)
            except QueryUnsatisfiableAfterClamp:
                assert before <= 1e-12
                continue
            after = oracle.enumerate_probability(
                result.residual_scene, result.residual_query, vocab
            )
            assert abs(after - before) <= 1e-12
            if result.clamped:
                checked_preserved += 1

            # filtering never enlarges the DP
            original = compile(query, vocab, hot_scene.n_objects)
            residual = compile(
                result.residual_query, vocab, result.residual_scene.n_objects
            )
            assert residual.state_count <= original.state_count
    assert checked_identity >= 100 and checked_preserved >= 100
    print(
        f"PASS criterion 6: {checked_identity} identity checks, "
        f"{checked_preserved} probability-preserving clamps, plans never grew"
    )


ACCEPTANCE_SYNTH = pipeline.SynthConfig(
    feature_dim=16,
    num_classes=10,
    source_classes=tuple(range(7)),
    noise_sigma=0.3,
    n_source=1000,
    n_target=1000,  # 700 train / 300 validation
    n_ood=1000,
    n_test=1000,
    seed=2024,
    folds=5,
    val_fraction=0.3,
    objects_per_scene=pipeline.ObjectsPerScene(source=(3, 3), target=(3, 3), ood=(4, 4)),
)


def _new_class_iteration0_accuracy(config) -> float:
    values = []
    for fold in range(config.folds):
        data = pipeline.generate_dataset(config, np.random.default_rng([config.seed, fold]))
        head = pipeline.pretrain(
            pipeline.new_head(config), data.source_train, 30, 0.05, 16,
            seed=config.seed * 1009 + fold,
        )
        new_classes = set(range(config.num_classes)) - set(config.source_classes)
        scenes = [s for s in data.target_test if any(l in new_classes for l in s.labels)]
        predictions = pipeline.predict_labels(head, scenes)
        gold = [s.labels for s in scenes]
        values.append(pipeline.count_accuracy(predictions, gold, data.vocab))
    return float(np.mean(values))


def test_criterion_7_knowledge_transfer_counts():
    config = dataclasses.replace(ACCEPTANCE_SYNTH, query_kind="counts")
    start = time.perf_counter()
    result = pipeline.run_iterations(config, pipeline.TrainConfig(rounds=3))
    elapsed = time.perf_counter() - start
    assert elapsed <= 300.0

    new_class_acc = _new_class_iteration0_accuracy(config)
    assert new_class_acc <= 0.05

    iter0 = float(np.mean([f.reports[0].target_count_accuracy for f in result.folds]))
    iter1 = float(np.mean([f.reports[1].target_count_accuracy for f in result.folds]))
    best_target = float(
        np.mean([result.best_report(f.fold).target_count_accuracy for f in result.folds])
    )
    best_ood = float(
        np.mean([result.best_report(f.fold).ood_count_accuracy for f in result.folds])
    )
    assert best_target >= 0.85
    assert best_ood >= 0.75
    assert best_target > iter1 >= iter0
    print(
        f"PASS criterion 7 (counts): new-class iter0 {new_class_acc:.3f}, "
        f"iter0 {iter0:.3f} <= iter1 {iter1:.3f} < best {best_target:.3f}, "
        f"ood {best_ood:.3f}, {elapsed:.0f}s"
    )


def test_criterion_7_knowledge_transfer_sum():
    config = dataclasses.replace(ACCEPTANCE_SYNTH, query_kind="sum")
    start = time.perf_counter()
    result = pipeline.run_iterations(config, pipeline.TrainConfig(rounds=3))
    elapsed = time.perf_counter() - start
    assert elapsed <= 300.0

    best_sum = float(
        np.mean([result.best_report(f.fold).target_sum_accuracy for f in result.folds])
    )
    assert best_sum >= 0.85
    for fold in result.folds:
        for report in fold.reports:
            assert report.target_sum_accuracy >= report.target_count_accuracy
            assert report.ood_sum_accuracy >= report.ood_count_accuracy
            assert report.source_sum_accuracy >= report.source_count_accuracy
    print(f"PASS criterion 7 (sum): best sum accuracy {best_sum:.3f}, "
          f"sum >= count on every report, {elapsed:.0f}s")


def _printable_query(rng: np.random.Generator, vocab: LabelVocab):
    """Random query in parse-normal (printable) form."""

    def count_node(mode):
        names = list(
            rng.choice(vocab.classes, size=int(rng.integers(1, vocab.size + 1)), replace=False)
        )
        items = []
        for name in names:
            lo = int(rng.integers(0, 5))
            if mode == "closed" and len(names) > 1:
                items.append((name, Interval(lo, lo + 1)))
            elif rng.random() < 0.4:
                items.append((name, Interval(lo, None)))
            else:
                items.append((name, Interval(lo, lo + 1 + int(rng.integers(0, 3)))))
        return CountConstraints(tuple(items), mode)

    def presence_node():
        names = rng.choice(vocab.classes, size=int(rng.integers(1, vocab.size + 1)), replace=False)
        return Presence(tuple(names))

    def sum_node():
        return Sum(int(rng.integers(0, 40)))

    kind = ("counts_open", "counts_closed", "presence", "sum", "and")[int(rng.integers(5))]
    if kind == "counts_open":
        return count_node("open")
    if kind == "counts_closed":
        return count_node("closed")
    if kind == "presence":
        return presence_node()
    if kind == "sum":
        return sum_node()
    categories = ["counts_open", "counts_closed", "presence", "sum"]
    picked = list(rng.choice(categories, size=int(rng.integers(2, 5)), replace=False))
    parts = []
    for category in picked:
        if category == "counts_open":
            parts.append(count_node("open"))
        elif category == "counts_closed":
            parts.append(count_node("closed"))
        elif category == "presence":
            parts.append(presence_node())
        else:
            parts.append(sum_node())
    return And(tuple(parts))


def test_criterion_8_parser_round_trip():
    shapes = LabelVocab(("small_metal_cube", "large_rubber_cylinder", "s_metal_cube", "l_rubber_sphere"))
    digits = LabelVocab(tuple(str(d) for d in range(10)))
    verbatim = [
        ("count_objects([small_metal_cube,large_rubber_cylinder],[1,3])", shapes),
        ("range_count_objects([s_metal_cube,l_rubber_sphere],[1,1],[0,1])", shapes),
        ("sum_objects(12)", digits),
    ]
    for text, vocab in verbatim:
        query = parse(text, vocab)
        assert parse(print_query(query), vocab) == query

    rng = np.random.default_rng(10_008)
    for _ in range(1000):
        vocab = random_vocab(rng, allow_ignored=False)
        query = _printable_query(rng, vocab)
        assert parse(print_query(query), vocab) == query
    print("PASS criterion 8: 3 verbatim query forms + 1000 generated ASTs round-trip")


@pytest.mark.skipif(True, reason="criterion 9 (binding parity) runs in frontend/: npm test")
def test_criterion_9_binding_parity_placeholder():
    pass
