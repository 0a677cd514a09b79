"""Desk-scale knowledge-transfer experiment with iterative relabeling.

A frozen identity backbone produces per-object feature vectors (class
prototype plus isotropic noise); a linear softmax head plays the role of the
box-feature classifier.  The head is pre-trained with full labels on a source
class subset, fine-tuned on the target domain through the query NLL, and then
improved by relabel/retrain rounds restricted to query-compliant scenes.

``noise_sigma`` sets the expected Euclidean norm of the feature noise (the
per-coordinate standard deviation is sigma / sqrt(d)), so difficulty does not
silently scale with the feature dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import engine, matcher, planner, qlang
from .core import (
    CategoricalBelief,
    CountConstraints,
    DataError,
    InputError,
    Interval,
    LabelVocab,
    LengthMismatch,
    Presence,
    Query,
    SceneRecord,
    Sum,
    satisfies,
)
from .planner import QueryUnsatisfiableAfterClamp


class InvalidConfig(InputError):
    pass


class MissingGoldLabels(DataError):
    pass


class MissingQueries(DataError):
    pass


class EmptyTrainingPool(DataError):
    pass


QUERY_KINDS = ("counts", "ranges", "sum", "presence")


@dataclass(frozen=True)
class ObjectsPerScene:
    """Inclusive object-count range for each domain."""

    source: tuple[int, int] = (3, 3)
    target: tuple[int, int] = (3, 3)
    ood: tuple[int, int] = (4, 4)


@dataclass(frozen=True)
class SynthConfig:
    feature_dim: int = 16
    num_classes: int = 10
    source_classes: tuple[int, ...] = tuple(range(7))
    objects_per_scene: ObjectsPerScene = ObjectsPerScene()
    noise_sigma: float = 0.3
    n_source: int = 1000
    n_target: int = 1000
    n_ood: int = 1000
    n_test: int = 1000
    query_kind: str = "counts"
    seed: int = 0
    folds: int = 5
    val_fraction: float = 0.3

    def __post_init__(self):
        if self.feature_dim < 1 or self.num_classes < 2:
            raise InvalidConfig("need feature_dim >= 1 and num_classes >= 2")
        source = tuple(sorted(set(self.source_classes)))
        if not source or len(source) >= self.num_classes:
            raise InvalidConfig("source_classes must be a nonempty proper subset")
        if any(c < 0 or c >= self.num_classes for c in source):
            raise InvalidConfig("source_classes out of range")
        object.__setattr__(self, "source_classes", source)
        if self.noise_sigma <= 0:
            raise InvalidConfig("noise_sigma must be positive")
        for lo, hi in (
            self.objects_per_scene.source,
            self.objects_per_scene.target,
            self.objects_per_scene.ood,
        ):
            if lo < 0 or hi < lo:
                raise InvalidConfig(f"bad objects-per-scene range [{lo}, {hi}]")
        if self.query_kind not in QUERY_KINDS:
            raise InvalidConfig(f"query_kind must be one of {QUERY_KINDS}")
        if min(self.n_source, self.n_target, self.n_ood, self.n_test) < 1:
            raise InvalidConfig("scene counts must be positive")
        if not (0.0 < self.val_fraction < 1.0):
            raise InvalidConfig("val_fraction must be in (0, 1)")
        if self.folds < 1:
            raise InvalidConfig("folds must be >= 1")

    def vocab(self) -> LabelVocab:
        return LabelVocab(tuple(f"c{k}" for k in range(self.num_classes)))


@dataclass(frozen=True)
class TrainConfig:
    """Plain mini-batch gradient descent settings for the three phases.

    Fine-tuning runs at a 10x smaller rate than supervised (re)training,
    matching the usual practice of adapting a pre-trained model gently; with
    one shared rate the fine-tuning stage alone already saturates the
    synthetic task and the iterative-relabeling improvement is invisible.
    """

    lr: float = 0.05
    lr_finetune: float = 0.005
    batch_size: int = 16
    epochs_pretrain: int = 30
    epochs_finetune: int = 30
    epochs_retrain: int = 30
    delta: float = 1.0
    rounds: int = 3
    relabel_strategy: str = "argmax_compliance"
    mix_source: bool = True
    restart_from_pretrained: bool = False
    grad_method: str = "reverse"

    def __post_init__(self):
        if self.lr <= 0 or self.lr_finetune <= 0 or self.batch_size < 1 or self.rounds < 0:
            raise InvalidConfig("bad optimizer settings")
        if min(self.epochs_pretrain, self.epochs_finetune, self.epochs_retrain) < 0:
            raise InvalidConfig("epochs must be >= 0")
        if self.relabel_strategy not in ("argmax_compliance", "forced_matching"):
            raise InvalidConfig(f"unknown relabel strategy {self.relabel_strategy!r}")
        if self.grad_method not in ("reverse", "clamp"):
            raise InvalidConfig(f"unknown gradient method {self.grad_method!r}")


@dataclass(frozen=True, eq=False)
class SynthScene:
    """One synthetic scene: features, gold labels, and (for target) a query.

    Gold labels on target train/val scenes are carried for diagnostics only;
    the trainer touches nothing but features and the query.
    """

    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) int class indices
    query: Optional[Query] = None
    query_text: Optional[str] = None

    @property
    def n_objects(self) -> int:
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    vocab: LabelVocab
    prototypes: np.ndarray  # (K, d) unit vectors
    source_train: tuple[SynthScene, ...]
    source_val: tuple[SynthScene, ...]
    source_test: tuple[SynthScene, ...]
    target_train: tuple[SynthScene, ...]
    target_val: tuple[SynthScene, ...]
    target_test: tuple[SynthScene, ...]
    ood_test: tuple[SynthScene, ...]


@dataclass(eq=False)
class ClassifierHead:
    """Linear softmax head standing in for the box-feature classifier."""

    weight: np.ndarray  # (K, d)
    bias: np.ndarray  # (K,)

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.weight.copy(), self.bias.copy())

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight.T + self.bias

    def probs(self, features: np.ndarray) -> np.ndarray:
        z = self.logits(features)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def new_head(config: SynthConfig) -> ClassifierHead:
    return ClassifierHead(
        np.zeros((config.num_classes, config.feature_dim)),
        np.zeros(config.num_classes),
    )


# ---------------------------------------------------------------------------
# Synthetic data


def _query_for_labels(
    labels: np.ndarray, kind: str, vocab: LabelVocab, rng: np.random.Generator
) -> Query:
    counts: dict[int, int] = {}
    for label in labels.tolist():
        counts[label] = counts.get(label, 0) + 1
    present = sorted(counts)
    if kind == "counts":
        return CountConstraints(
            tuple(
                (vocab.classes[c], Interval(counts[c], counts[c] + 1)) for c in present
            ),
            "open",
        )
    if kind == "presence":
        return Presence(tuple(vocab.classes[c] for c in present))
    if kind == "sum":
        return Sum(int(sum(vocab.values[l] for l in labels.tolist())))
    if kind == "ranges":
        items = []
        for c in present:
            count = counts[c]
            options = [0, -1] if count == 0 else [0, 1, -1]
            indicator = options[int(rng.integers(len(options)))]
            if indicator == 0:
                interval = Interval(count, count + 1)
            elif indicator == 1:
                interval = Interval(count, None)  # "more than count-1"
            else:
                interval = Interval(0, count + 1)  # "fewer than count+1"
            items.append((vocab.classes[c], interval))
        return CountConstraints(tuple(items), "open")
    raise InvalidConfig(f"query_kind must be one of {QUERY_KINDS}")


def _make_scenes(
    count: int,
    objects_range: tuple[int, int],
    allowed: Sequence[int],
    prototypes: np.ndarray,
    sigma_coord: float,
    rng: np.random.Generator,
    vocab: LabelVocab,
    query_kind: Optional[str],
) -> tuple[SynthScene, ...]:
    lo, hi = objects_range
    allowed = np.asarray(list(allowed))
    scenes = []
    for _ in range(count):
        n = int(rng.integers(lo, hi + 1))
        labels = allowed[rng.integers(0, len(allowed), size=n)]
        noise = rng.normal(scale=sigma_coord, size=(n, prototypes.shape[1]))
        features = prototypes[labels] + noise
        query = None
        text = None
        if query_kind is not None:
            query = _query_for_labels(labels, query_kind, vocab, rng)
            text = qlang.print_query(query)
        scenes.append(SynthScene(features, labels, query, text))
    return tuple(scenes)


def generate_dataset(
    config: SynthConfig, rng: Optional[np.random.Generator] = None
) -> DatasetBundle:
    """Draw prototypes and scene splits; deterministic for a given seed.

    Source scenes use only the source classes; target and OOD scenes use the
    full vocabulary.  Every target scene (and every test scene, for metric
    convenience) carries the query generated from its gold labels.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    vocab = config.vocab()
    prototypes = rng.normal(size=(config.num_classes, config.feature_dim))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    sigma_coord = config.noise_sigma / math.sqrt(config.feature_dim)
    all_classes = range(config.num_classes)
    n_val = int(round(config.n_source * config.val_fraction))
    n_source_train = config.n_source - n_val
    n_target_val = int(round(config.n_target * config.val_fraction))
    n_target_train = config.n_target - n_target_val

    def make(count, objects, allowed, kind):
        return _make_scenes(
            count, objects, allowed, prototypes, sigma_coord, rng, vocab, kind
        )

    o = config.objects_per_scene
    kind = config.query_kind
    return DatasetBundle(
        vocab=vocab,
        prototypes=prototypes,
        source_train=make(n_source_train, o.source, config.source_classes, None),
        source_val=make(n_val, o.source, config.source_classes, None),
        source_test=make(config.n_test, o.source, config.source_classes, None),
        target_train=make(n_target_train, o.target, all_classes, kind),
        target_val=make(n_target_val, o.target, all_classes, kind),
        target_test=make(config.n_test, o.target, all_classes, kind),
        ood_test=make(config.n_ood, o.ood, all_classes, kind),
    )


# ---------------------------------------------------------------------------
# Training phases


def _supervised_pool(scenes: Sequence[SynthScene]) -> tuple[np.ndarray, np.ndarray]:
    xs = [s.features for s in scenes if s.n_objects]
    ys = [s.labels for s in scenes if s.n_objects]
    if not xs:
        raise EmptyTrainingPool("no labeled objects to train on")
    return np.concatenate(xs), np.concatenate(ys)


def _sgd_cross_entropy(
    head: ClassifierHead,
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> ClassifierHead:
    head = head.copy()
    n = len(labels)
    onehot = np.eye(head.weight.shape[0])[labels]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            x = features[batch]
            p = head.probs(x)
            dz = (p - onehot[batch]) / len(batch)
            head.weight -= lr * dz.T @ x
            head.bias -= lr * dz.sum(axis=0)
    return head


def pretrain(
    head: ClassifierHead,
    scenes: Sequence[SynthScene],
    epochs: int,
    lr: float,
    batch_size: int = 16,
    seed: int = 0,
) -> ClassifierHead:
    """Per-object cross-entropy on fully labeled scenes."""
    for scene in scenes:
        if scene.labels is None:
            raise MissingGoldLabels("pretraining requires gold labels")
    if epochs == 0:
        return head.copy()
    features, labels = _supervised_pool(scenes)
    return _sgd_cross_entropy(
        head, features, labels, epochs, lr, batch_size, np.random.default_rng(seed)
    )


def _scene_nll_grad(
    head_probs: np.ndarray,
    scene: SynthScene,
    vocab: LabelVocab,
    delta: float,
    plan_cache: dict,
    method: str,
) -> tuple[float, Optional[np.ndarray], bool]:
    """(nll, dL/dp over all objects or None, zero-probability flag)."""
    n, k = head_probs.shape
    rows = [tuple(row) for row in head_probs]
    try:
        kept, residual_query, clamped, _ = planner.filter_probs(
            rows, scene.query, vocab, delta
        )
    except QueryUnsatisfiableAfterClamp:
        return -math.log(engine.LOG_FLOOR), None, True
    residual_rows = [rows[i] for i in kept]
    key = (residual_query, len(kept))
    plan = plan_cache.get(key)
    if plan is None:
        plan = planner.compile(residual_query, vocab, len(kept))
        plan_cache[key] = plan
    value = engine.evaluate_probs(plan, residual_rows)
    if value <= 0.0:
        return -math.log(engine.LOG_FLOOR), None, True
    clamped_value = max(value, engine.LOG_FLOOR)
    residual_grad = -engine.gradient_probs(plan, residual_rows, method) / clamped_value
    grad = np.zeros((n, k))
    grad[list(kept), :] = residual_grad
    return -math.log(clamped_value), grad, False


def finetune(
    head: ClassifierHead,
    scenes: Sequence[SynthScene],
    vocab: LabelVocab,
    epochs: int,
    lr: float,
    batch_size: int = 16,
    delta: float = 1.0,
    seed: int = 0,
    method: str = "reverse",
) -> tuple[ClassifierHead, tuple[float, ...]]:
    """Minimize the query NLL over target scenes; returns (head, epoch NLLs).

    The loss gradient with respect to the probabilities is chained through
    the softmax Jacobian dL/dz_ij = sum_k dL/dp_ik * p_ik * (1[k=j] - p_ij).
    """
    for scene in scenes:
        if scene.query is None:
            raise MissingQueries("fine-tuning requires a query per scene")
    head = head.copy()
    rng = np.random.default_rng(seed)
    plan_cache: dict = {}
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(scenes))
        epoch_nll = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            grad_w = np.zeros_like(head.weight)
            grad_b = np.zeros_like(head.bias)
            for scene_index in batch:
                scene = scenes[scene_index]
                if scene.n_objects == 0:
                    continue
                p = head.probs(scene.features)
                nll, grad_p, flagged = _scene_nll_grad(
                    p, scene, vocab, delta, plan_cache, method
                )
                epoch_nll += nll
                if flagged or grad_p is None:
                    continue
                inner = (grad_p * p).sum(axis=1, keepdims=True)
                grad_z = p * (grad_p - inner)
                grad_w += grad_z.T @ scene.features
                grad_b += grad_z.sum(axis=0)
            head.weight -= lr * grad_w / len(batch)
            head.bias -= lr * grad_b / len(batch)
        history.append(epoch_nll / len(scenes))
    return head, tuple(history)


@dataclass(frozen=True, eq=False)
class RelabelResult:
    scenes: tuple[SynthScene, ...]  # accepted scenes with pseudo labels
    fraction: float


def relabel(
    scenes: Sequence[SynthScene],
    head: ClassifierHead,
    vocab: LabelVocab,
    strategy: str = "argmax_compliance",
) -> RelabelResult:
    """Pseudo-label the scenes whose predictions comply with their query."""
    accepted = []
    for scene in scenes:
        if scene.query is None:
            raise MissingQueries("relabeling requires a query per scene")
        if scene.n_objects == 0:
            continue
        probs = head.probs(scene.features)
        record = SceneRecord(
            id="",
            beliefs=tuple(CategoricalBelief(tuple(row)) for row in probs),
        )
        labels = matcher.pseudo_labels(record, scene.query, vocab, strategy)
        if labels is not None:
            accepted.append(replace(scene, labels=np.asarray(labels)))
    fraction = len(accepted) / len(scenes) if scenes else 0.0
    return RelabelResult(tuple(accepted), fraction)


def retrain(
    head: ClassifierHead,
    pseudo_scenes: Sequence[SynthScene],
    source_scenes: Sequence[SynthScene],
    mix_source: bool = True,
    epochs: int = 30,
    lr: float = 0.05,
    batch_size: int = 16,
    seed: int = 0,
) -> ClassifierHead:
    """Supervised cross-entropy on pseudo labels (optionally mixed with source)."""
    pool = list(pseudo_scenes) + (list(source_scenes) if mix_source else [])
    if not pool:
        raise EmptyTrainingPool("retraining needs pseudo-labeled or source scenes")
    if epochs == 0:
        return head.copy()
    features, labels = _supervised_pool(pool)
    return _sgd_cross_entropy(
        head, features, labels, epochs, lr, batch_size, np.random.default_rng(seed)
    )


# ---------------------------------------------------------------------------
# Metrics


def predict_labels(head: ClassifierHead, scenes: Sequence[SynthScene]) -> list[np.ndarray]:
    return [
        head.probs(s.features).argmax(axis=1) if s.n_objects else np.zeros(0, dtype=int)
        for s in scenes
    ]


def count_accuracy(
    predicted: Sequence[Sequence[int]],
    gold: Sequence[Sequence[int]],
    vocab: LabelVocab,
) -> float:
    """Fraction of scenes whose per-class counts (ignored classes exempt) match."""
    if len(predicted) != len(gold):
        raise LengthMismatch(f"{len(predicted)} predictions for {len(gold)} scenes")
    if not predicted:
        return 0.0
    ignored = vocab.ignored_indices
    correct = 0
    for pred, ref in zip(predicted, gold):
        if len(pred) != len(ref):
            raise LengthMismatch("prediction and gold differ in object count")
        pred_counts = np.bincount(
            [l for l in pred if l not in ignored], minlength=vocab.size
        )
        gold_counts = np.bincount(
            [l for l in ref if l not in ignored], minlength=vocab.size
        )
        correct += int((pred_counts == gold_counts).all())
    return correct / len(predicted)


def sum_accuracy(
    predicted: Sequence[Sequence[int]],
    gold: Sequence[Sequence[int]],
    vocab: LabelVocab,
) -> float:
    """Fraction of scenes whose value-weighted label sum matches."""
    if len(predicted) != len(gold):
        raise LengthMismatch(f"{len(predicted)} predictions for {len(gold)} scenes")
    if not predicted:
        return 0.0
    values = np.asarray(vocab.values)
    correct = 0
    for pred, ref in zip(predicted, gold):
        if len(pred) != len(ref):
            raise LengthMismatch("prediction and gold differ in object count")
        pred_sum = int(values[list(pred)].sum()) if len(pred) else 0
        gold_sum = int(values[list(ref)].sum()) if len(ref) else 0
        correct += int(pred_sum == gold_sum)
    return correct / len(predicted)


# ---------------------------------------------------------------------------
# The full loop


@dataclass(frozen=True)
class IterationReport:
    iteration: int  # 0 = pretrained, 1 = fine-tuned, >= 2 after relabel+retrain
    target_count_accuracy: float
    target_sum_accuracy: float
    ood_count_accuracy: float
    ood_sum_accuracy: float
    source_count_accuracy: float
    source_sum_accuracy: float
    relabeled_fraction: float
    mean_nll: float
    val_compliance: float  # selection metric: query compliance on validation


@dataclass(frozen=True, eq=False)
class FoldResult:
    fold: int
    reports: tuple[IterationReport, ...]
    best_iteration: int
    head: ClassifierHead


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    folds: tuple[FoldResult, ...]

    def aggregate(self, metric: str) -> list[tuple[float, float]]:
        """Per-iteration (mean, std) of a report field across folds."""
        iterations = len(self.folds[0].reports)
        stats = []
        for i in range(iterations):
            values = [getattr(f.reports[i], metric) for f in self.folds]
            stats.append((float(np.mean(values)), float(np.std(values))))
        return stats

    def best_report(self, fold: int) -> IterationReport:
        result = self.folds[fold]
        return result.reports[result.best_iteration]


def _compliance(head: ClassifierHead, scenes: Sequence[SynthScene], vocab: LabelVocab) -> float:
    if not scenes:
        return 0.0
    good = 0
    for scene in scenes:
        if scene.n_objects == 0:
            good += 1 if satisfies(scene.query, (), vocab) else 0
            continue
        labels = tuple(int(l) for l in head.probs(scene.features).argmax(axis=1))
        good += 1 if satisfies(scene.query, labels, vocab) else 0
    return good / len(scenes)


def _mean_nll(
    head: ClassifierHead,
    scenes: Sequence[SynthScene],
    vocab: LabelVocab,
    delta: float,
    plan_cache: dict,
) -> float:
    total = 0.0
    for scene in scenes:
        if scene.n_objects == 0:
            continue
        probs = head.probs(scene.features)
        nll, _, _ = _scene_nll_grad(probs, scene, vocab, delta, plan_cache, "reverse")
        total += nll
    return total / len(scenes) if scenes else 0.0


def _report(
    iteration: int,
    head: ClassifierHead,
    data: DatasetBundle,
    relabeled_fraction: float,
    plan_cache: dict,
    delta: float,
) -> IterationReport:
    vocab = data.vocab
    metrics = {}
    for name, scenes in (
        ("target", data.target_test),
        ("ood", data.ood_test),
        ("source", data.source_test),
    ):
        predicted = predict_labels(head, scenes)
        gold = [s.labels for s in scenes]
        metrics[f"{name}_count"] = count_accuracy(predicted, gold, vocab)
        metrics[f"{name}_sum"] = sum_accuracy(predicted, gold, vocab)
    return IterationReport(
        iteration=iteration,
        target_count_accuracy=metrics["target_count"],
        target_sum_accuracy=metrics["target_sum"],
        ood_count_accuracy=metrics["ood_count"],
        ood_sum_accuracy=metrics["ood_sum"],
        source_count_accuracy=metrics["source_count"],
        source_sum_accuracy=metrics["source_sum"],
        relabeled_fraction=relabeled_fraction,
        mean_nll=_mean_nll(head, data.target_val, vocab, delta, plan_cache),
        val_compliance=_compliance(head, data.target_val, vocab),
    )


def run_fold(config: SynthConfig, train: TrainConfig, fold: int) -> FoldResult:
    data = generate_dataset(config, np.random.default_rng([config.seed, fold]))
    vocab = data.vocab
    plan_cache: dict = {}
    seed = config.seed * 1009 + fold

    head = pretrain(
        new_head(config),
        data.source_train,
        train.epochs_pretrain,
        train.lr,
        train.batch_size,
        seed=seed,
    )
    pretrained = head.copy()
    dry = relabel(data.target_train, head, vocab, train.relabel_strategy)
    reports = [_report(0, head, data, dry.fraction, plan_cache, train.delta)]
    heads = [head.copy()]

    for round_index in range(1, train.rounds + 1):
        if train.restart_from_pretrained and round_index > 1:
            head = pretrained.copy()
        head, _ = finetune(
            head,
            data.target_train,
            vocab,
            train.epochs_finetune,
            train.lr_finetune,
            train.batch_size,
            delta=train.delta,
            seed=seed + round_index,
            method=train.grad_method,
        )
        result = relabel(data.target_train, head, vocab, train.relabel_strategy)
        if round_index == 1:
            reports.append(_report(1, head, data, result.fraction, plan_cache, train.delta))
            heads.append(head.copy())
        head = retrain(
            head,
            result.scenes,
            data.source_train,
            mix_source=train.mix_source,
            epochs=train.epochs_retrain,
            lr=train.lr,
            batch_size=train.batch_size,
            seed=seed + 100 + round_index,
        )
        reports.append(
            _report(round_index + 1, head, data, result.fraction, plan_cache, train.delta)
        )
        heads.append(head.copy())

    best = max(range(len(reports)), key=lambda i: (reports[i].val_compliance, -i))
    return FoldResult(fold, tuple(reports), best, heads[best])


def run_iterations(
    config: SynthConfig, train: TrainConfig = TrainConfig(), rounds: Optional[int] = None
) -> ExperimentResult:
    """pretrain -> [finetune -> relabel -> retrain] x rounds, over all folds.

    Reports follow the iteration convention: 0 = pretrained, 1 = after the
    first fine-tuning pass, r+1 = after round r's relabel+retrain.  The best
    iteration per fold is selected by validation query compliance.
    """
    if rounds is not None:
        train = replace(train, rounds=rounds)
    return ExperimentResult(
        tuple(run_fold(config, train, fold) for fold in range(config.folds))
    )
