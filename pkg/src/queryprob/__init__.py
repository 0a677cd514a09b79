"""Differentiable probability engine for weak queries over per-object labels."""

from .core import (
    And,
    Assignment,
    CategoricalBelief,
    CountConstraints,
    Interval,
    LabelVocab,
    Presence,
    Query,
    SceneRecord,
    Sum,
    indicator_to_interval,
    satisfies,
    validate_query,
    validate_scene,
)
from .engine import (
    QueryProbability,
    evaluate,
    gradient,
    nll_loss,
    sum_distribution,
)
from .matcher import MatchResult, hungarian, most_probable_world, pseudo_labels
from .planner import FilterResult, InferencePlan, compile, filter_scene, plan_cost
from .qlang import parse, print_query

__version__ = "0.1.0"

__all__ = [
    "And",
    "Assignment",
    "CategoricalBelief",
    "CountConstraints",
    "FilterResult",
    "InferencePlan",
    "Interval",
    "LabelVocab",
    "MatchResult",
    "Presence",
    "Query",
    "QueryProbability",
    "SceneRecord",
    "Sum",
    "compile",
    "evaluate",
    "filter_scene",
    "gradient",
    "hungarian",
    "indicator_to_interval",
    "most_probable_world",
    "nll_loss",
    "parse",
    "plan_cost",
    "print_query",
    "pseudo_labels",
    "satisfies",
    "sum_distribution",
    "validate_query",
    "validate_scene",
    "__version__",
]
