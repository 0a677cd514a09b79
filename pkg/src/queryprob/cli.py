"""Command-line surface: parse, eval, grad, train, bench.

All output is line-delimited JSON with a leading header record.  Exit codes:
0 success, 2 input/parse error, 3 data error, 4 budget exceeded.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import engine, matcher, oracle, pipeline, planner, qlang, sceneio
from .core import (
    And,
    BudgetError,
    CountConstraints,
    DataError,
    InputError,
    LabelVocab,
    Presence,
    Query,
    QueryProbError,
    Sum,
)
from .planner import QueryUnsatisfiableAfterClamp

_KEYWORDS = {
    "and",
    "count_objects",
    "range_count_objects",
    "count_in",
    "presence",
    "sum_objects",
    "closed",
    "inf",
}


def _emit(record: dict):
    sys.stdout.write(json.dumps(record) + "\n")


def _header(command: str, **extra) -> dict:
    return {"record": "header", "format_version": sceneio.FORMAT_VERSION, "command": command, **extra}


def _vocab_from_args(args) -> LabelVocab | None:
    if args.vocab is None:
        return None
    return LabelVocab(
        classes=tuple(args.vocab.split(",")),
        ignored=frozenset(args.ignored.split(",")) if args.ignored else frozenset(),
        values=tuple(int(v) for v in args.values.split(",")) if args.values else (),
    )


def _implicit_vocab(text: str) -> LabelVocab:
    names = []
    for token, _ in qlang._tokenize(text):
        if token in _KEYWORDS or token.isdigit() or token in "()[],-":
            continue
        if token not in names:
            names.append(token)
    if not names:
        names = ["_"]
    return LabelVocab(tuple(names))


def _force_mode(query: Query, mode: str) -> Query:
    if isinstance(query, CountConstraints):
        return CountConstraints(query.items, mode)
    if isinstance(query, And):
        return And(tuple(_force_mode(part, mode) for part in query.parts))
    return query


def _ast_dump(query: Query) -> dict:
    if isinstance(query, CountConstraints):
        return {
            "type": "CountConstraints",
            "mode": query.mode,
            "items": [[name, [i.lo, i.hi]] for name, i in query.items],
        }
    if isinstance(query, Presence):
        return {"type": "Presence", "classes": list(query.classes)}
    if isinstance(query, Sum):
        return {"type": "Sum", "target": query.target}
    if isinstance(query, And):
        return {"type": "And", "parts": [_ast_dump(part) for part in query.parts]}
    raise InputError(f"not a query: {query!r}")


def _fail(exc: QueryProbError):
    sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")


def cmd_parse(args) -> int:
    try:
        vocab = _vocab_from_args(args) or _implicit_vocab(args.query)
        query = qlang.parse(args.query, vocab)
    except QueryProbError as exc:
        _fail(exc)
        return 2
    _emit(_header("parse"))
    _emit({"record": "query", "ast": _ast_dump(query), "canonical": qlang.print_query(query)})
    return 0


def _scene_eval_record(scene, vocab, args) -> dict:
    if scene.query is None:
        raise DataError(f"scene {scene.id!r} has no query")
    query = scene.query if args.mode is None else _force_mode(scene.query, args.mode)
    record: dict = {"record": "scene", "id": scene.id}
    if args.method == "hungarian":
        result = matcher.most_probable_world(scene, query, vocab)
        value = result.world_probability
        record.update(
            probability=value,
            nll=-float(np.log(max(value, engine.LOG_FLOOR))),
            plan_kind="hungarian",
            state_count=scene.n_objects**2,
            filtered=False,
            world=[vocab.classes[l] for l in result.assignment.labels],
        )
        return record
    try:
        result = planner.filter_scene(scene, query, vocab, args.delta)
    except QueryUnsatisfiableAfterClamp:
        record.update(
            probability=0.0,
            nll=-float(np.log(engine.LOG_FLOOR)),
            plan_kind="none",
            state_count=0,
            filtered=True,
            forced_zero=True,
        )
        return record
    plan = planner.compile(
        result.residual_query,
        vocab,
        result.residual_scene.n_objects,
        limit_states=args.limit_states,
        limit_worlds=args.limit_worlds,
    )
    value = engine.evaluate(plan, result.residual_scene).value
    record.update(
        probability=value,
        nll=-float(np.log(max(value, engine.LOG_FLOOR))),
        plan_kind=plan.kind,
        state_count=plan.state_count,
        filtered=bool(result.clamped),
    )
    return record


def cmd_eval(args) -> int:
    vocab, scenes = sceneio.load_scene_file(args.scenes)
    _emit(_header("eval", delta=args.delta, method=args.method))
    for scene in scenes:
        _emit(_scene_eval_record(scene, vocab, args))
    return 0


def cmd_grad(args) -> int:
    vocab, scenes = sceneio.load_scene_file(args.scenes)
    if args.scene_id is not None:
        scenes = [s for s in scenes if s.id == args.scene_id]
        if not scenes:
            raise DataError(f"no scene with id {args.scene_id!r}")
    _emit(_header("grad", method=args.method, delta=args.delta))
    for scene in scenes:
        if scene.query is None:
            raise DataError(f"scene {scene.id!r} has no query")
        query = scene.query if args.mode is None else _force_mode(scene.query, args.mode)
        record: dict = {"record": "gradient", "id": scene.id, "method": args.method}
        n, k = scene.n_objects, vocab.size
        try:
            filtered = planner.filter_scene(scene, query, vocab, args.delta)
        except QueryUnsatisfiableAfterClamp:
            record.update(
                probability=0.0,
                forced_zero=True,
                entries=[[0.0] * k for _ in range(n)],
            )
            _emit(record)
            continue
        residual = filtered.residual_scene
        kept = [i for i in range(n) if i not in {obj for obj, _ in filtered.clamped}]
        if args.method == "findiff":
            partial = oracle.finite_diff_gradient(residual, filtered.residual_query, vocab, h=1e-6)
        else:
            plan = planner.compile(
                filtered.residual_query,
                vocab,
                residual.n_objects,
                limit_states=args.limit_states,
                limit_worlds=args.limit_worlds,
            )
            partial = engine.gradient(plan, residual, args.method)
            other = engine.gradient(plan, residual, "clamp" if args.method == "reverse" else "reverse")
            record["max_abs_diff_clamp_reverse"] = float(np.abs(partial - other).max()) if partial.size else 0.0
            record["probability"] = engine.evaluate(plan, residual).value
        entries = np.zeros((n, k))
        if kept:
            entries[kept, :] = partial
        record["filtered"] = bool(filtered.clamped)
        record["entries"] = [[float(v) for v in row] for row in entries]
        _emit(record)
    return 0


def cmd_train(args) -> int:
    synth, train = sceneio.load_experiment_config(args.config)
    if args.seed is not None:
        synth = replace(synth, seed=args.seed)
    result = pipeline.run_iterations(synth, train)
    os.makedirs(args.out, exist_ok=True)
    report_fields = [f for f in pipeline.IterationReport.__dataclass_fields__]
    records = [_header("train", query_kind=synth.query_kind, folds=synth.folds)]
    for fold_result in result.folds:
        for report in fold_result.reports:
            record = {"record": "iteration", "fold": fold_result.fold}
            record.update({name: getattr(report, name) for name in report_fields})
            records.append(record)
        records.append(
            {
                "record": "fold_summary",
                "fold": fold_result.fold,
                "best_iteration": fold_result.best_iteration,
            }
        )
    for name in report_fields:
        if name == "iteration":
            continue
        stats = result.aggregate(name)
        records.append(
            {
                "record": "aggregate",
                "metric": name,
                "per_iteration": [{"mean": m, "std": s} for m, s in stats],
            }
        )
    with open(f"{args.out}/reports.jsonl", "w", encoding="utf-8") as stream:
        for record in records:
            stream.write(json.dumps(record) + "\n")
    weights = {
        "format_version": sceneio.FORMAT_VERSION,
        "classes": list(synth.vocab().classes),
        "folds": [
            {
                "fold": f.fold,
                "best_iteration": f.best_iteration,
                "weight": f.head.weight.tolist(),
                "bias": f.head.bias.tolist(),
            }
            for f in result.folds
        ],
    }
    with open(f"{args.out}/weights.json", "w", encoding="utf-8") as stream:
        json.dump(weights, stream)
    for record in records:
        _emit(record)
    return 0


def cmd_bench(args) -> int:
    vocab, scenes = sceneio.load_scene_file(args.scenes)
    deltas = [float(d) for d in args.deltas.split(",")] if args.deltas else [1.0, 0.99, 0.95]
    _emit(_header("bench", deltas=deltas))
    exact = {}
    for scene in scenes:
        if scene.query is None:
            raise DataError(f"scene {scene.id!r} has no query")
        plan = planner.compile(scene.query, vocab, scene.n_objects,
                               limit_states=args.limit_states, limit_worlds=args.limit_worlds)
        exact[scene.id] = engine.evaluate(plan, scene).value
    for delta in deltas:
        state_counts = []
        max_dp = 0.0
        start = time.perf_counter()
        for scene in scenes:
            try:
                result = planner.filter_scene(scene, scene.query, vocab, delta)
            except QueryUnsatisfiableAfterClamp:
                state_counts.append(0)
                max_dp = max(max_dp, abs(exact[scene.id]))
                continue
            plan = planner.compile(result.residual_query, vocab,
                                   result.residual_scene.n_objects,
                                   limit_states=args.limit_states,
                                   limit_worlds=args.limit_worlds)
            state_counts.append(plan.state_count)
            value = engine.evaluate(plan, result.residual_scene).value
            max_dp = max(max_dp, abs(value - exact[scene.id]))
        _emit(
            {
                "record": "bench",
                "method": "exact",
                "delta": delta,
                "scenes": len(scenes),
                "mean_state_count": float(np.mean(state_counts)) if state_counts else 0.0,
                "wall_time_s": time.perf_counter() - start,
                "max_abs_dp": max_dp,
            }
        )
    applicable = 0
    max_gap = 0.0
    start = time.perf_counter()
    for scene in scenes:
        try:
            result = matcher.most_probable_world(scene, scene.query, vocab)
        except DataError:
            continue
        applicable += 1
        max_gap = max(max_gap, abs(exact[scene.id] - result.world_probability))
    _emit(
        {
            "record": "bench",
            "method": "hungarian",
            "delta": None,
            "scenes": applicable,
            "mean_state_count": None,
            "wall_time_s": time.perf_counter() - start,
            "max_abs_dp": max_gap,
        }
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="queryprob",
        description="Exact probabilities and gradients of weak queries over per-object beliefs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="parse a query and dump its AST")
    p.add_argument("query")
    p.add_argument("--vocab", help="comma-separated class names")
    p.add_argument("--ignored", help="comma-separated ignored classes")
    p.add_argument("--values", help="comma-separated integer class values")
    p.set_defaults(func=cmd_parse)

    def common(p):
        p.add_argument("--scenes", required=True, help="scene file (JSONL, v1)")
        p.add_argument("--mode", choices=("open", "closed"), default=None,
                       help="override count-constraint mode for all queries")
        p.add_argument("--limit-states", type=int, default=planner.DEFAULT_STATE_LIMIT)
        p.add_argument("--limit-worlds", type=int, default=planner.DEFAULT_WORLD_LIMIT)

    p = sub.add_parser("eval", help="per-scene query probability and NLL")
    common(p)
    p.add_argument("--delta", type=float, default=1.0, help="confidence filtering threshold")
    p.add_argument("--method", choices=("exact", "hungarian"), default="exact")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad", help="gradient matrix dP/dp for scenes")
    common(p)
    p.add_argument("--scene-id", default=None)
    p.add_argument("--method", choices=("clamp", "reverse", "findiff"), default="reverse")
    p.add_argument("--delta", type=float, default=1.0,
                   help="confidence filtering threshold; clamped rows report zero")
    p.set_defaults(func=cmd_grad)

    p = sub.add_parser("train", help="run the knowledge-transfer experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="approximation quality and cost sweep")
    common(p)
    p.add_argument("--deltas", default=None, help="comma-separated thresholds")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        _fail(exc)
        return 2
    except BudgetError as exc:
        _fail(exc)
        return 4
    except QueryProbError as exc:
        _fail(exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
