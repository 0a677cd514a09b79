"""Line-delimited scene files and experiment config files (schema v1).

A scene file starts with a header object declaring the vocabulary::

    {"format_version": 1, "vocab": ["A", "B"], "ignored": [], "values": [0, 1]}

followed by one scene object per line::

    {"id": "s1", "beliefs": [[0.6, 0.4], [0.3, 0.7]], "query": "count_objects([A,B],[1,1])"}

``features`` and ``gold_labels`` are optional per-scene fields.  Malformed
documents raise :class:`InputError`; scenes that parse but fail validation
raise the corresponding :class:`DataError`.
"""

from __future__ import annotations

import json
from dataclasses import fields
from typing import TextIO

from . import qlang
from .core import (
    CategoricalBelief,
    InputError,
    LabelVocab,
    SceneRecord,
    validate_scene,
)
from .pipeline import ObjectsPerScene, SynthConfig, TrainConfig

FORMAT_VERSION = 1


def _parse_line(line: str, lineno: int) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise InputError(f"line {lineno}: invalid JSON: {exc}") from None
    if not isinstance(record, dict):
        raise InputError(f"line {lineno}: expected an object, got {type(record).__name__}")
    return record


def _vocab_from_header(header: dict) -> LabelVocab:
    if header.get("format_version") != FORMAT_VERSION:
        raise InputError(
            f"unsupported format_version {header.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    if "vocab" not in header or not isinstance(header["vocab"], list):
        raise InputError("header must carry a 'vocab' list")
    return LabelVocab(
        classes=tuple(header["vocab"]),
        ignored=frozenset(header.get("ignored", ())),
        values=tuple(header["values"]) if "values" in header else (),
    )


def read_scenes(stream: TextIO) -> tuple[LabelVocab, list[SceneRecord]]:
    """Parse and validate a scene file; returns the vocabulary and scenes."""
    lines = [line for line in stream.read().splitlines() if line.strip()]
    if not lines:
        raise InputError("scene file is empty")
    vocab = _vocab_from_header(_parse_line(lines[0], 1))
    scenes = []
    for lineno, line in enumerate(lines[1:], start=2):
        record = _parse_line(line, lineno)
        for key in ("id", "beliefs"):
            if key not in record:
                raise InputError(f"line {lineno}: scene record missing {key!r}")
        query = None
        if record.get("query") is not None:
            query = qlang.parse(record["query"], vocab)
        scene = SceneRecord(
            id=str(record["id"]),
            beliefs=tuple(CategoricalBelief(tuple(row)) for row in record["beliefs"]),
            features=tuple(tuple(row) for row in record["features"])
            if record.get("features") is not None
            else None,
            gold_labels=tuple(record["gold_labels"])
            if record.get("gold_labels") is not None
            else None,
            query=query,
        )
        scenes.append(validate_scene(scene, vocab))
    return vocab, scenes


def load_scene_file(path: str) -> tuple[LabelVocab, list[SceneRecord]]:
    try:
        with open(path, "r", encoding="ascii") as stream:
            return read_scenes(stream)
    except OSError as exc:
        raise InputError(f"cannot read scene file: {exc}") from None


def write_scenes(stream: TextIO, vocab: LabelVocab, scenes: list[SceneRecord]):
    header = {
        "format_version": FORMAT_VERSION,
        "vocab": list(vocab.classes),
        "ignored": sorted(vocab.ignored),
        "values": list(vocab.values),
    }
    stream.write(json.dumps(header) + "\n")
    for scene in scenes:
        record: dict = {
            "id": scene.id,
            "beliefs": [list(b.probs) for b in scene.beliefs],
        }
        if scene.query is not None:
            record["query"] = qlang.print_query(scene.query)
        if scene.features is not None:
            record["features"] = [list(row) for row in scene.features]
        if scene.gold_labels is not None:
            record["gold_labels"] = list(scene.gold_labels)
        stream.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# Experiment configs


def _build(cls, payload: dict, path: str):
    if not isinstance(payload, dict):
        raise InputError(f"{path}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise InputError(f"{path}.{sorted(unknown)[0]}: unknown field")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None


def parse_experiment_config(document: dict) -> tuple[SynthConfig, TrainConfig]:
    if document.get("format_version") != FORMAT_VERSION:
        raise InputError(
            f"format_version: expected {FORMAT_VERSION}, got {document.get('format_version')!r}"
        )
    synth_payload = dict(document.get("synth", {}))
    if "source_classes" in synth_payload:
        synth_payload["source_classes"] = tuple(synth_payload["source_classes"])
    if "objects_per_scene" in synth_payload:
        ranges = synth_payload["objects_per_scene"]
        if not isinstance(ranges, dict):
            raise InputError("synth.objects_per_scene: expected an object")
        kwargs = {key: tuple(value) for key, value in ranges.items()}
        synth_payload["objects_per_scene"] = _build(
            ObjectsPerScene, kwargs, "synth.objects_per_scene"
        )
    synth = _build(SynthConfig, synth_payload, "synth")
    train = _build(TrainConfig, dict(document.get("training", {})), "training")
    return synth, train


def load_experiment_config(path: str) -> tuple[SynthConfig, TrainConfig]:
    try:
        with open(path, "r", encoding="utf-8") as stream:
            document = json.load(stream)
    except OSError as exc:
        raise InputError(f"cannot read config file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid config JSON: {exc}") from None
    return parse_experiment_config(document)
