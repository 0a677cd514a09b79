"""Regenerate the shared fixture scene files under fixtures/.

The fixtures pin the worked examples used across the Python test suite, the
CLI, and the frontend binding parity checks.
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from queryprob import CategoricalBelief, LabelVocab, SceneRecord, qlang, validate_scene
from queryprob.sceneio import write_scenes

FIXTURES = pathlib.Path(__file__).resolve().parents[1] / "fixtures"


def pair_scenes():
    vocab = LabelVocab(("A", "B"))

    def scene(scene_id, beliefs, query):
        return validate_scene(
            SceneRecord(
                id=scene_id,
                beliefs=tuple(CategoricalBelief(tuple(row)) for row in beliefs),
                query=qlang.parse(query, vocab),
            ),
            vocab,
        )

    return vocab, [
        scene("pair", [[0.6, 0.4], [0.3, 0.7]], "count_objects([A,B],[1,1]),closed"),
        scene("onehot", [[1.0, 0.0]], "count_objects([A],[1])"),
        scene("empty", [], "count_objects([],[])"),
        scene("confident", [[0.99, 0.01], [0.6, 0.4]], "count_objects([A,B],[1,1])"),
        scene("atleast", [[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]], "count_in(A,1,inf)"),
        scene("present", [[0.25, 0.75], [0.5, 0.5]], "presence([B])"),
    ]


def digit_scenes():
    vocab = LabelVocab(tuple(str(d) for d in range(10)))
    uniform = [0.1] * 10

    def scene(scene_id, beliefs, query):
        return validate_scene(
            SceneRecord(
                id=scene_id,
                beliefs=tuple(CategoricalBelief(tuple(row)) for row in beliefs),
                query=qlang.parse(query, vocab),
            ),
            vocab,
        )

    skewed = [0.02, 0.02, 0.3, 0.1, 0.2, 0.06, 0.1, 0.05, 0.05, 0.1]
    return vocab, [
        scene("two_uniform", [uniform, uniform], "sum_objects(8)"),
        scene("three_digits", [uniform, skewed, uniform], "sum_objects(12)"),
        scene("mixed", [skewed, uniform], "and(count_objects([2],[1]),sum_objects(8))"),
        scene(
            "ranged",
            [uniform, skewed, uniform],
            "range_count_objects([2,4],[1,1],[0,-1])",
        ),
    ]


def main():
    FIXTURES.mkdir(exist_ok=True)
    for name, (vocab, scenes) in {
        "pair_scenes.jsonl": pair_scenes(),
        "digit_scenes.jsonl": digit_scenes(),
    }.items():
        with open(FIXTURES / name, "w", encoding="ascii") as stream:
            write_scenes(stream, vocab, scenes)
        print(f"wrote {FIXTURES / name} ({len(scenes)} scenes)")


if __name__ == "__main__":
    main()
