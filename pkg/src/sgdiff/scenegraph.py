"""Scene-graph data model, validation, JSON interchange and graph edits.

A scene graph is a list of object instances (category indices) plus a list of
directed, labeled ``(subject, relation, object)`` triplets between instance
positions.  Graphs are immutable values; every edit returns a new graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from sgdiff.errors import DataValidationError

__all__ = [
    "Vocab",
    "SceneGraph",
    "GroundedScene",
    "Violation",
    "validate",
    "replace_object",
    "replace_relation",
    "add_triplet",
    "remove_triplet",
    "graph_to_document",
    "graph_from_document",
    "dumps_canonical",
    "read_graph_file",
    "write_graph_file",
]


@dataclass(frozen=True)
class Vocab:
    object_names: tuple[str, ...]
    relation_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "object_names", tuple(self.object_names))
        object.__setattr__(self, "relation_names", tuple(self.relation_names))
        for kind, names in (("object", self.object_names), ("relation", self.relation_names)):
            if any(not isinstance(n, str) or not n for n in names):
                raise ValueError(f"{kind} names must be non-empty strings")
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate {kind} names in vocab")

    @property
    def num_objects(self) -> int:
        return len(self.object_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def object_index(self, name: str | int) -> int:
        return _resolve(name, self.object_names, "object")

    def relation_index(self, name: str | int) -> int:
        return _resolve(name, self.relation_names, "relation")

    def to_dict(self) -> dict:
        return {"objects": list(self.object_names), "relations": list(self.relation_names)}

    @classmethod
    def from_dict(cls, doc: dict) -> "Vocab":
        return cls(tuple(doc["objects"]), tuple(doc["relations"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(dumps_canonical(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise DataValidationError(f"{path}: cannot read vocab ({exc})") from exc


def _resolve(name, names: Sequence[str], kind: str) -> int:
    if isinstance(name, (int, np.integer)) and not isinstance(name, bool):
        if 0 <= name < len(names):
            return int(name)
        raise DataValidationError(f"unknown {kind} category index {name}")
    try:
        return names.index(name)
    except ValueError:
        raise DataValidationError(f"unknown {kind} category {name!r}") from None


@dataclass(frozen=True)
class SceneGraph:
    """Object instances and ``(subject, relation, object)`` triplets, all as indices."""

    objects: tuple[int, ...] = ()
    triplets: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(int(o) for o in self.objects))
        object.__setattr__(
            self, "triplets", tuple((int(s), int(r), int(o)) for s, r, o in self.triplets)
        )

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def num_triplets(self) -> int:
        return len(self.triplets)

    def out_neighbors(self, i: int) -> list[int]:
        return [o for s, _, o in self.triplets if s == i]

    def in_neighbors(self, i: int) -> list[int]:
        return [s for s, _, o in self.triplets if o == i]

    @classmethod
    def from_names(cls, objects: Iterable[str], triplets: Iterable, vocab: Vocab) -> "SceneGraph":
        return cls(
            tuple(vocab.object_index(o) for o in objects),
            tuple((int(s), vocab.relation_index(r), int(o)) for s, r, o in triplets),
        )

    def describe(self, vocab: Vocab) -> list[str]:
        return [
            f"{vocab.object_names[self.objects[s]]} {vocab.relation_names[r]} "
            f"{vocab.object_names[self.objects[o]]}"
            for s, r, o in self.triplets
        ]


@dataclass(frozen=True)
class GroundedScene:
    """A graph paired with normalized object boxes and an image.

    ``boxes`` is an ``(n, 4)`` array of ``x0, y0, x1, y1`` in ``[0, 1]`` or
    ``None`` for generation-only scenes.  ``image`` is ``H x W x 3`` in ``[0, 1]``.
    """

    graph: SceneGraph
    boxes: np.ndarray | None = None
    image: np.ndarray | None = None
    image_path: str | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.boxes is not None:
            boxes = np.clip(np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4), 0.0, 1.0)
            if len(boxes) != self.graph.num_objects:
                raise DataValidationError(
                    f"{len(boxes)} boxes for {self.graph.num_objects} objects"
                )
            if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
                raise DataValidationError("every box must have positive area")
            boxes.setflags(write=False)
            object.__setattr__(self, "boxes", boxes)
        if self.image is not None:
            image = np.asarray(self.image, dtype=np.float32)
            if image.ndim != 3 or image.shape[2] != 3:
                raise DataValidationError(f"image must be HxWx3, got {image.shape}")
            image.setflags(write=False)
            object.__setattr__(self, "image", image)

    @property
    def has_boxes(self) -> bool:
        return self.boxes is not None

    def __eq__(self, other):
        if not isinstance(other, GroundedScene):
            return NotImplemented
        return (
            self.graph == other.graph
            and _array_eq(self.boxes, other.boxes)
            and _array_eq(self.image, other.image)
            and self.image_path == other.image_path
        )

    __hash__ = None


def _array_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and bool(np.array_equal(a, b))


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    kind: str
    index: int
    detail: str

    def __str__(self):
        return f"{self.kind} at {self.index}: {self.detail}"


def validate(graph: SceneGraph, vocab: Vocab) -> list[Violation]:
    """Return every invariant violation; an empty list means the graph is valid."""
    problems = []
    n = graph.num_objects
    for pos, cat in enumerate(graph.objects):
        if not 0 <= cat < vocab.num_objects:
            problems.append(Violation("unknown object category", pos, f"category {cat}"))
    seen = set()
    for pos, (s, r, o) in enumerate(graph.triplets):
        for end in (s, o):
            if not 0 <= end < n:
                problems.append(
                    Violation("dangling index", pos, f"object index {end} with {n} objects")
                )
        if s == o:
            problems.append(Violation("self-loop i==j", pos, f"({s}, {r}, {o})"))
        if not 0 <= r < vocab.num_relations:
            problems.append(Violation("unknown relation category", pos, f"category {r}"))
        if (s, r, o) in seen:
            problems.append(Violation("duplicate triplet", pos, f"({s}, {r}, {o})"))
        seen.add((s, r, o))
    return problems


def _check(graph: SceneGraph, vocab: Vocab) -> SceneGraph:
    problems = validate(graph, vocab)
    if problems:
        raise DataValidationError("; ".join(str(p) for p in problems))
    return graph


# ---------------------------------------------------------------------------
# edits


def replace_object(graph: SceneGraph, position: int, new_category, vocab: Vocab) -> SceneGraph:
    if not 0 <= position < graph.num_objects:
        raise DataValidationError(
            f"object position {position} out of range for {graph.num_objects} objects"
        )
    objects = list(graph.objects)
    objects[position] = vocab.object_index(new_category)
    return SceneGraph(tuple(objects), graph.triplets)


def replace_relation(graph: SceneGraph, triplet_position: int, new_relation, vocab: Vocab) -> SceneGraph:
    if not 0 <= triplet_position < graph.num_triplets:
        raise DataValidationError(
            f"triplet position {triplet_position} out of range for {graph.num_triplets} triplets"
        )
    triplets = list(graph.triplets)
    s, _, o = triplets[triplet_position]
    triplets[triplet_position] = (s, vocab.relation_index(new_relation), o)
    return _check(SceneGraph(graph.objects, tuple(triplets)), vocab)


def add_triplet(graph: SceneGraph, i: int, r, j: int, vocab: Vocab) -> SceneGraph:
    rel = vocab.relation_index(r)
    return _check(SceneGraph(graph.objects, graph.triplets + ((i, rel, j),)), vocab)


def remove_triplet(graph: SceneGraph, position: int) -> SceneGraph:
    if not 0 <= position < graph.num_triplets:
        raise DataValidationError(
            f"triplet position {position} out of range for {graph.num_triplets} triplets"
        )
    return SceneGraph(graph.objects, graph.triplets[:position] + graph.triplets[position + 1 :])


# ---------------------------------------------------------------------------
# interchange format


def graph_to_document(
    graph: SceneGraph, vocab: Vocab, boxes=None, image: str | None = None
) -> dict:
    doc = {
        "objects": [vocab.object_names[c] for c in graph.objects],
        "triplets": [[s, vocab.relation_names[r], o] for s, r, o in graph.triplets],
    }
    if boxes is not None:
        doc["boxes"] = [[round(float(v), 6) for v in box] for box in np.asarray(boxes)]
    if image is not None:
        doc["image"] = str(image)
    return doc


def graph_from_document(doc: dict, vocab: Vocab):
    """Parse a scene document into ``(graph, boxes or None, image path or None)``."""
    if not isinstance(doc, dict) or "objects" not in doc or "triplets" not in doc:
        raise DataValidationError("scene document needs 'objects' and 'triplets'")
    try:
        triplets = [(int(s), r, int(o)) for s, r, o in doc["triplets"]]
    except (TypeError, ValueError) as exc:
        raise DataValidationError(f"malformed triplet list ({exc})") from exc
    graph = SceneGraph.from_names(doc["objects"], triplets, vocab)
    _check(graph, vocab)
    boxes = doc.get("boxes")
    if boxes is not None:
        boxes = np.asarray(boxes, dtype=np.float64)
        if boxes.shape != (graph.num_objects, 4):
            raise DataValidationError(
                f"boxes shape {boxes.shape} does not match {graph.num_objects} objects"
            )
    return graph, boxes, doc.get("image")


def _format(value, indent: int, level: int) -> str:
    if isinstance(value, dict):
        if not value:
            return "{}"
        pad = " " * (indent * (level + 1))
        items = [
            f"{pad}{json.dumps(str(k))}: {_format(value[k], indent, level + 1)}"
            for k in sorted(value)
        ]
        return "{\n" + ",\n".join(items) + "\n" + " " * (indent * level) + "}"
    if isinstance(value, (list, tuple)):
        if value and level == 1 and all(isinstance(v, (list, tuple)) for v in value):
            pad = " " * (indent * (level + 1))
            rows = [pad + _format(v, indent, level + 1) for v in value]
            return "[\n" + ",\n".join(rows) + "\n" + " " * (indent * level) + "]"
        return "[" + ", ".join(_format(v, indent, level + 1) for v in value) + "]"
    if isinstance(value, bool) or value is None:
        return json.dumps(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if not np.isfinite(value):
            raise ValueError("non-finite float in canonical document")
        text = f"{float(value):.6f}"
        return "0.000000" if text == "-0.000000" else text
    return json.dumps(str(value))


def dumps_canonical(doc, indent: int = 2) -> str:
    """Sorted keys, floats at 6 decimals, one row per line for nested lists."""
    return _format(doc, indent, 0) + "\n"


def read_graph_file(path: str | Path, vocab: Vocab):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise DataValidationError(f"{path}: malformed document ({exc})") from exc
    try:
        return graph_from_document(doc, vocab)
    except DataValidationError as exc:
        raise DataValidationError(f"{path}: {exc}") from exc


def write_graph_file(path: str | Path, graph: SceneGraph, vocab: Vocab, boxes=None, image=None) -> None:
    _check(graph, vocab)
    Path(path).write_text(dumps_canonical(graph_to_document(graph, vocab, boxes, image)))
