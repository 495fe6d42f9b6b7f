"""Scene corpora: manifest loading, the synthetic shapes renderer, batching."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

from sgdiff.errors import DataValidationError
from sgdiff.scenegraph import (
    GroundedScene,
    SceneGraph,
    Vocab,
    read_graph_file,
    validate,
    write_graph_file,
)

SPLITS = ("train", "val", "test")
SHAPES = ("square", "circle", "triangle")
RELATIONS = ("left-of", "right-of", "above", "below", "inside")
DEFAULT_PALETTE = {
    "red": (230, 40, 40),
    "green": (40, 200, 60),
    "blue": (40, 80, 240),
    "yellow": (240, 220, 30),
}

# centers of a directional pair must differ by this much (normalized units)
RELATION_MARGIN = 0.3
_SIZE_RANGE = (0.18, 0.36)
_INSIDE_PROB = 0.15
_PLACEMENT_TRIES = 60


@dataclass(frozen=True)
class Corpus:
    split: str
    scenes: tuple[GroundedScene, ...]
    vocab: Vocab
    image_size: int | None = None
    source: dict = field(default_factory=dict, compare=False)

    def __len__(self):
        return len(self.scenes)

    def __getitem__(self, idx):
        return self.scenes[idx]

    @property
    def pretrainable(self) -> list[bool]:
        """Per-scene flag: boxes, an image and at least one triplet are present."""
        return [
            s.has_boxes and s.image is not None and s.graph.num_triplets > 0 for s in self.scenes
        ]

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.scenes])


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    num_scenes: int = 512
    image_size: int = 32
    max_objects: int = 5
    palette: Mapping[str, tuple[int, int, int]] = field(
        default_factory=lambda: dict(DEFAULT_PALETTE)
    )

    def __post_init__(self):
        if self.image_size not in (16, 32, 64):
            raise DataValidationError(f"image_size must be 16, 32 or 64, got {self.image_size}")
        if not 2 <= self.max_objects <= 5:
            raise DataValidationError(f"max_objects must lie in [2, 5], got {self.max_objects}")
        if self.num_scenes < 0:
            raise DataValidationError("num_scenes must be non-negative")
        if not self.palette:
            raise DataValidationError("palette must name at least one color")

    @property
    def vocab(self) -> Vocab:
        return synthetic_vocab(self.palette)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "num_scenes": self.num_scenes,
            "image_size": self.image_size,
            "max_objects": self.max_objects,
            "palette": {k: list(v) for k, v in self.palette.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        doc = dict(doc)
        if "palette" in doc:
            doc["palette"] = {k: tuple(int(c) for c in v) for k, v in doc["palette"].items()}
        return cls(**doc)


def synthetic_vocab(palette: Mapping[str, tuple] = DEFAULT_PALETTE) -> Vocab:
    names = tuple(f"{color} {shape}" for shape in SHAPES for color in palette)
    return Vocab(names, RELATIONS)


def category_parts(vocab: Vocab, category: int) -> tuple[str, str]:
    """Split a synthetic category into ``(color, shape)``."""
    color, shape = vocab.object_names[category].split(" ", 1)
    return color, shape


# ---------------------------------------------------------------------------
# geometry and rendering


def box_center(box) -> tuple[float, float]:
    return (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0


def relation_holds(relation: str, box_a, box_b, margin: float = RELATION_MARGIN) -> bool:
    """Geometric predicate for ``a <relation> b``; y grows downward."""
    (ax, ay), (bx, by) = box_center(box_a), box_center(box_b)
    if relation == "left-of":
        return ax + margin <= bx
    if relation == "right-of":
        return ax >= bx + margin
    if relation == "above":
        return ay + margin <= by
    if relation == "below":
        return ay >= by + margin
    if relation == "inside":
        return (
            box_a[0] >= box_b[0] and box_a[1] >= box_b[1]
            and box_a[2] <= box_b[2] and box_a[3] <= box_b[3]
        )
    raise ValueError(f"unknown relation {relation!r}")


def box_mask(box, height: int, width: int) -> np.ndarray:
    """Pixels whose centers fall inside ``[x0, x1) x [y0, y1)``."""
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    inx = (xs >= box[0]) & (xs < box[2])
    iny = (ys >= box[1]) & (ys < box[3])
    return iny[:, None] & inx[None, :]


def shape_mask(shape: str, box, size: int) -> np.ndarray:
    xs = (np.arange(size) + 0.5) / size
    ys = (np.arange(size) + 0.5) / size
    X, Y = np.meshgrid(xs, ys)
    x0, y0, x1, y1 = box
    inside = (X >= x0) & (X < x1) & (Y >= y0) & (Y < y1)
    if shape == "square":
        return inside
    u = (X - x0) / (x1 - x0)
    v = (Y - y0) / (y1 - y0)
    if shape == "circle":
        return inside & ((u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25)
    if shape == "triangle":
        return inside & (np.abs(u - 0.5) <= 0.5 * v)
    raise ValueError(f"unknown shape {shape!r}")


def render(graph: SceneGraph, boxes, vocab: Vocab, palette: Mapping, size: int) -> np.ndarray:
    """Paint shapes onto a black canvas, largest boxes first."""
    canvas = np.zeros((size, size, 3), dtype=np.float32)
    areas = [(b[2] - b[0]) * (b[3] - b[1]) for b in boxes]
    for idx in sorted(range(len(boxes)), key=lambda k: (-areas[k], k)):
        color, shape = category_parts(vocab, graph.objects[idx])
        canvas[shape_mask(shape, boxes[idx], size)] = np.asarray(palette[color], np.float32) / 255.0
    return canvas


def _overlaps(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _sample_layout(rng: np.random.Generator, n: int, min_size: float):
    """Boxes plus, per object, the index of its container (or -1)."""
    boxes, container = [], []
    for k in range(n):
        for _ in range(_PLACEMENT_TRIES):
            hosts = [j for j in range(k) if container[j] < 0 and
                     min(boxes[j][2] - boxes[j][0], boxes[j][3] - boxes[j][1]) >= 2.5 * min_size]
            if hosts and rng.random() < _INSIDE_PROB:
                j = hosts[int(rng.integers(len(hosts)))]
                hx0, hy0, hx1, hy1 = boxes[j]
                w = rng.uniform(min_size, 0.5 * (hx1 - hx0))
                h = rng.uniform(min_size, 0.5 * (hy1 - hy0))
                x0 = rng.uniform(hx0, hx1 - w)
                y0 = rng.uniform(hy0, hy1 - h)
                box = (x0, y0, x0 + w, y0 + h)
                clash = any(_overlaps(box, boxes[m]) for m in range(k) if container[m] == j)
                parent = j
            else:
                w, h = rng.uniform(*_SIZE_RANGE, size=2)
                x0, y0 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
                box = (x0, y0, x0 + w, y0 + h)
                clash = any(_overlaps(box, b) for b in boxes)
                parent = -1
            if not clash:
                boxes.append(tuple(round(float(v), 6) for v in box))
                container.append(parent)
                break
        else:
            return None
    return boxes, container


def _sample_triplets(rng: np.random.Generator, boxes, container):
    """One triplet linking each object to an earlier one, geometrically true."""
    rel_index = {r: i for i, r in enumerate(RELATIONS)}
    triplets = []
    for k in range(1, len(boxes)):
        if container[k] >= 0:
            triplets.append((k, rel_index["inside"], container[k]))
            continue
        options = []
        for j in range(k):
            for subj, obj in ((k, j), (j, k)):
                for rel in RELATIONS[:4]:
                    if relation_holds(rel, boxes[subj], boxes[obj]):
                        options.append((subj, rel_index[rel], obj))
        if not options:
            return None
        triplets.append(options[int(rng.integers(len(options)))])
    return triplets


def synth_scene(spec: SynthSpec, rng: np.random.Generator, vocab: Vocab | None = None) -> GroundedScene:
    vocab = vocab or spec.vocab
    min_size = 3.0 / spec.image_size
    while True:
        n = int(rng.integers(2, spec.max_objects + 1))
        objects = rng.integers(0, vocab.num_objects, size=n)
        layout = _sample_layout(rng, n, min_size)
        if layout is None:
            continue
        boxes, container = layout
        n_colors = len(spec.palette)
        for k, host in enumerate(container):
            # an inner shape painted in its host's color would be invisible
            if host >= 0 and objects[k] % n_colors == objects[host] % n_colors:
                shift = 1 + int(rng.integers(n_colors - 1)) if n_colors > 1 else 0
                objects[k] = objects[k] - objects[k] % n_colors + (objects[k] + shift) % n_colors
        triplets = _sample_triplets(rng, boxes, container)
        if triplets is None:
            continue
        graph = SceneGraph(tuple(objects), tuple(triplets))
        image = render(graph, boxes, vocab, spec.palette, spec.image_size)
        return GroundedScene(graph, np.asarray(boxes), image)


def _split_id(split: str) -> int:
    if split not in SPLITS:
        raise DataValidationError(f"unknown split {split!r}")
    return SPLITS.index(split)


def generate_synthetic(spec: SynthSpec, split: str = "train") -> Corpus:
    """Deterministic in ``(spec, split)``; scene ``i`` has its own rng stream."""
    vocab = spec.vocab
    sid = _split_id(split)
    scenes = tuple(
        synth_scene(spec, np.random.default_rng([spec.seed, sid, i]), vocab)
        for i in range(spec.num_scenes)
    )
    return Corpus(split, scenes, vocab, spec.image_size, {"synthetic": spec.to_dict()})


def layout_for_graph(graph: SceneGraph, vocab: Vocab, rng: np.random.Generator, tries: int = 500):
    """Sample non-overlapping boxes that satisfy every triplet of ``graph``."""
    rel_names = vocab.relation_names
    for _ in range(tries):
        boxes = []
        ok = True
        for _k in range(graph.num_objects):
            for _ in range(_PLACEMENT_TRIES):
                w, h = rng.uniform(*_SIZE_RANGE, size=2)
                x0, y0 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
                box = (x0, y0, x0 + w, y0 + h)
                if not any(_overlaps(box, b) for b in boxes):
                    boxes.append(box)
                    break
            else:
                ok = False
                break
        if ok and all(
            rel_names[r] != "inside" and relation_holds(rel_names[r], boxes[s], boxes[o])
            for s, r, o in graph.triplets
        ):
            return np.asarray(boxes)
    raise DataValidationError("could not place graph; use directional relations only")


# ---------------------------------------------------------------------------
# manifests


_MIRRORED = {"left-of": "right-of", "right-of": "left-of"}


def augment_scene(scene: GroundedScene, vocab: Vocab, rng: np.random.Generator,
                  palette: Mapping[str, tuple] = DEFAULT_PALETTE, recolor: bool = True) -> GroundedScene:
    """Label-consistent random view of a rendered synthetic scene.

    Permutes palette colors (pixels and categories together) and, with
    probability 1/2, mirrors the image horizontally, swapping left-of and
    right-of. Graphs stay valid and true of the new image.
    """
    names = list(palette)
    perm = rng.permutation(len(names))
    flip = bool(rng.random() < 0.5)
    image = np.array(scene.image, dtype=np.float32)
    objects = list(scene.graph.objects)
    if recolor:
        colors = np.asarray([palette[n] for n in names], dtype=np.float32) / 255.0
        out = image.copy()
        for c in range(len(names)):
            hit = np.all(np.abs(image - colors[c]) < 1e-3, axis=-1)
            out[hit] = colors[perm[c]]
        image = out
        for k, cat in enumerate(objects):
            color, shape = category_parts(vocab, cat)
            objects[k] = vocab.object_index(f"{names[perm[names.index(color)]]} {shape}")
    triplets = list(scene.graph.triplets)
    boxes = np.array(scene.boxes, dtype=np.float64)
    if flip:
        image = image[:, ::-1]
        boxes = np.stack([1 - boxes[:, 2], boxes[:, 1], 1 - boxes[:, 0], boxes[:, 3]], axis=1)
        swap = {vocab.relation_index(a): vocab.relation_index(b)
                for a, b in _MIRRORED.items() if a in vocab.relation_names and b in vocab.relation_names}
        triplets = [(s, swap.get(r, r), o) for s, r, o in triplets]
    return GroundedScene(SceneGraph(tuple(objects), tuple(triplets)), boxes,
                         np.ascontiguousarray(image), scene.image_path, scene.meta)


def read_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataValidationError(f"{path}: unreadable image ({exc})") from exc


def write_image(path: str | Path, image: np.ndarray) -> None:
    data = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG", optimize=False)


def read_manifest(path: str | Path) -> tuple[dict, list[str]]:
    header, entries = {}, []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataValidationError(f"{path}: unreadable manifest ({exc})") from exc
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if sep and key.strip() in ("vocab", "split"):
            header[key.strip()] = value.strip()
        else:
            entries.append(line)
    if "vocab" not in header:
        raise DataValidationError(f"{path}: manifest header must name a vocab file")
    header.setdefault("split", "train")
    return header, entries


def load_annotations(manifest_path: str | Path) -> Corpus:
    """Load every scene document listed in a manifest.

    Scenes without boxes are kept (usable for generation) and show up as
    ``False`` in :attr:`Corpus.pretrainable`.
    """
    manifest_path = Path(manifest_path)
    header, entries = read_manifest(manifest_path)
    root = manifest_path.parent
    vocab = Vocab.load(root / header["vocab"])
    scenes = []
    size = None
    for entry in entries:
        doc_path = root / entry
        graph, boxes, image_ref = read_graph_file(doc_path, vocab)
        image = None
        if image_ref is not None:
            image = read_image(doc_path.parent / image_ref)
            if image.shape[0] != image.shape[1]:
                raise DataValidationError(f"{doc_path}: image must be square")
            if size is None:
                size = image.shape[0]
            elif image.shape[0] != size:
                raise DataValidationError(f"{doc_path}: image size {image.shape[0]} != {size}")
        scenes.append(GroundedScene(graph, boxes, image, image_ref))
    return Corpus(header["split"], tuple(scenes), vocab, size, {"manifest": str(manifest_path)})


def write_corpus(corpus: Corpus, out_dir: str | Path, name: str | None = None) -> Path:
    """Write vocab, scene documents, PNG images and a manifest; returns the manifest path."""
    out = Path(out_dir)
    name = name or corpus.split
    (out / name).mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(out / "vocab.json")
    lines = ["vocab=vocab.json", f"split={corpus.split}"]
    for i, scene in enumerate(corpus.scenes):
        problems = validate(scene.graph, corpus.vocab)
        if problems:
            raise DataValidationError(f"scene {i}: {problems[0]}")
        image_ref = None
        if scene.image is not None:
            image_ref = f"{i:06d}.png"
            write_image(out / name / image_ref, scene.image)
        write_graph_file(out / name / f"{i:06d}.json", scene.graph, corpus.vocab, scene.boxes, image_ref)
        lines.append(f"{name}/{i:06d}.json")
    manifest = out / f"{name}.manifest"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# batching


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(corpus, batch_size: int, seed: int, epoch: int) -> list[list]:
    """Shuffled batches for one epoch; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(corpus)
    if n == 0:
        raise DataValidationError("cannot batch an empty corpus")
    order = epoch_permutation(n, seed, epoch)
    return [[corpus[int(i)] for i in order[k : k + batch_size]] for k in range(0, n, batch_size)]


def step_batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of the ``step``-th batch when epochs are cycled back to back."""
    if n == 0:
        raise DataValidationError("cannot batch an empty corpus")
    per_epoch = -(-n // batch_size)
    epoch, k = divmod(step, per_epoch)
    return epoch_permutation(n, seed, epoch)[k * batch_size : (k + 1) * batch_size]
