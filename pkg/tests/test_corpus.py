import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgdiff import corpus as C
from sgdiff.errors import DataValidationError
from sgdiff.scenegraph import SceneGraph, validate


@pytest.fixture(scope="module")
def small():
    return C.generate_synthetic(C.SynthSpec(seed=3, num_scenes=64))


def _centers(box):
    return (box[0] + box[2]) / 2, (box[1] + box[3]) / 2


def _predicate(rel, a, b):
    """Independent statement of each synthetic relation (y grows downward)."""
    (ax, ay), (bx, by) = _centers(a), _centers(b)
    return {
        "left-of": ax < bx,
        "right-of": ax > bx,
        "above": ay < by,
        "below": ay > by,
        "inside": a[0] >= b[0] and a[1] >= b[1] and a[2] <= b[2] and a[3] <= b[3],
    }[rel]


def test_synth_spec_bounds():
    with pytest.raises(DataValidationError):
        C.SynthSpec(max_objects=1)
    with pytest.raises(DataValidationError):
        C.SynthSpec(max_objects=6)
    with pytest.raises(DataValidationError):
        C.SynthSpec(image_size=48)


def test_generation_is_deterministic():
    spec = C.SynthSpec(seed=11, num_scenes=16)
    a, b = C.generate_synthetic(spec), C.generate_synthetic(spec)
    assert a.scenes == b.scenes
    assert C.generate_synthetic(C.SynthSpec(seed=12, num_scenes=16)).scenes != a.scenes


def test_sixty_four_scenes_all_valid(small):
    assert len(small) == 64
    for scene in small.scenes:
        assert validate(scene.graph, small.vocab) == []
        assert 2 <= scene.graph.num_objects <= 5
        assert scene.image.shape == (32, 32, 3)
        assert len(scene.boxes) == scene.graph.num_objects


def test_relations_hold_for_every_scene():
    corpus = C.generate_synthetic(C.SynthSpec(seed=0, num_scenes=512))
    names = corpus.vocab.relation_names
    for scene in corpus.scenes:
        for s, r, o in scene.graph.triplets:
            assert _predicate(names[r], scene.boxes[s], scene.boxes[o])


def test_scene_prefixes_do_not_depend_on_corpus_size():
    a = C.generate_synthetic(C.SynthSpec(seed=5, num_scenes=8))
    b = C.generate_synthetic(C.SynthSpec(seed=5, num_scenes=20))
    assert a.scenes == b.scenes[:8]


def test_splits_are_distinct():
    spec = C.SynthSpec(seed=0, num_scenes=8)
    assert C.generate_synthetic(spec, "train").scenes != C.generate_synthetic(spec, "test").scenes


def test_render_is_pure_function_of_graph_and_boxes(small):
    for scene in small.scenes[:10]:
        again = C.render(scene.graph, scene.boxes, small.vocab, C.DEFAULT_PALETTE, 32)
        assert np.array_equal(again, scene.image)


def test_render_paints_only_palette_colors(small):
    colors = {tuple(np.float32(np.asarray(c) / 255.0)) for c in C.DEFAULT_PALETTE.values()} | {(0.0, 0.0, 0.0)}
    for scene in small.scenes[:10]:
        assert {tuple(p) for p in scene.image.reshape(-1, 3)} <= colors


def test_box_mask_counts():
    mask = C.box_mask((0.0, 0.0, 0.5, 0.25), 32, 32)
    assert mask.sum() == 16 * 8


def test_category_layout(small):
    vocab = small.vocab
    assert vocab.num_objects == len(C.SHAPES) * len(C.DEFAULT_PALETTE)
    assert C.category_parts(vocab, vocab.object_index("green circle")) == ("green", "circle")


# --- batching ----------------------------------------------------------------


def test_batch_sizes_keep_partial(small):
    ten = C.Corpus("train", small.scenes[:10], small.vocab)
    assert [len(b) for b in C.batch_iter(ten, 4, seed=0, epoch=0)] == [4, 4, 2]


def test_batch_order_pure_in_seed_and_epoch():
    assert np.array_equal(C.epoch_permutation(10, 1, 2), C.epoch_permutation(10, 1, 2))
    perms = {tuple(C.epoch_permutation(10, 1, e)) for e in range(100)}
    assert len(perms) >= 95


def test_batch_rejects_empty(small):
    with pytest.raises(DataValidationError):
        C.batch_iter(C.Corpus("train", (), small.vocab), 4, 0, 0)
    with pytest.raises(ValueError):
        C.batch_iter(small, 0, 0, 0)


@given(st.integers(1, 40), st.integers(1, 9), st.integers(0, 50))
def test_step_batches_cover_each_epoch(n, bs, seed):
    per_epoch = math.ceil(n / bs)
    seen = np.concatenate([C.step_batch_indices(n, bs, seed, s) for s in range(per_epoch)])
    assert sorted(seen.tolist()) == list(range(n))


# --- files -------------------------------------------------------------------


def test_write_then_load_round_trip(tmp_path, small):
    sub = C.Corpus("val", small.scenes[:3], small.vocab, 32)
    manifest = C.write_corpus(sub, tmp_path)
    loaded = C.load_annotations(manifest)
    assert len(loaded) == 3 and loaded.split == "val" and loaded.vocab == small.vocab
    for a, b in zip(loaded.scenes, sub.scenes):
        assert a.graph == b.graph
        np.testing.assert_allclose(a.boxes, b.boxes, atol=5e-7)
        np.testing.assert_array_equal(a.image, b.image)
    assert all(loaded.pretrainable)


def test_empty_manifest_loads(tmp_path, small):
    small.vocab.save(tmp_path / "vocab.json")
    (tmp_path / "x.manifest").write_text("vocab=vocab.json\nsplit=test\n")
    assert len(C.load_annotations(tmp_path / "x.manifest")) == 0


def test_dangling_index_names_the_file(tmp_path, small):
    small.vocab.save(tmp_path / "vocab.json")
    (tmp_path / "bad.json").write_text('{"objects": ["red square"], "triplets": [[0, "left-of", 4]]}')
    (tmp_path / "m.manifest").write_text("vocab=vocab.json\nsplit=train\nbad.json\n")
    with pytest.raises(DataValidationError, match="bad.json"):
        C.load_annotations(tmp_path / "m.manifest")


def test_unknown_category_and_unreadable_image(tmp_path, small):
    small.vocab.save(tmp_path / "vocab.json")
    (tmp_path / "a.json").write_text('{"objects": ["pink blob"], "triplets": []}')
    (tmp_path / "b.json").write_text('{"objects": ["red square"], "triplets": [], "image": "missing.png"}')
    for name in ("a.json", "b.json"):
        (tmp_path / "m.manifest").write_text(f"vocab=vocab.json\n{name}\n")
        with pytest.raises(DataValidationError):
            C.load_annotations(tmp_path / "m.manifest")


def test_box_free_scene_flagged_not_pretrainable(tmp_path, small):
    small.vocab.save(tmp_path / "vocab.json")
    (tmp_path / "a.json").write_text('{"objects": ["red square", "blue circle"], "triplets": [[0, "left-of", 1]]}')
    (tmp_path / "m.manifest").write_text("vocab=vocab.json\na.json\n")
    corpus = C.load_annotations(tmp_path / "m.manifest")
    assert corpus.pretrainable == [False]


# --- augmentation ------------------------------------------------------------


def test_augmentation_keeps_graph_true(small):
    rng = np.random.default_rng(0)
    names = small.vocab.relation_names
    for scene in small.scenes:
        aug = C.augment_scene(scene, small.vocab, rng)
        assert validate(aug.graph, small.vocab) == []
        for s, r, o in aug.graph.triplets:
            assert _predicate(names[r], aug.boxes[s], aug.boxes[o])
        again = C.render(aug.graph, aug.boxes, small.vocab, C.DEFAULT_PALETTE, 32)
        assert np.abs(again - aug.image).max() < 1e-6


def test_layout_for_graph_satisfies_directional_relations(small):
    vocab = small.vocab
    g = SceneGraph((0, 5, 9), ((0, vocab.relation_index("left-of"), 1), (2, vocab.relation_index("below"), 0)))
    boxes = C.layout_for_graph(g, vocab, np.random.default_rng(0))
    assert C.relation_holds("left-of", boxes[0], boxes[1]) and C.relation_holds("below", boxes[2], boxes[0])
