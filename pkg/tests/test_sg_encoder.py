import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import gradchecks
from sgdiff.scenegraph import SceneGraph
from sgdiff.sg_encoder import (
    EmbeddingState,
    SGEncoder,
    TripletConv,
    collate_graphs,
    encode,
    init_state,
    message_pass_step,
)

NUM_OBJ, NUM_REL = 5, 3


def make_encoder(seed=0, d=4, layers=2, **kw):
    torch.manual_seed(seed)
    return SGEncoder(NUM_OBJ, NUM_REL, d_obj=d, d_rel=d, num_layers=layers, **kw).double()


@st.composite
def graphs(draw, min_objects=1, max_objects=6):
    n = draw(st.integers(min_objects, max_objects))
    objects = tuple(draw(st.lists(st.integers(0, NUM_OBJ - 1), min_size=n, max_size=n)))
    candidates = [(i, r, j) for i in range(n) for j in range(n) if i != j for r in range(NUM_REL)]
    picks = draw(st.lists(st.sampled_from(candidates), unique=True, max_size=8)) if candidates else []
    return SceneGraph(objects, tuple(picks))


# --- init_state ----------------------------------------------------------------


def test_same_category_gives_identical_rows():
    enc = make_encoder()
    state = init_state(SceneGraph((2, 2, 1), ((0, 0, 1),)), enc)
    assert torch.equal(state.h_obj[0], state.h_obj[1])
    assert not torch.equal(state.h_obj[0], state.h_obj[2])


def test_empty_graph_shapes():
    enc = make_encoder(d=4)
    state = encode(SceneGraph(), enc)
    assert state.h_obj.shape == (0, 4)
    assert state.h_rel.shape == (0, 4)


def test_table_update_only_moves_that_category():
    enc = make_encoder()
    graph = SceneGraph((0, 1, 1, 3), ())
    before = init_state(graph, enc).h_obj.detach().clone()
    opt = torch.optim.SGD(enc.parameters(), lr=0.1)
    enc.object_table(torch.tensor([1])).sum().backward()
    opt.step()
    after = init_state(graph, enc).h_obj.detach()
    changed = ~torch.isclose(before, after).all(dim=1)
    assert changed.tolist() == [False, True, True, False]


# --- message_pass_step -----------------------------------------------------------


def _set_constant(layer: TripletConv, c: torch.Tensor):
    with torch.no_grad():
        for f in (layer.f_out, layer.f_in):
            f[2].weight.zero_()
            f[2].bias.copy_(c)


def test_constant_functions_map_connected_objects_to_constant():
    enc = make_encoder(layers=1)
    c = torch.tensor([0.5, -1.0, 2.0, 3.0], dtype=torch.float64)
    _set_constant(enc.layers[0], c)
    graph = SceneGraph((0, 1, 2), ((0, 1, 1),))
    state = init_state(graph, enc)
    new = message_pass_step(state, graph, enc.layers[0])
    assert torch.equal(new.h_obj[0], c)
    assert torch.equal(new.h_obj[1], c)
    assert torch.equal(new.h_obj[2], state.h_obj[2])


def test_isolated_object_is_unchanged_after_encode():
    enc = make_encoder(layers=3)
    graph = SceneGraph((0, 1, 4), ((0, 2, 1),))
    assert torch.equal(encode(graph, enc).h_obj[2], enc.object_table.weight[4])


def test_star_graph_matches_edge_by_edge_oracle():
    enc = make_encoder(seed=3, d=4, layers=1)
    layer = enc.layers[0]
    graph = SceneGraph((0, 1, 2, 3), ((0, 0, 1), (0, 1, 2), (0, 2, 3)))
    state = init_state(graph, enc)
    new = message_pass_step(state, graph, layer)
    h, r = state.h_obj, state.h_rel
    with torch.no_grad():
        center = sum(layer.f_out(torch.cat([h[0], r[e], h[j]])) for e, j in enumerate((1, 2, 3))) / 3
        assert torch.allclose(new.h_obj[0], center, atol=1e-12)
        for e, j in enumerate((1, 2, 3)):
            leaf = layer.f_in(torch.cat([h[0], r[e], h[j]]))
            assert torch.allclose(new.h_obj[j], leaf, atol=1e-12)
            rel = layer.f_rel(torch.cat([h[j], r[e], h[0]]))
            assert torch.allclose(new.h_rel[e], rel, atol=1e-12)


def test_subject_first_relation_order_is_available():
    enc = make_encoder(seed=3, layers=1, relation_arg_order="subject_first")
    graph = SceneGraph((0, 1), ((0, 0, 1),))
    state = init_state(graph, enc)
    new = message_pass_step(state, graph, enc.layers[0], "subject_first")
    with torch.no_grad():
        expect = enc.layers[0].f_rel(torch.cat([state.h_obj[0], state.h_rel[0], state.h_obj[1]]))
    assert torch.allclose(new.h_rel[0], expect, atol=1e-12)


def test_updates_are_synchronous():
    # a chain 0 -> 1 -> 2: after one step object 2 must not see object 0's new value
    enc = make_encoder(seed=1, layers=1)
    layer = enc.layers[0]
    graph = SceneGraph((0, 1, 2), ((0, 0, 1), (1, 0, 2)))
    state = init_state(graph, enc)
    new = message_pass_step(state, graph, layer)
    h, r = state.h_obj, state.h_rel
    with torch.no_grad():
        expect = layer.f_in(torch.cat([h[1], r[1], h[2]]))
    assert torch.allclose(new.h_obj[2], expect, atol=1e-12)


# --- encode ----------------------------------------------------------------------


def test_zero_layers_rejected():
    with pytest.raises(ValueError):
        SGEncoder(NUM_OBJ, NUM_REL, num_layers=0)


def test_one_layer_equals_one_step():
    enc = make_encoder(layers=1)
    graph = SceneGraph((0, 1, 2), ((0, 1, 1), (2, 0, 1)))
    a = encode(graph, enc)
    b = message_pass_step(init_state(graph, enc), graph, enc.layers[0])
    assert torch.equal(a.h_obj, b.h_obj) and torch.equal(a.h_rel, b.h_rel)


def test_reruns_are_bit_identical():
    enc = make_encoder(layers=3)
    graph = SceneGraph((0, 1, 2, 2), ((0, 1, 1), (2, 0, 1), (3, 2, 0)))
    a, b = encode(graph, enc), encode(graph, enc)
    assert torch.equal(a.h_obj, b.h_obj) and torch.equal(a.h_rel, b.h_rel)


def test_batched_encoding_matches_per_graph():
    enc = make_encoder(layers=2)
    gs = [SceneGraph((0, 1), ((0, 0, 1),)), SceneGraph((2,), ()), SceneGraph((3, 4, 0), ((2, 1, 0), (0, 2, 1)))]
    batched = encode(collate_graphs(gs), enc)
    rows = torch.cat([encode(g, enc).h_obj for g in gs])
    assert torch.allclose(batched.h_obj, rows, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(graphs(), st.randoms(use_true_random=False))
def test_triplet_order_invariance(graph, rnd):
    enc = make_encoder(layers=3)
    perm = list(range(graph.num_triplets))
    rnd.shuffle(perm)
    shuffled = SceneGraph(graph.objects, tuple(graph.triplets[p] for p in perm))
    a, b = encode(graph, enc), encode(shuffled, enc)
    assert torch.allclose(a.h_obj, b.h_obj, atol=1e-6, rtol=0)
    assert torch.allclose(a.h_rel[perm], b.h_rel, atol=1e-6, rtol=0)


@settings(max_examples=40, deadline=None)
@given(graphs(), st.randoms(use_true_random=False))
def test_object_permutation_equivariance(graph, rnd):
    enc = make_encoder(layers=3)
    n = graph.num_objects
    pi = list(range(n))
    rnd.shuffle(pi)  # new position of old object i is pi[i]
    objects = [0] * n
    for i, c in enumerate(graph.objects):
        objects[pi[i]] = c
    relabeled = SceneGraph(tuple(objects), tuple((pi[s], r, pi[o]) for s, r, o in graph.triplets))
    a, b = encode(graph, enc), encode(relabeled, enc)
    assert torch.allclose(a.h_obj, b.h_obj[pi], atol=1e-6, rtol=0)
    assert torch.allclose(a.h_rel, b.h_rel, atol=1e-6, rtol=0)


def test_outputs_finite_for_random_graphs():
    enc = SGEncoder(NUM_OBJ, NUM_REL)
    rng = np.random.default_rng(0)
    graph = SceneGraph(tuple(int(c) for c in rng.integers(0, NUM_OBJ, 6)), ((0, 1, 2), (3, 0, 4), (5, 2, 0)))
    state = encode(graph, enc)
    assert isinstance(state, EmbeddingState)
    assert torch.isfinite(state.h_obj).all() and torch.isfinite(state.h_rel).all()


def test_gradient_check():
    assert gradchecks.check_message_passing() < gradchecks.TOL
