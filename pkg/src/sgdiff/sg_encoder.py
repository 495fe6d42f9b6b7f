"""Triplet message-passing encoder for scene graphs.

Each layer updates every object with the mean of its outgoing and incoming
edge messages and every relation from its endpoint pair, all read from the
previous layer's state.  Graphs are batched as a disjoint union.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from sgdiff.scenegraph import SceneGraph

RELATION_ARG_ORDERS = ("object_first", "subject_first")


@dataclass
class GraphBatch:
    """Disjoint union of graphs with global object indices."""

    objects: torch.Tensor  # (n,) category ids
    triplets: torch.Tensor  # (m, 3) global subject, relation id, global object
    object_graph: torch.Tensor  # (n,) graph id per object
    triplet_graph: torch.Tensor  # (m,) graph id per triplet
    num_graphs: int

    @property
    def subjects(self) -> torch.Tensor:
        return self.triplets[:, 0]

    @property
    def relations(self) -> torch.Tensor:
        return self.triplets[:, 1]

    @property
    def targets(self) -> torch.Tensor:
        return self.triplets[:, 2]

    def triplet_counts(self) -> torch.Tensor:
        return torch.bincount(self.triplet_graph, minlength=self.num_graphs)

    def object_counts(self) -> torch.Tensor:
        return torch.bincount(self.object_graph, minlength=self.num_graphs)


def collate_graphs(graphs: Sequence[SceneGraph]) -> GraphBatch:
    objects, triplets, obj_gid, trip_gid = [], [], [], []
    offset = 0
    for g, graph in enumerate(graphs):
        objects.extend(graph.objects)
        obj_gid.extend([g] * graph.num_objects)
        triplets.extend((s + offset, r, o + offset) for s, r, o in graph.triplets)
        trip_gid.extend([g] * graph.num_triplets)
        offset += graph.num_objects
    return GraphBatch(
        torch.tensor(objects, dtype=torch.long),
        torch.tensor(triplets, dtype=torch.long).reshape(-1, 3),
        torch.tensor(obj_gid, dtype=torch.long),
        torch.tensor(trip_gid, dtype=torch.long),
        len(graphs),
    )


def as_batch(graph) -> GraphBatch:
    if isinstance(graph, GraphBatch):
        return graph
    if isinstance(graph, SceneGraph):
        return collate_graphs([graph])
    return collate_graphs(list(graph))


@dataclass
class EmbeddingState:
    h_obj: torch.Tensor  # (n, d_obj)
    h_rel: torch.Tensor  # (m, d_rel)


def mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out))


class TripletConv(nn.Module):
    """One message-passing layer: ``f_out``, ``f_in`` and ``f_rel``."""

    def __init__(self, d_obj: int, d_rel: int, d_hidden: int):
        super().__init__()
        d_in = 2 * d_obj + d_rel
        self.f_out = mlp(d_in, d_hidden, d_obj)
        self.f_in = mlp(d_in, d_hidden, d_obj)
        self.f_rel = mlp(d_in, d_hidden, d_rel)


def message_pass_step(
    state: EmbeddingState, graph, layer: TripletConv, relation_arg_order: str = "object_first"
) -> EmbeddingState:
    batch = as_batch(graph)
    h_obj, h_rel = state.h_obj, state.h_rel
    if batch.triplets.shape[0] == 0:
        return EmbeddingState(h_obj, h_rel)
    s, o = batch.subjects, batch.targets
    forward_triple = torch.cat([h_obj[s], h_rel, h_obj[o]], dim=-1)
    pooled = torch.zeros_like(h_obj)
    pooled = pooled.index_add(0, s, layer.f_out(forward_triple))
    pooled = pooled.index_add(0, o, layer.f_in(forward_triple))
    count = torch.bincount(s, minlength=h_obj.shape[0]) + torch.bincount(o, minlength=h_obj.shape[0])
    count = count.to(h_obj.dtype).unsqueeze(-1)
    new_obj = torch.where(count > 0, pooled / count.clamp(min=1), h_obj)
    if relation_arg_order == "object_first":
        rel_triple = torch.cat([h_obj[o], h_rel, h_obj[s]], dim=-1)
    else:
        rel_triple = forward_triple
    return EmbeddingState(new_obj, layer.f_rel(rel_triple))


class SGEncoder(nn.Module):
    """Category embedding tables followed by ``num_layers`` triplet convolutions.

    ``relation_arg_order="object_first"`` feeds ``f_rel`` the endpoints in
    (object, relation, subject) order; ``"subject_first"`` uses the same order
    as the object messages.
    """

    def __init__(
        self,
        num_objects: int,
        num_relations: int,
        d_obj: int = 64,
        d_rel: int = 64,
        num_layers: int = 5,
        d_hidden: int | None = None,
        relation_arg_order: str = "object_first",
    ):
        super().__init__()
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if relation_arg_order not in RELATION_ARG_ORDERS:
            raise ValueError(f"relation_arg_order must be one of {RELATION_ARG_ORDERS}")
        self.d_obj, self.d_rel = d_obj, d_rel
        self.relation_arg_order = relation_arg_order
        self.object_table = nn.Embedding(num_objects, d_obj)
        self.relation_table = nn.Embedding(num_relations, d_rel)
        d_hidden = d_hidden or max(d_obj, d_rel)
        self.layers = nn.ModuleList(TripletConv(d_obj, d_rel, d_hidden) for _ in range(num_layers))

    def init_state(self, graph) -> EmbeddingState:
        batch = as_batch(graph)
        return EmbeddingState(self.object_table(batch.objects), self.relation_table(batch.relations))

    def forward(self, graph) -> EmbeddingState:
        batch = as_batch(graph)
        state = self.init_state(batch)
        for layer in self.layers:
            state = message_pass_step(state, batch, layer, self.relation_arg_order)
        return state


def init_state(graph, params: SGEncoder) -> EmbeddingState:
    return params.init_state(graph)


def encode(graph, params: SGEncoder) -> EmbeddingState:
    return params(graph)
