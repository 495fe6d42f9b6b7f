"""Masked contrastive pretraining of the scene-graph encoder.

Two objectives share the graph encoder:

* masked reconstruction: hide the boxes of the endpoint objects of randomly
  chosen triplets and reconstruct those pixels from the visible remainder plus
  per-triplet graph tokens;
* contrastive alignment: a pooled graph embedding must pick its own image out
  of the batch by inner product at a learnable temperature.

The total loss is ``masked + lam * contrastive``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from sgdiff.corpus import box_mask
from sgdiff.errors import DataValidationError, NumericError
from sgdiff.image_encoder import Attention, ImageEncoder, to_nchw
from sgdiff.scenegraph import GroundedScene
from sgdiff.sg_encoder import EmbeddingState, GraphBatch, SGEncoder, as_batch, collate_graphs, mlp


LR_SCHEDULES = ("constant", "cosine")


def lr_at(step: int, base: float, total: int, schedule: str = "constant", warmup: int = 0) -> float:
    """Learning rate for 0-based ``step``: linear warmup, then constant or cosine decay to 0."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if schedule == "constant":
        return base
    span = max(total - warmup, 1)
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step - warmup, span) / span))


@dataclass
class PretrainConfig:
    mask_ratio: float = 0.3
    lam: float = 0.1
    negatives_k: int | None = None  # None: every other image in the batch
    batch_size: int = 16
    lr: float = 5e-4
    steps: int = 100_000
    d_obj: int = 64
    d_rel: int = 64
    gcn_layers: int = 5
    embed_dim: int = 64
    patch_size: int = 8
    vit_dim: int = 64
    vit_depth: int = 2
    vit_heads: int = 4
    stem_channels: int = 0
    decoder_channels: int = 32
    tau_init: float = 0.07
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    normalize_embeddings: bool = False
    augment: bool = False
    use_masked: bool = True
    use_contrastive: bool = True
    normalize_masked: bool = True
    relation_arg_order: str = "object_first"
    checkpoint_every: int = 500
    log_every: int = 100

    def __post_init__(self):
        if not 0 < self.mask_ratio <= 1:
            raise ValueError("mask_ratio must lie in (0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.negatives_k is not None and self.negatives_k < 1:
            raise ValueError("negatives_k must be >= 1")
        if not (self.use_masked or self.use_contrastive):
            raise ValueError("enable at least one pretraining loss")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")


# ---------------------------------------------------------------------------
# masking


@dataclass
class MaskedSample:
    x_m: np.ndarray  # (H, W, 3), zero off the mask
    x_notm: np.ndarray  # (H, W, 3), zero on the mask
    mask: np.ndarray  # (H, W) bool
    chosen_triplets: np.ndarray


def sample_masked(scene: GroundedScene, mask_ratio: float, rng: np.random.Generator) -> MaskedSample:
    if not scene.has_boxes or scene.image is None:
        raise DataValidationError("masking needs a scene with boxes and an image")
    m = scene.graph.num_triplets
    if m == 0:
        raise DataValidationError("masking needs at least one triplet")
    count = min(m, math.ceil(mask_ratio * m - 1e-9))
    chosen = np.sort(rng.choice(m, size=count, replace=False))
    H, W, _ = scene.image.shape
    mask = np.zeros((H, W), dtype=bool)
    for e in chosen:
        s, _, o = scene.graph.triplets[e]
        mask |= box_mask(scene.boxes[s], H, W) | box_mask(scene.boxes[o], H, W)
    image = np.asarray(scene.image)
    x_m = np.where(mask[..., None], image, 0.0).astype(np.float32)
    x_notm = np.where(mask[..., None], 0.0, image).astype(np.float32)
    return MaskedSample(x_m, x_notm, mask, chosen)


# ---------------------------------------------------------------------------
# embeddings


class ProjectionHeads(nn.Module):
    """Object / relation token heads, the graph-level head and the temperature."""

    def __init__(self, d_obj: int, d_rel: int, d: int, tau_init: float = 0.07):
        super().__init__()
        self.f_om = mlp(d_obj, d, d)
        self.f_rm = mlp(d_rel, d, d)
        self.f_c = mlp(d_obj + d_rel, d, d)
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau_init)))
        self.d = d

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def triplet_parts(self, state: EmbeddingState, batch: GraphBatch):
        """``(f_om(h_subject), f_rm(h_rel), f_om(h_object))`` per triplet."""
        obj = self.f_om(state.h_obj)
        return obj[batch.subjects], self.f_rm(state.h_rel), obj[batch.targets]


def build_hsm(state: EmbeddingState, graph, heads: ProjectionHeads) -> torch.Tensor:
    """Per-triplet rows ``[f_om(h_i), f_rm(h_r), f_om(h_j)]``, shape ``(m, 3d)``."""
    batch = as_batch(graph)
    return torch.cat(heads.triplet_parts(state, batch), dim=-1)


def _segment_mean(values: torch.Tensor, segment: torch.Tensor, num: int) -> torch.Tensor:
    total = values.new_zeros(num, values.shape[-1]).index_add(0, segment, values)
    count = torch.bincount(segment, minlength=num).to(values.dtype).clamp(min=1)
    return total / count.unsqueeze(-1)


def build_hsc(state: EmbeddingState, graph, heads: ProjectionHeads) -> torch.Tensor:
    """Graph-level embedding from mean object and mean relation embeddings, ``(B, d)``."""
    batch = as_batch(graph)
    if torch.any(batch.object_counts() == 0):
        raise DataValidationError("graph-level embedding needs at least one object")
    obj_mean = _segment_mean(state.h_obj, batch.object_graph, batch.num_graphs)
    rel_mean = _segment_mean(state.h_rel, batch.triplet_graph, batch.num_graphs)
    return heads.f_c(torch.cat([obj_mean, rel_mean], dim=-1))


def pad_rows(rows: torch.Tensor, segment: torch.Tensor, num: int):
    """Scatter per-triplet rows into ``(num, max_len, D)`` plus a validity mask."""
    counts = torch.bincount(segment, minlength=num)
    max_len = max(int(counts.max()) if num else 0, 1)
    out = rows.new_zeros(num, max_len, rows.shape[-1])
    valid = torch.zeros(num, max_len, dtype=torch.bool)
    position = torch.zeros_like(segment)
    seen = torch.zeros(num, dtype=torch.long)
    for e, g in enumerate(segment.tolist()):
        position[e] = seen[g]
        seen[g] += 1
    out = out.index_put((segment, position), rows)
    valid[segment, position] = True
    return out, valid


# ---------------------------------------------------------------------------
# losses


def contrastive_loss(h_sc, h_pos, h_negs, tau) -> torch.Tensor:
    """InfoNCE with one positive and ``k`` negatives per graph, averaged over the batch.

    Shapes: ``h_sc`` and ``h_pos`` are ``(d,)`` or ``(B, d)``; ``h_negs`` is
    ``(k, d)`` or ``(B, k, d)``.
    """
    h_sc, h_pos, h_negs = (torch.as_tensor(v) for v in (h_sc, h_pos, h_negs))
    if h_sc.ndim == 1:
        h_sc, h_pos, h_negs = h_sc[None], h_pos[None], h_negs[None]
    if h_negs.shape[1] == 0:
        raise ValueError("contrastive loss needs at least one negative")
    tau = torch.as_tensor(tau, dtype=h_sc.dtype)
    if torch.any(tau <= 0):
        raise ValueError("temperature must be positive")
    pos = (h_sc * h_pos).sum(-1, keepdim=True)
    neg = torch.einsum("bd,bkd->bk", h_sc, h_negs)
    logits = torch.cat([pos, neg], dim=-1) / tau
    return (torch.logsumexp(logits, dim=-1) - logits[:, 0]).mean()


def in_batch_contrastive(h_sc: torch.Tensor, h_x: torch.Tensor, tau, negatives_k=None, rng=None):
    """Contrastive loss where row ``i`` of ``h_x`` is graph ``i``'s positive.

    With ``negatives_k`` set, each graph sees ``k`` negatives drawn uniformly
    without replacement from the other images; otherwise all of them.
    """
    B = h_sc.shape[0]
    if B < 2:
        raise DataValidationError("contrastive loss needs a batch of at least 2")
    if negatives_k is None or negatives_k >= B - 1:
        logits = h_sc @ h_x.T / tau
        return F.cross_entropy(logits, torch.arange(B))
    rng = rng or np.random.default_rng(0)
    idx = np.stack([rng.choice(np.delete(np.arange(B), i), negatives_k, replace=False) for i in range(B)])
    return contrastive_loss(h_sc, h_x, h_x[torch.as_tensor(idx)], tau)


def masked_reconstruction_loss(pred, x_m, mask, normalize: bool = True) -> torch.Tensor:
    """Squared error on the mask support, per sample, averaged over the batch.

    ``pred`` and ``x_m`` are ``(B, C, H, W)``; ``mask`` is ``(B, H, W)``.
    ``normalize`` divides each sample by its masked pixel count times channels.
    """
    mask = mask.to(pred.dtype).unsqueeze(1)
    counts = mask.sum(dim=(1, 2, 3))
    if torch.any(counts == 0):
        raise DataValidationError("masked loss needs a non-empty mask")
    err = (((x_m - pred) * mask) ** 2).sum(dim=(1, 2, 3))
    if normalize:
        err = err / (counts * pred.shape[1])
    return err.mean()


class MaskedDecoder(nn.Module):
    """Conv UNet over (visible image, mask) with graph tokens attended at the bottleneck."""

    def __init__(self, token_dim: int, channels: int = 32, heads: int = 4):
        super().__init__()
        c1, c2 = channels, 2 * channels
        self.inp = nn.Conv2d(4, c1, 3, padding=1)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.norm = nn.GroupNorm(8, c2)
        self.attn = Attention(c2, heads, kv_dim=token_dim)
        self.mid = nn.Conv2d(c2, c2, 3, padding=1)
        self.up2 = nn.Conv2d(2 * c2, c2, 3, padding=1)
        self.up1 = nn.Conv2d(c2 + c1, c1, 3, padding=1)
        self.out = nn.Conv2d(c1, 3, 3, padding=1)

    def forward(self, x_notm, mask, tokens, token_mask=None):
        act = F.silu
        h0 = act(self.inp(torch.cat([x_notm, mask.to(x_notm.dtype).unsqueeze(1)], dim=1)))
        h1 = act(self.down1(h0))
        h2 = act(self.down2(h1))
        B, C, H, W = h2.shape
        seq = self.norm(h2).flatten(2).transpose(1, 2)
        h2 = h2 + self.attn(seq, tokens, token_mask).transpose(1, 2).reshape(B, C, H, W)
        h2 = act(self.mid(h2))
        u = F.interpolate(h2, scale_factor=2, mode="nearest")
        u = act(self.up2(torch.cat([u, h1], dim=1)))
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = act(self.up1(torch.cat([u, h0], dim=1)))
        return self.out(u)


def masked_loss(decoder: MaskedDecoder, x_notm, mask, x_m, tokens, token_mask=None, normalize=True):
    pred = decoder(x_notm, mask, tokens, token_mask)
    return masked_reconstruction_loss(pred, x_m, mask, normalize)


# ---------------------------------------------------------------------------
# model and step


class PretrainModel(nn.Module):
    def __init__(self, num_objects: int, num_relations: int, image_size: int, cfg: PretrainConfig):
        super().__init__()
        self.cfg = cfg
        self.sg_encoder = SGEncoder(
            num_objects, num_relations, cfg.d_obj, cfg.d_rel, cfg.gcn_layers,
            relation_arg_order=cfg.relation_arg_order,
        )
        self.image_encoder = ImageEncoder(
            image_size, cfg.patch_size, cfg.vit_dim, cfg.vit_depth, cfg.vit_heads, cfg.embed_dim,
            cfg.stem_channels,
        )
        self.heads = ProjectionHeads(cfg.d_obj, cfg.d_rel, cfg.embed_dim, cfg.tau_init)
        self.decoder = MaskedDecoder(3 * cfg.embed_dim, cfg.decoder_channels)

    def _unit(self, h: torch.Tensor) -> torch.Tensor:
        return F.normalize(h, dim=-1) if self.cfg.normalize_embeddings else h

    def graph_embedding(self, graphs) -> torch.Tensor:
        """``h_s^c`` in the space compared against image embeddings."""
        batch = as_batch(graphs)
        return self._unit(build_hsc(self.sg_encoder(batch), batch, self.heads))

    def image_embedding(self, images: torch.Tensor) -> torch.Tensor:
        return self._unit(self.image_encoder(images))

    def losses(self, scenes: Sequence[GroundedScene], rng: np.random.Generator) -> dict:
        cfg = self.cfg
        if len(scenes) < 2 and cfg.use_contrastive:
            raise DataValidationError("pretraining batch needs at least 2 scenes")
        dtype = self.heads.log_tau.dtype
        batch = collate_graphs([s.graph for s in scenes])
        state = self.sg_encoder(batch)
        images = to_nchw(np.stack([s.image for s in scenes]), dtype)
        out = {}
        zero = images.new_zeros(())
        if cfg.use_masked:
            samples = [sample_masked(s, cfg.mask_ratio, rng) for s in scenes]
            x_notm = to_nchw(np.stack([s.x_notm for s in samples]), dtype)
            x_m = to_nchw(np.stack([s.x_m for s in samples]), dtype)
            mask = torch.as_tensor(np.stack([s.mask for s in samples]))
            tokens, valid = pad_rows(build_hsm(state, batch, self.heads), batch.triplet_graph, batch.num_graphs)
            out["masked"] = masked_loss(self.decoder, x_notm, mask, x_m, tokens, valid, cfg.normalize_masked)
        else:
            out["masked"] = zero
        if cfg.use_contrastive:
            h_sc = self._unit(build_hsc(state, batch, self.heads))
            h_x = self.image_embedding(images)
            out["contrastive"] = in_batch_contrastive(h_sc, h_x, self.heads.tau, cfg.negatives_k, rng)
        else:
            out["contrastive"] = zero
        if cfg.use_masked:
            out["total"] = out["masked"] + cfg.lam * out["contrastive"]
        else:
            out["total"] = out["contrastive"]
        return out


def pretrain_step(model: PretrainModel, optimizer, scenes, rng) -> dict:
    """One optimizer step on ``scenes``; returns the scalar losses and temperature."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    losses = model.losses(scenes, rng)
    total = losses["total"]
    if not torch.isfinite(total):
        raise NumericError(f"non-finite pretraining loss {float(total.detach())}")
    total.backward()
    optimizer.step()
    record = {k: float(v.detach()) for k, v in losses.items()}
    record["tau"] = float(model.heads.tau.detach())
    return record


@torch.no_grad()
def embed_pairs(model: PretrainModel, scenes: Sequence[GroundedScene], batch_size: int = 64):
    """Graph and image embeddings for paired scenes, as numpy arrays."""
    model.eval()
    dtype = model.heads.log_tau.dtype
    g, x = [], []
    for k in range(0, len(scenes), batch_size):
        chunk = scenes[k : k + batch_size]
        g.append(model.graph_embedding([s.graph for s in chunk]))
        x.append(model.image_embedding(to_nchw(np.stack([s.image for s in chunk]), dtype)))
    return torch.cat(g).numpy(), torch.cat(x).numpy()
