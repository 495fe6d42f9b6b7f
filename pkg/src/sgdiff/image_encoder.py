"""Small ViT producing one global embedding per image."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn


def to_nchw(images, dtype=torch.float32) -> torch.Tensor:
    """``(H, W, 3)`` or ``(B, H, W, 3)`` arrays in [0, 1] -> ``(B, 3, H, W)`` tensor."""
    x = torch.as_tensor(np.asarray(images), dtype=dtype)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return x.permute(0, 3, 1, 2).contiguous()


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(kv_dim, dim)
        self.to_v = nn.Linear(kv_dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, context=None, key_mask=None):
        context = x if context is None else context
        B, L, D = x.shape
        h = self.heads

        def split(t):
            return t.reshape(B, t.shape[1], h, D // h).transpose(1, 2)

        q, k, v = split(self.to_q(x)), split(self.to_k(context)), split(self.to_v(context))
        logits = q @ k.transpose(-1, -2) / math.sqrt(D // h)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = logits.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    """Patch embedding, learned readout token, pre-norm transformer, projection.

    ``stem_channels > 0`` swaps the single patchify conv for a small conv stem.
    """

    def __init__(
        self,
        image_size: int = 32,
        patch_size: int = 8,
        dim: int = 64,
        depth: int = 2,
        heads: int = 4,
        out_dim: int = 64,
        stem_channels: int = 0,
    ):
        super().__init__()
        if image_size % patch_size:
            raise ValueError(f"image size {image_size} not divisible by patch {patch_size}")
        self.image_size, self.patch_size = image_size, patch_size
        self.num_patches = (image_size // patch_size) ** 2
        if stem_channels:
            # a 3x3 conv before patchifying gives the tokens some local context
            if patch_size < 2 or patch_size % 2:
                raise ValueError("a conv stem needs an even patch size")
            half = patch_size // 2
            self.patch_embed = nn.Sequential(
                nn.Conv2d(3, stem_channels, 3, padding=1), nn.GELU(),
                nn.Conv2d(stem_channels, dim, half, stride=half), nn.GELU(),
                nn.Conv2d(dim, dim, 2, stride=2),
            )
        else:
            self.patch_embed = nn.Conv2d(3, dim, patch_size, stride=patch_size)
        self.readout = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos = nn.Parameter(torch.randn(1, self.num_patches + 1, dim) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, out_dim)
        self.out_dim = out_dim

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.image_size, self.image_size) or x.shape[1] != 3:
            raise ValueError(
                f"expected (B, 3, {self.image_size}, {self.image_size}) images, got {tuple(x.shape)}"
            )
        patches = self.patch_embed(x).flatten(2).transpose(1, 2)
        tokens = torch.cat([self.readout.expand(x.shape[0], -1, -1), patches], dim=1)
        return tokens + self.pos

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.tokens(x)
        for block in self.blocks:
            h = block(h)
        return self.proj(self.norm(h[:, 0]))


def encode_image(x, params: ImageEncoder) -> torch.Tensor:
    """Embedding ``h_x`` for one ``H x W x 3`` image (or a batch)."""
    single = not torch.is_tensor(x) and np.asarray(x).ndim == 3
    if not torch.is_tensor(x):
        x = to_nchw(x, dtype=next(params.parameters()).dtype)
    out = params(x)
    return out[0] if single else out
