"""Scene-graph conditioned latent DDPM.

Time indices are 1-based throughout (``t = 1 .. T``), matching the forward
kernel ``q(z_t | z_{t-1}) = N(sqrt(alpha_t) z_{t-1}, (1 - alpha_t) I)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from sgdiff.errors import DataValidationError, NumericError
from sgdiff.pretrain import LR_SCHEDULES, ProjectionHeads, build_hsc, pad_rows
from sgdiff.sg_encoder import EmbeddingState, SGEncoder, as_batch

MODES = ("cross_attention", "time_concat")


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    mode: str = "cross_attention"
    base_channels: int = 64
    channel_mult: tuple[int, ...] = (1, 2)
    num_res_blocks: int = 1
    mid_blocks: int = 2
    coord_channels: bool = False  # append fixed x/y coordinate planes to the UNet input
    mid_attention: bool = False  # cross-attention after every middle block as well
    attn_dim: int = 64
    cond_dim: int = 64
    psi_hidden: int = 128
    lr: float = 1e-6
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    batch_size: int = 16
    steps: int = 700_000
    finetune_encoder: bool = False
    sample_latents: bool = True  # False: train on posterior means
    augment_copies: int = 0  # extra label-consistent views of each training scene
    checkpoint_every: int = 1000
    log_every: int = 100

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.augment_copies < 0:
            raise ValueError("augment_copies must be >= 0")
        self.channel_mult = tuple(int(m) for m in self.channel_mult)


# ---------------------------------------------------------------------------
# schedule and forward process


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - betas))

    @property
    def T(self) -> int:
        return len(self.betas)

    def at(self, name: str, t, like: torch.Tensor) -> torch.Tensor:
        """Schedule values at 1-based ``t`` broadcast against ``like``."""
        values = torch.as_tensor(getattr(self, name), dtype=like.dtype)
        t = torch.as_tensor(t, dtype=torch.long)
        out = values[t - 1]
        return out.reshape(out.shape + (1,) * (like.ndim - out.ndim))


def make_schedule(T: int, beta_start: float, beta_end: float, max_final_alpha_bar: float | None = 1e-3) -> NoiseSchedule:
    """Linear betas; rejects schedules that do not end near pure noise."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    schedule = NoiseSchedule(np.linspace(beta_start, beta_end, T))
    if np.any(np.diff(schedule.alpha_bar) >= 0):
        raise ValueError("alpha_bar must be strictly decreasing")
    if max_final_alpha_bar is not None and schedule.alpha_bar[-1] >= max_final_alpha_bar:
        raise ValueError(
            f"final alpha_bar {schedule.alpha_bar[-1]:.3g} >= {max_final_alpha_bar}; "
            "raise T or beta_end"
        )
    return schedule


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"t must lie in [1, {schedule.T}]")
    ab = schedule.at("alpha_bar", t, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


# ---------------------------------------------------------------------------
# conditioning


def build_hsum(state: EmbeddingState, graph, heads: ProjectionHeads, h_sc: torch.Tensor | None = None) -> torch.Tensor:
    """Per-triplet sum of subject, relation and object tokens plus the graph embedding."""
    batch = as_batch(graph)
    if batch.triplets.shape[0] == 0:
        raise DataValidationError("conditioning needs at least one triplet")
    if h_sc is None:
        h_sc = build_hsc(state, batch, heads)
    subj, rel, obj = heads.triplet_parts(state, batch)
    return subj + rel + obj + h_sc[batch.triplet_graph]


class SGConditioner(nn.Module):
    """Row-wise map from summed triplet tokens to conditioning tokens."""

    def __init__(self, d: int, d_cond: int, hidden: int = 0):
        super().__init__()
        if hidden:
            self.net = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d_cond))
        else:
            self.net = nn.Linear(d, d_cond)

    def forward(self, hsum: torch.Tensor) -> torch.Tensor:
        return self.net(hsum)


def build_Hs(hsum: torch.Tensor, psi: SGConditioner) -> torch.Tensor:
    if hsum.shape[-2] == 0:
        raise DataValidationError("conditioning needs at least one triplet")
    return psi(hsum)


def graph_tokens(graphs, sg_encoder: SGEncoder, heads: ProjectionHeads, psi: SGConditioner):
    """Padded ``(B, N, d_s)`` conditioning tokens and their validity mask."""
    batch = as_batch(graphs)
    hsum = build_hsum(sg_encoder(batch), batch, heads)
    if torch.any(batch.triplet_counts() == 0):
        raise DataValidationError("every conditioning graph needs at least one triplet")
    padded, valid = pad_rows(hsum, batch.triplet_graph, batch.num_graphs)
    return build_Hs(padded, psi), valid


# ---------------------------------------------------------------------------
# score network


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _gn(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, c), c)


class TimeResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int):
        super().__init__()
        self.norm1, self.conv1 = _gn(c_in), nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_out)
        self.norm2, self.conv2 = _gn(c_out), nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttentionSite(nn.Module):
    """Single-head attention from flattened feature-map positions to graph tokens.

    ``phi`` is a learned linear map on each position's features; ``W_Q``,
    ``W_K``, ``W_V`` project queries, keys and values to ``attn_dim``.
    """

    def __init__(self, channels: int, cond_dim: int, attn_dim: int):
        super().__init__()
        self.norm = _gn(channels)
        self.phi = nn.Linear(channels, channels)
        self.W_Q = nn.Linear(channels, attn_dim, bias=False)
        self.W_K = nn.Linear(cond_dim, attn_dim, bias=False)
        self.W_V = nn.Linear(cond_dim, attn_dim, bias=False)
        self.out = nn.Linear(attn_dim, channels)
        self.attn_dim = attn_dim

    def attend(self, feats: torch.Tensor, H: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        q = self.W_Q(self.phi(feats))
        k, v = self.W_K(H), self.W_V(H)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.attn_dim)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, :], float("-inf"))
        return logits.softmax(dim=-1) @ v

    def forward(self, x, H, key_mask=None):
        B, C, h, w = x.shape
        feats = self.norm(x).flatten(2).transpose(1, 2)
        out = self.out(self.attend(feats, H, key_mask))
        return x + out.transpose(1, 2).reshape(B, C, h, w)


def cross_attend(z_feats: torch.Tensor, H_s: torch.Tensor, site: CrossAttentionSite, key_mask=None) -> torch.Tensor:
    """``softmax((W_Q phi(z)) (W_K H)^T / sqrt(d)) (W_V H)`` for ``(L, d_z)`` or ``(B, L, d_z)`` features."""
    if H_s.shape[-2] == 0:
        raise DataValidationError("cross-attention needs at least one conditioning token")
    single = z_feats.ndim == 2
    if single:
        z_feats, H_s = z_feats[None], H_s[None]
        key_mask = None if key_mask is None else key_mask[None]
    out = site.attend(z_feats, H_s, key_mask)
    return out[0] if single else out


class ScoreUNet(nn.Module):
    """Noise predictor ``eps_theta(z_t, t; H_s)`` with either conditioning mode."""

    def __init__(self, latent_channels: int, cfg: DiffusionConfig):
        super().__init__()
        self.mode = cfg.mode
        self.cfg = cfg
        ch = [cfg.base_channels * m for m in cfg.channel_mult]
        temb_dim = 4 * cfg.base_channels
        self.t_dim = cfg.base_channels
        t_in = self.t_dim + (cfg.cond_dim if cfg.mode == "time_concat" else 0)
        self.time_mlp = nn.Sequential(nn.Linear(t_in, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        use_attn = cfg.mode == "cross_attention"

        def site(c):
            return CrossAttentionSite(c, cfg.cond_dim, cfg.attn_dim) if use_attn else None

        self.coord_channels = cfg.coord_channels
        self.conv_in = nn.Conv2d(latent_channels + (2 if cfg.coord_channels else 0), ch[0], 3, padding=1)
        self.down = nn.ModuleList()
        skips = [ch[0]]
        c = ch[0]
        for level, c_out in enumerate(ch):
            for _ in range(cfg.num_res_blocks):
                self.down.append(nn.ModuleList([TimeResBlock(c, c_out, temb_dim), site(c_out)]))
                c = c_out
                skips.append(c)
            if level < len(ch) - 1:
                self.down.append(nn.ModuleList([nn.Conv2d(c, c, 3, stride=2, padding=1)]))
                skips.append(c)
        self.mid = nn.ModuleList(TimeResBlock(c, c, temb_dim) for _ in range(cfg.mid_blocks))
        self.mid_sites = nn.ModuleList(
            site(c) for _ in range(cfg.mid_blocks if use_attn and cfg.mid_attention else 0)
        )
        self.up = nn.ModuleList()
        for level in reversed(range(len(ch))):
            for _ in range(cfg.num_res_blocks + 1):
                self.up.append(nn.ModuleList([TimeResBlock(c + skips.pop(), ch[level], temb_dim), site(ch[level])]))
                c = ch[level]
            if level > 0:
                self.up.append(nn.ModuleList([nn.Conv2d(c, c, 3, padding=1)]))
        self.norm_out = _gn(c)
        self.conv_out = nn.Conv2d(c, latent_channels, 3, padding=1)

    def forward(self, z_t, t, H, key_mask=None):
        if H.shape[-2] == 0:
            raise DataValidationError("the score model needs at least one conditioning token")
        t = torch.as_tensor(t).reshape(-1).expand(z_t.shape[0])
        temb = timestep_embedding(t, self.t_dim).to(z_t.dtype)
        if self.mode == "time_concat":
            if key_mask is None:
                pooled = H.mean(dim=1)
            else:
                w = key_mask.to(H.dtype).unsqueeze(-1)
                pooled = (H * w).sum(1) / w.sum(1).clamp(min=1)
            temb = torch.cat([temb, pooled], dim=-1)
        temb = self.time_mlp(temb)

        if self.coord_channels:
            B, _, height, width = z_t.shape
            ys = torch.linspace(-1.0, 1.0, height, dtype=z_t.dtype)
            xs = torch.linspace(-1.0, 1.0, width, dtype=z_t.dtype)
            grid = torch.stack(torch.meshgrid(ys, xs, indexing="ij"))
            z_t = torch.cat([z_t, grid.expand(B, -1, -1, -1)], dim=1)
        h = self.conv_in(z_t)
        hs = [h]
        for parts in self.down:
            if len(parts) == 1:
                h = parts[0](h)
            else:
                h = parts[0](h, temb)
                if parts[1] is not None:
                    h = parts[1](h, H, key_mask)
            hs.append(h)
        for k, block in enumerate(self.mid):
            h = block(h, temb)
            if k < len(self.mid_sites):
                h = self.mid_sites[k](h, H, key_mask)
        for parts in self.up:
            if len(parts) == 1:
                h = parts[0](F.interpolate(h, scale_factor=2, mode="nearest"))
            else:
                h = parts[0](torch.cat([h, hs.pop()], dim=1), temb)
                if parts[1] is not None:
                    h = parts[1](h, H, key_mask)
        return self.conv_out(F.silu(self.norm_out(h)))


def eps_forward(z_t, t, H_s, params: ScoreUNet, mode: str | None = None, key_mask=None) -> torch.Tensor:
    if mode is not None and mode != params.mode:
        raise ValueError(f"score model was built for mode {params.mode!r}, not {mode!r}")
    return params(z_t, t, H_s, key_mask)


# ---------------------------------------------------------------------------
# training and sampling


def dsm_loss(eps_model: Callable, z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Per-entry mean of ``(eps - eps_model(q_sample(z0, t, eps), t))^2``."""
    z_t = q_sample(z0, t, eps, schedule)
    return F.mse_loss(eps_model(z_t, torch.as_tensor(t)), eps)


def _randn(shape, generators, dtype):
    if isinstance(generators, torch.Generator) or generators is None:
        return torch.randn(shape, generator=generators, dtype=dtype)
    return torch.stack([torch.randn(shape[1:], generator=g, dtype=dtype) for g in generators])


@torch.no_grad()
def p_sample_loop(
    eps_model: Callable,
    shape: Sequence[int],
    schedule: NoiseSchedule,
    generators: torch.Generator | Sequence[torch.Generator] | None = None,
    dtype=torch.float32,
    z_T: torch.Tensor | None = None,
) -> torch.Tensor:
    """Ancestral sampling with variance ``beta_t``; no noise on the final step.

    ``generators`` may be one generator or one per sample (row-independent
    streams, so sample ``i`` does not depend on how many are drawn).
    """
    z = _randn(tuple(shape), generators, dtype) if z_T is None else z_T.clone()
    for t in range(schedule.T, 0, -1):
        beta = schedule.betas[t - 1]
        alpha = schedule.alphas[t - 1]
        ab = schedule.alpha_bar[t - 1]
        eps = eps_model(z, torch.full((z.shape[0],), t, dtype=torch.long))
        z = (z - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
        if t > 1:
            z = z + math.sqrt(beta) * _randn(tuple(z.shape), generators, dtype)
    if not torch.all(torch.isfinite(z)):
        raise NumericError("sampler produced non-finite latents")
    return z


class LatentDiffusion(nn.Module):
    """Trainable parts of the generator: conditioner and score network."""

    def __init__(self, d: int, latent_channels: int, cfg: DiffusionConfig):
        super().__init__()
        self.cfg = cfg
        self.psi = SGConditioner(d, cfg.cond_dim, cfg.psi_hidden)
        self.unet = ScoreUNet(latent_channels, cfg)
        self.register_buffer("latent_scale", torch.tensor(1.0))

    def loss(self, z0, hsum_padded, key_mask, t, eps, schedule):
        H = build_Hs(hsum_padded, self.psi)
        return dsm_loss(lambda z, tt: self.unet(z, tt, H, key_mask), z0 * self.latent_scale, t, eps, schedule)


def sample_generators(seed: int, count: int, offset: int = 0) -> list[torch.Generator]:
    return [torch.Generator().manual_seed(int(np.random.SeedSequence([seed, offset + i]).generate_state(1)[0])) for i in range(count)]


@torch.no_grad()
def generate(graph, sg_encoder, heads, diffusion: LatentDiffusion, autoencoder, schedule: NoiseSchedule,
             count: int, seed: int) -> torch.Tensor:
    """``count`` images ``(count, 3, H, W)`` in [0, 1] for one graph or a list of graphs.

    A list must hold ``count`` graphs (one per image).
    """
    graphs = [graph] * count if not isinstance(graph, (list, tuple)) else list(graph)
    if len(graphs) != count:
        raise ValueError("need one graph per requested image")
    for mod in (sg_encoder, heads, diffusion, autoencoder):
        mod.eval()
    batch = as_batch(graphs)
    if torch.any(batch.triplet_counts() == 0):
        raise DataValidationError("generation needs graphs with at least one triplet")
    dtype = diffusion.latent_scale.dtype
    hsum = build_hsum(sg_encoder(batch), batch, heads)
    padded, valid = pad_rows(hsum, batch.triplet_graph, batch.num_graphs)
    H = build_Hs(padded, diffusion.psi)
    shape = (count,) + tuple(autoencoder.latent_shape)
    z = p_sample_loop(lambda z, t: diffusion.unet(z, t, H, valid), shape, schedule,
                      sample_generators(seed, count), dtype)
    return autoencoder.decode(z / diffusion.latent_scale).clamp(0.0, 1.0)
