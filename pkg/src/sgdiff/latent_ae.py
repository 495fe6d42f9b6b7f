"""KL-regularized convolutional autoencoder for the diffusion latent space."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from sgdiff.errors import NumericError


@dataclass
class AEConfig:
    downsample: int = 8
    latent_channels: int = 4
    base_channels: int = 32
    kl_weight: float = 0.8
    mse_weight: float = 1.0
    lr: float = 1e-5
    batch_size: int = 128
    steps: int = 100_000
    checkpoint_every: int = 500
    log_every: int = 100

    def __post_init__(self):
        if self.downsample < 1 or self.downsample & (self.downsample - 1):
            raise ValueError("downsample must be a power of two")
        if self.kl_weight < 0 or self.mse_weight < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LatentCode:
    """Posterior parameters and one sample, all ``(B, c, h, w)``."""

    mean: torch.Tensor
    logvar: torch.Tensor
    z: torch.Tensor


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    def __init__(self, levels: int, base: int, latent_channels: int):
        super().__init__()
        chans = [base * min(2**i, 4) for i in range(levels + 1)]
        self.conv_in = nn.Conv2d(3, chans[0], 3, padding=1)
        self.blocks = nn.ModuleList(ResBlock(chans[i], chans[i + 1]) for i in range(levels))
        self.downs = nn.ModuleList(
            nn.Conv2d(chans[i + 1], chans[i + 1], 3, stride=2, padding=1) for i in range(levels)
        )
        self.mid = ResBlock(chans[-1], chans[-1])
        self.norm_out = nn.GroupNorm(_groups(chans[-1]), chans[-1])
        self.conv_out = nn.Conv2d(chans[-1], 2 * latent_channels, 3, padding=1)

    def forward(self, x):
        h = self.conv_in(x)
        for block, down in zip(self.blocks, self.downs):
            h = down(block(h))
        h = self.mid(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, levels: int, base: int, latent_channels: int):
        super().__init__()
        chans = [base * min(2**i, 4) for i in range(levels + 1)][::-1]
        self.conv_in = nn.Conv2d(latent_channels, chans[0], 3, padding=1)
        self.mid = ResBlock(chans[0], chans[0])
        self.blocks = nn.ModuleList(ResBlock(chans[i], chans[i + 1]) for i in range(levels))
        self.ups = nn.ModuleList(nn.Conv2d(chans[i], chans[i], 3, padding=1) for i in range(levels))
        self.norm_out = nn.GroupNorm(_groups(chans[-1]), chans[-1])
        self.conv_out = nn.Conv2d(chans[-1], 3, 3, padding=1)

    def forward(self, z):
        h = self.mid(self.conv_in(z))
        for up, block in zip(self.ups, self.blocks):
            h = block(up(F.interpolate(h, scale_factor=2, mode="nearest")))
        return self.conv_out(F.silu(self.norm_out(h)))


class LatentAutoencoder(nn.Module):
    def __init__(self, image_size: int, cfg: AEConfig):
        super().__init__()
        if image_size % cfg.downsample:
            raise ValueError(f"image size {image_size} not divisible by {cfg.downsample}")
        self.cfg = cfg
        self.image_size = image_size
        levels = int(math.log2(cfg.downsample))
        self.encoder = Encoder(levels, cfg.base_channels, cfg.latent_channels)
        self.decoder = Decoder(levels, cfg.base_channels, cfg.latent_channels)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        """``(c, h, w)`` of one latent code."""
        side = self.image_size // self.cfg.downsample
        return self.cfg.latent_channels, side, side

    def encode(self, x: torch.Tensor, generator: torch.Generator | None = None, sample: bool = True) -> LatentCode:
        if tuple(x.shape[1:]) != (3, self.image_size, self.image_size):
            raise ValueError(f"expected (B, 3, {self.image_size}, {self.image_size}), got {tuple(x.shape)}")
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        logvar = logvar.clamp(-30.0, 20.0)
        if not sample:
            return LatentCode(mean, logvar, mean)
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return LatentCode(mean, logvar, mean + torch.exp(0.5 * logvar) * eps)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if tuple(z.shape[1:]) != self.latent_shape:
            raise ValueError(f"expected latent (B, {self.latent_shape}), got {tuple(z.shape)}")
        return self.decoder(z)


def ae_encode(x, params: LatentAutoencoder, generator=None, deterministic: bool = False) -> LatentCode:
    return params.encode(x, generator, sample=not deterministic)


def ae_decode(z, params: LatentAutoencoder) -> torch.Tensor:
    """Decoded images clamped to ``[0, 1]``."""
    return params.decode(z).clamp(0.0, 1.0)


def kl_to_standard_normal(code_or_mean, logvar=None) -> torch.Tensor:
    """Mean over entries of ``KL(N(mean, exp(logvar)) || N(0, 1))``."""
    if logvar is None:
        mean, logvar = code_or_mean.mean, code_or_mean.logvar
    else:
        mean = code_or_mean
    mean, logvar = torch.as_tensor(mean), torch.as_tensor(logvar)
    return 0.5 * (mean**2 + logvar.exp() - 1.0 - logvar).mean()


def ae_losses(model: LatentAutoencoder, x: torch.Tensor, generator=None) -> dict:
    code = model.encode(x, generator)
    recon = model.decode(code.z)
    mse = F.mse_loss(recon, x)
    kl = kl_to_standard_normal(code)
    total = model.cfg.mse_weight * mse + model.cfg.kl_weight * kl
    return {"mse": mse, "kl": kl, "total": total}


def ae_train_step(model: LatentAutoencoder, optimizer, x: torch.Tensor, generator=None) -> dict:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    losses = ae_losses(model, x, generator)
    if not torch.isfinite(losses["total"]):
        raise NumericError(f"non-finite autoencoder loss {float(losses['total'].detach())}")
    losses["total"].backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


def psnr(x: torch.Tensor, y: torch.Tensor) -> float:
    mse = float(F.mse_loss(x.clamp(0, 1), y.clamp(0, 1)))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)
