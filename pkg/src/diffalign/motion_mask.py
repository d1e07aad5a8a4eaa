"""Moving-foreground mask from a cross-frame correlation volume.

The correlation volume holds, per latent position, the inner products between
the first frame's feature vector and the second frame's vectors over a square
offset neighborhood. A small conv head turns that matching evidence into a
soft mask, which is dilated and used to mix the two frame latents into the
conditioning tensor: moving regions take the second frame, static regions the
first. Everything stays differentiable (including the dilation) so mask
supervision and the denoising objective train jointly.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError


def correlation(v1: torch.Tensor, v2: torch.Tensor, radius: int) -> torch.Tensor:
    """Per-offset inner products: output channel for offset (dy, dx), row-major
    over dy then dx in [-radius, radius], is sum_c v1[c, y, x] * v2[c, y+dy, x+dx]
    with zero padding outside the frame.
    """
    if v1.shape != v2.shape:
        raise ShapeError(f"latent shapes differ: {v1.shape} vs {v2.shape}")
    if radius < 0:
        raise ConfigError(f"radius must be >= 0, got {radius}")
    squeeze = v1.ndim == 3
    if squeeze:
        v1, v2 = v1[None], v2[None]
    b, c, h, w = v1.shape
    pad = F.pad(v2, (radius,) * 4)
    out = torch.empty(b, (2 * radius + 1) ** 2, h, w,
                      dtype=v1.dtype, device=v1.device)
    i = 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = pad[:, :, radius + dy:radius + dy + h,
                          radius + dx:radius + dx + w]
            out[:, i] = (v1 * shifted).sum(dim=1)
            i += 1
    return out[0] if squeeze else out


class MaskPredictor(nn.Module):
    """Conv head over the correlation volume, sigmoid output in (0, 1).

    A foreground cell is one whose displacement disagrees with the dominant
    (camera) displacement, so per-cell matching patterns only become
    informative relative to the rest of the scene. The head therefore feeds
    the convs both the raw products and a per-cell softmax over offsets
    (comparable across texture energy), and appends a spatially pooled
    summary so every cell sees the scene-wide consensus.
    """

    def __init__(self, radius: int = 3):
        super().__init__()
        if radius < 0:
            raise ConfigError(f"radius must be >= 0, got {radius}")
        self.radius = radius
        cin = (2 * radius + 1) ** 2
        self.local = nn.Sequential(
            nn.Conv2d(2 * cin, 48, 3, padding=1), nn.SiLU(),
            nn.Conv2d(48, 48, 3, padding=1), nn.SiLU())
        self.head = nn.Sequential(
            nn.Conv2d(96, 32, 3, padding=1), nn.SiLU(),
            nn.Conv2d(32, 1, 3, padding=1))

    def forward(self, corr: torch.Tensor) -> torch.Tensor:
        expect = (2 * self.radius + 1) ** 2
        ch = corr.shape[1] if corr.ndim == 4 else corr.shape[0]
        if ch != expect:
            raise ShapeError(f"correlation volume has {ch} channels, "
                             f"expected {expect} for radius {self.radius}")
        x = torch.cat([corr.softmax(dim=-3), corr], dim=-3)
        local = self.local(x)
        pooled = local.mean(dim=(-2, -1), keepdim=True).expand_as(local)
        return torch.sigmoid(self.head(torch.cat([local, pooled], dim=-3)))


def predict_mask(corr: torch.Tensor, predictor: MaskPredictor) -> torch.Tensor:
    return predictor(corr)


def dilate(mask: torch.Tensor, r: int) -> torch.Tensor:
    """Grayscale dilation: r rounds of a 3x3 max filter; keeps gradients."""
    if r < 0:
        raise ConfigError(f"dilation rounds must be >= 0, got {r}")
    squeeze = mask.ndim == 3
    if squeeze:
        mask = mask[None]
    for _ in range(r):
        mask = F.max_pool2d(mask, kernel_size=3, stride=1, padding=1)
    return mask[0] if squeeze else mask


def mix_latents(v1: torch.Tensor, v2: torch.Tensor,
                mask_dilated: torch.Tensor) -> torch.Tensor:
    """V2 where the mask says moving, V1 where it says static."""
    if v1.shape != v2.shape:
        raise ShapeError(f"latent shapes differ: {v1.shape} vs {v2.shape}")
    m = mask_dilated
    ch_axis = 0 if m.ndim == 3 else 1
    if m.shape[ch_axis] != 1:
        raise ShapeError(f"mask must have a single channel, got {m.shape}")
    if m.shape[-2:] != v1.shape[-2:]:
        raise ShapeError(
            f"mask resolution {tuple(m.shape[-2:])} does not match latents "
            f"{tuple(v1.shape[-2:])}; pass the latent-resolution mask")
    with torch.no_grad():
        if float(m.min()) < 0.0 or float(m.max()) > 1.0:
            raise ConfigError("mask values must lie in [0, 1]")
    return v2 * m + v1 * (1.0 - m)


def upsample_mask(mask: torch.Tensor, f: int) -> torch.Tensor:
    """Bilinear upsample by the codec factor, clamped to [0, 1]."""
    if f < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {f}")
    squeeze = mask.ndim == 3
    if squeeze:
        mask = mask[None]
    up = F.interpolate(mask, scale_factor=f, mode="bilinear",
                       align_corners=False)
    up = up.clamp(0.0, 1.0)
    return up[0] if squeeze else up


class MotionMixer(nn.Module):
    """Bundles the correlation radius, mask head, and dilation rounds."""

    def __init__(self, radius: int = 3, dilation_rounds: int = 2):
        super().__init__()
        self.predictor = MaskPredictor(radius)
        self.dilation_rounds = dilation_rounds

    def produce(self, v1: torch.Tensor, v2: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (raw mask, dilated mask, mixed latents), all latent-res."""
        corr = correlation(v1, v2, self.predictor.radius)
        mask = self.predictor(corr)
        dilated = dilate(mask, self.dilation_rounds)
        return mask, dilated, mix_latents(v1, v2, dilated)

    def forward(self, v1: torch.Tensor, v2: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (soft mask at latent resolution, mixed latents)."""
        mask, _, mixed = self.produce(v1, v2)
        return mask, mixed
