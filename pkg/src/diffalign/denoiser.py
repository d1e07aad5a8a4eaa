"""Conditional UNet predicting the clean latent from a noisy one.

The network sees the noisy latent concatenated with the conditioning stack
(first frame, second frame, and mixed latents) plus a sinusoidal timestep
embedding injected into every residual block. It is fully convolutional, so
any latent size divisible by four works at inference.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .diffusion import NoiseSchedule, x0_from_eps
from .errors import ConfigError, ShapeError

PARAMETERIZATIONS = ("pred_x0", "pred_eps")


def pe_embed(t, dim: int) -> torch.Tensor:
    """Interleaved sinusoidal embedding of a timestep.

    Element 2k is sin(t / 10000^(2k/dim)) and element 2k+1 the matching cos.
    Accepts an int (returns (dim,)) or an integer tensor (returns (..., dim)).
    """
    if dim % 2 or dim < 2:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    tt = torch.as_tensor(t, dtype=torch.float64)
    if (tt < 0).any():
        raise ConfigError("timestep must be >= 0")
    k = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.pow(10000.0, -k / dim)
    ang = tt[..., None] * freq
    out = torch.empty(tt.shape + (dim,), dtype=torch.float32)
    out[..., 0::2] = torch.sin(ang)
    out[..., 1::2] = torch.cos(ang)
    return out


@dataclass(frozen=True)
class DenoiserConfig:
    c_lat: int = 4
    base: int = 64
    emb_dim: int = 128
    parameterization: str = "pred_x0"

    def __post_init__(self):
        if self.parameterization not in PARAMETERIZATIONS:
            raise ConfigError(
                f"parameterization must be one of {PARAMETERIZATIONS}, "
                f"got {self.parameterization!r}")
        if self.emb_dim % 2:
            raise ConfigError("emb_dim must be even")

    @property
    def cond_channels(self) -> int:
        return 3 * self.c_lat


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x, emb):
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Three-resolution UNet; output channels equal the latent channels."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = config
        b = config.base
        e = config.emb_dim
        cin = config.c_lat + config.cond_channels

        self.emb_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.stem = nn.Conv2d(cin, b, 3, padding=1)
        self.d1 = _ResBlock(b, b, e)
        self.down1 = nn.Conv2d(b, 2 * b, 4, stride=2, padding=1)
        self.d2 = _ResBlock(2 * b, 2 * b, e)
        self.down2 = nn.Conv2d(2 * b, 2 * b, 4, stride=2, padding=1)
        self.mid = _ResBlock(2 * b, 2 * b, e)
        self.up2 = nn.Upsample(scale_factor=2, mode="nearest")
        self.u2 = _ResBlock(4 * b, 2 * b, e)
        self.up1 = nn.Upsample(scale_factor=2, mode="nearest")
        self.u1 = _ResBlock(3 * b, b, e)
        self.head = nn.Sequential(nn.GroupNorm(8, b), nn.SiLU(),
                                  nn.Conv2d(b, config.c_lat, 3, padding=1))

    def forward(self, x_t: torch.Tensor, cond: torch.Tensor, t) -> torch.Tensor:
        squeeze = x_t.ndim == 3
        if squeeze:
            x_t, cond = x_t[None], cond[None]
        if x_t.shape[1] != self.config.c_lat:
            raise ShapeError(f"x_t has {x_t.shape[1]} channels, "
                             f"expected {self.config.c_lat}")
        if cond.shape[1] != self.config.cond_channels:
            raise ShapeError(f"condition has {cond.shape[1]} channels, "
                             f"expected {self.config.cond_channels}")
        if cond.shape[2:] != x_t.shape[2:]:
            raise ShapeError("condition spatial dims differ from x_t")
        if x_t.shape[2] % 4 or x_t.shape[3] % 4:
            raise ShapeError(f"latent dims {tuple(x_t.shape[2:])} must divide by 4")
        if not isinstance(t, torch.Tensor):
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
        emb = self.emb_mlp(pe_embed(t, self.config.emb_dim).to(x_t.dtype))

        h0 = self.stem(torch.cat([x_t, cond], dim=1))
        h1 = self.d1(h0, emb)
        h2 = self.d2(self.down1(h1), emb)
        h3 = self.mid(self.down2(h2), emb)
        g2 = self.u2(torch.cat([self.up2(h3), h2], dim=1), emb)
        g1 = self.u1(torch.cat([self.up1(g2), h1], dim=1), emb)
        out = self.head(g1)
        return out[0] if squeeze else out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def predict_x0(model: Denoiser, x_t, cond, t) -> torch.Tensor:
    """Direct clean-latent prediction; requires a pred_x0 model."""
    if model.config.parameterization != "pred_x0":
        raise ConfigError("model is not parameterized to predict the clean latent")
    return model(x_t, cond, t)


def predict_eps(model: Denoiser, x_t, cond, t) -> torch.Tensor:
    """Noise prediction (ablation parameterization); requires a pred_eps model."""
    if model.config.parameterization != "pred_eps":
        raise ConfigError("model is not parameterized to predict noise")
    return model(x_t, cond, t)


def predict_clean_latent(model: Denoiser, x_t, cond, t,
                         schedule: NoiseSchedule) -> torch.Tensor:
    """Clean-latent estimate under either parameterization."""
    out = model(x_t, cond, t)
    if model.config.parameterization == "pred_eps":
        return x0_from_eps(x_t, out, t, schedule)
    return out
