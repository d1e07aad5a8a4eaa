"""Convolutional autoencoder defining the latent space the diffusion runs in.

The codec is trained once on dataset frames, gated on held-out reconstruction
PSNR, then frozen; diffusion training treats it as a fixed, differentiable
image<->latent bridge. Images are exchanged as float tensors in [-1, 1].
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError, TrainingError


@dataclass(frozen=True)
class CodecConfig:
    f: int = 4  # spatial downsampling factor (power of two)
    c_lat: int = 4  # latent channels
    base: int = 32  # width of the first conv

    def __post_init__(self):
        if self.f < 1 or (self.f & (self.f - 1)) != 0:
            raise ConfigError(f"downsampling factor must be a power of two, got {self.f}")
        if self.c_lat < 1 or self.base < 4:
            raise ConfigError("bad codec widths")


def img_to_tensor(img: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float32 (3, H, W) in [-1, 1]."""
    if img.dtype != np.uint8 or img.ndim != 3:
        raise ShapeError(f"expected uint8 (H, W, 3), got {img.dtype} {img.shape}")
    t = torch.from_numpy(img.astype(np.float32) / 255.0)
    return t.permute(2, 0, 1) * 2.0 - 1.0


def tensor_to_img(t: torch.Tensor) -> np.ndarray:
    """float (3, H, W) in [-1, 1] -> uint8 (H, W, 3)."""
    arr = ((t.detach().clamp(-1, 1) + 1.0) * 0.5 * 255.0).round()
    return arr.to(torch.uint8).permute(1, 2, 0).cpu().numpy()


class _Block(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x):
        x = self.act(self.conv1(x))
        return self.act(self.conv2(x))


class _Blur(nn.Module):
    """Fixed binomial low-pass applied before each stride-2 conv.

    Plain strided convs alias: a sub-stride translation of the input scrambles
    the latent values instead of shifting them, which ruins any downstream use
    of latents as a matching signal (the motion mask correlates latents across
    frames). Filtering with a binomial kernel first keeps the encoder
    approximately shift-equivariant. Reflect padding so border cells keep full
    kernel mass.
    """

    def __init__(self, channels: int):
        super().__init__()
        k = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0])
        k = (k[:, None] * k[None, :]) / 256.0
        self.register_buffer("kernel", k.expand(channels, 1, 5, 5).clone())

    def forward(self, x):
        x = nn.functional.pad(x, (2, 2, 2, 2), mode="reflect")
        return nn.functional.conv2d(x, self.kernel, groups=x.shape[1])


class LatentCodec(nn.Module):
    """Encoder/decoder pair; `frozen` marks the post-training state."""

    def __init__(self, config: CodecConfig = CodecConfig()):
        super().__init__()
        self.config = config
        self.frozen = False
        self.recon_psnr = float("nan")
        n_down = int(math.log2(config.f))
        b = config.base

        enc = [_Block(3, b)]
        ch = b
        for _ in range(n_down):
            enc.append(_Blur(ch))
            enc.append(nn.Conv2d(ch, min(ch * 2, 4 * b), 4, stride=2, padding=1))
            enc.append(_Block(min(ch * 2, 4 * b), min(ch * 2, 4 * b)))
            ch = min(ch * 2, 4 * b)
        enc.append(nn.Conv2d(ch, config.c_lat, 3, padding=1))
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(config.c_lat, ch, 3, padding=1), _Block(ch, ch)]
        for _ in range(n_down):
            nxt = max(ch // 2, b)
            dec.append(nn.Upsample(scale_factor=2, mode="nearest"))
            dec.append(nn.Conv2d(ch, nxt, 3, padding=1))
            dec.append(_Block(nxt, nxt))
            ch = nxt
        dec.append(nn.Conv2d(ch, 3, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [-1, 1] -> (B, c_lat, H/f, W/f) in (-1, 1)."""
        squeeze = image.ndim == 3
        if squeeze:
            image = image[None]
        if image.shape[1] != 3:
            raise ShapeError(f"expected 3 input channels, got {image.shape[1]}")
        if image.shape[2] % self.config.f or image.shape[3] % self.config.f:
            raise ShapeError(
                f"image dims {tuple(image.shape[2:])} not divisible by f={self.config.f}")
        z = torch.tanh(self.encoder(image))
        return z[0] if squeeze else z

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """(B, c_lat, h, w) -> (B, 3, f*h, f*w) in (-1, 1); differentiable."""
        squeeze = latent.ndim == 3
        if squeeze:
            latent = latent[None]
        if latent.shape[1] != self.config.c_lat:
            raise ShapeError(
                f"expected {self.config.c_lat} latent channels, got {latent.shape[1]}")
        img = torch.tanh(self.decoder(latent))
        return img[0] if squeeze else img

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


@dataclass
class CodecTrainConfig:
    steps: int = 3000
    batch: int = 8
    lr: float = 1e-3
    tv_weight: float = 1e-3
    gate_db: float = 28.0
    val_fraction: float = 0.1
    seed: int = 0
    log_every: int = 200


def _recon_psnr_db(codec: LatentCodec, frames: torch.Tensor) -> float:
    codec.eval()
    with torch.no_grad():
        vals = []
        for i in range(0, len(frames), 8):
            batch = frames[i:i + 8]
            rec = codec.decode(codec.encode(batch))
            mse = ((rec - batch) / 2.0).pow(2).mean(dim=(1, 2, 3))
            vals.append(10.0 * torch.log10(1.0 / mse))
        return float(torch.cat(vals).mean())


def train_codec(frames: list[np.ndarray], train_cfg: CodecTrainConfig = CodecTrainConfig(),
                codec_cfg: CodecConfig = CodecConfig(),
                log=print) -> tuple[LatentCodec, list[dict]]:
    """Fit the codec on dataset frames and freeze it behind the PSNR gate.

    Returns (frozen codec, training curve). Raises TrainingError with the
    curve tail when the gate is not met.
    """
    if not frames:
        raise ConfigError("empty training set")
    torch.manual_seed(train_cfg.seed)
    codec = LatentCodec(codec_cfg)

    n_val = max(1, int(len(frames) * train_cfg.val_fraction))
    stack = torch.stack([img_to_tensor(f) for f in frames])
    val, train = stack[:n_val], stack[n_val:]
    if len(train) == 0:
        train = val
    opt = torch.optim.Adam(codec.parameters(), lr=train_cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, train_cfg.steps)
    gen = torch.Generator().manual_seed(train_cfg.seed + 1)

    curve = []
    codec.train()
    for step in range(1, train_cfg.steps + 1):
        idx = torch.randint(0, len(train), (min(train_cfg.batch, len(train)),),
                            generator=gen)
        batch = train[idx]
        rec = codec.decode(codec.encode(batch))
        l2 = (rec - batch).pow(2).mean()
        tv = (rec[..., 1:, :] - rec[..., :-1, :]).abs().mean() \
            + (rec[..., 1:] - rec[..., :-1]).abs().mean()
        loss = l2 + train_cfg.tv_weight * tv
        if not torch.isfinite(loss):
            raise TrainingError(f"codec loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % train_cfg.log_every == 0 or step == train_cfg.steps:
            entry = {"step": step, "loss": float(loss.detach()),
                     "val_psnr": _recon_psnr_db(codec, val)}
            curve.append(entry)
            log(f"codec step {step}: loss {entry['loss']:.5f} "
                f"val {entry['val_psnr']:.2f} dB")
            codec.train()

    final = _recon_psnr_db(codec, val)
    codec.recon_psnr = final
    if final < train_cfg.gate_db:
        raise TrainingError(
            f"codec reconstruction gate missed: {final:.2f} dB < "
            f"{train_cfg.gate_db} dB after {train_cfg.steps} steps; "
            f"curve tail: {curve[-3:]}")
    codec.freeze()
    return codec, curve


def save_codec(path, codec: LatentCodec) -> None:
    torch.save({
        "kind": "codec",
        "config": asdict(codec.config),
        "state": codec.state_dict(),
        "recon_psnr": codec.recon_psnr,
        "frozen": codec.frozen,
        "checksum": codec.checksum(),
    }, path)


def load_codec(path) -> LatentCodec:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "codec":
        raise ConfigError(f"{path} is not a codec checkpoint")
    codec = LatentCodec(CodecConfig(**blob["config"]))
    codec.load_state_dict(blob["state"])
    codec.recon_psnr = blob["recon_psnr"]
    if codec.checksum() != blob["checksum"]:
        raise ConfigError(f"codec checksum mismatch in {path}")
    if blob["frozen"]:
        codec.freeze()
    return codec
