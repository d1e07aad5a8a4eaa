"""Joint training of the denoiser and the motion-mask head.

Each step encodes an (I1, I2, I_gt) triplet with the frozen codec, predicts
the moving-foreground mask from the frame latents, mixes the conditioning
latent with it, noises the clean latent to a random timestep, and asks the
denoiser for the clean latent back. Supervision happens in image space: the
decoded prediction is compared to I_gt under a mask-weighted norm, and the
upsampled mask is trained against the ground-truth motion mask with cross
entropy. One optimizer updates the denoiser and mask head together; the
codec never moves.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import PARAMETERIZATIONS, Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule, q_sample, x0_from_eps
from .errors import ConfigError, ShapeError, TrainingError
from .latent_codec import LatentCodec, img_to_tensor
from .motion_mask import MotionMixer, upsample_mask

REDUCTIONS = ("rms", "l2")


@dataclass(frozen=True)
class LossConfig:
    """Weights of the mask-aware training objective."""

    gamma: float = 0.7      # foreground emphasis inside the denoising term
    lambda1: float = 2.0    # denoising term weight
    lambda2: float = 0.1    # mask cross-entropy weight
    dilation_r: int = 2     # mask dilation rounds before mixing/upsampling
    reduction: str = "rms"  # "rms" (resolution-invariant) or "l2" (plain norm)

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.dilation_r < 0:
            raise ConfigError("dilation_r must be >= 0")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 2e-4
    seed: int = 0
    crop: int | None = None   # square crop edge; None trains on full frames
    hflip: bool = True
    use_dmp: bool = True
    parameterization: str = "pred_x0"
    radius: int = 3           # correlation neighborhood radius
    base_width: int = 64
    emb_dim: int = 128
    log_every: int = 50
    ckpt_every: int = 0       # 0 disables periodic checkpoints
    val_every: int = 0        # 0 disables mid-run validation
    val_count: int = 4
    val_stride: int = 250

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be positive")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ConfigError(
                f"parameterization must be one of {PARAMETERIZATIONS}")
        if self.crop is not None and self.crop < 16:
            raise ConfigError("crop must be at least 16 pixels")


def _norm(x: torch.Tensor, reduction: str) -> torch.Tensor:
    sq = x.square()
    return sq.mean().sqrt() if reduction == "rms" else sq.sum().sqrt()


def denoising_loss(i_gt: torch.Tensor, i_pred: torch.Tensor,
                   m_hat: torch.Tensor, gamma: float,
                   reduction: str = "rms") -> torch.Tensor:
    """Mask-weighted reconstruction: background and foreground residuals get
    separate norms, blended by gamma. Exactly zero at zero residual.
    """
    if i_gt.shape != i_pred.shape:
        raise ShapeError(f"image shapes differ: {i_gt.shape} vs {i_pred.shape}")
    ch_axis = 0 if m_hat.ndim == 3 else 1
    if m_hat.shape[ch_axis] != 1 or m_hat.shape[-2:] != i_gt.shape[-2:]:
        raise ShapeError(
            f"mask shape {tuple(m_hat.shape)} does not broadcast over images "
            f"{tuple(i_gt.shape)}")
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must be in [0, 1], got {gamma}")
    resid = i_gt - i_pred
    return ((1.0 - gamma) * _norm((1.0 - m_hat) * resid, reduction)
            + gamma * _norm(m_hat * resid, reduction))


def mask_loss(m_gt: torch.Tensor, m_hat: torch.Tensor) -> torch.Tensor:
    """Pixel-mean binary cross entropy; predictions clamped away from {0,1}."""
    if m_gt.shape != m_hat.shape:
        raise ShapeError(f"mask shapes differ: {m_gt.shape} vs {m_hat.shape}")
    target = m_gt.to(m_hat.dtype)
    p = m_hat.clamp(1e-6, 1.0 - 1e-6)
    return -(target * p.log() + (1.0 - target) * (1.0 - p).log()).mean()


def total_loss(l_den: torch.Tensor, l_mask: torch.Tensor,
               cfg: LossConfig) -> torch.Tensor:
    return cfg.lambda1 * l_den + cfg.lambda2 * l_mask


def prepare_batch(triplets, idx, gen: torch.Generator,
                  crop: int | None = None, hflip: bool = False) -> dict:
    """Stack chosen triplets into training tensors, with crop/flip
    augmentation drawn from `gen`.
    """
    i1, i2, igt, masks, ids = [], [], [], [], []
    for i in idx:
        tri = triplets[i]
        a, b, g = (img_to_tensor(x) for x in (tri.i1, tri.i2, tri.i_gt))
        m = torch.from_numpy(tri.m_gt.astype(np.float32))[None]
        h, w = a.shape[-2:]
        if crop is not None:
            if crop > h or crop > w:
                raise ConfigError(f"crop {crop} exceeds frame size {h}x{w}")
            oy = int(torch.randint(0, h - crop + 1, (1,), generator=gen))
            ox = int(torch.randint(0, w - crop + 1, (1,), generator=gen))
            a, b, g, m = (x[..., oy:oy + crop, ox:ox + crop]
                          for x in (a, b, g, m))
        if hflip and bool(torch.rand((), generator=gen) < 0.5):
            a, b, g, m = (x.flip(-1) for x in (a, b, g, m))
        i1.append(a), i2.append(b), igt.append(g), masks.append(m)
        ids.append(tri.seed)
    return {"i1": torch.stack(i1), "i2": torch.stack(i2),
            "i_gt": torch.stack(igt), "m_gt": torch.stack(masks), "ids": ids}


def train_step(batch: dict, denoiser: Denoiser, mixer: MotionMixer | None,
               codec: LatentCodec, optimizer: torch.optim.Optimizer,
               schedule: NoiseSchedule, loss_cfg: LossConfig,
               gen: torch.Generator) -> dict:
    """One optimizer update; returns the step's loss terms.

    `mixer=None` is the no-DMP ablation: the conditioning slot that normally
    holds the mixed latent is filled with V2, the image loss runs under an
    uninformative constant mask, and the mask term is dropped.
    """
    if not codec.frozen:
        raise ConfigError("codec must be frozen before diffusion training")
    with torch.no_grad():
        v1 = codec.encode(batch["i1"])
        v2 = codec.encode(batch["i2"])
        v_gt = codec.encode(batch["i_gt"])

    if mixer is not None:
        mask_lat, mask_dil, v_m = mixer.produce(v1, v2)
        m_img = upsample_mask(mask_dil, codec.config.f)
    else:
        v_m = v2
        m_img = torch.full_like(batch["m_gt"], 0.5)
    cond = torch.cat([v1, v2, v_m], dim=1)

    n = v_gt.shape[0]
    t = torch.randint(1, schedule.T + 1, (n,), generator=gen)
    eps = torch.randn(v_gt.shape, generator=gen, dtype=v_gt.dtype)
    x_t = q_sample(v_gt, t, eps, schedule)
    out = denoiser(x_t, cond, t)
    if denoiser.config.parameterization == "pred_eps":
        x0_hat = x0_from_eps(x_t, out, t, schedule)
    else:
        x0_hat = out
    i_pred = codec.decode(x0_hat)

    # The mask enters the weighting as data, not as a trainable path: with
    # gamma > 0.5 the weighted residual is monotone increasing in the mask,
    # so letting gradients flow here would push the mask toward zero
    # everywhere, hardest on the samples with the largest residuals. The mask
    # predictor still trains through the cross-entropy term and through the
    # latent-mixing path feeding the denoiser condition.
    l_den = denoising_loss(batch["i_gt"], i_pred, m_img.detach(), loss_cfg.gamma,
                           loss_cfg.reduction)
    if mixer is not None:
        l_mask = mask_loss(batch["m_gt"], m_img)
        loss = total_loss(l_den, l_mask, loss_cfg)
    else:
        l_mask = torch.zeros(())
        loss = loss_cfg.lambda1 * l_den
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss; t={t.tolist()}, gamma={loss_cfg.gamma}, "
            f"batch ids={batch['ids']}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return {"loss": float(loss.detach()), "l_den": float(l_den.detach()),
            "l_mask": float(l_mask.detach())}


def config_hash(train_cfg: TrainConfig, loss_cfg: LossConfig,
                den_cfg: DenoiserConfig, schedule: NoiseSchedule) -> str:
    payload = {"train": asdict(train_cfg), "loss": asdict(loss_cfg),
               "denoiser": asdict(den_cfg), "schedule": schedule.to_json()}
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()[:8]


def save_checkpoint(path, denoiser: Denoiser, mixer: MotionMixer | None,
                    schedule: NoiseSchedule, loss_cfg: LossConfig,
                    train_cfg: TrainConfig, codec_checksum: str,
                    step: int) -> None:
    torch.save({
        "kind": "aligner",
        "step": step,
        "denoiser_config": asdict(denoiser.config),
        "denoiser_state": denoiser.state_dict(),
        "mixer_state": None if mixer is None else mixer.state_dict(),
        "radius": None if mixer is None else mixer.predictor.radius,
        "dilation_rounds": None if mixer is None else mixer.dilation_rounds,
        "loss_config": asdict(loss_cfg),
        "train_config": asdict(train_cfg),
        "schedule": schedule.to_json(),
        "schedule_fingerprint": schedule.fingerprint(),
        "codec_checksum": codec_checksum,
        "config_hash": config_hash(train_cfg, loss_cfg, denoiser.config,
                                   schedule),
    }, path)


def load_checkpoint(path, expect_parameterization: str | None = None) -> dict:
    """Rebuild the trained modules from disk.

    Returns a dict with keys denoiser, mixer, schedule, and the stored
    metadata. Refuses a checkpoint whose parameterization tag differs from
    `expect_parameterization` when that is given.
    """
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "aligner":
        raise ConfigError(f"{path} is not an aligner checkpoint")
    den_cfg = DenoiserConfig(**blob["denoiser_config"])
    if (expect_parameterization is not None
            and den_cfg.parameterization != expect_parameterization):
        raise ConfigError(
            f"checkpoint was trained with {den_cfg.parameterization!r}, "
            f"refusing to load as {expect_parameterization!r}")
    denoiser = Denoiser(den_cfg)
    denoiser.load_state_dict(blob["denoiser_state"])
    denoiser.eval()
    mixer = None
    if blob["mixer_state"] is not None:
        mixer = MotionMixer(blob["radius"], blob["dilation_rounds"])
        mixer.load_state_dict(blob["mixer_state"])
        mixer.eval()
    schedule = NoiseSchedule.from_json(blob["schedule"])
    if schedule.fingerprint() != blob["schedule_fingerprint"]:
        raise ConfigError(f"schedule fingerprint mismatch in {path}")
    return {"denoiser": denoiser, "mixer": mixer, "schedule": schedule,
            "meta": {k: blob[k] for k in
                     ("step", "loss_config", "train_config", "codec_checksum",
                      "config_hash", "schedule_fingerprint")}}


@dataclass
class TrainReport:
    history: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    config_hash: str = ""
    codec_checksum: str = ""
    checkpoints: list = field(default_factory=list)


def fit(dataset, codec: LatentCodec, schedule: NoiseSchedule,
        train_cfg: TrainConfig = TrainConfig(),
        loss_cfg: LossConfig = LossConfig(),
        out_dir: Path | None = None, log=print
        ) -> tuple[Denoiser, MotionMixer | None, TrainReport]:
    """Train the aligner on generated triplets with the codec held frozen."""
    if not dataset:
        raise ConfigError("empty training dataset")
    if not codec.frozen:
        raise ConfigError("codec must be trained and frozen before fit()")
    h, w = dataset[0].i1.shape[:2]
    edge = train_cfg.crop if train_cfg.crop is not None else min(h, w)
    unit = 4 * codec.config.f
    if edge % unit:
        raise ConfigError(
            f"training resolution {edge} must be a multiple of {unit} "
            f"(codec factor x UNet downsampling)")

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(train_cfg.seed)
    den_cfg = DenoiserConfig(c_lat=codec.config.c_lat,
                             base=train_cfg.base_width,
                             emb_dim=train_cfg.emb_dim,
                             parameterization=train_cfg.parameterization)
    denoiser = Denoiser(den_cfg)
    mixer = MotionMixer(train_cfg.radius,
                        loss_cfg.dilation_r) if train_cfg.use_dmp else None
    params = list(denoiser.parameters())
    if mixer is not None:
        params += list(mixer.parameters())
    optimizer = torch.optim.Adam(params, lr=train_cfg.lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, train_cfg.steps)
    gen = torch.Generator().manual_seed(train_cfg.seed + 1)

    chash = config_hash(train_cfg, loss_cfg, den_cfg, schedule)
    codec_sum = codec.checksum()
    report = TrainReport(config_hash=chash, codec_checksum=codec_sum)
    val_set = dataset[:train_cfg.val_count]

    for step in range(1, train_cfg.steps + 1):
        idx = torch.randint(0, len(dataset), (train_cfg.batch,),
                            generator=gen).tolist()
        batch = prepare_batch(dataset, idx, gen, train_cfg.crop,
                              train_cfg.hflip)
        metrics = train_step(batch, denoiser, mixer, codec, optimizer,
                             schedule, loss_cfg, gen)
        lr_sched.step()
        metrics["step"] = step
        report.history.append(metrics)
        if step % train_cfg.log_every == 0 or step == train_cfg.steps:
            log(f"step {step}: loss {metrics['loss']:.4f} "
                f"(den {metrics['l_den']:.4f}, mask {metrics['l_mask']:.4f})")
        if (train_cfg.val_every and val_set
                and (step % train_cfg.val_every == 0
                     or step == train_cfg.steps)):
            entry = _validate(denoiser, mixer, codec, schedule, val_set,
                              train_cfg.val_stride)
            entry["step"] = step
            report.validation.append(entry)
            log(f"step {step}: val psnr {entry['psnr']:.2f} dB "
                f"ssim {entry['ssim']:.3f}")
        if (train_cfg.ckpt_every and out_dir is not None
                and step % train_cfg.ckpt_every == 0):
            name = f"ckpt_step{step:06d}_{chash}.pt"
            save_checkpoint(out_dir / name, denoiser, mixer, schedule,
                            loss_cfg, train_cfg, codec_sum, step)
            if name not in report.checkpoints:
                report.checkpoints.append(name)

    if codec.checksum() != codec_sum:
        raise TrainingError("frozen codec weights changed during training")
    denoiser.eval()
    if mixer is not None:
        mixer.eval()
    if out_dir is not None:
        name = f"ckpt_step{train_cfg.steps:06d}_{chash}.pt"
        save_checkpoint(out_dir / name, denoiser, mixer, schedule, loss_cfg,
                        train_cfg, codec_sum, train_cfg.steps)
        if name not in report.checkpoints:
            report.checkpoints.append(name)
        (out_dir / "latest.pt").write_bytes((out_dir / name).read_bytes())
        (out_dir / "train-report.json").write_text(
            json.dumps(asdict_report(report), indent=2))
    return denoiser, mixer, report


def asdict_report(report: TrainReport) -> dict:
    return {"history": report.history, "validation": report.validation,
            "config_hash": report.config_hash,
            "codec_checksum": report.codec_checksum,
            "checkpoints": report.checkpoints}


def _validate(denoiser, mixer, codec, schedule, samples, stride) -> dict:
    from .evaluation import psnr, ssim
    from .sampling import Aligner

    aligner = Aligner(denoiser, mixer, codec, schedule)
    ps, ss = [], []
    for i, tri in enumerate(samples):
        res = aligner.align(tri.i1, tri.i2, stride=stride, seed=i)
        ps.append(psnr(res.image, tri.i_gt))
        ss.append(ssim(res.image, tri.i_gt))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}
