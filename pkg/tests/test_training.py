import json
import math

import numpy as np
import pytest
import torch

from diffalign.diffusion import make_schedule
from diffalign.errors import ConfigError, ShapeError, TrainingError
from diffalign.latent_codec import CodecConfig, LatentCodec
from diffalign.motion_mask import MotionMixer
from diffalign.scene_sim import AlignmentTriplet
from diffalign.training import (
    LossConfig,
    TrainConfig,
    denoising_loss,
    fit,
    load_checkpoint,
    mask_loss,
    prepare_batch,
    total_loss,
    train_step,
)


def fake_triplet(seed, size=32):
    rng = np.random.default_rng(seed)
    imgs = [rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
            for _ in range(3)]
    m = np.zeros((size, size), dtype=bool)
    m[size // 4:size // 2, size // 4:size // 2] = True
    return AlignmentTriplet(
        i1=imgs[0], i2=imgs[1], i_gt=imgs[2], m_gt=m,
        flow_gt=np.zeros((2, size, size), dtype=np.float32),
        occ_gt=np.zeros((size, size), dtype=bool),
        subset="LcLf", seed=seed, camera_mag=10.0, fg_mag=10.0)


def frozen_codec(seed=0):
    torch.manual_seed(seed)
    codec = LatentCodec(CodecConfig(base=8))
    codec.freeze()
    return codec


def tiny_train_cfg(**over):
    base = dict(steps=3, batch=2, lr=1e-3, seed=0, use_dmp=True,
                radius=1, base_width=8, emb_dim=16, log_every=1,
                hflip=True)
    base.update(over)
    return TrainConfig(**base)


# ------------------------------------------------------------- loss terms

def test_denoising_loss_zero_at_zero_residual():
    gen = torch.Generator().manual_seed(0)
    img = torch.randn(2, 3, 8, 8, generator=gen)
    mask = torch.rand(2, 1, 8, 8, generator=gen)
    for gamma in (0.0, 0.3, 0.7, 1.0):
        assert float(denoising_loss(img, img.clone(), mask, gamma)) == 0.0


def test_denoising_loss_zero_mask_reduction():
    gen = torch.Generator().manual_seed(1)
    a = torch.randn(3, 8, 8, generator=gen)
    b = torch.randn(3, 8, 8, generator=gen)
    m = torch.zeros(1, 8, 8)
    rms = float((a - b).square().mean().sqrt())
    for gamma in (0.0, 0.4, 1.0):
        got = float(denoising_loss(a, b, m, gamma))
        assert got == pytest.approx((1 - gamma) * rms, rel=1e-6)


def test_denoising_loss_constant_residual_value():
    i_gt = torch.full((3, 10, 10), 0.5)
    i_pred = torch.full((3, 10, 10), 0.3)
    m = torch.ones(1, 10, 10)
    got = float(denoising_loss(i_gt, i_pred, m, gamma=0.7))
    assert got == pytest.approx(0.14, abs=1e-6)


def test_denoising_loss_swap_symmetry():
    gen = torch.Generator().manual_seed(2)
    a = torch.randn(2, 3, 8, 8, generator=gen)
    b = torch.randn(2, 3, 8, 8, generator=gen)
    m = torch.rand(2, 1, 8, 8, generator=gen)
    for gamma in (0.0, 0.25, 0.7):
        lhs = float(denoising_loss(a, b, m, gamma))
        rhs = float(denoising_loss(a, b, 1.0 - m, 1.0 - gamma))
        assert lhs == pytest.approx(rhs, rel=1e-6)


def test_denoising_loss_constant_mask_halves():
    gen = torch.Generator().manual_seed(3)
    a = torch.randn(3, 8, 8, generator=gen)
    b = torch.randn(3, 8, 8, generator=gen)
    rms = float((a - b).square().mean().sqrt())
    for m in (torch.zeros(1, 8, 8), torch.ones(1, 8, 8)):
        got = float(denoising_loss(a, b, m, gamma=0.5))
        assert got == pytest.approx(0.5 * rms, rel=1e-6)


def test_denoising_loss_l2_reduction():
    n = 3 * 6 * 6
    i_gt = torch.zeros(3, 6, 6)
    i_pred = torch.full((3, 6, 6), -0.2)
    m = torch.ones(1, 6, 6)
    got = float(denoising_loss(i_gt, i_pred, m, gamma=1.0, reduction="l2"))
    assert got == pytest.approx(0.2 * math.sqrt(n), rel=1e-6)


def test_denoising_loss_validation():
    img = torch.zeros(3, 8, 8)
    m = torch.zeros(1, 8, 8)
    with pytest.raises(ShapeError):
        denoising_loss(img, torch.zeros(3, 8, 4), m, 0.5)
    with pytest.raises(ShapeError):
        denoising_loss(img, img, torch.zeros(2, 8, 8), 0.5)
    with pytest.raises(ShapeError):
        denoising_loss(img, img, torch.zeros(1, 4, 4), 0.5)
    with pytest.raises(ConfigError):
        denoising_loss(img, img, m, 1.5)


def test_mask_loss_values():
    ones = torch.ones(1, 8, 8)
    half = torch.full((1, 8, 8), 0.5)
    assert float(mask_loss(ones, half)) == pytest.approx(math.log(2), rel=1e-6)
    zeros = torch.zeros(1, 8, 8)
    p9 = torch.full((1, 8, 8), 0.9)
    assert float(mask_loss(zeros, p9)) == pytest.approx(-math.log(0.1),
                                                        rel=1e-5)


def test_mask_loss_perfect_prediction_near_zero():
    gt = torch.zeros(1, 8, 8)
    gt[0, 2:5, 2:5] = 1.0
    assert float(mask_loss(gt, gt.clone())) < 2e-6


def test_mask_loss_shape_check():
    with pytest.raises(ShapeError):
        mask_loss(torch.zeros(1, 8, 8), torch.zeros(1, 4, 4))


def test_total_loss_values():
    cfg = LossConfig()
    assert float(total_loss(torch.tensor(1.0), torch.tensor(1.0), cfg)) \
        == pytest.approx(2.1)
    assert float(total_loss(torch.tensor(0.0), torch.tensor(0.0), cfg)) == 0.0
    assert float(total_loss(torch.tensor(0.5), torch.tensor(2.0), cfg)) \
        == pytest.approx(1.2)


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(gamma=1.2)
    with pytest.raises(ConfigError):
        LossConfig(dilation_r=-1)
    with pytest.raises(ConfigError):
        LossConfig(reduction="max")
    with pytest.raises(ConfigError):
        TrainConfig(parameterization="pred_v")


def test_total_loss_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(4)
    i_gt = torch.randn(3, 6, 6, generator=gen, dtype=torch.float64)
    i_pred = torch.randn(3, 6, 6, generator=gen,
                         dtype=torch.float64).requires_grad_(True)
    m = torch.rand(1, 6, 6, generator=gen, dtype=torch.float64)
    m_gt = (torch.rand(1, 6, 6, generator=gen) > 0.5).double()
    cfg = LossConfig()

    def loss_at(pred):
        return total_loss(denoising_loss(i_gt, pred, m, cfg.gamma),
                          mask_loss(m_gt, m), cfg)

    loss_at(i_pred).backward()
    rng = np.random.default_rng(5)
    h = 1e-6
    for _ in range(10):
        c, y, x = (int(rng.integers(s)) for s in i_pred.shape)
        up = i_pred.detach().clone()
        up[c, y, x] += h
        down = i_pred.detach().clone()
        down[c, y, x] -= h
        fd = (float(loss_at(up)) - float(loss_at(down))) / (2 * h)
        auto = float(i_pred.grad[c, y, x])
        assert abs(fd - auto) / max(abs(auto), 1e-9) < 1e-3


# ----------------------------------------------------------- batch plumbing

def test_prepare_batch_is_seeded_and_cropped():
    data = [fake_triplet(i) for i in range(4)]
    b1 = prepare_batch(data, [0, 2], torch.Generator().manual_seed(7),
                       crop=16, hflip=True)
    b2 = prepare_batch(data, [0, 2], torch.Generator().manual_seed(7),
                       crop=16, hflip=True)
    for key in ("i1", "i2", "i_gt", "m_gt"):
        assert b1[key].shape[-2:] == (16, 16)
        assert torch.equal(b1[key], b2[key])
    assert b1["ids"] == [data[0].seed, data[2].seed]
    with pytest.raises(ConfigError):
        prepare_batch(data, [0], torch.Generator(), crop=64)


# -------------------------------------------------------------- train_step

def test_train_step_smoke_and_determinism():
    data = [fake_triplet(i) for i in range(16)]
    sched = make_schedule(50)

    def run():
        codec = frozen_codec()
        torch.manual_seed(1)
        from diffalign.denoiser import Denoiser, DenoiserConfig
        den = Denoiser(DenoiserConfig(base=8, emb_dim=16))
        mixer = MotionMixer(radius=1, dilation_rounds=2)
        opt = torch.optim.Adam(list(den.parameters())
                               + list(mixer.parameters()), lr=1e-3)
        gen = torch.Generator().manual_seed(2)
        losses = []
        for step in range(10):
            batch = prepare_batch(data, [step % 16, (step + 1) % 16], gen)
            out = train_step(batch, den, mixer, codec, opt, sched,
                             LossConfig(), gen)
            assert math.isfinite(out["loss"])
            losses.append(out["loss"])
        return losses

    assert run() == run()


def test_train_step_requires_frozen_codec():
    codec = LatentCodec(CodecConfig(base=8))  # not frozen
    data = [fake_triplet(0)]
    sched = make_schedule(10)
    from diffalign.denoiser import Denoiser, DenoiserConfig
    den = Denoiser(DenoiserConfig(base=8, emb_dim=16))
    opt = torch.optim.Adam(den.parameters())
    gen = torch.Generator().manual_seed(0)
    batch = prepare_batch(data, [0], gen)
    with pytest.raises(ConfigError, match="frozen"):
        train_step(batch, den, None, codec, opt, sched, LossConfig(), gen)


def test_train_step_nan_aborts_with_diagnostics():
    codec = frozen_codec()
    data = [fake_triplet(3)]
    sched = make_schedule(10)
    from diffalign.denoiser import Denoiser, DenoiserConfig
    den = Denoiser(DenoiserConfig(base=8, emb_dim=16))
    with torch.no_grad():
        next(den.parameters()).fill_(float("nan"))
    opt = torch.optim.Adam(den.parameters())
    gen = torch.Generator().manual_seed(0)
    batch = prepare_batch(data, [0], gen)
    with pytest.raises(TrainingError, match="gamma"):
        train_step(batch, den, None, codec, opt, sched, LossConfig(), gen)


def test_no_dmp_ablation_fills_condition_with_v2():
    codec = frozen_codec()
    data = [fake_triplet(5)]
    sched = make_schedule(10)
    torch.manual_seed(0)
    from diffalign.denoiser import Denoiser, DenoiserConfig
    den = Denoiser(DenoiserConfig(base=8, emb_dim=16))
    opt = torch.optim.Adam(den.parameters())
    gen = torch.Generator().manual_seed(1)
    batch = prepare_batch(data, [0], gen)

    seen = {}
    handle = den.register_forward_pre_hook(
        lambda mod, args: seen.update(cond=args[1].detach().clone()))
    try:
        out = train_step(batch, den, None, codec, opt, sched, LossConfig(),
                         gen)
    finally:
        handle.remove()
    assert out["l_mask"] == 0.0
    assert out["loss"] == pytest.approx(2.0 * out["l_den"], rel=1e-6)
    c = codec.config.c_lat
    with torch.no_grad():
        v2 = codec.encode(batch["i2"])
    assert torch.equal(seen["cond"][:, 2 * c:], v2)
    assert torch.equal(seen["cond"][:, 2 * c:], seen["cond"][:, c:2 * c])


def test_train_step_pred_eps_parameterization():
    codec = frozen_codec()
    data = [fake_triplet(7), fake_triplet(8)]
    sched = make_schedule(20)
    torch.manual_seed(0)
    from diffalign.denoiser import Denoiser, DenoiserConfig
    den = Denoiser(DenoiserConfig(base=8, emb_dim=16,
                                  parameterization="pred_eps"))
    mixer = MotionMixer(radius=1, dilation_rounds=2)
    opt = torch.optim.Adam(list(den.parameters()) + list(mixer.parameters()))
    gen = torch.Generator().manual_seed(3)
    batch = prepare_batch(data, [0, 1], gen)
    out = train_step(batch, den, mixer, codec, opt, sched, LossConfig(), gen)
    assert math.isfinite(out["loss"]) and out["l_mask"] > 0.0


# --------------------------------------------------------------------- fit

def test_fit_end_to_end(tmp_path):
    data = [fake_triplet(i) for i in range(8)]
    codec = frozen_codec()
    sched = make_schedule(50)
    cfg = tiny_train_cfg(steps=4, ckpt_every=2, val_every=2, val_count=2,
                         val_stride=25)
    den, mixer, report = fit(data, codec, sched, cfg, LossConfig(),
                             out_dir=tmp_path, log=lambda *_: None)
    assert len(report.history) == 4
    assert all(math.isfinite(e["loss"]) for e in report.history)
    assert report.validation and "psnr" in report.validation[0]
    assert report.codec_checksum == codec.checksum()

    names = {p.name for p in tmp_path.iterdir()}
    assert "latest.pt" in names and "train-report.json" in names
    assert any(n.startswith("ckpt_step000002_") for n in names)
    assert any(n.startswith("ckpt_step000004_") for n in names)
    blob = json.loads((tmp_path / "train-report.json").read_text())
    assert len(blob["history"]) == 4

    loaded = load_checkpoint(tmp_path / "latest.pt")
    assert loaded["meta"]["step"] == 4
    assert loaded["meta"]["codec_checksum"] == codec.checksum()
    x = torch.randn(4, 8, 8)
    cond = torch.randn(12, 8, 8)
    with torch.no_grad():
        assert torch.equal(loaded["denoiser"](x, cond, 5), den(x, cond, 5))
    assert loaded["mixer"] is not None
    with pytest.raises(ConfigError, match="pred_eps"):
        load_checkpoint(tmp_path / "latest.pt",
                        expect_parameterization="pred_eps")


def test_fit_deterministic():
    data = [fake_triplet(i) for i in range(6)]
    sched = make_schedule(30)

    def run():
        codec = frozen_codec()
        _, _, report = fit(data, codec, sched, tiny_train_cfg(steps=3),
                           LossConfig(), log=lambda *_: None)
        return [e["loss"] for e in report.history]

    assert run() == run()


def test_fit_input_validation():
    codec = frozen_codec()
    sched = make_schedule(10)
    with pytest.raises(ConfigError, match="empty"):
        fit([], codec, sched, tiny_train_cfg())
    live = LatentCodec(CodecConfig(base=8))
    with pytest.raises(ConfigError, match="frozen"):
        fit([fake_triplet(0)], live, sched, tiny_train_cfg())
    bad = [fake_triplet(0, size=24)]  # 24 not a multiple of 4*f=16
    with pytest.raises(ConfigError, match="multiple"):
        fit(bad, codec, sched, tiny_train_cfg())
