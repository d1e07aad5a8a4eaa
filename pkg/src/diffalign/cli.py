"""Command-line pipeline: generate data, train, align, evaluate.

Every command is deterministic under its seed arguments, echoes its resolved
configuration next to its outputs, and returns exit code 0 only when the
whole job succeeded. Relative output paths can be redirected with the
DIFFALIGN_OUT_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data_io import read_dataset, read_png, write_dataset, write_png
from .errors import (
    ConfigError,
    DataError,
    MetricError,
    RenderError,
    SamplingError,
    ShapeError,
    TrainingError,
)
from .evaluation import (
    backward_warp,
    emit_plots,
    evaluate,
    fb_occlusion,
    invert_similarity_flow,
    report_hash,
)
from .latent_codec import CodecConfig, CodecTrainConfig, load_codec, save_codec, train_codec
from .scene_sim import GeneratorConfig, SubsetThresholds, make_triplet
from .training import LossConfig, TrainConfig, fit, load_checkpoint
from .sampling import Aligner, AlignResult
from .diffusion import make_schedule

_ERRORS = (ConfigError, ShapeError, DataError, TrainingError, MetricError,
           RenderError, SamplingError, FileNotFoundError)


def _out_path(p: str) -> Path:
    root = os.environ.get("DIFFALIGN_OUT_ROOT")
    path = Path(p)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return cfg


def _build(cls, kwargs: dict, what: str):
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {what} config: {exc}") from exc


def _echo_config(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{command}-config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=str))


def _derive_seed(base: int, i: int) -> int:
    return (base * 1_000_003 + i) % 2**63


def _generator_config(raw: dict) -> GeneratorConfig:
    raw = dict(raw)
    for key in ("sprite_count", "sprite_radius", "illum_gain", "illum_bias",
                "mask_area"):
        if key in raw:
            raw[key] = tuple(raw[key])
    for key in ("cam_trans", "cam_rot_deg", "cam_scale_dev", "fg_speed"):
        if key in raw:
            raw[key] = {k: tuple(v) for k, v in raw[key].items()}
    if "thresholds" in raw:
        raw["thresholds"] = _build(SubsetThresholds, raw["thresholds"],
                                   "subset thresholds")
    return _build(GeneratorConfig, raw, "generator")


def _cmd_gen_data(args) -> int:
    cfg = _generator_config(_load_json(args.config))
    out = _out_path(args.out)
    triplets = []
    for i in range(args.count):
        triplets.append(make_triplet(cfg, _derive_seed(args.seed, i)))
        if (i + 1) % 25 == 0 or i + 1 == args.count:
            print(f"generated {i + 1}/{args.count} triplets")
    manifest = write_dataset(triplets, out)
    _echo_config(out, "gen-data",
                 {"generator": asdict(cfg), "count": args.count,
                  "seed": args.seed})
    print(f"wrote {args.count} samples; manifest at {manifest}")
    return 0


def _cmd_train_codec(args) -> int:
    cfg = _load_json(args.config)
    train_cfg = _build(CodecTrainConfig, cfg.get("train", {}), "codec training")
    codec_cfg = _build(CodecConfig, cfg.get("codec", {}), "codec")
    data = read_dataset(Path(args.data))
    frames = [f for t in data for f in (t.i1, t.i2, t.i_gt)]
    codec, curve = train_codec(frames, train_cfg, codec_cfg)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_codec(out, codec)
    report = {"recon_psnr": codec.recon_psnr, "curve": curve,
              "checksum": codec.checksum(), "frames": len(frames)}
    (out.parent / "codec-report.json").write_text(json.dumps(report, indent=2))
    _echo_config(out.parent, "train-codec",
                 {"train": asdict(train_cfg), "codec": asdict(codec_cfg),
                  "data": str(args.data)})
    print(f"codec saved to {out} (held-out psnr {codec.recon_psnr:.2f} dB)")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_json(args.config)
    sched_cfg = cfg.get("schedule", {})
    schedule = make_schedule(T=sched_cfg.get("T", 1000),
                             beta_start=sched_cfg.get("beta_start", 1e-4),
                             beta_end=sched_cfg.get("beta_end", 0.02))
    train_kwargs = dict(cfg.get("train", {}))
    if args.no_dmp:
        train_kwargs["use_dmp"] = False
    if args.param:
        train_kwargs["parameterization"] = args.param
    train_cfg = _build(TrainConfig, train_kwargs, "training")
    loss_cfg = _build(LossConfig, cfg.get("loss", {}), "loss")

    codec = load_codec(Path(args.codec))
    if not codec.frozen:
        raise ConfigError(f"codec checkpoint {args.codec} is not frozen; "
                          f"run train-codec to completion first")
    data = read_dataset(Path(args.data))
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.codec, out / "codec.pt")
    _echo_config(out, "train",
                 {"train": asdict(train_cfg), "loss": asdict(loss_cfg),
                  "schedule": json.loads(schedule.to_json()),
                  "data": str(args.data), "codec": str(args.codec)})
    _, _, report = fit(data, codec, schedule, train_cfg, loss_cfg,
                       out_dir=out)
    print(f"training done; checkpoints in {out} "
          f"(config hash {report.config_hash})")
    return 0


def _load_aligner(ckpt_dir: Path) -> tuple[Aligner, dict]:
    latest = ckpt_dir / "latest.pt"
    codec_path = ckpt_dir / "codec.pt"
    for p in (latest, codec_path):
        if not p.exists():
            raise FileNotFoundError(
                f"{p} not found; --ckpt must point at a train output dir")
    codec = load_codec(codec_path)
    loaded = load_checkpoint(latest)
    if codec.checksum() != loaded["meta"]["codec_checksum"]:
        raise ConfigError(
            f"codec in {ckpt_dir} does not match the checkpoint's frozen "
            f"codec (checksum mismatch)")
    aligner = Aligner(loaded["denoiser"], loaded["mixer"], codec,
                      loaded["schedule"])
    return aligner, loaded["meta"]


def _cmd_align(args) -> int:
    aligner, meta = _load_aligner(Path(args.ckpt))
    i1 = read_png(Path(args.i1))
    i2 = read_png(Path(args.i2))
    res = aligner.align(i1, i2, stride=args.steps, eta=args.eta,
                        seed=args.seed)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "aligned.png", res.image)
    write_png(out / "mask.png",
              np.rint(res.mask * 255.0).astype(np.uint8))
    (out / "align-sidecar.json").write_text(json.dumps(res.meta, indent=2))
    _echo_config(out, "align",
                 {"ckpt": str(args.ckpt), "i1": str(args.i1),
                  "i2": str(args.i2), "steps": args.steps, "eta": args.eta,
                  "seed": args.seed, "config_hash": meta["config_hash"]})
    print(f"aligned image written to {out / 'aligned.png'} "
          f"({res.meta['denoiser_calls']} denoiser calls, "
          f"{res.meta['runtime_ms']:.0f} ms)")
    return 0


def _baseline_outputs(kind: str, data) -> list:
    outputs = []
    for tri in data:
        if kind == "identity":
            outputs.append(tri.i2.copy())
        else:  # gt-flow-warp
            warped, _ = backward_warp(tri.i2, tri.flow_gt)
            outputs.append(warped)
    return outputs


def _exclusion_masks(kind: str | None, data) -> list:
    """Pixels dropped under the occlusion-masked protocol.

    The GT-flow baseline detects occlusion from its own flow pair (forward
    consistency against the inverted similarity flow); other methods have no
    flow pair, so the analytic occlusion labels are used.
    """
    masks = []
    for tri in data:
        if kind == "gt-flow-warp":
            bwd = invert_similarity_flow(tri.flow_gt)
            masks.append(fb_occlusion(tri.flow_gt, bwd))
        else:
            masks.append(tri.occ_gt)
    return masks


def _cmd_eval(args) -> int:
    data = read_dataset(Path(args.data))
    if not data:
        raise DataError(f"no samples found under {args.data}")
    hash_src = {"baseline": args.baseline, "data": str(args.data),
                "occlusion_masked": args.occlusion_masked,
                "steps": args.steps, "seed": args.seed}

    if args.baseline:
        outputs = _baseline_outputs(args.baseline, data)
    else:
        if not args.ckpt:
            raise ConfigError("eval needs --ckpt unless --baseline is given")
        aligner, meta = _load_aligner(Path(args.ckpt))
        hash_src["ckpt_config_hash"] = meta["config_hash"]
        results = aligner.align_batch([(t.i1, t.i2) for t in data],
                                      stride=args.steps, seed=args.seed)
        outputs = []
        for i, r in enumerate(results):
            if isinstance(r, AlignResult):
                outputs.append(r.image)
            else:
                print(f"warning: sample {i} failed: {r}", file=sys.stderr)
                outputs.append(None)

    exclude = (_exclusion_masks(args.baseline, data)
               if args.occlusion_masked else None)
    report = evaluate(outputs, data, exclude=exclude,
                      config_hash=report_hash(hash_src))
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.md").write_text(report.to_markdown() + "\n")
    emit_plots(report, out)
    _echo_config(out, "eval", hash_src)
    print(report.to_markdown())
    if report.missing:
        print(f"warning: {len(report.missing)} samples missing from averages",
              file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="diffalign",
        description="Diffusion-based image alignment on synthetic scenes")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a triplet dataset")
    g.add_argument("--config", default=None, help="generator config JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gen_data)

    c = sub.add_parser("train-codec", help="fit and freeze the latent codec")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True, help="checkpoint file path")
    c.add_argument("--config", default=None)
    c.set_defaults(func=_cmd_train_codec)

    t = sub.add_parser("train", help="train the aligner on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--codec", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--no-dmp", action="store_true",
                   help="ablation: drop the motion-mask branch")
    t.add_argument("--param", choices=["pred_x0", "pred_eps"], default=None)
    t.set_defaults(func=_cmd_train)

    a = sub.add_parser("align", help="align one image pair")
    a.add_argument("--ckpt", required=True, help="train output directory")
    a.add_argument("--i1", required=True)
    a.add_argument("--i2", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--steps", type=int, default=20, help="timestep stride")
    a.add_argument("--eta", type=float, default=0.0)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=_cmd_align)

    e = sub.add_parser("eval", help="score a method over a dataset")
    e.add_argument("--ckpt", default=None)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--baseline", choices=["identity", "gt-flow-warp"],
                   default=None)
    e.add_argument("--occlusion-masked", action="store_true")
    e.add_argument("--steps", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
