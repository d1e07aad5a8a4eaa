"""Metrics, warping baseline, occlusion detection, and report assembly.

Images may be uint8 or float arrays; metrics operate on the [0, 1] range.
Flow fields follow the dataset convention: the value at target pixel p is the
displacement to its source, so source = p + flow(p).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import ConfigError, MetricError, ShapeError

PSNR_CAP_DB = 99.0
SUBSET_ORDER = ("LcLf", "LcSf", "ScLf", "ScSf")


def _as_float(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# scalar metrics


def psnr(a: np.ndarray, b: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB over the valid pixels (MAX = 1)."""
    _check_pair(a, b)
    sq = (_as_float(a) - _as_float(b)) ** 2
    if sq.ndim == 3:
        sq = sq.mean(axis=-1)
    if valid is not None:
        if valid.shape != sq.shape:
            raise ShapeError(f"valid mask {valid.shape} does not match {sq.shape}")
        if not valid.any():
            raise MetricError("valid mask is empty; PSNR undefined")
        sq = sq[valid.astype(bool)]
    mse = float(sq.mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _ssim_map(a: np.ndarray, b: np.ndarray, sigma: float = 1.5,
              c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> np.ndarray:
    # 11x11 Gaussian window at sigma=1.5 (radius 5 via truncate=3.5)
    def f(x):
        return gaussian_filter(x, sigma, truncate=3.5, mode="reflect")

    ua, ub = f(a), f(b)
    vaa = f(a * a) - ua * ua
    vbb = f(b * b) - ub * ub
    vab = f(a * b) - ua * ub
    num = (2 * ua * ub + c1) * (2 * vab + c2)
    den = (ua * ua + ub * ub + c1) * (vaa + vbb + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Single-scale structural similarity; channels averaged for color input."""
    _check_pair(a, b)
    af, bf = _as_float(a), _as_float(b)
    if min(af.shape[0], af.shape[1]) < 11:
        raise ConfigError(f"image {af.shape} smaller than the 11x11 window")
    if af.ndim == 2:
        af, bf = af[..., None], bf[..., None]
    maps = np.stack([_ssim_map(af[..., c], bf[..., c])
                     for c in range(af.shape[2])], axis=-1)
    smap = maps.mean(axis=-1)
    if valid is not None:
        if valid.shape != smap.shape:
            raise ShapeError(f"valid mask {valid.shape} does not match {smap.shape}")
        if not valid.any():
            raise MetricError("valid mask is empty; SSIM undefined")
        return float(smap[valid.astype(bool)].mean())
    return float(smap.mean())


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; empty union counts as 1."""
    _check_pair(a, b)
    a, b = a.astype(bool), b.astype(bool)
    union = (a | b).sum()
    if union == 0:
        return 1.0
    return float((a & b).sum() / union)


# --------------------------------------------------------------------------
# warping and occlusion


def backward_warp(source: np.ndarray, flow: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Resample `source` at p + flow(p) with bilinear, edge-clamped lookups.

    Returns (warped, valid) where valid marks pixels whose sample point lies
    inside the source frame; outside samples take edge values and are the
    classic source of ghosting.
    """
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must be (2, H, W), got {flow.shape}")
    h, w = flow.shape[1:]
    if source.shape[:2] != (h, w):
        raise ShapeError(f"source {source.shape} does not match flow {flow.shape}")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = xx + flow[0].astype(np.float64)
    sy = yy + flow[1].astype(np.float64)
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    src = _as_float(source)
    if src.ndim == 2:
        src = src[..., None]
    out = np.empty((h, w, src.shape[2]), np.float64)
    for c in range(src.shape[2]):
        out[..., c] = map_coordinates(src[..., c], [sy, sx], order=1,
                                      mode="nearest")
    if source.ndim == 2:
        out = out[..., 0]
    if source.dtype == np.uint8:
        out = np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)
    return out, valid


def fb_occlusion(flow_fwd: np.ndarray, flow_bwd: np.ndarray,
                 alpha: float = 0.01, beta: float = 0.5) -> np.ndarray:
    """Forward-backward consistency check.

    Pixel p is flagged when the round trip p -> p + fwd(p) -> back does not
    land near p: |fwd + bwd(p + fwd)|^2 > alpha * (|fwd|^2 + |bwd|^2) + beta.
    The backward field is sampled bilinearly with zeros beyond the frame.
    """
    if flow_fwd.shape != flow_bwd.shape or flow_fwd.shape[0] != 2:
        raise ShapeError(
            f"flow shapes mismatch: {flow_fwd.shape} vs {flow_bwd.shape}")
    h, w = flow_fwd.shape[1:]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = xx + flow_fwd[0].astype(np.float64)
    sy = yy + flow_fwd[1].astype(np.float64)
    bwd = np.stack([
        map_coordinates(flow_bwd[c].astype(np.float64), [sy, sx], order=1,
                        mode="constant", cval=0.0)
        for c in range(2)])
    res = (flow_fwd[0] + bwd[0]) ** 2 + (flow_fwd[1] + bwd[1]) ** 2
    mag = flow_fwd[0] ** 2 + flow_fwd[1] ** 2 + bwd[0] ** 2 + bwd[1] ** 2
    return res > alpha * mag + beta


def fit_similarity_flow(flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares affine fit of p + flow(p) = A p + b (exact for global
    similarity flows, which is what the camera produces)."""
    h, w = flow.shape[1:]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    design = np.stack([xx.ravel(), yy.ravel(), np.ones(h * w)], axis=1)
    target = np.stack([flow[0].ravel(), flow[1].ravel()], axis=1)
    sol, *_ = np.linalg.lstsq(design, target, rcond=None)
    return np.eye(2) + sol[:2].T, sol[2]


def invert_similarity_flow(flow: np.ndarray) -> np.ndarray:
    """Backward flow field of the similarity best fitting `flow`."""
    a, b = fit_similarity_flow(flow)
    a_inv = np.linalg.inv(a)
    h, w = flow.shape[1:]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = a_inv[0, 0] * (xx - b[0]) + a_inv[0, 1] * (yy - b[1])
    sy = a_inv[1, 0] * (xx - b[0]) + a_inv[1, 1] * (yy - b[1])
    return np.stack([sx - xx, sy - yy]).astype(np.float32)


# --------------------------------------------------------------------------
# report assembly


@dataclass
class EvalReport:
    per_subset: dict = field(default_factory=dict)
    average: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    missing: list = field(default_factory=list)
    config_hash: str = ""

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    def to_markdown(self) -> str:
        metrics = sorted(self.average)
        subsets = [s for s in SUBSET_ORDER if s in self.per_subset]
        head = "| metric | " + " | ".join(subsets) + " | Avg |"
        rule = "|---" * (len(subsets) + 2) + "|"
        lines = [head, rule]
        for m in metrics:
            cells = [f"{self.per_subset[s][m]:.2f}" for s in subsets]
            lines.append(f"| {m} | " + " | ".join(cells)
                         + f" | {self.average[m]:.2f} |")
        return "\n".join(lines)


def evaluate(outputs, dataset, exclude=None, config_hash: str = "") -> EvalReport:
    """Score one aligned output per dataset sample against its target frame.

    `outputs` entries may be None to mark a sample a method failed to produce;
    those are listed in the report and left out of the averages. `exclude`
    optionally gives per-sample masks of pixels to drop (the occlusion-masked
    protocol): when present, *_masked metrics are added.
    """
    if len(outputs) != len(dataset):
        raise ShapeError(f"{len(outputs)} outputs for {len(dataset)} samples")
    if exclude is not None and len(exclude) != len(dataset):
        raise ShapeError("exclusion mask count does not match dataset")
    rows = []
    missing = []
    for i, (out, sample) in enumerate(zip(outputs, dataset)):
        if out is None:
            missing.append(i)
            continue
        row = {"subset": sample.subset,
               "psnr": psnr(out, sample.i_gt),
               "ssim": ssim(out, sample.i_gt)}
        if exclude is not None:
            keep = ~exclude[i].astype(bool)
            row["psnr_masked"] = psnr(out, sample.i_gt, valid=keep)
            row["ssim_masked"] = ssim(out, sample.i_gt, valid=keep)
        rows.append(row)
    if not rows:
        raise MetricError("no outputs to evaluate")

    metrics = [k for k in rows[0] if k != "subset"]
    report = EvalReport(config_hash=config_hash, missing=missing)
    for subset in sorted({r["subset"] for r in rows}):
        sub = [r for r in rows if r["subset"] == subset]
        report.counts[subset] = len(sub)
        report.per_subset[subset] = {
            m: float(np.mean([r[m] for r in sub])) for m in metrics}
    report.average = {m: float(np.mean([r[m] for r in rows])) for m in metrics}
    report.counts["total"] = len(rows)
    return report


def report_hash(payload) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def emit_plots(report: EvalReport, out_dir: Path) -> list[Path]:
    """Bar charts of the per-subset metrics; returns the written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    subsets = [s for s in SUBSET_ORDER if s in report.per_subset]
    for metric in sorted(report.average):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        vals = [report.per_subset[s][metric] for s in subsets]
        ax.bar(subsets, vals, color="#4878a8")
        ax.axhline(report.average[metric], color="#c44e52", linestyle="--",
                   label=f"avg {report.average[metric]:.2f}")
        ax.set_ylabel(metric)
        ax.legend(frameon=False)
        fig.tight_layout()
        path = out_dir / f"{metric}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
