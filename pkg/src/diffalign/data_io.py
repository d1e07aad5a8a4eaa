"""Dataset serialization: PNG frames/masks, Middlebury .flo flow, JSONL manifest.

Layout under a dataset root:

    manifest.jsonl          one record per sample
    <id>/i1.png  i2.png  igt.png   8-bit RGB
    <id>/mask.png  occ.png         8-bit single channel, 0 or 255
    <id>/flow.flo                  float32 (u, v), row-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .scene_sim import GENERATOR_VERSION, AlignmentTriplet

FLO_MAGIC = 202021.25


def write_png(path: Path, arr: np.ndarray) -> None:
    """8-bit PNG; bool arrays are stored as 0/255."""
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    if arr.dtype != np.uint8:
        raise DataError(f"{path}: expected uint8 or bool, got {arr.dtype}")
    Image.fromarray(arr).save(path)


def read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_flo(path: Path, flow: np.ndarray) -> None:
    """Middlebury layout: float magic, int32 width/height, float32 (u,v) pairs."""
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise DataError(f"{path}: flow must be (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    data = np.moveaxis(flow.astype("<f4"), 0, -1)  # (H, W, 2) row-major
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(data.tobytes())


def read_flo(path: Path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            magic = struct.unpack("<f", f.read(4))[0]
            if abs(magic - FLO_MAGIC) > 1e-3:
                raise DataError(f"{path}: bad flow magic {magic}")
            w, h = struct.unpack("<ii", f.read(8))
            raw = np.frombuffer(f.read(h * w * 2 * 4), dtype="<f4")
    except OSError as exc:
        raise DataError(f"cannot read flow {path}: {exc}") from exc
    if raw.size != h * w * 2:
        raise DataError(f"{path}: truncated flow payload")
    return np.moveaxis(raw.reshape(h, w, 2), -1, 0).copy()


@dataclass
class SampleRecord:
    id: str
    subset: str
    seed: int
    paths: dict
    generator_version: str = GENERATOR_VERSION


def write_dataset(triplets, root: Path) -> Path:
    """Write triplets and return the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.jsonl"
    with open(manifest, "w") as mf:
        for i, tr in enumerate(triplets):
            sid = f"{i:06d}"
            d = root / sid
            d.mkdir(exist_ok=True)
            write_png(d / "i1.png", tr.i1)
            write_png(d / "i2.png", tr.i2)
            write_png(d / "igt.png", tr.i_gt)
            write_png(d / "mask.png", tr.m_gt)
            write_png(d / "occ.png", tr.occ_gt)
            write_flo(d / "flow.flo", tr.flow_gt)
            rec = SampleRecord(
                id=sid, subset=tr.subset, seed=tr.seed,
                paths={k: f"{sid}/{v}" for k, v in [
                    ("i1", "i1.png"), ("i2", "i2.png"), ("igt", "igt.png"),
                    ("mask", "mask.png"), ("occ", "occ.png"),
                    ("flow", "flow.flo")]})
            mf.write(json.dumps(rec.__dict__, sort_keys=True) + "\n")
    return manifest


def read_manifest(root: Path) -> list[SampleRecord]:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise DataError(f"no manifest at {manifest}")
    records = []
    with open(manifest) as f:
        for line in f:
            if line.strip():
                records.append(SampleRecord(**json.loads(line)))
    return records


def load_sample(root: Path, rec: SampleRecord) -> AlignmentTriplet:
    root = Path(root)
    try:
        i1 = read_png(root / rec.paths["i1"])
        i2 = read_png(root / rec.paths["i2"])
        igt = read_png(root / rec.paths["igt"])
        mask = read_png(root / rec.paths["mask"]) > 127
        occ = read_png(root / rec.paths["occ"]) > 127
        flow = read_flo(root / rec.paths["flow"])
    except DataError as exc:
        raise DataError(f"sample {rec.id}: {exc}") from exc
    return AlignmentTriplet(i1=i1, i2=i2, i_gt=igt, m_gt=mask, flow_gt=flow,
                            occ_gt=occ, subset=rec.subset, seed=rec.seed,
                            camera_mag=float("nan"), fg_mag=float("nan"))


def read_dataset(root: Path) -> list[AlignmentTriplet]:
    """Eager load of every sample; raises on the first missing/corrupt file."""
    return [load_sample(root, rec) for rec in read_manifest(root)]
