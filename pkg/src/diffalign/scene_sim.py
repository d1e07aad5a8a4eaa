"""Procedural 2D layered-scene generator for alignment triplets.

A scene is a large textured background plus feather-edged sprites, viewed
through a moving similarity camera (translation + rotation + scale) under a
global affine illumination ramp. Because the world is a single plane, every
ground-truth quantity (aligned frame, camera flow, moving-region mask,
occlusion mask) is available in closed form:

    I1   = render(t1, P1)        P1 = camera pose at t1
    I2   = render(t2, P2)
    I_gt = render(t2, P1)        scene advanced, viewpoint held

The target frame I_gt and I2 show the same instant from two poses, so the
flow between them is the pure camera similarity, and a pixel of I_gt is
unreachable from I2 exactly when its source lands outside the I2 frame.

All generation is a pure function of (config, seed).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import ConfigError, RenderError

GENERATOR_VERSION = "1"

SUBSETS = ("LcLf", "LcSf", "ScLf", "ScSf")

# texture values stay inside this band so the illumination ramp never clips,
# keeping the composite image a linear (hence smooth) function everywhere
_TEX_LO, _TEX_HI = 0.12, 0.72
_TEX_BASE = 0.42


# --------------------------------------------------------------------------
# similarity transform


@dataclass(frozen=True)
class Sim2:
    """2D similarity as a 2x3 matrix acting on (x, y) pixel coordinates."""

    m: np.ndarray  # float64, shape (2, 3)

    @staticmethod
    def identity() -> "Sim2":
        return Sim2(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @staticmethod
    def from_params(scale: float, theta: float, tx: float, ty: float,
                    pivot: tuple[float, float] = (0.0, 0.0)) -> "Sim2":
        """p -> scale * R(theta) @ (p - pivot) + pivot + (tx, ty)."""
        c, s = math.cos(theta), math.sin(theta)
        a = scale * np.array([[c, -s], [s, c]])
        px, py = pivot
        t = np.array([px + tx, py + ty]) - a @ np.array([px, py])
        return Sim2(np.column_stack([a, t]))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform points; last axis is (x, y)."""
        a, t = self.m[:, :2], self.m[:, 2]
        return pts @ a.T + t

    def inverse(self) -> "Sim2":
        a, t = self.m[:, :2], self.m[:, 2]
        ai = np.linalg.inv(a)
        return Sim2(np.column_stack([ai, -ai @ t]))

    def compose(self, other: "Sim2") -> "Sim2":
        """self after other: (self.compose(other)).apply(p) == self(other(p))."""
        a1, t1 = self.m[:, :2], self.m[:, 2]
        a2, t2 = other.m[:, :2], other.m[:, 2]
        return Sim2(np.column_stack([a1 @ a2, a1 @ t2 + t1]))

    @property
    def scale(self) -> float:
        return float(np.sqrt(abs(np.linalg.det(self.m[:, :2]))))


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SubsetThresholds:
    """Pixel thresholds separating small from large motion, inclusive on the
    large side. Stated at a 256-px-high viewport and rescaled by height."""

    camera: float = 8.0
    foreground: float = 8.0
    reference_height: int = 256

    def scaled(self, height: int) -> "SubsetThresholds":
        f = height / self.reference_height
        return replace(self, camera=self.camera * f,
                       foreground=self.foreground * f, reference_height=height)


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for the triplet generator.

    Pixel-valued ranges are stated at a 256-px-high viewport and scale
    linearly with the configured height. Motion ranges are per class:
    "L" draws land at or above the subset threshold, "S" draws below it.
    """

    height: int = 256
    width: int = 256
    sprite_count: tuple[int, int] = (2, 4)
    sprite_radius: tuple[float, float] = (20.0, 44.0)
    feather: float = 12.0
    cam_trans: dict = field(default_factory=lambda: {
        "L": (10.0, 20.0), "S": (0.5, 4.0)})
    cam_rot_deg: dict = field(default_factory=lambda: {
        "L": (0.0, 1.5), "S": (0.0, 0.5)})
    cam_scale_dev: dict = field(default_factory=lambda: {
        "L": (0.0, 0.05), "S": (0.0, 0.01)})
    fg_speed: dict = field(default_factory=lambda: {
        "L": (10.0, 22.0), "S": (0.5, 5.0)})
    sprite_rot_deg: float = 5.0
    illum_gain: tuple[float, float] = (0.8, 1.25)
    illum_bias: tuple[float, float] = (-16.0 / 255.0, 16.0 / 255.0)
    t1: float = 0.0
    t2: float = 1.0
    mask_area: tuple[float, float] = (0.02, 0.40)
    thresholds: SubsetThresholds = field(default_factory=SubsetThresholds)
    max_resample: int = 40

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"viewport {self.width}x{self.height} too small")
        if self.sprite_count[0] < 0 or self.sprite_count[0] > self.sprite_count[1]:
            raise ConfigError(f"bad sprite_count range {self.sprite_count}")
        if self.sprite_radius[0] <= 0:
            raise ConfigError("sprite radius must be positive")
        if self.t1 == self.t2:
            raise ConfigError("t1 and t2 must differ")
        if not (0 < self.illum_gain[0] <= self.illum_gain[1]):
            raise ConfigError(f"bad gain range {self.illum_gain}")
        for name in ("cam_trans", "cam_rot_deg", "cam_scale_dev", "fg_speed"):
            d = getattr(self, name)
            if set(d) != {"L", "S"}:
                raise ConfigError(f"{name} needs exactly the keys 'L' and 'S'")
            for lo, hi in d.values():
                if lo < 0 or hi < lo:
                    raise ConfigError(f"bad range ({lo}, {hi}) in {name}")
        if not (0.0 <= self.mask_area[0] <= self.mask_area[1] <= 1.0):
            raise ConfigError(f"bad mask_area range {self.mask_area}")

    @property
    def px_scale(self) -> float:
        return self.height / 256.0

    def px(self, v: float) -> float:
        return v * self.px_scale


# --------------------------------------------------------------------------
# scene description


@dataclass(frozen=True)
class CameraPath:
    """Similarity pose as a function of time; identity at t=0, parameters
    interpolated linearly to their t=1 endpoints."""

    trans: tuple[float, float]
    rot: float  # radians at t=1
    scale_end: float
    pivot: tuple[float, float]  # viewport center
    offset: tuple[float, float]  # viewport origin inside the background

    def pose(self, t: float) -> Sim2:
        s = 1.0 + t * (self.scale_end - 1.0)
        pose = Sim2.from_params(s, t * self.rot, t * self.trans[0],
                                t * self.trans[1], pivot=self.pivot)
        shift = Sim2.from_params(1.0, 0.0, self.offset[0], self.offset[1])
        return shift.compose(pose)


@dataclass(frozen=True)
class SpritePath:
    """Rigid trajectory: linear drift plus rotation about the sprite center."""

    pos0: tuple[float, float]  # world position of the sprite center at t=0
    vel: tuple[float, float]  # world px per unit time
    omega: float  # radians per unit time

    def pose(self, t: float, center_local: tuple[float, float]) -> Sim2:
        px = self.pos0[0] + t * self.vel[0] - center_local[0]
        py = self.pos0[1] + t * self.vel[1] - center_local[1]
        return Sim2.from_params(1.0, t * self.omega, px, py, pivot=center_local)

    def displacement(self, t1: float, t2: float) -> float:
        dt = t2 - t1
        return math.hypot(self.vel[0] * dt, self.vel[1] * dt)

    @property
    def moving(self) -> bool:
        return abs(self.vel[0]) > 1e-12 or abs(self.vel[1]) > 1e-12 \
            or abs(self.omega) > 1e-12


@dataclass(frozen=True)
class Sprite:
    """RGBA raster (float32, straight alpha) with its center in local coords."""

    rgba: np.ndarray
    center: tuple[float, float]


@dataclass(frozen=True)
class IllumRamp:
    """Global affine intensity change, linear in t between the endpoints."""

    gain: tuple[float, float]
    bias: tuple[float, float]

    def at(self, t: float) -> tuple[float, float]:
        return (self.gain[0] + t * (self.gain[1] - self.gain[0]),
                self.bias[0] + t * (self.bias[1] - self.bias[0]))


@dataclass(frozen=True)
class SceneSpec:
    background: np.ndarray  # float32 (Hb, Wb, 3)
    sprites: tuple[Sprite, ...]
    camera_path: CameraPath
    sprite_paths: tuple[SpritePath, ...]
    illumination: IllumRamp
    seed: int
    config: GeneratorConfig

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.background.tobytes())
        for s in self.sprites:
            h.update(s.rgba.tobytes())
        h.update(repr((self.camera_path, self.sprite_paths,
                       self.illumination, self.seed)).encode())
        return h.hexdigest()[:16]


@dataclass
class AlignmentTriplet:
    i1: np.ndarray  # uint8 (H, W, 3)
    i2: np.ndarray
    i_gt: np.ndarray
    m_gt: np.ndarray  # bool (H, W), union of moving-sprite footprints
    flow_gt: np.ndarray  # float32 (2, H, W), target I_gt -> source I2
    occ_gt: np.ndarray  # bool (H, W), I_gt pixels with no I2 source
    subset: str
    seed: int
    camera_mag: float
    fg_mag: float


# --------------------------------------------------------------------------
# texture synthesis


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    z = gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    sd = z.std()
    return z / sd if sd > 1e-12 else z


def _background_texture(rng: np.random.Generator, h: int, w: int,
                        sc: float) -> np.ndarray:
    # strong large-scale structure plus weak fine detail: enough contrast for
    # alignment metrics to move, low enough curvature that resampling the
    # rendered frames stays within a quantization step of ground truth
    coarse = _smooth_noise(rng, (h, w), max(3.5, 14.0 * sc))
    mid = _smooth_noise(rng, (h, w), max(2.2, 7.0 * sc))
    fine = _smooth_noise(rng, (h, w), 2.2)
    luma = 0.20 * coarse + 0.024 * mid + 0.002 * fine
    span = min(_TEX_HI - _TEX_BASE, _TEX_BASE - _TEX_LO) * 0.97
    img = np.empty((h, w, 3), np.float32)
    for c in range(3):
        chroma = 0.035 * _smooth_noise(rng, (h, w), max(3.5, 14.0 * sc))
        # squash smoothly into the band; hard clipping would add kinks that
        # break the resampling error budget
        img[:, :, c] = _TEX_BASE + span * np.tanh((luma + chroma) / span)
    return img


def _make_sprite(rng: np.random.Generator, radius: float, feather: float,
                 sc: float) -> Sprite:
    # lobed blob: radius modulated by a few low harmonics, feathered rim
    n_harm = 3
    amps = rng.uniform(0.0, 0.12, n_harm)
    phases = rng.uniform(0.0, 2 * math.pi, n_harm)
    half = int(math.ceil(1.3 * radius + feather)) + 2
    size = 2 * half + 1
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - half, yy - half
    ang = np.arctan2(dy, dx)
    rim = radius * (1.0 + sum(a * np.cos((k + 2) * ang + p)
                              for k, (a, p) in enumerate(zip(amps, phases))))
    dist = rim - np.hypot(dx, dy)
    ramp = np.clip(dist / max(feather, 1e-6) + 0.5, 0.0, 1.0)
    alpha = 0.5 - 0.5 * np.cos(math.pi * ramp)  # smooth rim profile

    # texture fades in well inside the opaque core, keeping the rim band a
    # blend between the plain base color and the background only
    env_width = max(2.0 * feather, 0.5 * radius)
    env_ramp = np.clip((dist - feather) / env_width, 0.0, 1.0)
    env = 0.5 - 0.5 * np.cos(math.pi * env_ramp)

    tint = rng.uniform(-0.12, 0.12)
    tex = _smooth_noise(rng, (size, size), max(2.0, 7.0 * sc)) * 0.10
    rgba = np.empty((size, size, 4), np.float32)
    for c in range(3):
        chroma = rng.uniform(-0.05, 0.05)
        col = _TEX_BASE + env * (tint + chroma + tex)
        rgba[:, :, c] = np.clip(col, _TEX_LO, _TEX_HI)
    rgba[:, :, 3] = alpha
    return Sprite(rgba=rgba, center=(float(half), float(half)))


# --------------------------------------------------------------------------
# scene assembly


def _signed(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi)) * (1.0 if rng.random() < 0.5 else -1.0)


def make_scene(config: GeneratorConfig, seed: int) -> SceneSpec:
    """Deterministically assemble a scene for one triplet."""
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width
    sc = config.px_scale

    target = SUBSETS[int(rng.integers(0, 4))]
    cam_class, fg_class = target[0], target[2]

    # camera endpoint draws
    tmag = config.px(float(rng.uniform(*config.cam_trans[cam_class])))
    tang = rng.uniform(0.0, 2 * math.pi)
    trans = (tmag * math.cos(tang), tmag * math.sin(tang))
    rot = math.radians(_signed(rng, *config.cam_rot_deg[cam_class]))
    scale_end = 1.0 + _signed(rng, *config.cam_scale_dev[cam_class])

    gain = (float(rng.uniform(*config.illum_gain)),
            float(rng.uniform(*config.illum_gain)))
    bias = (float(rng.uniform(*config.illum_bias)),
            float(rng.uniform(*config.illum_bias)))

    # background sized so every sampled pose stays inside it
    t_hi = max(abs(config.t1), abs(config.t2), 1.0)
    diag = math.hypot(h, w)
    margin = int(math.ceil(t_hi * (tmag + 0.06 * diag) + 8 * sc + 2))
    bg = _background_texture(rng, h + 2 * margin, w + 2 * margin, sc)

    camera = CameraPath(trans=trans, rot=rot, scale_end=scale_end,
                        pivot=((w - 1) / 2.0, (h - 1) / 2.0),
                        offset=(float(margin), float(margin)))
    p1 = camera.pose(config.t1)
    p2 = camera.pose(config.t2)

    n_spr = int(rng.integers(config.sprite_count[0], config.sprite_count[1] + 1))
    sprites: list[Sprite] = []
    paths: list[SpritePath] = []
    dt = config.t2 - config.t1
    for _ in range(n_spr):
        radius = config.px(rng.uniform(*config.sprite_radius))
        sprite = _make_sprite(rng, radius, max(2.0, config.px(config.feather)), sc)
        pad = 0.7 * radius + 2
        u1 = np.array([rng.uniform(pad, w - 1 - pad),
                       rng.uniform(pad, h - 1 - pad)])
        c1_world = p1.apply(u1)
        disp = config.px(rng.uniform(*config.fg_speed[fg_class]))
        # keep the center on-screen at t2 as well; re-aim if it drifts out
        for attempt in range(25):
            ang = rng.uniform(0.0, 2 * math.pi)
            c2_world = c1_world + disp * np.array([math.cos(ang), math.sin(ang)])
            u2 = p2.inverse().apply(c2_world)
            if pad * 0.5 <= u2[0] <= w - 1 - pad * 0.5 \
                    and pad * 0.5 <= u2[1] <= h - 1 - pad * 0.5:
                break
        else:
            c2_world = c1_world  # give up on this one; it becomes static
        vel = (c2_world - c1_world) / dt
        pos0 = c1_world - vel * config.t1
        omega = math.radians(_signed(rng, 0.0, config.sprite_rot_deg)) / abs(dt)
        if np.allclose(vel, 0.0):
            omega = 0.0
        sprites.append(sprite)
        paths.append(SpritePath(pos0=(float(pos0[0]), float(pos0[1])),
                                vel=(float(vel[0]), float(vel[1])),
                                omega=omega))

    return SceneSpec(background=bg, sprites=tuple(sprites),
                     camera_path=camera, sprite_paths=tuple(paths),
                     illumination=IllumRamp(gain=gain, bias=bias),
                     seed=seed, config=config)


# --------------------------------------------------------------------------
# rendering


def _viewport_grid(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([xx, yy], axis=-1)  # (H, W, 2) as (x, y)


def _sample(img: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Bilinear sample of (H, W, C) at (..., 2) (x, y) positions."""
    stack = [coords[..., 1], coords[..., 0]]  # row, col
    out = np.empty(coords.shape[:-1] + (img.shape[2],), np.float64)
    for c in range(img.shape[2]):
        out[..., c] = map_coordinates(img[:, :, c].astype(np.float64), stack,
                                      order=1, mode="nearest")
    return out


def _render_frame(scene: SceneSpec, t: float, pose: Sim2) -> np.ndarray:
    """Float RGB render of the scene at time t through the given pose."""
    cfg = scene.config
    h, w = cfg.height, cfg.width
    bgh, bgw = scene.background.shape[:2]
    world = pose.apply(_viewport_grid(h, w))
    if world[..., 0].min() < 0 or world[..., 1].min() < 0 \
            or world[..., 0].max() > bgw - 1 or world[..., 1].max() > bgh - 1:
        raise RenderError(f"viewport left the background (scene seed {scene.seed})")
    out = _sample(scene.background, world)

    for sprite, path in zip(scene.sprites, scene.sprite_paths):
        to_local = path.pose(t, sprite.center).inverse()
        local = to_local.apply(world)
        sh, sw = sprite.rgba.shape[:2]
        inside = ((local[..., 0] > -1) & (local[..., 0] < sw)
                  & (local[..., 1] > -1) & (local[..., 1] < sh))
        if not inside.any():
            continue
        pts = local[inside]
        a = _sample(sprite.rgba[:, :, 3:4], pts)[..., 0]
        premult = _sample(sprite.rgba[:, :, :3] * sprite.rgba[:, :, 3:4], pts)
        region = out[inside]
        out[inside] = premult + (1.0 - a[:, None]) * region

    g, b = scene.illumination.at(t)
    np.clip(out * g + b, 0.0, 1.0, out=out)
    return out


def _sprite_footprint(scene: SceneSpec, t: float, pose: Sim2,
                      only_moving: bool) -> np.ndarray:
    """Boolean mask of sprite coverage (alpha > 0.5) seen through `pose`."""
    cfg = scene.config
    world = pose.apply(_viewport_grid(cfg.height, cfg.width))
    mask = np.zeros((cfg.height, cfg.width), bool)
    for sprite, path in zip(scene.sprites, scene.sprite_paths):
        if only_moving and not path.moving:
            continue
        local = path.pose(t, sprite.center).inverse().apply(world)
        sh, sw = sprite.rgba.shape[:2]
        inside = ((local[..., 0] > -1) & (local[..., 0] < sw)
                  & (local[..., 1] > -1) & (local[..., 1] < sh))
        if not inside.any():
            continue
        a = _sample(sprite.rgba[:, :, 3:4], local[inside])[..., 0]
        sub = mask[inside]
        mask[inside] = sub | (a > 0.5)
    return mask


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def render_triplet(scene: SceneSpec, t1: float | None = None,
                   t2: float | None = None) -> AlignmentTriplet:
    """Render (I1, I2, I_gt) with exact flow, motion-mask and occlusion GT."""
    cfg = scene.config
    t1 = cfg.t1 if t1 is None else t1
    t2 = cfg.t2 if t2 is None else t2
    if t1 == t2:
        raise ConfigError("t1 and t2 must differ")
    p1 = scene.camera_path.pose(t1)
    p2 = scene.camera_path.pose(t2)

    i1 = _render_frame(scene, t1, p1)
    i2 = _render_frame(scene, t2, p2)
    i_gt = _render_frame(scene, t2, p1)

    h, w = cfg.height, cfg.width
    grid = _viewport_grid(h, w)
    src = p2.inverse().compose(p1).apply(grid)  # I_gt pixel -> I2 coords
    flow = (src - grid).astype(np.float32)
    occ = ((src[..., 0] < 0) | (src[..., 0] > w - 1)
           | (src[..., 1] < 0) | (src[..., 1] > h - 1))

    m_gt = (_sprite_footprint(scene, t1, p1, only_moving=True)
            | _sprite_footprint(scene, t2, p1, only_moving=True))

    camera_mag = float(np.hypot(flow[..., 0], flow[..., 1]).mean())
    disps = []
    for path in scene.sprite_paths:
        c_t1 = np.array(path.pos0) + np.array(path.vel) * t1
        c_t2 = np.array(path.pos0) + np.array(path.vel) * t2
        d = p1.inverse().apply(c_t2) - p1.inverse().apply(c_t1)
        disps.append(float(np.hypot(*d)))
    fg_mag = float(np.mean(disps)) if disps else 0.0

    subset = classify_subset(camera_mag, fg_mag,
                             cfg.thresholds.scaled(cfg.height))
    return AlignmentTriplet(
        i1=_to_uint8(i1), i2=_to_uint8(i2), i_gt=_to_uint8(i_gt),
        m_gt=m_gt, flow_gt=np.moveaxis(flow, -1, 0), occ_gt=occ,
        subset=subset, seed=scene.seed,
        camera_mag=camera_mag, fg_mag=fg_mag)


def classify_subset(camera_mag: float, fg_mag: float,
                    thresholds: SubsetThresholds) -> str:
    """Four-way tag from independent thresholding; boundary counts as large."""
    if camera_mag < 0 or fg_mag < 0:
        raise ConfigError("motion magnitudes must be >= 0")
    cam = "L" if camera_mag >= thresholds.camera else "S"
    fg = "L" if fg_mag >= thresholds.foreground else "S"
    return f"{cam}c{fg}f"


def make_triplet(config: GeneratorConfig, seed: int) -> AlignmentTriplet:
    """Scene + render, re-drawing scenes whose moving-mask area is out of range."""
    lo, hi = config.mask_area
    trial_seed = seed
    for _ in range(config.max_resample):
        scene = make_scene(config, trial_seed)
        triplet = render_triplet(scene)
        if config.sprite_count[1] == 0 or not any(
                p.moving for p in scene.sprite_paths):
            triplet.seed = seed
            return triplet
        area = float(triplet.m_gt.mean())
        if lo <= area <= hi:
            triplet.seed = seed
            return triplet
        trial_seed = (trial_seed * 1_000_003 + 17) % (2**63)
    raise RenderError(
        f"no scene with mask area in [{lo}, {hi}] after "
        f"{config.max_resample} draws from seed {seed}")
