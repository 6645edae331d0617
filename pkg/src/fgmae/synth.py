"""Procedural cross-domain dataset of articulated stick figures.

Each sample is an 8-joint kinematic chain (root, spine, neck, head and two
2-bone arms) posed from a joint-angle prior, viewed by an orthographic
camera and drawn as tapered, anti-aliased capsules over a domain-specific
background. Limbs closer to the camera are drawn thicker and brighter so
depth is recoverable from appearance.

Per-sample seeds come from ``numpy.random.SeedSequence([master, domain, split, i])``.
"""
from __future__ import annotations

import colorsys
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .datamodel import Domain, ImageSample, save_samples
from .errors import GenerationFailure

log = logging.getLogger(__name__)

JOINT_NAMES = ("root", "spine", "neck", "head", "l_elbow", "l_wrist", "r_elbow", "r_wrist")
PARENTS = (-1, 0, 1, 2, 2, 4, 2, 6)
BONE_LENGTHS = (0.0, 100.0, 100.0, 70.0, 90.0, 80.0, 90.0, 80.0)
# rest direction of each bone in its parent's frame (camera frame: x right, y down, z away)
REST_DIRS = ((0, 0, 0), (0, -1, 0), (0, -1, 0), (0, -1, 0), (-1, 0, 0), (-1, 0, 0), (1, 0, 0), (1, 0, 0))
# (pitch about x, roll about z) half-ranges in degrees
DEFAULT_ANGLES = ((0, 0), (20, 15), (15, 15), (25, 25), (70, 60), (80, 80), (70, 60), (80, 80))
ROOT_YAW_DEG = 60.0
ROOT_TILT_DEG = 10.0
ROOT_DEPTH_MM = 2000.0
SPLIT_CODES = {"train": 0, "test": 1}
DOMAIN_CODES = {Domain.SOURCE: 0, Domain.TARGET: 1, Domain.UNCONSTRAINED: 2}
BACKGROUNDS = ("flat", "gradient", "perlin", "checker", "photo-folder")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    backgrounds: tuple[str, ...]
    bg_hue: tuple[float, float]
    bg_saturation: tuple[float, float]
    bg_value: tuple[float, float]
    figure_hue: tuple[float, float]
    figure_saturation: tuple[float, float] = (0.6, 0.9)
    figure_value: tuple[float, float] = (0.75, 0.95)
    limb_radius: tuple[float, float] = (1.8, 2.4)
    depth_thickness: float = 0.35
    depth_shading: float = 0.35
    photo_dir: Optional[str] = None


@dataclass(frozen=True)
class CameraSpec:
    image_size: int = 64
    focal: float = 0.08          # px per mm (orthographic)
    root_uv: tuple[float, float] = (32.0, 42.0)
    root_jitter_px: float = 3.0
    margin_px: float = 2.0


@dataclass(frozen=True)
class PosePrior:
    joint_ranges_deg: tuple[tuple[float, float], ...] = DEFAULT_ANGLES
    root_yaw_deg: float = ROOT_YAW_DEG
    root_tilt_deg: float = ROOT_TILT_DEG
    bone_lengths: tuple[float, ...] = BONE_LENGTHS

    def frozen(self) -> "PosePrior":
        return PosePrior(tuple((0.0, 0.0) for _ in self.joint_ranges_deg), 0.0, 0.0, self.bone_lengths)


SOURCE_SPEC = DomainSpec(
    name="source", backgrounds=("flat", "gradient"),
    bg_hue=(0.50, 0.70), bg_saturation=(0.15, 0.45), bg_value=(0.35, 0.65),
    figure_hue=(0.0, 0.10),
)
TARGET_SPEC = DomainSpec(
    name="target", backgrounds=("perlin", "checker"),
    bg_hue=(0.0, 1.0), bg_saturation=(0.3, 0.8), bg_value=(0.3, 0.9),
    figure_hue=(0.12, 0.22), limb_radius=(1.6, 2.2),
)
UNCONSTRAINED_SPEC = DomainSpec(
    name="unconstrained", backgrounds=("gradient", "perlin", "checker"),
    bg_hue=(0.0, 1.0), bg_saturation=(0.1, 0.9), bg_value=(0.2, 0.95),
    figure_hue=(0.0, 1.0),
)


def _rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def forward_kinematics(angles: np.ndarray, root_rot: np.ndarray, root: np.ndarray,
                       bone_lengths: Sequence[float] = BONE_LENGTHS) -> np.ndarray:
    """Joint positions from per-joint (pitch, roll) radians and a global root rotation."""
    k = len(PARENTS)
    rots = [root_rot] + [None] * (k - 1)
    pts = np.zeros((k, 3))
    pts[0] = root
    for j in range(1, k):
        p = PARENTS[j]
        rots[j] = rots[p] @ _rot_z(angles[j, 1]) @ _rot_x(angles[j, 0])
        pts[j] = pts[p] + bone_lengths[j] * (rots[j] @ np.asarray(REST_DIRS[j], dtype=np.float64))
    return pts


def project(points: np.ndarray, camera: dict) -> np.ndarray:
    """Orthographic projection to continuous pixel coordinates (u, v)."""
    return np.stack([camera["cx"] + camera["focal"] * points[..., 0],
                     camera["cy"] + camera["focal"] * points[..., 1]], axis=-1)


def make_camera(cam: CameraSpec, rng: Optional[np.random.Generator]) -> tuple[dict, np.ndarray]:
    """Camera dict and the root's camera-frame position.

    The principal point is the image centre; the root is offset within the
    frame through its camera-frame (x, y).
    """
    jit = np.zeros(2) if rng is None or cam.root_jitter_px == 0 else rng.uniform(-cam.root_jitter_px, cam.root_jitter_px, 2)
    c = cam.image_size / 2
    camera = {"type": "orthographic", "focal": cam.focal, "cx": c, "cy": c}
    root_uv = np.asarray(cam.root_uv) + jit
    root = np.array([(root_uv[0] - c) / cam.focal, (root_uv[1] - c) / cam.focal, ROOT_DEPTH_MM])
    return camera, root


def sample_skeleton(rng: np.random.Generator, prior: PosePrior = PosePrior(), cam: CameraSpec = CameraSpec(),
                    max_tries: int = 200, cube_side: Optional[float] = None) -> tuple[np.ndarray, dict]:
    """Sample an in-frame pose. Returns ``(keypoints K x 3 mm, camera)``."""
    for _ in range(max_tries):
        ranges = np.radians(np.asarray(prior.joint_ranges_deg, dtype=np.float64))
        angles = rng.uniform(-1, 1, ranges.shape) * ranges
        yaw = math.radians(prior.root_yaw_deg) * rng.uniform(-1, 1)
        tilt = math.radians(prior.root_tilt_deg) * rng.uniform(-1, 1)
        camera, root = make_camera(cam, rng)
        kp = forward_kinematics(angles, _rot_y(yaw) @ _rot_z(tilt), root, prior.bone_lengths)
        uv = project(kp, camera)
        lo, hi = cam.margin_px, cam.image_size - cam.margin_px
        if np.all((uv >= lo) & (uv <= hi)):
            if cube_side is None or np.all(np.abs(kp - kp[0]) < cube_side / 2 * (1 - 2 / 32)):
                return kp, camera
    raise GenerationFailure(f"no in-frame pose after {max_tries} attempts")


# --- backgrounds --------------------------------------------------------

def _hsv(rng: np.random.Generator, spec: DomainSpec) -> np.ndarray:
    h = rng.uniform(*spec.bg_hue) % 1.0
    return np.array(colorsys.hsv_to_rgb(h, rng.uniform(*spec.bg_saturation), rng.uniform(*spec.bg_value)))


def _load_photos(folder: str) -> list[np.ndarray]:
    out = []
    for p in sorted(Path(folder).glob("*.png")):
        out.append(np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0)
    if not out:
        raise GenerationFailure(f"no PNG images in {folder}")
    return out


def fit_photo(photo: np.ndarray, size: int) -> np.ndarray:
    """Centre-crop to a square and resize to ``size``."""
    h, w = photo.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = (photo[top:top + s, left:left + s] * 255).round().astype(np.uint8)
    return np.asarray(Image.fromarray(crop).resize((size, size), Image.BILINEAR), dtype=np.float64) / 255.0


def render_background(family: str, rng: np.random.Generator, spec: DomainSpec, size: int,
                      photos: Optional[list] = None) -> np.ndarray:
    if family == "flat":
        return np.broadcast_to(_hsv(rng, spec), (size, size, 3)).copy()
    if family == "gradient":
        a, b = _hsv(rng, spec), _hsv(rng, spec)
        theta = rng.uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
        t = np.clip(xx * math.cos(theta) + yy * math.sin(theta) + 0.5, 0, 1)[..., None]
        return (1 - t) * a + t * b
    if family == "perlin":
        # smooth value noise: bicubic upsampling of a coarse random colour lattice
        cells = int(rng.integers(3, 8))
        lattice = np.stack([_hsv(rng, spec) for _ in range(cells * cells)]).reshape(cells, cells, 3)
        zoom = size / cells
        out = np.stack([ndimage.zoom(lattice[..., c], zoom, order=3, mode="nearest") for c in range(3)], -1)
        return np.clip(out[:size, :size], 0, 1)
    if family == "checker":
        a, b = _hsv(rng, spec), _hsv(rng, spec)
        cell = rng.uniform(4, 10)
        theta = rng.uniform(0, math.pi)
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        u = (xx * math.cos(theta) + yy * math.sin(theta)) / cell + rng.uniform(0, 1)
        v = (-xx * math.sin(theta) + yy * math.cos(theta)) / cell + rng.uniform(0, 1)
        sel = ((np.floor(u) + np.floor(v)) % 2)[..., None]
        return (1 - sel) * a + sel * b
    if family == "photo-folder":
        if not photos:
            raise GenerationFailure("photo-folder background requested without images")
        return fit_photo(photos[int(rng.integers(len(photos)))], size)
    raise GenerationFailure(f"unknown background family {family!r}")


# --- figure rendering ---------------------------------------------------

def _capsule_coverage(uv: np.ndarray, a: np.ndarray, b: np.ndarray, ra: float, rb: float,
                      binary: bool) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros(uv.shape[:-1]) if denom == 0 else np.clip(((uv - a) @ ab) / denom, 0, 1)
    closest = a + t[..., None] * ab
    dist = np.linalg.norm(uv - closest, axis=-1)
    r = ra + t * (rb - ra)
    if binary:
        return (dist <= r).astype(np.float64)
    return np.clip(r - dist + 0.5, 0, 1)


def render_figure(keypoints: np.ndarray, camera: dict, size: int, color: np.ndarray, radius: float,
                  depth_thickness: float, depth_shading: float, background: np.ndarray,
                  binary: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Composite limbs far-to-near over ``background``. Returns ``(image, mask, joints_uv)``."""
    uv = project(keypoints, camera)
    rel_depth = (keypoints[:, 2] - keypoints[0, 2]) / 400.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    grid = np.stack([xx + 0.5, yy + 0.5], axis=-1)
    image = background.copy()
    mask = np.zeros((size, size))
    bones = [j for j in range(1, len(PARENTS))]
    bones.sort(key=lambda j: -(rel_depth[j] + rel_depth[PARENTS[j]]))
    for j in bones:
        p = PARENTS[j]
        scale = 1.6 if JOINT_NAMES[j] == "head" else 1.0
        rp = radius * scale * max(0.3, 1 - depth_thickness * rel_depth[p])
        rj = radius * scale * max(0.3, 1 - depth_thickness * rel_depth[j])
        cov = _capsule_coverage(grid, uv[p], uv[j], rp, rj, binary)[..., None]
        shade = float(np.clip(1 - depth_shading * 0.5 * (rel_depth[p] + rel_depth[j]), 0.3, 1.3))
        limb = np.clip(color * shade, 0, 1)
        image = cov * limb + (1 - cov) * image
        mask = np.maximum(mask, cov[..., 0]) if binary else cov[..., 0] + (1 - cov[..., 0]) * mask
    return image, mask[..., None], uv


def quantize(a: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit lattice used on disk."""
    return np.rint(np.clip(a, 0, 1) * 255.0) / 255.0


def render_sample(keypoints: np.ndarray, camera: dict, rng: np.random.Generator, spec: DomainSpec,
                  domain: Domain, sample_id: str, rng_seed: int = 0, binary: bool = False,
                  photos: Optional[list] = None) -> ImageSample:
    size = int(round(camera["cx"] * 2))
    family = spec.backgrounds[int(rng.integers(len(spec.backgrounds)))]
    bg = render_background(family, rng, spec, size, photos)
    h = rng.uniform(*spec.figure_hue) % 1.0
    color = np.array(colorsys.hsv_to_rgb(h, rng.uniform(*spec.figure_saturation), rng.uniform(*spec.figure_value)))
    radius = rng.uniform(*spec.limb_radius)
    image, mask, uv = render_figure(keypoints, camera, size, color, radius, spec.depth_thickness,
                                    spec.depth_shading, bg, binary)
    cam = {**camera, "background": family, "joints_uv": [[float(a), float(b)] for a, b in uv]}
    return ImageSample(pixels=quantize(image), mask=quantize(mask), keypoints=np.asarray(keypoints, dtype=np.float64),
                       domain=domain, sample_id=sample_id, rng_seed=rng_seed, camera=cam)


def render_unconstrained(rng: np.random.Generator, spec: DomainSpec, size: int, sample_id: str, rng_seed: int,
                         photos: Optional[list] = None) -> ImageSample:
    family = spec.backgrounds[int(rng.integers(len(spec.backgrounds)))]
    bg = render_background(family, rng, spec, size, photos)
    return ImageSample(pixels=quantize(bg), domain=Domain.UNCONSTRAINED, sample_id=sample_id, rng_seed=rng_seed)


def sample_seed(master: int, domain: Domain, split: str, index: int) -> int:
    ss = np.random.SeedSequence([master, DOMAIN_CODES[domain], SPLIT_CODES[split], index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class DatasetConfig:
    root: Path
    master_seed: int = 0
    n_train: int = 512
    n_test: int = 128
    n_unconstrained: int = 256
    cube_side_mm: float = 800.0
    camera: CameraSpec = field(default_factory=CameraSpec)
    prior: PosePrior = field(default_factory=PosePrior)
    source: DomainSpec = SOURCE_SPEC
    target: DomainSpec = TARGET_SPEC
    unconstrained: DomainSpec = UNCONSTRAINED_SPEC
    photo_dir: Optional[str] = None


def make_samples(cfg: DatasetConfig, domain: Domain, split: str, n: int) -> list[ImageSample]:
    spec = {Domain.SOURCE: cfg.source, Domain.TARGET: cfg.target, Domain.UNCONSTRAINED: cfg.unconstrained}[domain]
    photos = None
    if cfg.photo_dir and domain == Domain.UNCONSTRAINED:
        photos = _load_photos(cfg.photo_dir)
        spec = dataclasses.replace(spec, backgrounds=spec.backgrounds + ("photo-folder",))
    out = []
    for i in range(n):
        seed = sample_seed(cfg.master_seed, domain, split, i)
        rng = np.random.default_rng(seed)
        sid = f"{domain.value[0]}{split[:2]}{i:05d}"
        if domain == Domain.UNCONSTRAINED:
            out.append(render_unconstrained(rng, spec, cfg.camera.image_size, sid, seed, photos))
            continue
        kp, camera = sample_skeleton(rng, cfg.prior, cfg.camera, cube_side=cfg.cube_side_mm)
        out.append(render_sample(kp, camera, rng, spec, domain, sid, seed, photos=photos))
    return out


def generate_dataset(cfg: DatasetConfig) -> Path:
    """Write train/{source,target,unconstrained} and test/{source,target} under ``cfg.root``."""
    root = Path(cfg.root)
    plan = [
        ("train", Domain.SOURCE, cfg.n_train),
        ("train", Domain.TARGET, cfg.n_train),
        ("train", Domain.UNCONSTRAINED, cfg.n_unconstrained),
        ("test", Domain.SOURCE, cfg.n_test),
        ("test", Domain.TARGET, cfg.n_test),
    ]
    for split, domain, n in plan:
        try:
            save_samples(make_samples(cfg, domain, split, n), root, split, domain)
        except OSError as e:
            raise OSError(f"failed writing {root / split / domain.value}: {e}") from e
        log.info("wrote %d %s/%s samples", n, split, domain.value)
    return root
