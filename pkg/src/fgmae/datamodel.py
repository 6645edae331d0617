"""Shared domain types, the model configuration, and dataset persistence.

Units: keypoints are millimetres in the camera frame (x right, y down,
z away from the camera). Pixels are RGB reals in [0, 1], stored on disk as
8-bit PNG, so an in-memory sample round-trips exactly when its pixels are
multiples of 1/255.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np
import yaml
from PIL import Image

from .errors import InvalidParam, InvalidShape, ValidationError


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"
    UNCONSTRAINED = "unconstrained"


@dataclass(frozen=True)
class Cube:
    """Metric bounding cube of a heatmap volume."""

    center: tuple[float, float, float]
    side: float

    def __post_init__(self):
        if not (self.side > 0 and math.isfinite(self.side)):
            raise InvalidParam(f"cube side must be positive, got {self.side}")


@dataclass(frozen=True, eq=False)
class ImageSample:
    pixels: np.ndarray
    domain: Domain
    sample_id: str
    rng_seed: int = 0
    mask: Optional[np.ndarray] = None
    keypoints: Optional[np.ndarray] = None
    camera: Optional[dict] = None

    def validate(self, patch_size: int, num_joints: Optional[int] = None) -> "ImageSample":
        validate_sample(self, patch_size, num_joints)
        return self


def validate_sample(s: ImageSample, patch_size: int, num_joints: Optional[int] = None) -> None:
    px = s.pixels
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValidationError(f"{s.sample_id}: pixels must be HxWx3, got {px.shape}")
    h, w = px.shape[:2]
    if h <= 0 or w <= 0 or h % patch_size or w % patch_size:
        raise ValidationError(f"{s.sample_id}: {h}x{w} is not a multiple of patch size {patch_size}")
    if not np.all((px >= 0) & (px <= 1)):
        raise ValidationError(f"{s.sample_id}: pixel values outside [0,1]")
    if s.mask is not None:
        if s.mask.shape != (h, w, 1):
            raise ValidationError(f"{s.sample_id}: mask shape {s.mask.shape} != {(h, w, 1)}")
        if not np.all((s.mask >= 0) & (s.mask <= 1)):
            raise ValidationError(f"{s.sample_id}: mask values outside [0,1]")
    if s.keypoints is not None:
        kp = s.keypoints
        if kp.ndim != 2 or kp.shape[1] != 3:
            raise ValidationError(f"{s.sample_id}: keypoints must be Kx3, got {kp.shape}")
        if num_joints is not None and kp.shape[0] != num_joints:
            raise ValidationError(f"{s.sample_id}: expected {num_joints} joints, got {kp.shape[0]}")
    if not isinstance(s.domain, Domain):
        raise ValidationError(f"{s.sample_id}: unknown domain {s.domain!r}")


@dataclass(frozen=True, eq=False)
class TokenBatch:
    tokens: np.ndarray
    index_map: np.ndarray
    binary_mask: np.ndarray
    has_cls: bool = False

    def __post_init__(self):
        n = len(self.binary_mask)
        idx = np.asarray(self.index_map)
        if len(np.unique(idx)) != len(idx) or (len(idx) and (idx.min() < 0 or idx.max() >= n)):
            raise ValidationError("index_map entries must be distinct and in [0, N)")
        expected = int(np.sum(np.asarray(self.binary_mask) == 0)) + int(self.has_cls)
        if self.tokens.shape[0] != expected:
            raise ValidationError(f"token count {self.tokens.shape[0]} != {expected}")


@dataclass(frozen=True, eq=False)
class PatchWeights:
    ratios: np.ndarray
    weights: np.ndarray
    alpha: float

    def __post_init__(self):
        n = len(self.weights)
        if n == 0:
            raise InvalidShape("empty weight vector")
        if not np.all(self.weights > 0):
            raise ValidationError("weights must be strictly positive")
        if abs(float(np.sum(self.weights)) - n) > 1e-6 * n:
            raise ValidationError(f"weights sum to {np.sum(self.weights)}, expected {n}")


@dataclass(frozen=True, eq=False)
class Heatmap3D:
    volume: np.ndarray
    cube: Cube
    sigma: float

    def __post_init__(self):
        if self.volume.ndim != 4:
            raise InvalidShape(f"volume must be KxDxHxW, got {self.volume.shape}")
        d, h, w = self.volume.shape[1:]
        if not d == h == w:
            raise InvalidShape(f"volume must be cubic, got {self.volume.shape[1:]}")

    @property
    def size(self) -> int:
        return self.volume.shape[1]

    def check(self, num_patches: Optional[int] = None) -> None:
        if num_patches is not None and self.size != 4 * math.isqrt(num_patches):
            raise ValidationError(f"cube side {self.size} != 4*sqrt({num_patches})")
        if np.any(self.volume < 0):
            raise ValidationError("heatmap volume has negative voxels")


@dataclass(frozen=True, eq=False)
class AttentionStack:
    rows: np.ndarray

    def check(self, num_blocks: Optional[int] = None) -> None:
        r = self.rows
        if r.ndim != 2:
            raise InvalidShape(f"attention stack must be LxN, got {r.shape}")
        if num_blocks is not None and r.shape[0] != num_blocks:
            raise ValidationError(f"{r.shape[0]} rows, expected {num_blocks}")
        if np.any(r < 0) or np.any(r > 1):
            raise ValidationError("attention values outside [0,1]")
        s = r.sum(axis=1)
        if np.any(s <= 0) or np.any(s > 1 + 1e-6):
            raise ValidationError("attention row sums outside (0,1]")


@dataclass
class ModelConfig:
    # geometry
    image_size: int = 64
    patch_size: int = 8
    # encoder / decoder
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    decoder_embed_dim: int = 32
    decoder_num_heads: int = 4
    # keypoint head
    num_joints: int = 8
    root_index: int = 0
    head_channels: int = 32
    heatmap_sigma: float = 2.0
    cube_side_mm: float = 800.0
    normalize_kpt_loss: bool = False
    # segmenter
    seg_levels: int = 3
    seg_channels: int = 16
    seg_steps: int = 300
    seg_batch_size: int = 16
    seg_lr: float = 2e-3
    # pre-training
    mask_ratio: float = 0.75
    alpha: float = 4.0
    pretrain_steps: int = 500
    pretrain_batch_size: int = 32
    pretrain_lr: float = 2.4e-3
    pretrain_warmup: int = 25
    bg_swap_prob: float = 0.5
    # fine-tuning
    finetune_steps: int = 1000
    finetune_batch_size: int = 32
    target_batch_size: int = 32
    finetune_lr: float = 5e-4
    finetune_warmup: int = 25
    lambda_attn: float = 100.0
    finetune_mode: str = "alternating"
    # optimizer
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    min_lr: float = 0.0
    # augmentation
    aug_rotation_deg: float = 15.0
    aug_translation: float = 0.05
    aug_scale: tuple[float, float] = (0.95, 1.05)
    aug_brightness: float = 0.2
    aug_contrast: float = 0.2
    aug_saturation: float = 0.2
    # ablation switches
    fcr: bool = True
    ar: bool = True
    target_mask_source: str = "learned"
    bg_aug: bool = True
    pretrained: bool = True
    # evaluation / misc
    epe_root_align: bool = False
    snapshot_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.aug_scale = tuple(self.aug_scale)
        self.validate()

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def heatmap_size(self) -> int:
        return 4 * self.grid

    @property
    def effective_lambda(self) -> float:
        return self.lambda_attn if self.ar else 0.0

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % self.patch_size:
            raise InvalidParam(f"image_size {self.image_size} not a multiple of patch_size {self.patch_size}")
        if not 0 <= self.mask_ratio < 1:
            raise InvalidParam(f"mask_ratio must be in [0,1), got {self.mask_ratio}")
        if self.embed_dim % self.num_heads or self.decoder_embed_dim % self.decoder_num_heads:
            raise InvalidParam("head count must divide the embedding width")
        if self.lambda_attn < 0:
            raise InvalidParam("lambda_attn must be non-negative")
        if self.heatmap_sigma <= 0:
            raise InvalidParam("heatmap_sigma must be positive")
        if self.target_mask_source not in ("learned", "oracle", "none"):
            raise InvalidParam(f"unknown target_mask_source {self.target_mask_source!r}")
        if self.finetune_mode not in ("alternating", "combined"):
            raise InvalidParam(f"unknown finetune_mode {self.finetune_mode!r}")
        if not 0 <= self.root_index < self.num_joints:
            raise InvalidParam("root_index out of range")
        if self.aug_scale[0] <= 0 or self.aug_scale[1] <= 0:
            raise InvalidParam("scale range must be positive")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidParam(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


PROFILES: dict[str, dict[str, Any]] = {
    "toy": {},
    "paper": dict(
        image_size=256, patch_size=16, embed_dim=768, depth=12, num_heads=12,
        decoder_embed_dim=512, decoder_num_heads=16, head_channels=256, num_joints=21,
        seg_levels=5, seg_channels=64, pretrain_batch_size=4096, finetune_batch_size=128,
        target_batch_size=128,
    ),
}


def make_config(profile: str = "toy", **overrides) -> ModelConfig:
    if profile not in PROFILES:
        raise InvalidParam(f"unknown profile {profile!r}")
    return ModelConfig(**{**PROFILES[profile], **overrides})


def load_config(path: Optional[Path], profile: str = "toy", **overrides) -> ModelConfig:
    values: dict[str, Any] = dict(PROFILES.get(profile, {}))
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise InvalidParam(f"{path}: config must be a mapping")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig.from_dict(values)


def dump_config(cfg: ModelConfig, path: Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


# --- dataset persistence -------------------------------------------------

def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def save_samples(samples: Iterable[ImageSample], root: Path, split: str, domain: Domain) -> Path:
    """Write samples under ``root/split/domain`` (images/, masks/, annotations.jsonl)."""
    d = Path(root) / split / Domain(domain).value
    (d / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        Image.fromarray(_to_u8(s.pixels)).save(d / "images" / f"{s.sample_id}.png")
        if s.mask is not None:
            (d / "masks").mkdir(exist_ok=True)
            Image.fromarray(_to_u8(s.mask[..., 0]), mode="L").save(d / "masks" / f"{s.sample_id}.png")
        rec: dict[str, Any] = {"sample_id": s.sample_id, "rng_seed": int(s.rng_seed)}
        if s.keypoints is not None:
            rec["keypoints"] = [[float(v) for v in row] for row in s.keypoints]
        if s.camera is not None:
            rec["camera"] = s.camera
        lines.append(json.dumps(rec, sort_keys=True))
    (d / "annotations.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    return d


def write_masks(masks: dict[str, np.ndarray], root: Path, split: str, domain: Domain) -> None:
    d = Path(root) / split / Domain(domain).value / "masks"
    d.mkdir(parents=True, exist_ok=True)
    for sid, m in masks.items():
        Image.fromarray(_to_u8(m[..., 0]), mode="L").save(d / f"{sid}.png")


def load_samples(root: Path, split: str, domain: Domain, with_masks: bool = True) -> list[ImageSample]:
    d = Path(root) / split / Domain(domain).value
    ann = d / "annotations.jsonl"
    if not ann.exists():
        raise FileNotFoundError(f"missing {ann}")
    out = []
    for line in ann.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        sid = rec["sample_id"]
        pixels = np.asarray(Image.open(d / "images" / f"{sid}.png").convert("RGB"), dtype=np.float64) / 255.0
        mask = None
        mpath = d / "masks" / f"{sid}.png"
        if with_masks and mpath.exists():
            mask = (np.asarray(Image.open(mpath).convert("L"), dtype=np.float64) / 255.0)[..., None]
        kp = rec.get("keypoints")
        out.append(ImageSample(
            pixels=pixels,
            mask=mask,
            keypoints=None if kp is None else np.asarray(kp, dtype=np.float64),
            domain=Domain(domain),
            sample_id=sid,
            rng_seed=int(rec.get("rng_seed", 0)),
            camera=rec.get("camera"),
        ))
    return out


def read_masks(root: Path, split: str, domain: Domain, sample_ids: Iterable[str]) -> np.ndarray:
    """Load ``masks/<id>.png`` for each id as ``(B, H, W, 1)`` soft masks."""
    d = Path(root) / split / Domain(domain).value / "masks"
    out = []
    for sid in sample_ids:
        p = d / f"{sid}.png"
        if not p.exists():
            raise FileNotFoundError(f"missing mask {p}")
        out.append((np.asarray(Image.open(p).convert("L"), dtype=np.float64) / 255.0)[..., None])
    return np.stack(out)
