"""Background swap with unconstrained images and geometric/photometric augmentation.

Geometric maps act on continuous pixel coordinates (pixel centres at
``j + 0.5``) as ``u' = s R u + b`` about the image centre. Under the
orthographic camera ``u = c + f p`` this is reproduced exactly by rotating
the keypoints' (x, y) with ``R``, scaling the focal factor by ``s`` and
moving the principal point, so labels and cameras stay consistent.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import ImageSample, ModelConfig
from .errors import InvalidParam, InvalidShape


def background_swap(image, mask, background):
    """``mask * image + (1 - mask) * background`` per pixel; works on arrays or tensors."""
    if image.shape != background.shape or tuple(mask.shape[:-1]) != tuple(image.shape[:-1]):
        raise InvalidShape(f"image {tuple(image.shape)}, mask {tuple(mask.shape)}, background {tuple(background.shape)}")
    # hard-select where the mask is exactly 0/1 so binary masks copy pixels bit-exactly
    blend = mask * image + (1 - mask) * background
    if isinstance(image, torch.Tensor):
        blend = torch.where(mask == 1, image, blend)
        return torch.where(mask == 0, background, blend)
    blend = np.where(mask == 1, image, blend)
    return np.where(mask == 0, background, blend)


@dataclass(frozen=True)
class AugParams:
    angle: np.ndarray      # radians
    shift: np.ndarray      # (B, 2) pixels
    scale: np.ndarray
    brightness: np.ndarray
    contrast: np.ndarray
    saturation: np.ndarray


def draw_params(rng: np.random.Generator, cfg: ModelConfig, batch: int) -> AugParams:
    lo, hi = cfg.aug_scale
    if lo <= 0 or hi <= 0:
        raise InvalidParam(f"scale range must be positive, got {cfg.aug_scale}")
    rot = math.radians(cfg.aug_rotation_deg)
    t = cfg.aug_translation * cfg.image_size

    def sym(width: float) -> np.ndarray:
        return rng.uniform(-width, width, batch) if width > 0 else np.zeros(batch)

    return AugParams(
        angle=sym(rot),
        shift=np.stack([sym(t), sym(t)], axis=1),
        scale=rng.uniform(lo, hi, batch) if hi > lo else np.full(batch, lo),
        brightness=1 + sym(cfg.aug_brightness),
        contrast=1 + sym(cfg.aug_contrast),
        saturation=1 + sym(cfg.aug_saturation),
    )


def identity_params(batch: int) -> AugParams:
    z = np.zeros(batch)
    return AugParams(angle=z, shift=np.zeros((batch, 2)), scale=z + 1, brightness=z + 1,
                     contrast=z + 1, saturation=z + 1)


def _affine(angle: float, scale: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return scale * np.array([[c, -s], [s, c]])


def _theta(p: AugParams, size: int) -> torch.Tensor:
    """Output-to-input maps in grid_sample's normalised coordinates."""
    half = size / 2
    thetas = []
    for i in range(len(p.angle)):
        a = _affine(p.angle[i], p.scale[i])
        ainv = np.linalg.inv(a)
        # u_in - c = A^-1 (u_out - c - b); normalised n = (u - c) / half
        off = -ainv @ p.shift[i] / half
        thetas.append(np.concatenate([ainv, off[:, None]], axis=1))
    return torch.as_tensor(np.stack(thetas))


def warp(images: torch.Tensor, masks: torch.Tensor | None, p: AugParams):
    """Apply the geometric part to ``(B, H, W, 3)`` images and ``(B, H, W, 1)`` masks."""
    b, h, w, _ = images.shape
    if h != w:
        raise InvalidShape("augmentation expects square images")
    theta = _theta(p, h).to(images.dtype)
    if torch.all(theta == torch.tensor([[1.0, 0, 0], [0, 1.0, 0]], dtype=images.dtype)):
        return images, masks
    grid = F.affine_grid(theta, (b, 3, h, w), align_corners=False)
    out = F.grid_sample(images.permute(0, 3, 1, 2), grid, mode="bilinear",
                        padding_mode="border", align_corners=False).permute(0, 2, 3, 1)
    if masks is not None:
        masks = F.grid_sample(masks.permute(0, 3, 1, 2), grid, mode="bilinear",
                              padding_mode="zeros", align_corners=False).permute(0, 2, 3, 1)
    return out, masks


def color_jitter(images: torch.Tensor, p: AugParams) -> torch.Tensor:
    def col(v):
        return torch.as_tensor(v, dtype=images.dtype).view(-1, 1, 1, 1)

    luma = torch.tensor([0.299, 0.587, 0.114], dtype=images.dtype)
    x = images
    if np.any(p.brightness != 1):
        x = x * col(p.brightness)
    if np.any(p.contrast != 1):
        mean = (x * luma).sum(-1, keepdim=True).mean(dim=(1, 2, 3), keepdim=True)
        x = mean + col(p.contrast) * (x - mean)
    if np.any(p.saturation != 1):
        gray = (x * luma).sum(-1, keepdim=True)
        x = gray + col(p.saturation) * (x - gray)
    return x.clamp(0, 1)


def rotate_keypoints(kp: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rotate the (x, y) columns of ``(B, K, 3)`` keypoints by per-sample angles."""
    c, s = np.cos(angle)[:, None], np.sin(angle)[:, None]
    out = kp.copy()
    out[..., 0] = c * kp[..., 0] - s * kp[..., 1]
    out[..., 1] = s * kp[..., 0] + c * kp[..., 1]
    return out


def transform_camera(camera: dict, angle: float, shift, scale: float, size: int) -> dict:
    a = _affine(angle, scale)
    centre = np.array([size / 2, size / 2])
    c = np.array([camera["cx"], camera["cy"]])
    c_new = a @ (c - centre) + centre + np.asarray(shift)
    return {**camera, "cx": float(c_new[0]), "cy": float(c_new[1]), "focal": float(camera["focal"] * scale)}


def augment_batch(images: torch.Tensor, masks: torch.Tensor | None, keypoints: np.ndarray | None,
                  p: AugParams):
    images, masks = warp(images, masks, p)
    images = color_jitter(images, p)
    if keypoints is not None:
        keypoints = rotate_keypoints(keypoints, p.angle)
    return images, masks, keypoints


def standard_augment(sample: ImageSample, rng: np.random.Generator, cfg: ModelConfig) -> ImageSample:
    """Random rotation, translation and resize followed by colour jitter, applied consistently."""
    p = draw_params(rng, cfg, 1)
    img = torch.as_tensor(sample.pixels[None], dtype=torch.float64)
    msk = None if sample.mask is None else torch.as_tensor(sample.mask[None], dtype=torch.float64)
    kp = None if sample.keypoints is None else sample.keypoints[None]
    img, msk, kp = augment_batch(img, msk, kp, p)
    camera = sample.camera
    if camera is not None and "focal" in camera:
        camera = transform_camera(camera, p.angle[0], p.shift[0], p.scale[0], cfg.image_size)
    return dataclasses.replace(
        sample,
        pixels=img[0].numpy(),
        mask=None if msk is None else msk[0].numpy(),
        keypoints=None if kp is None else kp[0],
        camera=camera,
    )
