"""Volumetric keypoint head plus Gaussian heatmap encoding/decoding.

Voxel convention: a heatmap of side ``S`` samples the cube at integer grid
points; grid index ``i`` along an axis sits at metric coordinate
``center - side/2 + i * side/S``. Volume axes are (depth, height, width) and
correspond to keypoint coordinates (z, y, x).
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .datamodel import Cube, Heatmap3D, ModelConfig
from .errors import InvalidParam, InvalidShape

# volume axis order (d, h, w) -> keypoint column (z, y, x)
AXIS_TO_COORD = (2, 1, 0)


class KeypointHead(nn.Module):
    """Two stride-2 deconvolutions (ReLU + BatchNorm) and a 1x1 conv to ``K * S`` channels."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        g = math.isqrt(cfg.num_patches)
        self.grid = g
        self.num_joints = cfg.num_joints
        self.size = 4 * g
        c = cfg.head_channels
        self.deconv1 = nn.ConvTranspose2d(cfg.embed_dim, c, 4, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c)
        self.deconv2 = nn.ConvTranspose2d(c, c, 4, stride=2, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c)
        self.final = nn.Conv2d(c, cfg.num_joints * self.size, 1)
        for m in (self.deconv1, self.deconv2):
            nn.init.normal_(m.weight, std=0.001)
        nn.init.normal_(self.final.weight, std=0.001)
        nn.init.zeros_(self.final.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """``(B, N, d)`` patch tokens (class token removed) -> ``(B, K, S, S, S)``."""
        b, n, d = tokens.shape
        if n != self.grid ** 2:
            raise InvalidShape(f"{n} tokens do not form the {self.grid}x{self.grid} grid")
        x = tokens.transpose(1, 2).reshape(b, d, self.grid, self.grid)
        x = self.bn1(torch.relu(self.deconv1(x)))
        x = self.bn2(torch.relu(self.deconv2(x)))
        x = self.final(x)
        return x.reshape(b, self.num_joints, self.size, self.size, self.size)


def head_forward(tokens: torch.Tensor, head: KeypointHead) -> torch.Tensor:
    n = tokens.shape[-2]
    if math.isqrt(n) ** 2 != n:
        raise InvalidShape(f"{n} patch tokens is not a perfect square")
    squeeze = tokens.dim() == 2
    out = head(tokens.unsqueeze(0) if squeeze else tokens)
    return out[0] if squeeze else out


def root_cube(keypoints: np.ndarray, root_index: int, side: float) -> Cube:
    c = np.asarray(keypoints)[root_index]
    return Cube(center=(float(c[0]), float(c[1]), float(c[2])), side=float(side))


def to_voxel(points, cube: Cube, size: int):
    """Metric ``(..., 3)`` xyz -> continuous voxel coordinates in (d, h, w) order."""
    center = np.asarray(cube.center)[list(AXIS_TO_COORD)]
    pts = np.asarray(points)[..., list(AXIS_TO_COORD)]
    return (pts - center + cube.side / 2) / cube.side * size


def from_voxel(vox, cube: Cube, size: int) -> np.ndarray:
    center = np.asarray(cube.center)[list(AXIS_TO_COORD)]
    dhw = np.asarray(vox, dtype=np.float64) / size * cube.side - cube.side / 2 + center
    return dhw[..., list(AXIS_TO_COORD)]


def keypoints_to_heatmaps(keypoints: np.ndarray, cube: Cube, sigma: float, size: int):
    """Gaussian blobs at each joint. Returns ``(Heatmap3D, clamped)``.

    Joints outside the sampled cube are clamped onto its boundary and
    reported in the boolean ``clamped`` vector.
    """
    if sigma <= 0:
        raise InvalidParam(f"sigma must be positive, got {sigma}")
    v = to_voxel(np.asarray(keypoints, dtype=np.float64), cube, size)
    clamped = np.any((v < 0) | (v > size - 1), axis=-1)
    v = np.clip(v, 0, size - 1)
    grid = np.arange(size, dtype=np.float64)
    g = np.exp(-((grid[None, None, :] - v[:, :, None]) ** 2) / (2 * sigma ** 2))
    volume = np.einsum("kd,kh,kw->kdhw", g[:, 0], g[:, 1], g[:, 2])
    return Heatmap3D(volume=volume, cube=cube, sigma=float(sigma)), clamped


def gaussian_targets(voxels: torch.Tensor, sigma: float, size: int) -> torch.Tensor:
    """Batched blobs: ``(B, K, 3)`` voxel coordinates (d, h, w) -> ``(B, K, S, S, S)``."""
    grid = torch.arange(size, dtype=voxels.dtype)
    g = torch.exp(-((grid - voxels.clamp(0, size - 1).unsqueeze(-1)) ** 2) / (2 * sigma ** 2))
    return torch.einsum("bkd,bkh,bkw->bkdhw", g[..., 0, :], g[..., 1, :], g[..., 2, :])


def _refine(l: float, c: float, r: float) -> float:
    """Sub-voxel peak offset from three samples around the argmax.

    Fits a parabola to log-values when all three are positive (exact for a
    Gaussian), otherwise to the raw values.
    """
    if l > 0 and c > 0 and r > 0:
        l, c, r = math.log(l), math.log(c), math.log(r)
    denom = l - 2 * c + r
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (l - r) / denom, -0.5, 0.5))


def decode_volume(volume: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint refined voxel coordinates ``(K, 3)`` (d, h, w) and degeneracy flags."""
    k, s = volume.shape[0], volume.shape[1]
    flat = volume.reshape(k, -1)
    # np.argmax returns the first (smallest linear index) maximum
    idx = np.argmax(flat, axis=1)
    degenerate = flat.max(axis=1) == flat.min(axis=1)
    out = np.empty((k, 3))
    for j in range(k):
        pos = np.array(np.unravel_index(idx[j], (s, s, s)))
        if degenerate[j]:
            out[j] = (s / 2, s / 2, s / 2)
            continue
        ref = pos.astype(np.float64)
        for ax in range(3):
            p = pos[ax]
            if 0 < p < s - 1:
                lo, hi = pos.copy(), pos.copy()
                lo[ax] -= 1
                hi[ax] += 1
                ref[ax] += _refine(volume[j][tuple(lo)], volume[j][tuple(pos)], volume[j][tuple(hi)])
        out[j] = ref
    return out, degenerate


def heatmaps_to_keypoints(hm: Heatmap3D) -> tuple[np.ndarray, np.ndarray]:
    """Metric keypoints ``(K, 3)`` and degeneracy flags; degenerate joints sit at the cube center."""
    if hm.volume.size == 0:
        raise InvalidShape("empty heatmap volume")
    vox, degenerate = decode_volume(np.asarray(hm.volume, dtype=np.float64))
    return from_voxel(vox, hm.cube, hm.size), degenerate


def decode_batch(volumes: np.ndarray, roots: np.ndarray, side: float) -> np.ndarray:
    """``(B, K, S, S, S)`` predictions + ``(B, 3)`` cube centres -> ``(B, K, 3)`` mm."""
    out = np.empty(volumes.shape[:2] + (3,))
    s = volumes.shape[2]
    for i in range(volumes.shape[0]):
        vox, _ = decode_volume(volumes[i])
        cube = Cube(center=tuple(float(v) for v in roots[i]), side=side)
        out[i] = from_voxel(vox, cube, s)
    return out
