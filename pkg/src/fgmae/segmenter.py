"""Foreground segmentation network used to predict masks for unlabeled images."""
from __future__ import annotations

import copy
import logging
import math
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import augment
from .datamodel import ImageSample, ModelConfig
from .errors import InvalidShape, MissingAnnotation

log = logging.getLogger(__name__)

LOGIT_CLAMP = 15.0


def _conv_pair(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, levels: int = 3, channels: int = 16):
        super().__init__()
        self.levels = levels
        self.stem = nn.Sequential(nn.Conv2d(3, channels, 3, padding=1), nn.BatchNorm2d(channels), nn.ReLU(inplace=True))
        self.down = nn.ModuleList(_conv_pair(channels, channels) for _ in range(levels))
        self.bottom = _conv_pair(channels, channels)
        self.up = nn.ModuleList(_conv_pair(2 * channels, channels) for _ in range(levels))
        self.out = nn.Conv2d(channels, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` -> logits ``(B, 1, H, W)``."""
        div = 2 ** self.levels
        if x.shape[-1] % div or x.shape[-2] % div:
            raise InvalidShape(f"input {tuple(x.shape[-2:])} must be divisible by {div}")
        x = self.stem(x)
        skips = []
        for blk in self.down:
            x = blk(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottom(x)
        for blk, skip in zip(self.up, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = blk(torch.cat([skip, x], dim=1))
        return self.out(x)


def build_segmenter(cfg: ModelConfig) -> UNet:
    return UNet(cfg.seg_levels, cfg.seg_channels)


@torch.no_grad()
def segment_batch(net: UNet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """``(B, H, W, 3)`` images -> ``(B, H, W, 1)`` soft masks strictly inside (0, 1)."""
    was_training = net.training
    net.eval()
    outs = []
    for i in range(0, len(images), batch_size):
        x = torch.as_tensor(images[i:i + batch_size], dtype=torch.float32).permute(0, 3, 1, 2)
        logits = net(x).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
        outs.append(torch.sigmoid(logits.double()).permute(0, 2, 3, 1).numpy())
    net.train(was_training)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0,) + images.shape[1:3] + (1,))


def segment(image: np.ndarray, net: UNet) -> np.ndarray:
    return segment_batch(net, image[None])[0]


def binarize(mask: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(mask) >= threshold).astype(np.float64)


def iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    p = binarize(pred, threshold) > 0
    g = binarize(gt, threshold) > 0
    union = np.logical_or(p, g).sum()
    return 1.0 if union == 0 else float(np.logical_and(p, g).sum() / union)


def mean_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(np.mean([iou(p, g) for p, g in zip(pred, gt)]))


def hue_rotate(images: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """Rotate ``(B, H, W, 3)`` colours about the gray axis by per-image angles (radians)."""
    c, s = torch.cos(angles), torch.sin(angles)
    k = 1 / 3
    r3 = math.sqrt(k)
    # Rodrigues rotation about (1, 1, 1) / sqrt(3)
    rows = [[c + k * (1 - c), k * (1 - c) - r3 * s, k * (1 - c) + r3 * s],
            [k * (1 - c) + r3 * s, c + k * (1 - c), k * (1 - c) - r3 * s],
            [k * (1 - c) - r3 * s, k * (1 - c) + r3 * s, c + k * (1 - c)]]
    m = torch.stack([torch.stack(r, -1) for r in rows], -2).to(images.dtype)
    return torch.einsum("bij,bhwj->bhwi", m, images).clamp(0, 1)


def _augment_batch(x, m, backgrounds, cfg, gen, rng):
    """Background swap, hue rotation and colour jitter on ``(B, H, W, C)`` images."""
    b = x.shape[0]
    if backgrounds is not None:
        bg = backgrounds[torch.randint(len(backgrounds), (b,), generator=gen)]
        swap = (torch.rand(b, generator=gen) < 0.5).view(-1, 1, 1, 1)
        x = torch.where(swap, augment.background_swap(x, m, bg), x)
    x = hue_rotate(x, (torch.rand(b, generator=gen) * 2 - 1) * math.pi)
    p = augment.draw_params(rng, cfg, b)
    return augment.color_jitter(x, p)


def train_segmenter(samples: Sequence[ImageSample], cfg: ModelConfig, seed: int = 0,
                    val_fraction: float = 0.1, eval_every: int = 25,
                    backgrounds: Optional[np.ndarray] = None, augment_colors: bool = True):
    """Fit the U-Net with pixelwise BCE; returns ``(net, history)`` at the best validation loss.

    Training batches get a random hue rotation and colour jitter, and half of
    them have their background replaced by one of ``backgrounds`` (e.g. the
    unconstrained set), so the net cannot key on source colours alone.
    """
    if any(s.mask is None for s in samples):
        raise MissingAnnotation("every source sample needs a foreground mask")
    if len(samples) < 2:
        raise MissingAnnotation("need at least two masked samples")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    images = torch.as_tensor(np.stack([s.pixels for s in samples]), dtype=torch.float32).permute(0, 3, 1, 2)
    masks = torch.as_tensor(np.stack([s.mask for s in samples]), dtype=torch.float32).permute(0, 3, 1, 2)
    n_val = max(1, int(round(len(samples) * val_fraction)))
    perm = torch.randperm(len(samples), generator=gen)
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    bgs = None if backgrounds is None else torch.as_tensor(np.asarray(backgrounds), dtype=torch.float32)
    rng = np.random.default_rng(seed)

    net = build_segmenter(cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.seg_lr)
    best, best_state = float("inf"), copy.deepcopy(net.state_dict())
    history: dict[str, list] = {"train": [], "val": []}
    for step in range(cfg.seg_steps):
        net.train()
        b = tr_idx[torch.randint(len(tr_idx), (cfg.seg_batch_size,), generator=gen)]
        x, m = images[b], masks[b]
        if augment_colors:
            x = _augment_batch(x.permute(0, 2, 3, 1), m.permute(0, 2, 3, 1), bgs, cfg, gen, rng).permute(0, 3, 1, 2)
        loss = F.binary_cross_entropy_with_logits(net(x), m)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history["train"].append(loss.item())
        if (step + 1) % eval_every == 0 or step + 1 == cfg.seg_steps:
            net.eval()
            with torch.no_grad():
                vl = float(F.binary_cross_entropy_with_logits(net(images[val_idx]), masks[val_idx]))
            history["val"].append((step + 1, vl))
            if vl < best:
                best, best_state = vl, copy.deepcopy(net.state_dict())
    net.load_state_dict(best_state)
    net.eval()
    log.info("segmenter trained: best val BCE %.4f", best)
    return net, history
