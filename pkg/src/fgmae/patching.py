"""Patch grids and MAE mask bookkeeping.

Patches are numbered row-major over the grid; each flattened patch is laid
out as (row-within-patch, col-within-patch, channel). The same layout is
used for numpy arrays and torch tensors, with any number of leading batch
dimensions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from einops import rearrange

from .datamodel import TokenBatch
from .errors import InvalidParam, InvalidShape


@dataclass(frozen=True)
class PatchGridSpec:
    P: int
    H: int
    W: int

    def __post_init__(self):
        if self.P <= 0 or self.H % self.P or self.W % self.P or self.H <= 0 or self.W <= 0:
            raise InvalidShape(f"{self.H}x{self.W} image is not tiled by {self.P}x{self.P} patches")

    @property
    def N(self) -> int:
        return (self.H // self.P) * (self.W // self.P)

    @property
    def grid(self) -> tuple[int, int]:
        return self.H // self.P, self.W // self.P

    @classmethod
    def square(cls, image_size: int, patch_size: int) -> "PatchGridSpec":
        return cls(P=patch_size, H=image_size, W=image_size)


def patchify(image, spec: PatchGridSpec):
    """``(..., H, W, C)`` image -> ``(..., N, P*P*C)`` patch matrix."""
    if tuple(image.shape[-3:-1]) != (spec.H, spec.W):
        raise InvalidShape(f"image {tuple(image.shape)} does not match grid {spec}")
    return rearrange(image, "... (h p) (w q) c -> ... (h w) (p q c)", p=spec.P, q=spec.P)


def unpatchify(patches, spec: PatchGridSpec, channels: int = 3):
    if patches.shape[-2] != spec.N or patches.shape[-1] != spec.P * spec.P * channels:
        raise InvalidShape(f"patch matrix {tuple(patches.shape)} does not match grid {spec}")
    gh, gw = spec.grid
    return rearrange(patches, "... (h w) (p q c) -> ... (h p) (w q) c", h=gh, w=gw, p=spec.P, q=spec.P)


def num_masked(n: int, r: float) -> int:
    if not 0 <= r < 1:
        raise InvalidParam(f"mask ratio must be in [0,1), got {r}")
    # round half up, independent of float banker's rounding
    return int(math.floor(r * n + 0.5))


def generate_mask(n: int, r: float, rng: np.random.Generator) -> np.ndarray:
    """Binary mask with exactly ``round(r*n)`` ones (1 = masked)."""
    k = num_masked(n, r)
    mask = np.zeros(n, dtype=np.int64)
    mask[rng.permutation(n)[:k]] = 1
    return mask


def generate_mask_batch(batch: int, n: int, r: float, generator: torch.Generator) -> torch.Tensor:
    k = num_masked(n, r)
    order = torch.argsort(torch.rand(batch, n, generator=generator), dim=1)
    mask = torch.zeros(batch, n, dtype=torch.long)
    mask.scatter_(1, order[:, :k], 1)
    return mask


def apply_mask(tokens: np.ndarray, binary_mask: np.ndarray) -> TokenBatch:
    binary_mask = np.asarray(binary_mask)
    if tokens.shape[0] != binary_mask.shape[0]:
        raise InvalidShape(f"{tokens.shape[0]} tokens but mask of length {binary_mask.shape[0]}")
    keep = np.flatnonzero(binary_mask == 0)
    return TokenBatch(tokens=tokens[keep], index_map=keep, binary_mask=binary_mask, has_cls=False)


def restore_order(encoded, mask_token, binary_mask) -> np.ndarray:
    """Scatter kept tokens back to their patch slots, filling the rest with ``mask_token``."""
    if isinstance(encoded, TokenBatch):
        if encoded.has_cls:
            raise InvalidShape("restore_order expects tokens without the class token")
        encoded = encoded.tokens
    binary_mask = np.asarray(binary_mask)
    keep = np.flatnonzero(binary_mask == 0)
    if encoded.shape[0] != keep.size:
        raise InvalidShape(f"{encoded.shape[0]} encoded tokens for {keep.size} unmasked slots")
    mask_token = np.asarray(mask_token)
    if mask_token.shape != encoded.shape[1:]:
        raise InvalidShape(f"mask token width {mask_token.shape} != token width {encoded.shape[1:]}")
    out = np.broadcast_to(mask_token, (binary_mask.size,) + mask_token.shape).copy()
    out[keep] = encoded
    return out


def keep_indices(mask: torch.Tensor) -> torch.Tensor:
    """``(B, N)`` masks with equal kept counts -> ``(B, M)`` ascending kept indices."""
    counts = (mask == 0).sum(dim=1)
    if counts.numel() and not torch.all(counts == counts[0]):
        raise InvalidShape("every mask in a batch must keep the same number of tokens")
    # stable sort puts kept (0) slots first, preserving ascending index order
    order = torch.sort(mask, dim=1, stable=True).indices
    return order[:, : int(counts[0]) if counts.numel() else 0]


def gather_tokens(tokens: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(tokens, 1, idx.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))


def restore_order_batch(encoded: torch.Tensor, mask_token: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable version of :func:`restore_order`."""
    b, n = mask.shape
    idx = keep_indices(mask)
    if encoded.shape[1] != idx.shape[1]:
        raise InvalidShape(f"{encoded.shape[1]} encoded tokens for {idx.shape[1]} unmasked slots")
    out = mask_token.reshape(1, 1, -1).expand(b, n, -1).clone()
    return out.scatter(1, idx.unsqueeze(-1).expand(-1, -1, encoded.shape[-1]), encoded)
