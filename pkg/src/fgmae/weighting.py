"""Foreground-centric patch weights for the reconstruction loss."""
from __future__ import annotations

import numpy as np
import torch

from .datamodel import PatchWeights
from .errors import InvalidParam, InvalidShape
from .patching import PatchGridSpec, patchify


def patch_foreground_ratio(mask, spec: PatchGridSpec):
    """Mean mask value inside each patch (average pooling with kernel = stride = P).

    Accepts ``(..., H, W, 1)`` numpy arrays or tensors; returns ``(..., N)``.
    """
    if mask.shape[-1] != 1:
        raise InvalidShape(f"mask must have a single channel, got {tuple(mask.shape)}")
    return patchify(mask, spec).mean(-1)


def weights_from_ratios(ratios: torch.Tensor, alpha: float) -> torch.Tensor:
    """Batched weights ``w_i = N * exp(alpha (r_i - 0.5)) / sum_k exp(alpha (r_k - 0.5))``."""
    n = ratios.shape[-1]
    if n == 0:
        raise InvalidShape("no patches")
    # softmax is the normalised exponential; the -0.5 shift cancels but is kept for clarity
    return n * torch.softmax(alpha * (ratios - 0.5), dim=-1)


def patch_weights(ratios: np.ndarray, alpha: float) -> PatchWeights:
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.ndim != 1 or ratios.size == 0:
        raise InvalidShape(f"expected a non-empty vector of ratios, got shape {ratios.shape}")
    if not np.isfinite(alpha):
        raise InvalidParam(f"alpha must be finite, got {alpha}")
    if np.any(ratios < 0) or np.any(ratios > 1):
        raise InvalidParam("foreground ratios must lie in [0,1]")
    logits = alpha * (ratios - 0.5)
    raw = np.exp(logits - logits.max())
    w = ratios.size * raw / raw.sum()
    return PatchWeights(ratios=ratios, weights=w, alpha=float(alpha))


def uniform_weights(n: int) -> PatchWeights:
    return PatchWeights(ratios=np.full(n, np.nan), weights=np.ones(n), alpha=0.0)
