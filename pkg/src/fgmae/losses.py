"""Reconstruction, keypoint and attention losses.

All losses take torch tensors with a leading batch dimension (unbatched
inputs are promoted) and return the batch mean of the per-sample loss.
The datamodel containers are accepted as well.
"""
from __future__ import annotations

import numpy as np
import torch

from .datamodel import AttentionStack, Heatmap3D, PatchWeights
from .errors import InvalidCube, InvalidParam, InvalidShape


def _t(x, ref: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = ref.dtype if ref is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _batched(x: torch.Tensor, ndim: int) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == ndim - 1 else x


def wmae_loss(pred, target, weights, mask) -> torch.Tensor:
    """``(1/N) sum_i w_i m_i ||pred_i - target_i||^2`` over masked patches only."""
    if isinstance(weights, PatchWeights):
        weights = weights.weights
    pred = _batched(_t(pred), 3)
    target = _batched(_t(target, pred), 3)
    weights = _batched(_t(weights, pred), 2)
    mask = _batched(_t(mask, pred), 2).to(pred.dtype)
    if pred.shape != target.shape:
        raise InvalidShape(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if weights.shape[-1] != pred.shape[1] or mask.shape[-1] != pred.shape[1]:
        raise InvalidShape("weights/mask length must equal the patch count")
    n = pred.shape[1]
    sq = ((pred - target) ** 2).sum(-1)
    # select rather than multiply so unmasked patches cannot leak NaN/inf
    per_patch = torch.where(mask > 0, weights * mask * sq, torch.zeros_like(sq))
    return (per_patch.sum(-1) / n).mean()


def kpt_loss(pred, target, normalize: bool = False) -> torch.Tensor:
    """Squared L2 distance between heatmap volumes, summed over voxels per sample."""
    if isinstance(pred, Heatmap3D) or isinstance(target, Heatmap3D):
        if not (isinstance(pred, Heatmap3D) and isinstance(target, Heatmap3D)):
            raise InvalidCube("both heatmaps must carry a cube")
        if pred.cube != target.cube:
            raise InvalidCube(f"cube mismatch: {pred.cube} vs {target.cube}")
        pred, target = pred.volume, target.volume
    pred = _batched(_t(pred), 5)
    target = _batched(_t(target, pred), 5)
    if pred.shape != target.shape:
        raise InvalidShape(f"heatmap shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    per_sample = ((pred - target) ** 2).flatten(1).sum(-1)
    if normalize:
        per_sample = per_sample / pred[0].numel()
    return per_sample.mean()


def attn_loss(stack_enc, stack_frozen) -> torch.Tensor:
    """Elementwise L1 between attention stacks; no gradient reaches ``stack_frozen``."""
    if isinstance(stack_enc, AttentionStack):
        stack_enc = stack_enc.rows
    if isinstance(stack_frozen, AttentionStack):
        stack_frozen = stack_frozen.rows
    a = _batched(_t(stack_enc), 3)
    b = _batched(_t(stack_frozen, a), 3).detach()
    if a.shape != b.shape:
        raise InvalidShape(f"attention stacks differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().flatten(1).sum(-1).mean()


def hpe_loss(kpt, attn, lambda_attn: float):
    if lambda_attn < 0:
        raise InvalidParam(f"lambda_attn must be non-negative, got {lambda_attn}")
    return kpt + lambda_attn * attn


def bce_loss(prob, target) -> torch.Tensor:
    """Mean pixelwise binary cross-entropy of probabilities."""
    prob = _t(prob)
    target = _t(target, prob)
    eps = torch.finfo(prob.dtype).tiny
    return -(target * torch.log(prob.clamp_min(eps)) + (1 - target) * torch.log((1 - prob).clamp_min(eps))).mean()
