"""Pose error metrics in millimetres: EPE, MPJPE and PA-MPJPE."""
from __future__ import annotations

import numpy as np

from .errors import DegeneratePose, InvalidParam, InvalidShape


def _check(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise InvalidShape(f"pose shapes differ or are not Kx3: {pred.shape} vs {gt.shape}")
    return pred, gt


def epe(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def mpjpe(pred, gt, root_index: int = 0) -> float:
    pred, gt = _check(pred, gt)
    if not 0 <= root_index < pred.shape[-2]:
        raise InvalidParam(f"root index {root_index} out of range for {pred.shape[-2]} joints")
    p = pred - pred[..., root_index:root_index + 1, :]
    g = gt - gt[..., root_index:root_index + 1, :]
    return float(np.linalg.norm(p - g, axis=-1).mean())


def similarity_transform(pred, gt) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares ``(s, R, t)`` with ``s R pred_k + t ~ gt_k`` and ``det R = +1``."""
    pred, gt = _check(pred, gt)
    if pred.ndim != 2 or pred.shape[0] < 3:
        raise InvalidShape("Procrustes alignment needs a single pose with at least 3 joints")
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    x, y = pred - mu_p, gt - mu_g
    var_x = float((x ** 2).sum())
    if var_x <= 1e-12 * max(1.0, float((y ** 2).sum())):
        raise DegeneratePose("predicted joints are coincident")
    u, sig, vt = np.linalg.svd(y.T @ x)
    d = np.ones(3)
    d[-1] = np.sign(np.linalg.det(u @ vt)) or 1.0
    r = u @ np.diag(d) @ vt
    s = float((sig * d).sum() / var_x)
    return s, r, mu_g - s * r @ mu_p


def procrustes_align(pred, gt) -> np.ndarray:
    s, r, t = similarity_transform(pred, gt)
    return s * np.asarray(pred, dtype=np.float64) @ r.T + t


def pa_mpjpe(pred, gt) -> float:
    aligned = procrustes_align(pred, gt)
    return float(np.linalg.norm(aligned - np.asarray(gt, dtype=np.float64), axis=-1).mean())


def batch_report(preds: np.ndarray, gts: np.ndarray, root_index: int = 0, epe_root_align: bool = False):
    """Per-sample metric rows and their means for ``(B, K, 3)`` predictions."""
    rows = []
    for p, g in zip(preds, gts):
        e = mpjpe(p, g, root_index) if epe_root_align else epe(p, g)
        rows.append({"epe": e, "mpjpe": mpjpe(p, g, root_index), "pa_mpjpe": pa_mpjpe(p, g)})
    summary = {k: float(np.mean([r[k] for r in rows])) if rows else float("nan") for k in ("epe", "mpjpe", "pa_mpjpe")}
    summary["n_samples"] = len(rows)
    return rows, summary
