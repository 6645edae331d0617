"""Inference, metric reports and the class-attention probe."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .datamodel import ImageSample, ModelConfig
from .errors import MissingAnnotation
from .head import KeypointHead, decode_batch
from .metrics import batch_report
from .patching import patchify
from .vit import Encoder


@torch.no_grad()
def predict_heatmaps(encoder: Encoder, head: KeypointHead, images: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    encoder.eval()
    head.eval()
    outs = []
    for i in range(0, len(images), batch_size):
        tokens, _ = encoder(patchify(images[i:i + batch_size], encoder.spec))
        outs.append(head(tokens[:, 1:]).double().numpy())
    return np.concatenate(outs)


def predict_keypoints(encoder: Encoder, head: KeypointHead, samples: Sequence[ImageSample],
                      cfg: ModelConfig) -> np.ndarray:
    """Metric predictions; the heatmap cube is centred on each sample's ground-truth root."""
    if any(s.keypoints is None for s in samples):
        raise MissingAnnotation("evaluation needs keypoints for every sample")
    images = torch.as_tensor(np.stack([s.pixels for s in samples]), dtype=torch.float32)
    roots = np.stack([s.keypoints[cfg.root_index] for s in samples])
    return decode_batch(predict_heatmaps(encoder, head, images), roots, cfg.cube_side_mm)


def evaluate_predictions(preds: np.ndarray, samples: Sequence[ImageSample], cfg: ModelConfig):
    gts = np.stack([s.keypoints for s in samples])
    rows, summary = batch_report(preds, gts, cfg.root_index, cfg.epe_root_align)
    for r, s in zip(rows, samples):
        r["sample_id"] = s.sample_id
    return rows, summary


def evaluate(encoder: Encoder, head: KeypointHead, splits: dict[str, Sequence[ImageSample]], cfg: ModelConfig,
             out_dir: Optional[Path] = None) -> dict:
    """Per-domain ``{epe, mpjpe, pa_mpjpe, n_samples}``; optionally writes report.json and per_sample.csv."""
    report, all_rows = {}, []
    for name, samples in splits.items():
        preds = predict_keypoints(encoder, head, samples, cfg)
        rows, summary = evaluate_predictions(preds, samples, cfg)
        report[name] = summary
        all_rows += [{"domain": name, **r} for r in rows]
    if out_dir is not None:
        write_report(report, all_rows, Path(out_dir))
    return report


def report_bytes(report: dict) -> bytes:
    return (json.dumps(report, sort_keys=True, indent=2) + "\n").encode()


def write_report(report: dict, rows: list[dict], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_bytes(report_bytes(report))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["domain", "sample_id", "epe", "mpjpe", "pa_mpjpe"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in w.fieldnames})
    (out_dir / "per_sample.csv").write_text(buf.getvalue())


# --- attention probe ----------------------------------------------------

@torch.no_grad()
def attention_maps(encoder: Encoder, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Block-averaged class attention, bilinearly upsampled to image size: ``(B, H, W)``."""
    encoder.eval()
    g = encoder.spec.grid[0]
    size = encoder.spec.H
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.as_tensor(images[i:i + batch_size], dtype=torch.float32)
        stack = encoder.class_attention(x)                  # (B, L, N)
        grid = stack.mean(1).reshape(-1, 1, g, g)
        up = F.interpolate(grid.double(), size=(size, size), mode="bilinear", align_corners=False)
        out.append(up[:, 0].numpy())
    return np.concatenate(out)


def foreground_mass(maps: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Share of attention falling on the foreground: ``sum(map * mask) / sum(map)`` per image."""
    m = masks[..., 0] if masks.ndim == 4 else masks
    return (maps * m).sum(axis=(1, 2)) / maps.sum(axis=(1, 2))


def heat_colormap(t: np.ndarray) -> np.ndarray:
    """Black-red-yellow-white ramp for values in [0, 1]."""
    t = np.clip(t, 0, 1)[..., None]
    return np.clip(np.concatenate([3 * t, 3 * t - 1, 3 * t - 2], axis=-1), 0, 1)


def overlay(image: np.ndarray, amap: np.ndarray, opacity: float = 0.6) -> np.ndarray:
    """Blend the min-max normalised map (heat colours) over the image; flat maps render as zero heat."""
    span = amap.max() - amap.min()
    t = (amap - amap.min()) / span if span > 0 else np.zeros_like(amap)
    return (1 - opacity) * image + opacity * heat_colormap(t)


def probe_attention(encoder: Encoder, samples: Sequence[ImageSample], out_dir: Path) -> list[dict]:
    """Write ``<sample_id>_attn.png`` overlays (same size as the input) and return per-image stats."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = np.stack([s.pixels for s in samples])
    maps = attention_maps(encoder, images)
    stats = []
    for s, m in zip(samples, maps):
        img = overlay(s.pixels, m)
        Image.fromarray((img * 255).round().astype(np.uint8)).save(out_dir / f"{s.sample_id}_attn.png")
        row = {"sample_id": s.sample_id, "min": float(m.min()), "max": float(m.max())}
        if s.mask is not None:
            row["fg_mass"] = float(foreground_mass(m[None], s.mask[None])[0])
        stats.append(row)
    (out_dir / "attention.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return stats
