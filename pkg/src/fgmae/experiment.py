"""End-to-end runs: segmenter, pre-training, fine-tuning and evaluation per ablation variant."""
from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .datamodel import Domain, ImageSample, ModelConfig, dump_config, load_samples, write_masks
from .evaluation import attention_maps, evaluate, foreground_mass, report_bytes
from .segmenter import mean_iou, segment_batch, train_segmenter
from .training import ImageSet, finetune, pretrain
from .vit import Encoder

log = logging.getLogger(__name__)

# Ablation rows: full method, the design-choice ablations, the mask/unconstrained-set
# ablations and the supervised-only baseline.
VARIANTS: dict[str, dict] = {
    "full": {},
    "no_fcr": {"fcr": False},
    "no_ar": {"ar": False},
    "mae": {"fcr": False, "ar": False},
    "no_st": {"target_mask_source": "none"},
    "no_xc": {"bg_aug": False},
    "scratch": {"pretrained": False, "ar": False},
}
VARIANT_LABELS = {
    "full": "Ours",
    "no_fcr": "Ours w/o FCR",
    "no_ar": "Ours w/o AR",
    "mae": "Ours w/o FCR, AR (MAE)",
    "no_st": "Ours w/o S_T",
    "no_xc": "Ours w/o X_C",
    "scratch": "Ours (Scratch)",
}


@dataclass
class Data:
    source: list[ImageSample]
    target: list[ImageSample]
    unconstrained: list[ImageSample]
    test_source: list[ImageSample]
    test_target: list[ImageSample]

    @classmethod
    def load(cls, root: Path) -> "Data":
        return cls(
            source=load_samples(root, "train", Domain.SOURCE),
            target=load_samples(root, "train", Domain.TARGET),
            unconstrained=load_samples(root, "train", Domain.UNCONSTRAINED),
            test_source=load_samples(root, "test", Domain.SOURCE),
            test_target=load_samples(root, "test", Domain.TARGET),
        )


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    if variant not in VARIANTS:
        raise KeyError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return base.replace(**VARIANTS[variant])


def pretrain_key(cfg: ModelConfig) -> Optional[tuple]:
    if not cfg.pretrained:
        return None
    return (cfg.fcr, cfg.target_mask_source, cfg.bg_aug)


@dataclass
class SeedRun:
    """Shares the segmenter and pre-trained encoders between variants of one seed."""

    base: ModelConfig
    data: Data
    seed: int
    out_dir: Path
    _seg_masks: Optional[np.ndarray] = None
    _pretrained: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def target_masks(self, cfg: ModelConfig) -> Optional[np.ndarray]:
        if cfg.target_mask_source == "none":
            return None
        if cfg.target_mask_source == "oracle":
            return np.stack([s.mask for s in self.data.target])
        if self._seg_masks is None:
            t = time.time()
            bgs = np.stack([s.pixels for s in self.data.unconstrained]) if self.data.unconstrained else None
            net, _ = train_segmenter(self.data.source, cfg, seed=self.seed, backgrounds=bgs)
            self._seg_masks = segment_batch(net, np.stack([s.pixels for s in self.data.target]))
            write_masks({s.sample_id: m for s, m in zip(self.data.target, self._seg_masks)},
                        self.out_dir / "seg", "train", Domain.TARGET)
            test_pred = segment_batch(net, np.stack([s.pixels for s in self.data.test_target]))
            src_pred = segment_batch(net, np.stack([s.pixels for s in self.data.test_source]))
            self.seg_iou = {
                "target": mean_iou(test_pred, np.stack([s.mask for s in self.data.test_target])),
                "source": mean_iou(src_pred, np.stack([s.mask for s in self.data.test_source])),
            }
            (self.out_dir / "seg").mkdir(parents=True, exist_ok=True)
            (self.out_dir / "seg" / "iou.json").write_text(json.dumps(self.seg_iou, sort_keys=True) + "\n")
            self.timings["segmenter"] = time.time() - t
        return self._seg_masks

    def pretrained(self, cfg: ModelConfig) -> Optional[Encoder]:
        key = pretrain_key(cfg)
        if key is None:
            return None
        if key not in self._pretrained:
            t = time.time()
            name = "pre_" + "_".join(str(k) for k in key)
            src = ImageSet.from_samples(self.data.source)
            tgt = ImageSet.from_samples(self.data.target, masks=self.target_masks(cfg),
                                        use_masks=cfg.target_mask_source != "none")
            unc = ImageSet.from_samples(self.data.unconstrained, use_masks=False)
            enc, dec, _ = pretrain(cfg, src, tgt, unc, seed=self.seed,
                                   log_path=self.out_dir / name / "metrics.jsonl",
                                   snapshot_dir=self.out_dir / name / "snapshots")
            ckpt.save_checkpoint(ckpt.module_bundle(encoder=enc, decoder=dec), self.out_dir / name / "pretrain.pmud")
            self._pretrained[key] = enc.state_dict()
            self.timings[name] = time.time() - t
        enc = Encoder(cfg)
        enc.load_state_dict(self._pretrained[key])
        return enc

    def run_variant(self, variant: str) -> dict:
        cfg = variant_config(self.base, variant).replace(seed=self.seed)
        vdir = self.out_dir / variant
        vdir.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, vdir / "config.yaml")
        enc = self.pretrained(cfg)
        t = time.time()
        src = ImageSet.from_samples(self.data.source, use_masks=False)
        tgt = ImageSet.from_samples(self.data.target, use_masks=False)
        enc, head, frozen, _ = finetune(cfg, src, tgt, enc, seed=self.seed, log_path=vdir / "metrics.jsonl")
        self.timings[variant] = time.time() - t
        ckpt.save_checkpoint(ckpt.module_bundle(encoder=enc, head=head), vdir / "finetune.pmud")
        report = evaluate(enc, head, {"target": self.data.test_target, "source": self.data.test_source},
                          cfg, out_dir=vdir)
        maps = attention_maps(enc, np.stack([s.pixels for s in self.data.test_target]))
        fg = foreground_mass(maps, np.stack([s.mask for s in self.data.test_target]))
        report["target"]["fg_attention_mass"] = float(fg.mean())
        (vdir / "report.json").write_bytes(report_bytes(report))
        return report


def run_grid(base: ModelConfig, data_dir: Path, out_dir: Path, variants: Sequence[str],
             seeds: Sequence[int]) -> dict:
    """Run every variant for every seed; returns ``{variant: {seed: report}}`` plus medians."""
    data = Data.load(Path(data_dir))
    out_dir = Path(out_dir)
    results: dict = {v: {} for v in variants}
    for seed in seeds:
        torch.manual_seed(seed)
        run = SeedRun(base, data, seed, out_dir / f"seed{seed}")
        for v in variants:
            results[v][seed] = run.run_variant(v)
            log.info("seed %d %s: target EPE %.2f", seed, v, results[v][seed]["target"]["epe"])
        (out_dir / f"seed{seed}" / "timings.json").write_text(json.dumps(run.timings, indent=2, sort_keys=True) + "\n")
    summary = summarize(results)
    (out_dir / "ablation.json").write_bytes(report_bytes({"runs": _stringify(results), "median": summary}))
    (out_dir / "ablation.md").write_text(format_table(summary))
    return {"runs": results, "median": summary}


def _stringify(results: dict) -> dict:
    return {v: {str(s): r for s, r in per.items()} for v, per in results.items()}


def summarize(results: dict) -> dict:
    out = {}
    for v, per in results.items():
        reps = list(per.values())
        out[v] = {
            "target_epe": statistics.median(r["target"]["epe"] for r in reps),
            "target_mpjpe": statistics.median(r["target"]["mpjpe"] for r in reps),
            "target_pa_mpjpe": statistics.median(r["target"]["pa_mpjpe"] for r in reps),
            "source_epe": statistics.median(r["source"]["epe"] for r in reps),
            "target_fg_attention_mass": statistics.mean(r["target"]["fg_attention_mass"] for r in reps),
            "seeds": len(reps),
        }
    return out


def format_table(summary: dict) -> str:
    lines = ["| Method | Target EPE | Target MPJPE | Target PA-MPJPE | Source EPE | FG attn |",
             "|---|---|---|---|---|---|"]
    for v, s in summary.items():
        lines.append(f"| {VARIANT_LABELS.get(v, v)} | {s['target_epe']:.2f} | {s['target_mpjpe']:.2f} | "
                     f"{s['target_pa_mpjpe']:.2f} | {s['source_epe']:.2f} | {s['target_fg_attention_mass']:.3f} |")
    return "\n".join(lines) + "\n"
