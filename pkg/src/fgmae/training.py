"""Two-stage training: weighted MAE pre-training, then attention-regularised fine-tuning."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn as nn

from . import augment
from .datamodel import ImageSample, ModelConfig
from .errors import InvalidParam, MissingAnnotation, NonFiniteGradient
from .head import KeypointHead, gaussian_targets
from .losses import attn_loss, hpe_loss, kpt_loss, wmae_loss
from .patching import PatchGridSpec, generate_mask_batch, patchify
from .vit import Decoder, Encoder, class_attention
from .weighting import patch_foreground_ratio, weights_from_ratios

log = logging.getLogger(__name__)

NO_DECAY_NAMES = ("pos_embed", "cls_token", "mask_token")


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    total: int
    warmup: int = 0
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup < self.total:
            raise InvalidParam(f"need 0 <= warmup < total, got warmup={self.warmup}, total={self.total}")


def lr_at(step: int, s: Schedule) -> float:
    """Linear warm-up to ``base_lr`` then half-cosine decay to ``min_lr`` at ``total``."""
    if not 0 <= step <= s.total:
        raise InvalidParam(f"step {step} outside [0, {s.total}]")
    if step < s.warmup:
        return s.base_lr * step / s.warmup
    frac = (step - s.warmup) / (s.total - s.warmup)
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1 + math.cos(math.pi * frac))


def param_groups(modules: Iterable[nn.Module], weight_decay: float) -> list[dict]:
    """Split parameters so norms, biases and embedding tokens get no weight decay."""
    decay, no_decay = [], []
    for m in modules:
        for name, p in m.named_parameters():
            if not p.requires_grad:
                continue
            if p.ndim <= 1 or name.split(".")[-1] in NO_DECAY_NAMES:
                no_decay.append(p)
            else:
                decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def make_optimizer(modules: Iterable[nn.Module], cfg: ModelConfig, lr: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(param_groups(modules, cfg.weight_decay), lr=lr, betas=cfg.betas, eps=cfg.eps)


def optimizer_step(opt: torch.optim.Optimizer, lr: float) -> None:
    """Set the learning rate and take one AdamW step; refuses non-finite gradients."""
    for group in opt.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteGradient(f"non-finite gradient in parameter of shape {tuple(p.shape)}")
    for group in opt.param_groups:
        group["lr"] = lr
    opt.step()
    for group in opt.param_groups:
        for p in group["params"]:
            if not torch.isfinite(p).all():
                raise NonFiniteGradient(f"parameter of shape {tuple(p.shape)} became non-finite")


# --- in-memory data -----------------------------------------------------

@dataclass
class ImageSet:
    images: torch.Tensor                      # (B, H, W, 3)
    masks: Optional[torch.Tensor] = None      # (B, H, W, 1)
    keypoints: Optional[np.ndarray] = None    # (B, K, 3) mm
    ids: tuple[str, ...] = ()

    def __len__(self) -> int:
        return self.images.shape[0]

    @classmethod
    def from_samples(cls, samples: list[ImageSample], masks: Optional[np.ndarray] = None,
                     use_masks: bool = True) -> "ImageSet":
        imgs = torch.as_tensor(np.stack([s.pixels for s in samples]), dtype=torch.float32)
        if masks is None and use_masks and samples and all(s.mask is not None for s in samples):
            masks = np.stack([s.mask for s in samples])
        m = None if masks is None or not use_masks else torch.as_tensor(masks, dtype=torch.float32)
        kp = np.stack([s.keypoints for s in samples]) if samples and all(s.keypoints is not None for s in samples) else None
        return cls(imgs, m, kp, tuple(s.sample_id for s in samples))


class MetricsLog:
    """Appends one JSON object per line to ``metrics.jsonl`` (or keeps them in memory)."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **rec) -> None:
        self.records.append(rec)
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def _batch_indices(n: int, size: int, gen: torch.Generator) -> torch.Tensor:
    return torch.randint(n, (size,), generator=gen)


# --- pre-training -------------------------------------------------------

def pretrain(cfg: ModelConfig, source: ImageSet, target: ImageSet, unconstrained: Optional[ImageSet] = None,
             seed: int = 0, log_path: Optional[Path] = None, snapshot_dir: Optional[Path] = None,
             encoder: Optional[Encoder] = None, decoder: Optional[Decoder] = None):
    """Weighted masked-autoencoder training on the union of source and target images.

    Returns ``(encoder, decoder, records)``.
    """
    if cfg.fcr and source.masks is None:
        raise MissingAnnotation("foreground-centric reconstruction needs source masks")
    torch.manual_seed(seed)
    encoder = encoder or Encoder(cfg)
    decoder = decoder or Decoder(cfg)
    encoder.train()
    decoder.train()
    spec = PatchGridSpec.square(cfg.image_size, cfg.patch_size)
    opt = make_optimizer([encoder, decoder], cfg, cfg.pretrain_lr)
    sched = Schedule(cfg.pretrain_lr, cfg.pretrain_steps, min(cfg.pretrain_warmup, cfg.pretrain_steps - 1), cfg.min_lr)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)

    images = torch.cat([source.images, target.images])
    n_src = len(source)
    if source.masks is not None and target.masks is not None:
        masks = torch.cat([source.masks, target.masks])
        has_mask = torch.ones(len(images), dtype=torch.bool)
    else:
        src_m = source.masks if source.masks is not None else torch.zeros_like(source.images[..., :1])
        masks = torch.cat([src_m, torch.zeros_like(target.images[..., :1])])
        has_mask = torch.cat([torch.full((n_src,), source.masks is not None),
                              torch.zeros(len(target), dtype=torch.bool)])
    swap_ok = cfg.bg_aug and unconstrained is not None and len(unconstrained) > 0

    mlog = MetricsLog(log_path)
    for step in range(cfg.pretrain_steps):
        idx = _batch_indices(len(images), cfg.pretrain_batch_size, gen)
        x, m, hm = images[idx], masks[idx], has_mask[idx]
        if swap_ok:
            do = torch.as_tensor(rng.random(len(idx)) < cfg.bg_swap_prob) & hm
            bg = unconstrained.images[_batch_indices(len(unconstrained), len(idx), gen)]
            swapped = augment.background_swap(x, m, bg)
            x = torch.where(do.view(-1, 1, 1, 1), swapped, x)
        p = augment.draw_params(rng, cfg, len(idx))
        x, m, _ = augment.augment_batch(x, m, None, p)
        patches = patchify(x, spec)
        mask = generate_mask_batch(len(idx), spec.N, cfg.mask_ratio, gen)
        latent, _ = encoder(patches, mask)
        recon = decoder(latent, mask)
        if cfg.fcr:
            ratios = patch_foreground_ratio(m, spec)
            w = weights_from_ratios(ratios, cfg.alpha)
            # samples without a mask fall back to uniform weights
            w = torch.where(hm.view(-1, 1), w, torch.ones_like(w))
        else:
            w = torch.ones(len(idx), spec.N)
        loss = wmae_loss(recon, patches, w, mask)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        lr = lr_at(step, sched)
        optimizer_step(opt, lr)
        mlog.write(stage="pretrain", step=step, loss_wmae=loss.item(), lr=lr)
        if snapshot_dir and cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
            save_reconstruction(Path(snapshot_dir) / f"recon_{step + 1:06d}.png", x[0], recon[0].detach(), mask[0], spec)
    encoder.eval()
    decoder.eval()
    return encoder, decoder, mlog.records


def save_reconstruction(path: Path, image: torch.Tensor, recon: torch.Tensor, mask: torch.Tensor,
                        spec: PatchGridSpec) -> None:
    """Side-by-side PNG: input, masked input, reconstruction with visible patches pasted back."""
    from PIL import Image

    from .patching import unpatchify

    patches = patchify(image, spec)
    keep = (mask == 0).view(-1, 1).to(patches.dtype)
    masked = unpatchify(patches * keep, spec)
    pasted = unpatchify(patches * keep + recon * (1 - keep), spec)
    strip = torch.cat([image, masked, pasted.clamp(0, 1)], dim=1).numpy()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((strip * 255).round().astype(np.uint8)).save(path)


# --- fine-tuning --------------------------------------------------------

def keypoint_targets(kp: np.ndarray, cfg: ModelConfig) -> torch.Tensor:
    """Gaussian heatmaps of root-relative keypoints in a root-centred cube."""
    rel = kp - kp[:, cfg.root_index:cfg.root_index + 1]
    s = cfg.heatmap_size
    vox = (rel[..., ::-1] + cfg.cube_side_mm / 2) / cfg.cube_side_mm * s
    return gaussian_targets(torch.as_tensor(vox.copy(), dtype=torch.float32), cfg.heatmap_sigma, s)


def frozen_copy(encoder: Encoder) -> Encoder:
    net = copy.deepcopy(encoder)
    for p in net.parameters():
        p.requires_grad_(False)
    return net.eval()


def finetune(cfg: ModelConfig, source: ImageSet, target: Optional[ImageSet], encoder: Optional[Encoder] = None,
             seed: int = 0, log_path: Optional[Path] = None):
    """Supervised heatmap training on source plus attention regularisation on target.

    ``encoder`` is the pre-trained encoder (``None`` trains from scratch).
    Returns ``(encoder, head, frozen_attention_net, records)``.
    """
    if source.keypoints is None:
        raise MissingAnnotation("fine-tuning needs source keypoints")
    torch.manual_seed(seed)
    encoder = encoder if encoder is not None else Encoder(cfg)
    frozen = frozen_copy(encoder)
    head = KeypointHead(cfg)
    encoder.train()
    head.train()
    spec = encoder.spec
    lam = cfg.effective_lambda
    use_attn = lam > 0 and target is not None and len(target) > 0
    opt = make_optimizer([encoder, head], cfg, cfg.finetune_lr)
    sched = Schedule(cfg.finetune_lr, cfg.finetune_steps, min(cfg.finetune_warmup, cfg.finetune_steps - 1), cfg.min_lr)
    gen = torch.Generator().manual_seed(seed + 1)
    rng = np.random.default_rng(seed + 1)
    mlog = MetricsLog(log_path)

    def source_loss():
        idx = _batch_indices(len(source), cfg.finetune_batch_size, gen)
        p = augment.draw_params(rng, cfg, len(idx))
        x, _, kp = augment.augment_batch(source.images[idx], None, source.keypoints[idx.numpy()], p)
        tokens, _ = encoder(patchify(x, spec))
        pred = head(tokens[:, 1:])
        return kpt_loss(pred, keypoint_targets(kp, cfg), normalize=cfg.normalize_kpt_loss)

    def target_loss():
        idx = _batch_indices(len(target), cfg.target_batch_size, gen)
        p = augment.draw_params(rng, cfg, len(idx))
        x, _, _ = augment.augment_batch(target.images[idx], None, None, p)
        patches = patchify(x, spec)
        _, attn_e = encoder(patches)
        with torch.no_grad():
            _, attn_a = frozen(patches)
        return attn_loss(class_attention(attn_e, spec.N), class_attention(attn_a, spec.N))

    for step in range(cfg.finetune_steps):
        lr = lr_at(step, sched)
        rec = {"stage": "finetune", "step": step, "lr": lr}
        if cfg.finetune_mode == "combined":
            lk = source_loss()
            la = target_loss() if use_attn else torch.zeros(())
            loss = hpe_loss(lk, la, lam)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            optimizer_step(opt, lr)
            rec.update(loss_kpt=lk.item(), loss_attn=la.item(), loss_hpe=loss.item())
        else:
            lk = source_loss()
            opt.zero_grad(set_to_none=True)
            lk.backward()
            optimizer_step(opt, lr)
            rec["loss_kpt"] = lk.item()
            if use_attn:
                la = target_loss()
                opt.zero_grad(set_to_none=True)
                (lam * la).backward()
                optimizer_step(opt, lr)
                rec["loss_attn"] = la.item()
        mlog.write(**rec)
    encoder.eval()
    head.eval()
    return encoder, head, frozen, mlog.records
