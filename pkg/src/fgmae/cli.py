"""Command-line entry points: fgmae <command> [options]."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import checkpoint as ckpt
from .datamodel import Domain, ModelConfig, dump_config, load_config, load_samples, read_masks, write_masks
from .errors import FgmaeError
from .evaluation import evaluate, probe_attention
from .experiment import VARIANTS, format_table, run_grid
from .head import KeypointHead
from .segmenter import mean_iou, segment_batch, train_segmenter
from .synth import DatasetConfig, generate_dataset
from .training import ImageSet, finetune, pretrain
from .vit import Encoder

log = logging.getLogger("fgmae")


class UsageError(Exception):
    pass


def _parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def resolve_config(args) -> ModelConfig:
    path = Path(args.config) if args.config else None
    if path is not None and not path.is_file():
        raise UsageError(f"config file not found: {path}")
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(path, profile=args.profile, **overrides)


def _run_dir(args, cfg: ModelConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    return out


def _need(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required for this command")
    return value


def _encoder_from(path: Path, cfg: ModelConfig) -> Encoder:
    enc = Encoder(cfg)
    ckpt.load_into(enc, ckpt.load_checkpoint(path), "encoder")
    return enc


# --- commands -----------------------------------------------------------

def cmd_gen_data(args, cfg: ModelConfig) -> int:
    out = Path(args.out)
    dcfg = DatasetConfig(root=out, master_seed=cfg.seed, n_train=args.n_train, n_test=args.n_test,
                         n_unconstrained=args.n_unconstrained, cube_side_mm=cfg.cube_side_mm,
                         photo_dir=args.photo_dir)
    generate_dataset(dcfg)
    print(f"dataset written to {out}")
    return 0


def cmd_train_seg(args, cfg: ModelConfig) -> int:
    data = Path(_need(args.data, "--data"))
    out = _run_dir(args, cfg)
    source = load_samples(data, "train", Domain.SOURCE)
    bgs = None
    if (data / "train" / Domain.UNCONSTRAINED.value).is_dir():
        bgs = np.stack([s.pixels for s in load_samples(data, "train", Domain.UNCONSTRAINED, with_masks=False)])
    net, hist = train_segmenter(source, cfg, seed=cfg.seed, backgrounds=bgs)
    ckpt.save_checkpoint(ckpt.module_bundle(segmenter=net), out / "segmenter.pmud")
    target = load_samples(data, "train", Domain.TARGET, with_masks=False)
    pred = segment_batch(net, np.stack([s.pixels for s in target]))
    write_masks({s.sample_id: m for s, m in zip(target, pred)}, out, "train", Domain.TARGET)
    scores = {}
    for name, dom in (("source", Domain.SOURCE), ("target", Domain.TARGET)):
        test = load_samples(data, "test", dom)
        scores[name] = mean_iou(segment_batch(net, np.stack([s.pixels for s in test])), np.stack([s.mask for s in test]))
    (out / "iou.json").write_text(json.dumps(scores, indent=2, sort_keys=True) + "\n")
    (out / "history.json").write_text(json.dumps(hist) + "\n")
    print(f"segmenter IoU@0.5: source {scores['source']:.3f}, target {scores['target']:.3f}")
    return 0


def cmd_pretrain(args, cfg: ModelConfig) -> int:
    data = Path(_need(args.data, "--data"))
    out = _run_dir(args, cfg)
    source = load_samples(data, "train", Domain.SOURCE)
    target = load_samples(data, "train", Domain.TARGET)
    unc = load_samples(data, "train", Domain.UNCONSTRAINED)
    masks, use = None, cfg.target_mask_source != "none"
    if cfg.target_mask_source == "learned":
        masks = read_masks(Path(_need(args.masks, "--masks (train-seg output, or set target_mask_source)")),
                           "train", Domain.TARGET, [s.sample_id for s in target])
    enc, dec, rec = pretrain(cfg, ImageSet.from_samples(source),
                             ImageSet.from_samples(target, masks=masks, use_masks=use),
                             ImageSet.from_samples(unc, use_masks=False), seed=cfg.seed,
                             log_path=out / "metrics.jsonl", snapshot_dir=out / "snapshots")
    ckpt.save_checkpoint(ckpt.module_bundle(encoder=enc, decoder=dec), out / "pretrain.pmud")
    print(f"pre-training done: L_WMAE {rec[0]['loss_wmae']:.4f} -> {rec[-1]['loss_wmae']:.4f}")
    return 0


def cmd_finetune(args, cfg: ModelConfig) -> int:
    data = Path(_need(args.data, "--data"))
    out = _run_dir(args, cfg)
    enc = None
    if cfg.pretrained:
        enc = _encoder_from(Path(_need(args.init, "--init (or set pretrained: false)")), cfg)
    source = load_samples(data, "train", Domain.SOURCE, with_masks=False)
    target = load_samples(data, "train", Domain.TARGET, with_masks=False)
    enc, head, _, rec = finetune(cfg, ImageSet.from_samples(source, use_masks=False),
                                 ImageSet.from_samples(target, use_masks=False), enc, seed=cfg.seed,
                                 log_path=out / "metrics.jsonl")
    ckpt.save_checkpoint(ckpt.module_bundle(encoder=enc, head=head), out / "finetune.pmud")
    print(f"fine-tuning done: L_kpt {rec[0]['loss_kpt']:.2f} -> {rec[-1]['loss_kpt']:.2f}")
    return 0


def _load_model(path: Path, cfg: ModelConfig):
    enc, head = Encoder(cfg), KeypointHead(cfg)
    entries = ckpt.load_checkpoint(path, ckpt.expected_shapes(encoder=enc, head=head))
    ckpt.load_into(enc, entries, "encoder")
    ckpt.load_into(head, entries, "head")
    return enc.eval(), head.eval()


def cmd_eval(args, cfg: ModelConfig) -> int:
    data = Path(_need(args.data, "--data"))
    out = _run_dir(args, cfg)
    enc, head = _load_model(Path(_need(args.ckpt, "--ckpt")), cfg)
    splits = {d: load_samples(data, args.split, Domain(d)) for d in args.domains.split(",")}
    report = evaluate(enc, head, splits, cfg, out_dir=out)
    for name, r in report.items():
        print(f"{name}: EPE {r['epe']:.2f}  MPJPE {r['mpjpe']:.2f}  PA-MPJPE {r['pa_mpjpe']:.2f}  (n={r['n_samples']})")
    return 0


def cmd_probe_attn(args, cfg: ModelConfig) -> int:
    data = Path(_need(args.data, "--data"))
    out = _run_dir(args, cfg)
    enc = _encoder_from(Path(_need(args.ckpt, "--ckpt")), cfg)
    samples = load_samples(data, args.split, Domain(args.domain))[: args.limit]
    stats = probe_attention(enc, samples, out)
    fg = [s["fg_mass"] for s in stats if "fg_mass" in s]
    msg = f"wrote {len(stats)} overlays to {out}"
    if fg:
        msg += f"; mean foreground attention mass {np.mean(fg):.4f}"
    print(msg)
    return 0


def cmd_ablate(args, cfg: ModelConfig) -> int:
    data = Path(_need(args.data, "--data"))
    out = _run_dir(args, cfg)
    variants = args.variants.split(",")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    result = run_grid(cfg, data, out, variants, seeds)
    print(format_table(result["median"]), end="")
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic source/target/unconstrained dataset"),
    "train-seg": (cmd_train_seg, "train the foreground segmenter and predict target masks"),
    "pretrain": (cmd_pretrain, "foreground-weighted masked-autoencoder pre-training"),
    "finetune": (cmd_finetune, "keypoint fine-tuning with attention regularisation"),
    "eval": (cmd_eval, "EPE / MPJPE / PA-MPJPE report for a fine-tuned checkpoint"),
    "probe-attn": (cmd_probe_attn, "class-attention overlays and foreground attention mass"),
    "ablate": (cmd_ablate, "run the ablation grid and print the comparison table"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with ModelConfig keys")
    common.add_argument("--profile", choices=["toy", "paper"], default="toy")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--data", help="dataset root")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fgmae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    ps = {name: sub.add_parser(name, parents=[common], help=text, description=text)
          for name, (_, text) in COMMANDS.items()}
    ps["gen-data"].add_argument("--n-train", type=int, default=512)
    ps["gen-data"].add_argument("--n-test", type=int, default=128)
    ps["gen-data"].add_argument("--n-unconstrained", type=int, default=256)
    ps["gen-data"].add_argument("--photo-dir", help="extra PNG backgrounds for the unconstrained set")
    ps["pretrain"].add_argument("--masks", help="train-seg output directory holding predicted target masks")
    ps["finetune"].add_argument("--init", help="pretrain.pmud to start from")
    for name in ("eval", "probe-attn"):
        ps[name].add_argument("--ckpt", help="finetune.pmud")
        ps[name].add_argument("--split", default="test", choices=["train", "test"])
    ps["eval"].add_argument("--domains", default="target,source")
    ps["probe-attn"].add_argument("--domain", default="target", choices=[d.value for d in Domain])
    ps["probe-attn"].add_argument("--limit", type=int, default=64)
    ps["ablate"].add_argument("--variants", default="full,no_fcr,no_ar,mae,no_st,no_xc,scratch")
    ps["ablate"].add_argument("--seeds", default="0,1,2")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)   # exits with status 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command][0](args, cfg)
    except UsageError as e:
        parser.exit(2, f"fgmae: error: {e}\n")
    except (FgmaeError, FileNotFoundError, OSError) as e:
        print(f"fgmae: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
