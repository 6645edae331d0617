"""Autograd vs central finite differences through the N=16, d=16, L=2 model in float64."""
import copy
import math

import pytest
import torch
import torch.nn as nn

from fgmae.head import KeypointHead, gaussian_targets
from fgmae.losses import attn_loss, hpe_loss, kpt_loss, wmae_loss
from fgmae.patching import generate_mask_batch, patchify
from fgmae.vit import Decoder, Encoder, class_attention
from fgmae.weighting import weights_from_ratios

from oracles import gradient_check

TOL = 1e-4
# finite differences are only meaningful away from ReLU / |.| kinks
KINK_MARGIN = 2e-4


def _rescale(module):
    # unit-scale weights so every parameter has a gradient well above round-off
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.normal_(0, 1 / math.sqrt(m.weight[0].numel()))
                if m.bias is not None:
                    m.bias.normal_(0, 0.1)
        for name in ("pos_embed", "cls_token", "mask_token"):
            if hasattr(module, name):
                getattr(module, name).normal_(0, 0.5)


def _kink_margins(m):
    enc, head, frozen, x = m["enc"], m["head"], m["frozen"], m["patches"]
    with torch.no_grad():
        tokens, a = enc(x)
        _, b = frozen(x)
        g = head.grid
        h1 = head.deconv1(tokens[:, 1:].transpose(1, 2).reshape(len(x), -1, g, g))
        h2 = head.deconv2(head.bn1(torch.relu(h1)))
        diff = class_attention(a) - class_attention(b)
    return min(float(h1.abs().min()), float(h2.abs().min()), float(diff.abs().min()))


def _build(cfg, seed):
    torch.manual_seed(seed)
    enc, dec, head = Encoder(cfg).double(), Decoder(cfg).double(), KeypointHead(cfg).double()
    for mod in (enc, dec, head):
        _rescale(mod)
    frozen = copy.deepcopy(enc)
    with torch.no_grad():
        for p in frozen.parameters():
            p.add_(torch.randn_like(p) * 0.3)
            p.requires_grad_(False)
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, cfg.image_size, cfg.image_size, 3, generator=g, dtype=torch.float64)
    n = cfg.num_patches
    return dict(
        enc=enc, dec=dec, head=head, frozen=frozen, patches=patchify(x, enc.spec),
        mask=generate_mask_batch(2, n, cfg.mask_ratio, g),
        w=weights_from_ratios(torch.rand(2, n, generator=g, dtype=torch.float64), cfg.alpha),
        target=gaussian_targets(torch.rand(2, cfg.num_joints, 3, generator=g, dtype=torch.float64)
                                * (cfg.heatmap_size - 4) + 2, cfg.heatmap_sigma, cfg.heatmap_size),
    )


@pytest.fixture(scope="module")
def model():
    from fgmae.datamodel import make_config
    cfg = make_config("toy", image_size=16, patch_size=4, embed_dim=16, depth=2, num_heads=2,
                      decoder_embed_dim=8, decoder_num_heads=2, head_channels=4, num_joints=3)
    for seed in range(100):
        m = _build(cfg, seed)
        if _kink_margins(m) > KINK_MARGIN:
            return m
    raise RuntimeError("no kink-free configuration found")


def _params(**modules):
    return {f"{p}.{n}": t for p, m in modules.items() for n, t in m.named_parameters()}


def _losses(m):
    enc, dec, head, frozen = m["enc"], m["dec"], m["head"], m["frozen"]
    x = m["patches"]

    def wmae():
        lat, _ = enc(x, m["mask"])
        return wmae_loss(dec(lat, m["mask"]), x, m["w"], m["mask"])

    def kpt():
        tokens, _ = enc(x)
        return kpt_loss(head(tokens[:, 1:]), m["target"])

    def attn():
        _, a = enc(x)
        with torch.no_grad():
            _, b = frozen(x)
        return attn_loss(class_attention(a), class_attention(b))

    def hpe():
        return hpe_loss(kpt(), attn(), 100.0)

    return {"wmae": (wmae, dict(encoder=enc, decoder=dec)),
            "kpt": (kpt, dict(encoder=enc, head=head)),
            "attn": (attn, dict(encoder=enc)),
            "hpe": (hpe, dict(encoder=enc, head=head))}


def run_check(name, model):
    fn, modules = _losses(model)[name]
    return gradient_check(fn, _params(**modules))


@pytest.mark.parametrize("name", ["wmae", "kpt", "attn", "hpe"])
def test_gradients_match_finite_differences(name, model):
    result = run_check(name, model)
    bad = {k: v[2] for k, v in result.items() if v[2] >= TOL}
    assert not bad, bad
    for k, (a, n, _) in result.items():
        if not a.any():
            # parameters the loss ignores have a zero numeric derivative too
            assert float(n.abs().max()) < 1e-7, k


def test_attention_loss_ignores_last_ffn(model):
    result = run_check("attn", model)
    # the last block's FFN acts after the final attention, so it cannot change the stacks
    assert not result["encoder.blocks.1.fc2.weight"][0].any()
    assert result["encoder.blocks.0.fc2.weight"][0].any()
