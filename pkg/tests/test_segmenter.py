import math
import numpy as np
import pytest
import torch

from fgmae.datamodel import Domain, ImageSample, make_config
from fgmae.errors import InvalidShape, MissingAnnotation
from fgmae.losses import bce_loss
from fgmae.segmenter import UNet, binarize, iou, mean_iou, segment, segment_batch, train_segmenter
from fgmae.synth import DatasetConfig, make_samples


@pytest.fixture(scope="module")
def data():
    cfg = DatasetConfig(root=None)
    return {
        "train": make_samples(cfg, Domain.SOURCE, "train", 192),
        "test_source": make_samples(cfg, Domain.SOURCE, "test", 48),
        "test_target": make_samples(cfg, Domain.TARGET, "test", 48),
    }


@pytest.fixture(scope="module")
def trained(data):
    torch.manual_seed(0)
    cfg = make_config("toy", seg_steps=250)
    net, hist = train_segmenter(data["train"], cfg, seed=0)
    return net, hist


def test_output_shape_and_range():
    net = UNet(3, 8)
    out = segment(np.random.default_rng(0).random((64, 64, 3)), net)
    assert out.shape == (64, 64, 1)
    assert np.all((out > 0) & (out < 1))


def test_zero_final_conv_gives_half():
    net = UNet(2, 4)
    with torch.no_grad():
        net.out.weight.zero_()
        net.out.bias.zero_()
    assert np.all(segment(np.random.default_rng(0).random((16, 16, 3)), net) == 0.5)


def test_saturated_logits_stay_inside_open_interval():
    net = UNet(2, 4)
    with torch.no_grad():
        net.out.weight.zero_()
        net.out.bias.fill_(1e4)
    out = segment(np.zeros((16, 16, 3)), net)
    assert np.all(out < 1)
    with torch.no_grad():
        net.out.bias.fill_(-1e4)
    assert np.all(segment(np.zeros((16, 16, 3)), net) > 0)


def test_indivisible_input_rejected():
    with pytest.raises(InvalidShape):
        segment(np.zeros((20, 20, 3)), UNet(3, 4))


def test_binarize_rules():
    assert np.all(binarize(np.full((4, 4, 1), 0.9)) == 1)
    assert np.all(binarize(np.full((4, 4, 1), 0.1)) == 0)
    assert np.all(binarize(np.full((4, 4, 1), 0.5)) == 1)


def test_iou_examples():
    a = np.zeros((4, 4, 1)); a[:2] = 1
    b = np.zeros((4, 4, 1)); b[1:3] = 1
    assert iou(a, a) == 1.0
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(np.zeros((4, 4, 1)), np.zeros((4, 4, 1))) == 1.0


def test_bce_examples():
    m = (np.random.default_rng(0).random((8, 8, 1)) > 0.5).astype(float)
    assert float(bce_loss(m, m)) == pytest.approx(0.0, abs=1e-9)
    assert float(bce_loss(np.full_like(m, 0.5), m)) == pytest.approx(np.log(2), rel=1e-12)


def test_missing_masks_rejected(data):
    s = data["train"][0]
    bare = ImageSample(pixels=s.pixels, domain=Domain.SOURCE, sample_id="n")
    with pytest.raises(MissingAnnotation):
        train_segmenter([s, bare], make_config("toy", seg_steps=1))


def test_training_is_deterministic(data):
    cfg = make_config("toy", seg_steps=6, seg_batch_size=4, seg_channels=4)
    _, h1 = train_segmenter(data["train"][:16], cfg, seed=3)
    _, h2 = train_segmenter(data["train"][:16], cfg, seed=3)
    assert h1 == h2


def test_trained_segmenter_quality_and_domain_gap(data, trained):
    net, hist = trained
    tr = hist["train"]
    assert np.mean(tr[-25:]) < np.mean(tr[:25])
    src = mean_iou(segment_batch(net, np.stack([s.pixels for s in data["test_source"]])),
                   np.stack([s.mask for s in data["test_source"]]))
    tgt = mean_iou(segment_batch(net, np.stack([s.pixels for s in data["test_target"]])),
                   np.stack([s.mask for s in data["test_target"]]))
    assert src >= 0.7
    assert tgt < src


def test_translation_consistency(data, trained):
    net, _ = trained
    scores = []
    for s in data["test_source"][:16]:
        x = s.pixels
        shifted = np.pad(x, ((0, 0), (8, 0), (0, 0)), mode="edge")[:, :64]
        a = binarize(segment(x, net))
        b = binarize(segment(shifted, net))
        # compare away from the padded strip and the cut-off edge
        scores.append(iou(np.pad(a, ((0, 0), (8, 0), (0, 0)))[:, 16:64], b[:, 16:64]))
    assert np.mean(scores) >= 0.9


def test_hue_rotation_oracles():
    from fgmae.segmenter import hue_rotate
    x = torch.rand(3, 4, 4, 3, generator=torch.Generator().manual_seed(0)) * 0.5 + 0.25
    a = torch.tensor([0.0, 2 * math.pi / 3, 1.0])
    out = hue_rotate(x, a)
    torch.testing.assert_close(out[0], x[0], rtol=0, atol=1e-6)
    # a third of a turn about the gray axis maps (r, g, b) -> (b, r, g)
    torch.testing.assert_close(out[1], x[1][..., [2, 0, 1]], rtol=0, atol=1e-6)
    gray = torch.full((1, 2, 2, 3), 0.4)
    torch.testing.assert_close(hue_rotate(gray, torch.tensor([1.0])), gray, rtol=0, atol=1e-6)
