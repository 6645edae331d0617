import math

import numpy as np
import pytest
import torch

from fgmae.datamodel import Cube, Heatmap3D, make_config
from fgmae.errors import InvalidParam, InvalidShape
from fgmae.head import (KeypointHead, decode_batch, from_voxel, gaussian_targets, head_forward,
                        heatmaps_to_keypoints, keypoints_to_heatmaps, to_voxel)

CUBE = Cube(center=(10.0, -20.0, 2000.0), side=800.0)


def test_toy_output_shape(toy_cfg):
    head = KeypointHead(toy_cfg)
    out = head_forward(torch.randn(2, 64, toy_cfg.embed_dim), head)
    assert out.shape == (2, 8, 32, 32, 32)
    assert head_forward(torch.randn(64, toy_cfg.embed_dim), head.eval()).shape == (8, 32, 32, 32)


def test_paper_scale_stage_shapes():
    cfg = make_config("paper")
    head = KeypointHead(cfg).eval()
    x = torch.randn(1, 768, 16, 16)
    with torch.no_grad():
        a = head.deconv1(x)
        b = head.deconv2(a)
        c = head.final(b)
        assert a.shape == (1, 256, 32, 32)
        assert b.shape == (1, 256, 64, 64)
        assert c.shape == (1, 64 * cfg.num_joints, 64, 64)
        assert head(torch.randn(1, 256, 768)).shape == (1, cfg.num_joints, 64, 64, 64)


def test_non_square_tokens_rejected(toy_cfg):
    with pytest.raises(InvalidShape):
        head_forward(torch.randn(1, 63, toy_cfg.embed_dim), KeypointHead(toy_cfg))


def test_zero_final_weights_give_constant_bias(toy_cfg):
    head = KeypointHead(toy_cfg).eval()
    with torch.no_grad():
        head.final.weight.zero_()
        head.final.bias.fill_(0.37)
        out = head(torch.randn(3, 64, toy_cfg.embed_dim))
    assert torch.all(out == torch.tensor(0.37))


def test_eval_mode_is_order_independent(toy_cfg):
    torch.manual_seed(0)
    head = KeypointHead(toy_cfg)
    x = torch.randn(4, 64, toy_cfg.embed_dim)
    head(x)  # populate running stats
    head.eval()
    with torch.no_grad():
        a = head(x)
        b = head(x.flip(0)).flip(0)
    assert torch.equal(a, b)


def test_center_joint_peaks_at_center():
    hm, clamped = keypoints_to_heatmaps(np.array([CUBE.center]), CUBE, 2.0, 32)
    assert not clamped.any()
    assert hm.volume[0, 16, 16, 16] == 1.0
    assert np.unravel_index(hm.volume[0].argmax(), hm.volume.shape[1:]) == (16, 16, 16)


def test_value_at_three_sigma():
    sigma = 1.5
    vox = 32 / 800.0
    # joint exactly 3 sigma (in voxels) from the centre along x
    kp = np.array([[CUBE.center[0] + 3 * sigma / vox, CUBE.center[1], CUBE.center[2]]])
    hm, _ = keypoints_to_heatmaps(kp, CUBE, sigma, 32)
    assert hm.volume[0, 16, 16, 16] == pytest.approx(math.exp(-4.5), rel=1e-12)


def test_axis_convention_x_is_width():
    kp = np.array([[CUBE.center[0] + 100.0, CUBE.center[1], CUBE.center[2]]])
    hm, _ = keypoints_to_heatmaps(kp, CUBE, 1.0, 32)
    assert np.unravel_index(hm.volume[0].argmax(), hm.volume.shape[1:]) == (16, 16, 20)


def test_distinct_joints_distinct_argmax():
    kp = np.array([CUBE.center, np.add(CUBE.center, (120.0, -80.0, 40.0))])
    hm, _ = keypoints_to_heatmaps(kp, CUBE, 2.0, 32)
    a = [hm.volume[k].argmax() for k in range(2)]
    assert a[0] != a[1]


def test_out_of_cube_joint_clamped_and_flagged():
    kp = np.array([CUBE.center, np.add(CUBE.center, (900.0, 0.0, 0.0))])
    hm, clamped = keypoints_to_heatmaps(kp, CUBE, 2.0, 32)
    assert clamped.tolist() == [False, True]
    assert np.unravel_index(hm.volume[1].argmax(), hm.volume.shape[1:]) == (16, 16, 31)


def test_bad_sigma():
    with pytest.raises(InvalidParam):
        keypoints_to_heatmaps(np.zeros((1, 3)), CUBE, 0.0, 32)


def test_spike_decodes_to_voxel_center():
    vol = np.zeros((1, 32, 32, 32))
    vol[0, 5, 17, 9] = 3.0
    kp, deg = heatmaps_to_keypoints(Heatmap3D(vol, CUBE, 2.0))
    # by hand: x from w=9, y from h=17, z from d=5; coordinate = c - 400 + i * 25
    assert not deg[0]
    np.testing.assert_allclose(kp[0], [10 - 400 + 9 * 25, -20 - 400 + 17 * 25, 2000 - 400 + 5 * 25], atol=1e-9)


def test_constant_volume_is_degenerate():
    kp, deg = heatmaps_to_keypoints(Heatmap3D(np.full((2, 8, 8, 8), 0.3), CUBE, 2.0))
    assert deg.all()
    np.testing.assert_allclose(kp, np.tile(CUBE.center, (2, 1)))


def test_tie_breaks_to_smallest_index():
    vol = np.zeros((1, 8, 8, 8))
    vol[0, 6, 1, 1] = vol[0, 2, 7, 7] = 1.0
    kp, _ = heatmaps_to_keypoints(Heatmap3D(vol, CUBE, 2.0))
    np.testing.assert_allclose(kp[0], from_voxel(np.array([2, 7, 7]), CUBE, 8))


def test_empty_volume_rejected():
    with pytest.raises(InvalidShape):
        heatmaps_to_keypoints(Heatmap3D(np.zeros((0, 4, 4, 4)), CUBE, 2.0))


@pytest.mark.parametrize("sigma", [1.0, 2.0, 3.0])
def test_round_trip_within_half_voxel(sigma):
    rng = np.random.default_rng(int(sigma * 10))
    half = 0.5 * 800.0 / 32
    worst = 0.0
    for _ in range(1000):
        kp = np.asarray(CUBE.center) + rng.uniform(-380, 380 - 25, size=(8, 3))
        hm, clamped = keypoints_to_heatmaps(kp, CUBE, sigma, 32)
        assert not clamped.any()
        dec, _ = heatmaps_to_keypoints(hm)
        worst = max(worst, np.abs(dec - kp).max())
    assert worst <= half
    # the log-parabola fit is exact for a sampled Gaussian
    assert worst < 1e-6


def test_voxel_mapping_inverse():
    pts = np.random.default_rng(0).normal(size=(5, 3)) * 200 + np.asarray(CUBE.center)
    np.testing.assert_allclose(from_voxel(to_voxel(pts, CUBE, 32), CUBE, 32), pts, atol=1e-9)


def test_gaussian_targets_match_numpy():
    kp = np.asarray(CUBE.center) + np.random.default_rng(1).uniform(-300, 300, size=(3, 3))
    hm, _ = keypoints_to_heatmaps(kp, CUBE, 2.0, 32)
    t = gaussian_targets(torch.as_tensor(to_voxel(kp, CUBE, 32))[None], 2.0, 32)
    np.testing.assert_allclose(t[0].numpy(), hm.volume, atol=1e-12)


def test_decode_batch_uses_per_sample_cube():
    roots = np.array([[0.0, 0.0, 2000.0], [50.0, 10.0, 1800.0]])
    kps = roots[:, None] + np.random.default_rng(2).uniform(-300, 300, size=(2, 4, 3))
    vols = np.stack([keypoints_to_heatmaps(k, Cube(tuple(r), 800.0), 2.0, 32)[0].volume for k, r in zip(kps, roots)])
    np.testing.assert_allclose(decode_batch(vols, roots, 800.0), kps, atol=1e-6)
