import numpy as np
import pytest

from fgmae.datamodel import (AttentionStack, Cube, Domain, Heatmap3D, ImageSample, ModelConfig, PatchWeights,
                             TokenBatch, dump_config, load_config, load_samples, make_config, save_samples)
from fgmae.errors import InvalidParam, InvalidShape, ValidationError


def _sample(rng, sid="a", **kw):
    px = rng.integers(0, 256, (16, 16, 3)) / 255.0
    return ImageSample(pixels=px, domain=Domain.SOURCE, sample_id=sid, rng_seed=9, **kw)


def test_png_round_trip_bit_exact(rng, tmp_path):
    s = _sample(rng, mask=rng.integers(0, 256, (16, 16, 1)) / 255.0,
                keypoints=rng.normal(size=(8, 3)) * 123.456789, camera={"focal": 0.08, "cx": 8.0})
    t = _sample(rng, "b")
    save_samples([s, t], tmp_path, "train", Domain.SOURCE)
    back = load_samples(tmp_path, "train", Domain.SOURCE)
    assert [b.sample_id for b in back] == ["a", "b"]
    assert np.array_equal(back[0].pixels, s.pixels)
    assert np.array_equal(back[0].mask, s.mask)
    assert np.array_equal(back[0].keypoints, s.keypoints)
    assert back[0].camera == s.camera and back[0].rng_seed == 9
    assert back[1].mask is None and back[1].keypoints is None


def test_missing_split(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_samples(tmp_path, "train", Domain.TARGET)


def test_sample_validation(rng):
    _sample(rng).validate(8)
    with pytest.raises(ValidationError):
        _sample(rng).validate(5)
    with pytest.raises(ValidationError):
        ImageSample(pixels=np.full((8, 8, 3), 1.5), domain=Domain.SOURCE, sample_id="x").validate(8)
    with pytest.raises(ValidationError):
        _sample(rng, mask=np.ones((16, 16))).validate(8)
    with pytest.raises(ValidationError):
        _sample(rng, keypoints=np.zeros((8, 3))).validate(8, num_joints=5)


def test_token_batch_validation():
    TokenBatch(np.zeros((2, 4)), np.array([0, 3]), np.array([0, 1, 1, 0]))
    with pytest.raises(ValidationError):
        TokenBatch(np.zeros((2, 4)), np.array([0, 0]), np.array([0, 1, 1, 0]))
    with pytest.raises(ValidationError):
        TokenBatch(np.zeros((3, 4)), np.array([0, 3]), np.array([0, 1, 1, 0]))


def test_patch_weights_validation():
    PatchWeights(np.zeros(4), np.ones(4), 4.0)
    with pytest.raises(ValidationError):
        PatchWeights(np.zeros(4), np.full(4, 2.0), 4.0)
    with pytest.raises(ValidationError):
        PatchWeights(np.zeros(2), np.array([2.0, 0.0]), 4.0)


def test_heatmap_and_attention_validation():
    cube = Cube((0.0, 0.0, 0.0), 10.0)
    Heatmap3D(np.zeros((2, 32, 32, 32)), cube, 2.0).check(num_patches=64)
    with pytest.raises(ValidationError):
        Heatmap3D(np.zeros((2, 16, 16, 16)), cube, 2.0).check(num_patches=64)
    with pytest.raises(ValidationError):
        Heatmap3D(-np.ones((1, 4, 4, 4)), cube, 2.0).check()
    with pytest.raises(InvalidShape):
        Heatmap3D(np.zeros((1, 4, 4, 5)), cube, 2.0)
    with pytest.raises(InvalidParam):
        Cube((0.0, 0.0, 0.0), 0.0)
    with pytest.raises(ValidationError):
        AttentionStack(np.full((3, 4), 0.25)).check(num_blocks=2)


def test_config_defaults_and_profiles():
    toy = make_config("toy")
    assert (toy.num_patches, toy.heatmap_size, toy.mask_ratio, toy.alpha) == (64, 32, 0.75, 4.0)
    paper = make_config("paper")
    assert (paper.num_patches, paper.embed_dim, paper.depth) == (256, 768, 12)
    assert toy.replace(ar=False).effective_lambda == 0.0
    with pytest.raises(InvalidParam):
        make_config("huge")


@pytest.mark.parametrize("bad", [dict(mask_ratio=1.0), dict(image_size=60), dict(num_heads=3),
                                 dict(lambda_attn=-1.0), dict(target_mask_source="magic"), dict(root_index=8)])
def test_config_rejects_invalid(bad):
    with pytest.raises(InvalidParam):
        make_config("toy", **bad)


def test_config_yaml_round_trip(tmp_path):
    cfg = make_config("toy", lambda_attn=10.0, aug_scale=(0.9, 1.1), seed=7)
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    assert load_config(tmp_path / "c.yaml", seed=3).seed == 3
    (tmp_path / "bad.yaml").write_text("not_a_key: 1\n")
    with pytest.raises(InvalidParam):
        load_config(tmp_path / "bad.yaml")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
