import math

import numpy as np
import pytest

from hitcd.models import HiTModel
from hitcd.nn.tensor import Tensor
from hitcd.segmentation import (FPNDecoder, MaskError, _level_exponents, bce_loss, confusion, dice_loss,
                                f1_change, f1_from_counts, fpn_decode, series_loss)
from hitcd.vit import ModelConfig

from conftest import TOY


def test_level_exponents():
    assert _level_exponents(4) == [2, 1, 0, -1]
    assert _level_exponents(2) == [0, -1]
    assert _level_exponents(1) == [0]


def test_fpn_full_config_output_shape_and_range():
    cfg = ModelConfig(image_size=256, patch_size=16, fpn_dim=16)
    dec = FPNDecoder(cfg, np.random.default_rng(0))
    taps = [np.random.default_rng(i).standard_normal((256, 192)).astype(np.float32) for i in range(4)]
    out = fpn_decode(taps, dec)
    assert out.probabilities.shape == (1, 256, 256)
    assert out.probabilities.min() >= 0 and out.probabilities.max() <= 1


def test_fpn_zero_head_gives_half():
    dec = FPNDecoder(TOY, np.random.default_rng(0))
    dec.head.weight.data[...] = 0
    taps = [np.random.default_rng(i).standard_normal((16, 16)).astype(np.float32) for i in range(4)]
    np.testing.assert_array_equal(fpn_decode(taps, dec).probabilities, 0.5)


def test_fpn_toy_2x2_grid():
    cfg = ModelConfig(image_size=32, patch_size=16, embed_dim=16, heads=2, depth=4, fuse_stage=2,
                      decoder_tap_stages=(1, 2, 3, 4), fpn_dim=8)
    dec = FPNDecoder(cfg, np.random.default_rng(0))
    out = fpn_decode([np.zeros((4, 16), np.float32)] * 4, dec)
    assert out.probabilities.shape == (1, 32, 32)


@pytest.mark.parametrize("size,patch", [(16, 2), (32, 8), (64, 16), (48, 8)])
def test_decoder_output_matches_tile_size(size, patch):
    cfg = ModelConfig(image_size=size, patch_size=patch, embed_dim=8, heads=2, depth=4, fuse_stage=2,
                      decoder_tap_stages=(1, 2, 3, 4), fpn_dim=4)
    g = size // patch
    out = FPNDecoder(cfg, np.random.default_rng(0))([Tensor(np.zeros((2, g * g, 8), np.float32))] * 4)
    assert out.shape == (2, 1, size, size)


def test_fpn_tap_count_mismatch():
    with pytest.raises(ValueError):
        fpn_decode([np.zeros((16, 16), np.float32)] * 3, FPNDecoder(TOY, np.random.default_rng(0)))


def test_bce_oracles():
    mask = (np.random.default_rng(0).random((1, 4, 4)) < 0.5).astype(float)
    assert float(bce_loss(Tensor(np.zeros((1, 4, 4))), mask).data) == pytest.approx(math.log(2), abs=1e-12)
    saturated = np.where(mask > 0, 40.0, -40.0)
    assert float(bce_loss(Tensor(saturated), mask).data) < 1e-15
    z = np.random.default_rng(1).standard_normal((1, 4, 4)) * 3
    p = 1 / (1 + np.exp(-z))
    ref = -(mask * np.log(p) + (1 - mask) * np.log(1 - p)).mean()
    assert float(bce_loss(Tensor(z), mask).data) == pytest.approx(ref, abs=1e-6)


def test_bce_rejects_non_binary():
    with pytest.raises(MaskError):
        bce_loss(Tensor(np.zeros((1, 2, 2))), np.full((1, 2, 2), 0.5))


def test_bce_decreases_as_correct_logit_grows():
    vals = [float(bce_loss(Tensor(np.full((1, 1, 1), z)), np.ones((1, 1, 1))).data) for z in range(-5, 6)]
    assert all(b < a for a, b in zip(vals, vals[1:])) and min(vals) >= 0


def test_dice_oracles():
    y = (np.random.default_rng(0).random((1, 8, 8)) < 0.4).astype(float)
    assert float(dice_loss(Tensor(y), y).data) == 0.0
    assert float(dice_loss(Tensor(1 - y), y).data) == pytest.approx(1 - 1 / (64 + 1), abs=1e-12)
    p = np.random.default_rng(1).random((1, 8, 8))
    ref = 1 - (2 * (p * y).sum() + 1) / (p.sum() + y.sum() + 1)
    assert float(dice_loss(Tensor(p), y).data) == pytest.approx(ref, abs=1e-6)


def test_dice_is_per_image_mean():
    rng = np.random.default_rng(2)
    p, y = rng.random((3, 1, 4, 4)), (rng.random((3, 1, 4, 4)) < 0.5).astype(float)
    per = [float(dice_loss(Tensor(p[i]), y[i]).data) for i in range(3)]
    assert float(dice_loss(Tensor(p), y).data) == pytest.approx(np.mean(per), abs=1e-12)


def test_f1_oracles():
    y = np.array([1, 1, 0, 0, 1])
    assert f1_change(y.astype(float), y) == 1.0
    assert f1_change(np.zeros(5), y) == 0.0
    assert f1_from_counts(3, 1, 2) == pytest.approx(0.6667, abs=1e-4)
    assert f1_from_counts(0, 0, 0) == 1.0


def test_f1_counts_from_maps():
    p = np.array([0.9, 0.9, 0.9, 0.9, 0.1, 0.1])
    y = np.array([1, 1, 1, 0, 1, 1])
    assert confusion(p, y) == (3, 1, 2)


def test_f1_invariant_under_monotone_map():
    rng = np.random.default_rng(3)
    p, y = rng.random(200), (rng.random(200) < 0.3)
    assert f1_change(p ** 2, y, threshold=0.25) == f1_change(p, y, threshold=0.5)


def test_f1_rejects_bad_threshold():
    with pytest.raises(ValueError):
        f1_change(np.zeros(2), np.zeros(2), threshold=1.0)


def _series(n, seed=0, zeros=False):
    rng = np.random.default_rng(seed)
    frames = rng.random((1, n, 3, 32, 32)).astype(np.float32)
    step = np.zeros((1, n, 1, 32, 32), np.float32) if zeros else (rng.random((1, n, 1, 32, 32)) < 0.2).astype(np.float32)
    post_masks = np.zeros_like(step) if zeros else (rng.random(step.shape) < 0.2).astype(np.float32)
    return frames, step, rng.random((1, 3, 32, 32)).astype(np.float32), post_masks


@pytest.mark.parametrize("n", [1, 4])
def test_series_loss_term_counts(n):
    out = series_loss(HiTModel(TOY), *_series(n))
    assert (len(out.main_terms), len(out.branch_terms), out.n_terms) == (n, n, 2 * n)


def test_series_loss_closed_form_on_constant_maps():
    model = HiTModel(TOY)
    model.decoder.head.weight.data[...] = 0
    out = series_loss(model, *_series(3, zeros=True))
    expected = math.log(2) + 1 - 1 / (0.5 * 32 * 32 + 1)
    assert float(out.total.data) == pytest.approx(expected, rel=1e-5)


def test_series_loss_is_repeatable():
    model = HiTModel(TOY, seed=2)
    args = _series(3, seed=4)
    assert series_loss(model, *args).total.data.tobytes() == series_loss(model, *args).total.data.tobytes()


def test_series_loss_requires_masks_per_frame():
    frames, step, post, pm = _series(3)
    with pytest.raises(MaskError):
        series_loss(HiTModel(TOY), frames, step[:, :2], post, pm)
