import numpy as np
import pytest

from hitcd.hit import (HistoryEmbedding, HitParams, StaleEmbeddingError, adapter_apply, he_init, he_project_in,
                       hit_fuse, hit_step)
from hitcd.models import HiTModel
from hitcd.nn import ops
from hitcd.nn.tensor import Tensor
from hitcd.segmentation import series_loss
from hitcd.vit import ModelConfig, ViTBlock

from conftest import TOY

PAPER_CFG = ModelConfig(image_size=64, patch_size=16, he_grid=8, he_dim=24)


def test_he_init_shape_shared_values_and_step_zero():
    params = HitParams(PAPER_CFG, np.random.default_rng(0))
    a, b = he_init(PAPER_CFG, params, "a"), he_init(PAPER_CFG, params, "b")
    assert a.values.shape == (64, 24)
    np.testing.assert_array_equal(a.values, b.values)
    assert (a.tile_key, b.tile_key) == ("a", "b") and a.step_count == 0


def test_zero_initial_switch():
    cfg = ModelConfig(learned_initial_he=False)
    he = he_init(cfg, HitParams(cfg, np.random.default_rng(0)), "t")
    assert not he.values.any()


def test_history_embedding_validates_shape():
    with pytest.raises(ValueError):
        HistoryEmbedding(2, 3, np.zeros((4, 4)), "k", b"12345678")


def test_project_in_identity_configuration():
    cfg = ModelConfig(image_size=32, he_grid=2, he_dim=192)
    params = HitParams(cfg, np.random.default_rng(0))
    params.project_in.weight.data[...] = np.eye(192)
    params.project_in.bias.data[...] = 0
    params._pos = np.zeros_like(params._pos)
    he = he_init(cfg, params, "t")
    np.testing.assert_allclose(he_project_in(he, params).data, he.values, atol=1e-6)


def test_project_in_shape_and_zero_input_gives_pe_table():
    params = HitParams(PAPER_CFG, np.random.default_rng(0))
    params.project_in.bias.data[...] = 0
    he = HistoryEmbedding(8, 24, np.zeros((64, 24)), "t", PAPER_CFG.config_hash())
    out = he_project_in(he, params).data
    assert out.shape == (64, 192)
    np.testing.assert_allclose(out, params.pos_table, atol=1e-7)


def test_he_pos_table_matches_image_table_when_grids_agree():
    cfg = ModelConfig(image_size=128, patch_size=16, he_grid=8)
    model = HiTModel(cfg)
    np.testing.assert_array_equal(model.hit.pos_table, model.encoder._pos)


def test_stale_hash_is_rejected():
    params = HitParams(PAPER_CFG, np.random.default_rng(0))
    he = HistoryEmbedding(8, 24, np.zeros((64, 24)), "t", b"\0" * 8)
    with pytest.raises(StaleEmbeddingError):
        he_project_in(he, params)


def test_hit_fuse_splits_256_plus_64():
    block = ViTBlock(192, 3, 4.0, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    img = Tensor(rng.standard_normal((256, 192)).astype(np.float32))
    he = Tensor(rng.standard_normal((64, 192)).astype(np.float32))
    a, b = hit_fuse(img, he, block)
    assert a.shape == (256, 192) and b.shape == (64, 192)


def test_hit_fuse_identity_with_zero_projections():
    block = ViTBlock(16, 2, 4.0, np.random.default_rng(0))
    for p in (block.attn.proj.weight, block.attn.proj.bias, block.mlp.fc2.weight, block.mlp.fc2.bias):
        p.data[...] = 0
    rng = np.random.default_rng(1)
    img, he = rng.standard_normal((5, 16)).astype(np.float32), rng.standard_normal((3, 16)).astype(np.float32)
    a, b = hit_fuse(Tensor(img), Tensor(he), block)
    np.testing.assert_array_equal(a.data, img)
    np.testing.assert_array_equal(b.data, he)


def test_hit_fuse_history_token_influences_every_image_token():
    block = ViTBlock(16, 2, 4.0, np.random.default_rng(0)).astype(np.float64)
    rng = np.random.default_rng(1)
    img, he = rng.standard_normal((5, 16)), rng.standard_normal((3, 16))
    base, _ = hit_fuse(Tensor(img), Tensor(he), block)
    he2 = he.copy()
    he2[1, 0] += 0.5
    out, _ = hit_fuse(Tensor(img), Tensor(he2), block)
    assert np.all(np.abs(out.data - base.data).max(-1) > 1e-9)


def test_hit_fuse_width_mismatch():
    block = ViTBlock(16, 2, 4.0, np.random.default_rng(0))
    with pytest.raises(ops.ShapeError):
        hit_fuse(Tensor(np.zeros((4, 16), np.float32)), Tensor(np.zeros((2, 8), np.float32)), block)


def test_adapter_identity_tail_is_layer_norm():
    cfg = ModelConfig(image_size=32, he_grid=2, he_dim=192)
    params = HitParams(cfg, np.random.default_rng(0))
    params.adapter_linear.weight.data[...] = np.eye(192)
    params.adapter_linear.bias.data[...] = 0
    x = np.random.default_rng(1).standard_normal((4, 192)).astype(np.float32)
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-6)
    np.testing.assert_allclose(adapter_apply(Tensor(x), params).data, ref, atol=1e-4)


def test_adapter_shape_and_constant_rows():
    params = HitParams(PAPER_CFG, np.random.default_rng(0))
    params.adapter_norm.beta.data[...] = np.linspace(-1, 1, 192)
    out = adapter_apply(Tensor(np.full((64, 192), 2.0, np.float32)), params).data
    assert out.shape == (64, 24)
    ref = params.adapter_norm.beta.data @ params.adapter_linear.weight.data + params.adapter_linear.bias.data
    np.testing.assert_allclose(out, np.broadcast_to(ref, out.shape), atol=1e-5)


@pytest.fixture(scope="module")
def toy_model():
    return HiTModel(TOY, seed=3)


def test_hit_step_bookkeeping_and_purity(toy_model):
    img = np.random.default_rng(0).random((3, 32, 32))
    he0 = he_init(TOY, toy_model.hit, "tile")
    before = he0.values.copy()
    r1 = hit_step(img, he0, toy_model, timestamp=10)
    r2 = hit_step(img, r1.he_next, toy_model, timestamp=20)
    assert (he0.step_count, r1.he_next.step_count, r2.he_next.step_count) == (0, 1, 2)
    assert r2.he_next.timestamp == 20
    np.testing.assert_array_equal(he0.values, before)
    again = hit_step(img, he0, toy_model, timestamp=10)
    np.testing.assert_array_equal(again.he_next.values, r1.he_next.values)
    for a, b in zip(again.features, r1.features):
        np.testing.assert_array_equal(a, b)


def test_hit_step_history_changes_features(toy_model):
    img = np.random.default_rng(0).random((3, 32, 32))
    he0 = he_init(TOY, toy_model.hit, "tile")
    he1 = hit_step(np.random.default_rng(1).random((3, 32, 32)), he0, toy_model).he_next
    f0, f1 = hit_step(img, he0, toy_model).features, hit_step(img, he1, toy_model).features
    assert np.abs(f0[-1] - f1[-1]).max() > 1e-6


def test_hit_step_decode_gives_full_resolution_logits(toy_model):
    r = hit_step(np.zeros((3, 32, 32)), he_init(TOY, toy_model.hit, "t"), toy_model, decode=True)
    assert r.logits.shape == (1, 32, 32) and len(r.features) == 4


def test_hit_step_rejects_stale_embedding(toy_model):
    he = he_init(TOY, toy_model.hit, "t")
    he.config_hash = b"\1" * 8
    with pytest.raises(StaleEmbeddingError):
        hit_step(np.zeros((3, 32, 32)), he, toy_model)


def test_fuse_at_last_block():
    cfg = ModelConfig(image_size=32, patch_size=16, bands=2, embed_dim=8, depth=3, heads=2, fuse_stage=3,
                      he_grid=2, he_dim=3, decoder_tap_stages=(3,), fpn_dim=4)
    model = HiTModel(cfg)
    r = hit_step(np.zeros((2, 32, 32)), he_init(cfg, model.hit, "t"), model)
    assert r.he_next.values.shape == (4, 3) and np.all(np.isfinite(r.he_next.values))


@pytest.mark.parametrize("d,r2", [(24, 64), (48, 16), (12, 256), (192, 1)])
def test_shape_chain_for_table_configs(d, r2):
    r = int(np.sqrt(r2))
    cfg = ModelConfig(image_size=32, patch_size=16, embed_dim=192, depth=2, fuse_stage=1, he_grid=r, he_dim=d,
                      decoder_tap_stages=(2,), fpn_dim=8)
    model = HiTModel(cfg)
    trace = []
    _, he_next = model.step(np.zeros((1, 6, 32, 32), np.float32), model.initial_he(1), trace=trace)
    assert trace == [4 + r2, 4] and he_next.shape == (1, r2, d)


def test_masked_history_with_zero_projection_matches_plain_encoder(toy_model):
    model = HiTModel(TOY, seed=5)
    model.hit.project_in.weight.data[...] = 0
    model.hit.project_in.bias.data[...] = 0
    img = np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float32)
    taps, _ = model.step(img, model.initial_he(2), mask_history=True)
    plain = model.encoder(img)
    for a, b in zip(taps, plain):
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)


def test_gradients_reach_hit_parameters():
    model = HiTModel(TOY, seed=1)
    rng = np.random.default_rng(0)
    frames = rng.random((1, 2, 3, 32, 32)).astype(np.float32)
    masks = (rng.random((1, 2, 1, 32, 32)) < 0.3).astype(np.float32)
    model.zero_grad()
    series_loss(model, frames, masks, frames[:, 1], masks).total.backward()
    for name in ("hit.initial_embedding", "hit.project_in.weight", "hit.adapter_linear.weight"):
        g = dict(model.named_parameters())[name].grad
        assert g is not None and np.abs(g).max() > 0, name
