"""End-to-end acceptance checks. Each test records one PASS/FAIL line (see conftest.report)."""
import os
import time

import numpy as np
import pytest

from hitcd.cli import main
from hitcd.data.synth import GenConfig, synth_dataset
from hitcd.harness import (TOY_GRADCHECK, bench_throughput, check_shapes, eval_persistence_baseline,
                           eval_persistence_hit, make_twin_scenes, toy_gradcheck)
from hitcd.hit import HistoryEmbedding
from hitcd.models import HiTModel
from hitcd.segmentation import series_loss
from hitcd.store import TABLE_ROWS, HEStore, footprint
from hitcd.training import TrainConfig, evaluate, train
from hitcd.vit import ContractViolation, ModelConfig

from conftest import report
from test_store import TABLE, _num

pytestmark = pytest.mark.acceptance

# learning-check setup shared by criteria 4 and 5
LEARN_GEN = GenConfig(tile_size=16, n_frames=4, event_probability=0.7)
LEARN_MODEL = ModelConfig(image_size=16, patch_size=2, bands=6, embed_dim=32, depth=4, heads=2, fuse_stage=1,
                          he_grid=8, he_dim=32, decoder_tap_stages=(2, 3, 4), fpn_dim=16,
                          pos_temperature=20.0)
LEARN_TRAIN = TrainConfig(epochs=120, lr_max=2e-3, lr_min=0.0, weight_decay=0.01, batch_size=8, seeds=(0,),
                          target_f1=0.90)
LEARN_BUDGET_S = 15 * 60
CORRUPT_INDEX = 3  # 1-based intermediate pre frame


def test_criterion_1_footprint_table(tmp_path, capsys):
    worst = 0.0
    for row in TABLE_ROWS:
        rep = footprint(*row)
        pct, eu, world = TABLE[row]
        for got, want in ((rep.percent_of_image, float(pct[:-1])), (rep.europe_total_bytes, _num(eu)),
                          (rep.world_total_bytes, _num(world))):
            worst = max(worst, abs(got / want - 1))
    code = main(["footprint", "--dim", "24", "--tokens", "64", "--out", str(tmp_path)])
    printed = capsys.readouterr().out.splitlines()
    ok = worst <= 5e-3 and code == 0 and printed == ["0.391% | 4.85 GB | 139.63 GB", "savings 99.61%"]
    report(1, "footprint table", ok, f"{len(TABLE_ROWS)} rows, worst relative error {worst:.2e}, "
                                     f"printed {' / '.join(printed)}")
    assert ok


def test_criterion_2_shape_sweep():
    base = ModelConfig(image_size=64, patch_size=16, fpn_dim=16)
    configs = ([ModelConfig(**{**base.to_dict(), "fuse_stage": k}) for k in (3, 5, 7, 11)]
               + [ModelConfig(**{**base.to_dict(), "he_dim": d}) for d in (8, 24, 72, 120, 168, 192)]
               + [ModelConfig(**{**base.to_dict(), "he_grid": r}) for r in (2, 4, 8, 16)])
    t0 = time.perf_counter()
    failures = []
    for cfg in configs:
        try:
            check_shapes(cfg)
        except ContractViolation as exc:
            failures.append(f"k={cfg.fuse_stage} d={cfg.he_dim} r={cfg.he_grid}: {exc}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60
    report(2, "shape sweep", ok, f"{len(configs)} configurations, {len(failures)} violations, {elapsed:.1f} s"
           + (f"; first: {failures[0]}" if failures else ""))
    assert ok


def test_criterion_3_gradient_check():
    t0 = time.perf_counter()
    rep = toy_gradcheck(seed=0, max_entries=20, cfg=TOY_GRADCHECK)
    elapsed = time.perf_counter() - t0
    name, err = rep.worst()
    ok = rep.passed(1e-5) and elapsed < 300
    report(3, "gradient check", ok, f"{rep.checked_entries} entries over {len(rep.per_parameter)} tensors, "
                                    f"max relative error {err:.2e} ({name}), {elapsed:.0f} s")
    assert ok


@pytest.fixture(scope="module")
def learned():
    """Both models trained identically on 200 series and scored on 50 held-out series."""
    train_data = synth_dataset(LEARN_GEN, 200, seed=1)
    held_out = synth_dataset(LEARN_GEN, 50, seed=2)
    out = {}
    for kind in ("bitemporal", "hit"):
        t0 = time.perf_counter()
        model, results = train(train_data, LEARN_MODEL, LEARN_TRAIN, kind=kind, val_data=held_out)
        out[kind] = (model, evaluate(model, held_out)[1], results[0].best_epoch, time.perf_counter() - t0)
    return out


def test_criterion_4_learning_check(learned):
    (_, base_f1, base_ep, base_s), (_, hit_f1, hit_ep, hit_s) = learned["bitemporal"], learned["hit"]
    in_time = base_s + hit_s < LEARN_BUDGET_S
    ok = hit_f1 >= 0.90 and base_f1 >= 0.90 and in_time
    report(4, "learning check", ok, f"history F1 {hit_f1:.3f} (best epoch {hit_ep}, {hit_s:.0f} s), "
                                    f"bitemporal F1 {base_f1:.3f} (best epoch {base_ep}, {base_s:.0f} s)")
    assert ok


def test_criterion_5_temporal_persistence(learned):
    hit_model, baseline = learned["hit"][0], learned["bitemporal"][0]
    t0 = time.perf_counter()
    clean, corrupted = make_twin_scenes(LEARN_GEN, n_scenes=2, tiles_per_scene=16,
                                        corrupt_index=CORRUPT_INDEX - 1, seed=7)
    hit_clean = eval_persistence_hit(hit_model, clean)
    hit_bad = eval_persistence_hit(hit_model, corrupted)
    base_clean = eval_persistence_baseline(baseline, clean)
    base_bad = eval_persistence_baseline(baseline, corrupted)
    i = CORRUPT_INDEX - 1
    hit_change = max(abs(hit_clean.hit_f1[s][-1] - hit_bad.hit_f1[s][-1]) for s in hit_clean.scenes)
    base_drop = min(base_clean.baseline_f1[s][i] - base_bad.baseline_f1[s][i] for s in base_clean.scenes)
    flagged = all(base_bad.flagged[s] == CORRUPT_INDEX for s in base_bad.scenes)
    elapsed = time.perf_counter() - t0
    ok = hit_change < 0.05 and base_drop > 0.20 and flagged and elapsed < 300
    report(5, "temporal persistence", ok,
           f"history final-prefix F1 change {hit_change:.3f}, bitemporal drop at index {CORRUPT_INDEX} "
           f"{base_drop:.3f}, flagged {sorted(base_bad.flagged.values())}, {elapsed:.0f} s")
    assert ok


def test_criterion_6_branch_loss_counting():
    cfg = ModelConfig(image_size=32, patch_size=16, embed_dim=16, depth=3, heads=2, fuse_stage=2, he_grid=2,
                      he_dim=4, decoder_tap_stages=(1, 2, 3), fpn_dim=8)
    model = HiTModel(cfg, seed=0)
    rng = np.random.default_rng(0)
    frames = rng.random((2, 4, 6, 32, 32)).astype(np.float32)
    step = (rng.random((2, 4, 1, 32, 32)) < 0.2).astype(np.float32)
    step[:, 0] = 0
    post = rng.random((2, 6, 32, 32)).astype(np.float32)
    post_masks = (rng.random((2, 4, 1, 32, 32)) < 0.2).astype(np.float32)
    a = series_loss(model, frames, step, post, post_masks)
    b = series_loss(model, frames, step, post, post_masks)
    same = a.total.data.tobytes() == b.total.data.tobytes() and all(
        x.data.tobytes() == y.data.tobytes() for x, y in zip(a.main_terms, b.main_terms))
    ok = len(a.main_terms) == 4 and len(a.branch_terms) == 4 and same
    report(6, "branch-loss counting", ok, f"{len(a.main_terms)} main + {len(a.branch_terms)} branch terms, "
                                          f"repeat bit-identical: {same}")
    assert ok


def test_criterion_7_store_integrity(tmp_path, monkeypatch):
    import hitcd.store as store_mod

    t0 = time.perf_counter()
    chash = b"accept01"
    store = HEStore(tmp_path / "s", chash, durable=False)
    rng = np.random.default_rng(0)
    payloads = {}
    for i in range(10_000):
        values = rng.standard_normal((4, 3)).astype(np.float32)
        key = f"tile_{i:05d}"
        payloads[key] = values.tobytes()
        store.put(key, HistoryEmbedding(2, 3, values, key, chash, timestamp=i, step_count=i % 7))
    store.flush()
    reopened = HEStore(tmp_path / "s", chash)
    exact = len(reopened) == 10_000 and all(reopened.get(k).values.tobytes() == v for k, v in payloads.items())

    def crash(*args, **kwargs):
        raise OSError("injected failure before rename")

    monkeypatch.setattr(store_mod.os, "replace", crash)
    try:
        reopened.put("tile_00000", HistoryEmbedding(2, 3, np.zeros((4, 3)), "tile_00000", chash))
        raised = False
    except OSError:
        raised = True
    monkeypatch.undo()
    intact = raised and reopened.get("tile_00000").values.tobytes() == payloads["tile_00000"]
    elapsed = time.perf_counter() - t0
    ok = exact and intact and elapsed < 60
    report(7, "store integrity", ok, f"10000 records bit-exact: {exact}, interrupted write left prior record "
                                     f"intact: {intact}, {elapsed:.1f} s")
    assert ok


def test_criterion_8_determinism(tmp_path, capsys):
    args = ["--seed", "3", "--set", "data.tile_size=16", "--set", "data.count=24", "--set", "data.val_count=8",
            "--set", "train.epochs=5", "--set", "train.seeds=3,", "--set", "train.batch_size=8",
            "--set", "train.lr_max=0.002"]
    for key, value in LEARN_MODEL.to_dict().items():
        text = ",".join(str(v) for v in value) + "," if isinstance(value, tuple) else str(value)
        args += ["--set", f"model.{key}={text}"]
    t0 = time.perf_counter()
    codes = [main(["train", "--out", str(tmp_path / run)] + args) for run in ("a", "b")]
    logs = [(tmp_path / run / "metrics.log").read_bytes() for run in ("a", "b")]
    elapsed = time.perf_counter() - t0
    epochs = sum(1 for line in logs[0].decode().splitlines() if ",train," in line)
    ok = codes == [0, 0] and logs[0] == logs[1] and epochs == 5 and elapsed < 300
    report(8, "determinism", ok, f"two train runs, {epochs} epochs, metrics logs identical: {logs[0] == logs[1]}, "
                                 f"{elapsed:.0f} s")
    assert ok


def test_criterion_9_throughput():
    model = HiTModel(ModelConfig(fuse_stage=5, he_grid=8, he_dim=24), seed=0)
    t0 = time.perf_counter()
    rep = bench_throughput(model, warmup=2, iters=10)
    elapsed = time.perf_counter() - t0
    multi_ok = rep.multi_fps >= rep.single_fps if rep.multi_applicable else True
    ok = multi_ok and rep.single_fps > 0 and elapsed < 120
    multi = (f"multi-tile {rep.multi_fps:.2f} FPS with {rep.workers} workers" if rep.multi_applicable
             else f"multi-tile check not applicable on {rep.cpu_count} CPU")
    report(9, "throughput report", ok, f"single-tile {rep.single_fps:.2f} FPS (median {rep.single_median_ms:.0f} ms, "
                                       f"p95 {rep.single_p95_ms:.0f} ms), {multi}, {elapsed:.0f} s")
    assert ok
