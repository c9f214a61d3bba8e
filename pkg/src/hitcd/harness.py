"""Parameter sweeps, temporal-persistence evaluation, configuration shape checks and throughput benchmarks."""
from __future__ import annotations

import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .data.augment import corrupt_frame
from .data.series import TileSeries
from .data.synth import GenConfig, synth_series
from .hit import HistoryEmbedding, he_init, hit_step
from .models import BitemporalModel, HiTModel
from .nn import ops
from .nn.tensor import no_grad
from .segmentation import confusion, f1_from_counts, series_loss
from .training import TrainConfig, baseline_logits, train
from .vit import ContractViolation, ModelConfig

SWEEP_PARAMS = {"fuse": "fuse_stage", "fuse_stage": "fuse_stage", "dim": "he_dim", "he_dim": "he_dim",
                "grid": "he_grid", "he_grid": "he_grid"}


# -------------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple
    runs: int = 3

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMS:
            raise ValueError(f"unknown sweep parameter {self.parameter!r}; "
                             f"choose from fuse_stage, he_dim, he_grid")
        object.__setattr__(self, "parameter", SWEEP_PARAMS[self.parameter])
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))
        if not self.values:
            raise ValueError("a sweep needs at least one value")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")

    def configs(self, base: ModelConfig) -> list:
        """One validated ModelConfig per value; raises on the first out-of-bounds value."""
        out = []
        for v in self.values:
            try:
                out.append(replace(base, **{self.parameter: v}))
            except ValueError as exc:
                raise ValueError(f"invalid {self.parameter}={v}: {exc}") from None
        return out


@dataclass
class SweepRow:
    value: int
    tokens: Optional[int]
    f1s: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.f1s))

    @property
    def std(self) -> float:
        return float(np.std(self.f1s))


@dataclass
class SweepResult:
    parameter: str
    rows: list

    def table(self) -> str:
        head = [self.parameter] + (["tokens"] if self.parameter == "he_grid" else []) + ["f1_mean", "f1_std", "runs"]
        lines = ["\t".join(head)]
        for r in self.rows:
            cells = [str(r.value)] + ([str(r.tokens)] if self.parameter == "he_grid" else [])
            cells += [f"{r.mean:.4f}", f"{r.std:.4f}", str(len(r.f1s))]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def plot_data(self) -> str:
        """Whitespace-separated ``x mean std`` columns (x is the token count for grid sweeps)."""
        lines = [f"# {self.parameter}"]
        for r in self.rows:
            x = r.tokens if self.parameter == "he_grid" else r.value
            lines.append(f"{x} {r.mean:.6f} {r.std:.6f}")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        table, plot = d / f"sweep_{self.parameter}.tsv", d / f"sweep_{self.parameter}.dat"
        table.write_text(self.table(), encoding="utf-8")
        plot.write_text(self.plot_data(), encoding="utf-8")
        return table, plot


def sweep(spec: SweepSpec, base: ModelConfig, data: list, tcfg: TrainConfig,
          val_data: Optional[list] = None) -> SweepResult:
    """Best-checkpoint validation F1 per value, aggregated over ``spec.runs`` seeds."""
    seeds = tuple(tcfg.seeds[0] + i for i in range(spec.runs))
    rows = []
    for cfg in spec.configs(base):
        _, results = train(data, cfg, replace(tcfg, seeds=seeds), val_data=val_data)
        value = getattr(cfg, spec.parameter)
        tokens = cfg.he_tokens if spec.parameter == "he_grid" else None
        rows.append(SweepRow(value, tokens, [r.best_f1 for r in results]))
    return SweepResult(spec.parameter, rows)


# ------------------------------------------------------------- shape checks

@dataclass
class ShapeCheck:
    config: ModelConfig
    block_tokens: list
    he_shape: tuple
    logits_shape: tuple
    grads_finite: bool


def check_shapes(cfg: ModelConfig, batch: int = 1, n_frames: int = 2, seed: int = 0) -> ShapeCheck:
    """Forward and backward through a full series loss, asserting the history invariants.

    Raises ContractViolation if any of them fails.
    """
    model = HiTModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    S = cfg.image_size
    frames = rng.random((batch, n_frames, cfg.bands, S, S)).astype(np.float32)
    post = rng.random((batch, cfg.bands, S, S)).astype(np.float32)
    masks = (rng.random((batch, n_frames, 1, S, S)) < 0.2).astype(np.float32)
    masks[:, 0] = 0
    trace: list = []
    taps, he_next = model.step(frames[:, 0], model.initial_he(batch), trace=trace)
    expected = [cfg.n_patches + (cfg.he_tokens if i == cfg.fuse_stage else 0) for i in range(1, cfg.depth + 1)]
    if trace != expected:
        raise ContractViolation(f"block token counts {trace}, expected {expected}")
    if he_next.shape != (batch, cfg.he_tokens, cfg.he_dim):
        raise ContractViolation(f"updated history {he_next.shape}, expected {(batch, cfg.he_tokens, cfg.he_dim)}")
    if len(taps) != len(cfg.decoder_tap_stages) or any(t.shape != (batch, cfg.n_patches, cfg.embed_dim)
                                                     for t in taps):
        raise ContractViolation(f"tap shapes {[t.shape for t in taps]}")
    logits = model.decode(taps)
    if logits.shape != (batch, 1, S, S):
        raise ContractViolation(f"logits {logits.shape}, expected {(batch, 1, S, S)}")
    model.zero_grad()
    loss = series_loss(model, frames, masks, post, masks)
    loss.total.backward()
    finite = all(p.grad is not None and np.all(np.isfinite(p.grad)) for _, p in model.named_parameters()
                 if p.grad is not None)
    if not finite:
        raise ContractViolation("non-finite gradient")
    missing = [n for n, p in model.named_parameters() if p.grad is None]
    if missing:
        raise ContractViolation(f"parameters without gradient: {missing[:5]}")
    return ShapeCheck(cfg, trace, he_next.shape, logits.shape, finite)


# ------------------------------------------------------ persistence scenes

@dataclass
class Scene:
    name: str
    tiles: list


def make_twin_scenes(gen: GenConfig, n_scenes: int, tiles_per_scene: int, corrupt_index: int,
                     seed: int, sigma: float = 0.3, dropout: float = 0.5) -> tuple[list, list]:
    """Clean scenes and their twins with pre frame ``corrupt_index`` (0-based) corrupted.

    Twins share every other pixel and the event bookkeeping.
    """
    if not 0 <= corrupt_index < gen.n_frames:
        raise ValueError(f"corrupt_index {corrupt_index} outside [0, {gen.n_frames})")
    root = np.random.default_rng(seed)
    clean, corrupted = [], []
    for s in range(n_scenes):
        tiles, twins = [], []
        for t in range(tiles_per_scene):
            tile_seed = int(root.integers(0, 2**31 - 1))
            series = synth_series(gen, tile_seed, tile_key=f"scene{s}_tile{t}")
            frames = series.frames.copy()
            frames[corrupt_index] = corrupt_frame(frames[corrupt_index], np.random.default_rng(tile_seed + 1),
                                                  sigma, dropout)
            tiles.append(series)
            twins.append(series.with_frames(frames))
        clean.append(Scene(f"scene{s}", tiles))
        corrupted.append(Scene(f"scene{s}", twins))
    return clean, corrupted


@dataclass
class PersistenceReport:
    scenes: list = field(default_factory=list)
    # baseline: scene -> per pre-frame (mean delta, std delta); index of the most negative mean
    deltas: dict = field(default_factory=dict)
    flagged: dict = field(default_factory=dict)
    baseline_f1: dict = field(default_factory=dict)
    # history model: scene -> F1 per sub-series size 1..n
    hit_f1: dict = field(default_factory=dict)

    def baseline_table(self) -> str:
        lines = ["scene\tindex\tdelta_mean\tdelta_std\tflag"]
        for scene in self.scenes:
            for i, (m, s) in enumerate(self.deltas.get(scene, []), start=1):
                flag = "*" if self.flagged.get(scene) == i else ""
                lines.append(f"{scene}\t{i}\t{m:+.3f}\t{s:.3f}\t{flag}")
        return "\n".join(lines) + "\n"

    def hit_table(self) -> str:
        n = max((len(v) for v in self.hit_f1.values()), default=0)
        lines = ["scene\t" + "\t".join(str(s) for s in range(1, n + 1))]
        for scene in self.scenes:
            if scene in self.hit_f1:
                lines.append(scene + "\t" + "\t".join(f"{f:.3f}" for f in self.hit_f1[scene]))
        return "\n".join(lines) + "\n"


def _require_post(scenes: list) -> None:
    for scene in scenes:
        for tile in scene.tiles:
            if not isinstance(tile, TileSeries) or tile.post is None:
                raise ValueError(f"scene {scene.name!r} has a tile without a post frame")


def _f1(probs: np.ndarray, mask: np.ndarray) -> float:
    return f1_from_counts(*confusion(probs, mask))


def eval_persistence_baseline(model: BitemporalModel, scenes: list,
                              report: Optional[PersistenceReport] = None) -> PersistenceReport:
    """Pair every pre frame with the post frame; deltas are taken against the per-tile best index."""
    _require_post(scenes)
    report = report or PersistenceReport()
    for scene in scenes:
        if scene.name not in report.scenes:
            report.scenes.append(scene.name)
        n = scene.tiles[0].n
        per_tile = np.zeros((len(scene.tiles), n))
        pooled = []
        for i in range(n):
            firsts = np.stack([t.frames[i] for t in scene.tiles])
            posts = np.stack([t.post for t in scene.tiles])
            probs = ops._sigmoid_np(baseline_logits(model, firsts, posts))
            masks = np.stack([t.post_mask(i) for t in scene.tiles])
            per_tile[:, i] = [_f1(p, m) for p, m in zip(probs, masks)]
            pooled.append(_f1(probs, masks))
        delta = per_tile - per_tile.max(axis=1, keepdims=True)
        means, stds = delta.mean(axis=0), delta.std(axis=0)
        report.deltas[scene.name] = [(float(m), float(s)) for m, s in zip(means, stds)]
        report.flagged[scene.name] = int(np.argmin(means)) + 1
        report.baseline_f1[scene.name] = pooled
    return report


def hit_subseries_probabilities(model: HiTModel, tile: TileSeries, he: HistoryEmbedding) -> list:
    """Post-frame probabilities after absorbing pre frames 1..s, for every s.

    ``he`` is never modified; each prediction runs on a fork.
    """
    out = []
    current = he
    for s in range(tile.n):
        current = hit_step(tile.frames[s], current, model, timestamp=s).he_next
        fork = current.copy()
        out.append(ops._sigmoid_np(hit_step(tile.post, fork, model, timestamp=s, decode=True).logits))
    return out


def eval_persistence_hit(model: HiTModel, scenes: list,
                         report: Optional[PersistenceReport] = None) -> PersistenceReport:
    """Pooled scene F1 of the post prediction after each sub-series size."""
    _require_post(scenes)
    report = report or PersistenceReport()
    cfg = model.cfg
    for scene in scenes:
        if scene.name not in report.scenes:
            report.scenes.append(scene.name)
        n = scene.tiles[0].n
        probs = [[] for _ in range(n)]
        for tile in scene.tiles:
            he = he_init(cfg, model.hit, tile.tile_key)
            for s, p in enumerate(hit_subseries_probabilities(model, tile, he)):
                probs[s].append(p)
        report.hit_f1[scene.name] = [
            _f1(np.stack(probs[s]), np.stack([t.post_mask(s) for t in scene.tiles])) for s in range(n)]
    return report


# ---------------------------------------------------------------- throughput

@dataclass
class BenchReport:
    hardware: str
    cpu_count: int
    workers: int
    image_size: int
    single_median_ms: float
    single_p95_ms: float
    single_fps: float
    multi_fps: float
    iters: int
    warmup: int

    @property
    def multi_applicable(self) -> bool:
        return self.cpu_count >= 2

    def text(self) -> str:
        verdict = ("multi >= single" if self.multi_fps >= self.single_fps else "multi < single") \
            if self.multi_applicable else "n/a (single core)"
        return (f"hardware\t{self.hardware}\ncpus\t{self.cpu_count}\nworkers\t{self.workers}\n"
                f"input\t{self.image_size}x{self.image_size}\n"
                f"single_median_ms\t{self.single_median_ms:.2f}\nsingle_p95_ms\t{self.single_p95_ms:.2f}\n"
                f"single_fps\t{self.single_fps:.2f}\nmulti_fps\t{self.multi_fps:.2f}\n"
                f"multi_check\t{verdict}\niters\t{self.iters}\nwarmup\t{self.warmup}\n")


def hardware_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or platform.system()} python{platform.python_version()}"


def _tile_input(cfg: ModelConfig, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).random((cfg.bands, cfg.image_size, cfg.image_size)).astype(np.float32)


def _timed_steps(model: HiTModel, n: int, seed: int) -> list:
    he = he_init(model.cfg, model.hit, "bench")
    image = _tile_input(model.cfg, seed)
    times = []
    with threadpool_limits(1):
        for _ in range(n):
            t0 = time.perf_counter()
            he = hit_step(image, he, model, timestamp=0, decode=True).he_next
            times.append(time.perf_counter() - t0)
    return times


_WORKER_MODEL: Optional[HiTModel] = None


def _worker_init(cfg_dict: dict, state: dict) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = HiTModel(ModelConfig.from_dict(cfg_dict))
    _WORKER_MODEL.load_state_dict(state)


def _worker_run(args) -> int:
    n, seed = args
    _timed_steps(_WORKER_MODEL, n, seed)
    return n


def bench_throughput(model: HiTModel, warmup: int = 3, iters: int = 20,
                     workers: Optional[int] = None) -> BenchReport:
    """Median/p95 latency of one history update plus decode, single thread, and tiles/s across processes."""
    if iters < 10:
        raise ValueError("iters must be >= 10")
    with no_grad():
        _timed_steps(model, warmup, 0)
        times = np.array(_timed_steps(model, iters, 0))
    cpus = os.cpu_count() or 1
    workers = workers or cpus
    per_worker = max(iters // workers, 1)
    with ProcessPoolExecutor(workers, initializer=_worker_init,
                             initargs=(model.cfg.to_dict(), model.state_dict())) as pool:
        list(pool.map(_worker_run, [(warmup, i) for i in range(workers)]))
        t0 = time.perf_counter()
        done = sum(pool.map(_worker_run, [(per_worker, i) for i in range(workers)]))
        wall = time.perf_counter() - t0
    median = float(np.median(times))
    return BenchReport(hardware_descriptor(), cpus, workers, model.cfg.image_size,
                       1e3 * median, 1e3 * float(np.percentile(times, 95)), 1.0 / median,
                       done / wall, iters, warmup)


# ------------------------------------------------------------ gradient check

TOY_GRADCHECK = ModelConfig(image_size=32, patch_size=16, embed_dim=16, depth=3, heads=2, fuse_stage=2,
                            he_grid=2, he_dim=4, decoder_tap_stages=(1, 2, 3), fpn_dim=8)


def toy_gradcheck(seed: int = 0, max_entries: Optional[int] = 20, cfg: ModelConfig = TOY_GRADCHECK,
                  n_frames: int = 2):
    """Finite-difference check of the full series loss in f64 on a tiny history model."""
    from .nn.gradcheck import finite_diff_check, generic_weights

    model = HiTModel(cfg, seed=seed).astype(np.float64)
    generic_weights(model, seed)
    rng = np.random.default_rng(seed + 1)
    S = cfg.image_size
    frames = rng.random((1, n_frames, cfg.bands, S, S))
    post = rng.random((1, cfg.bands, S, S))
    step_masks = (rng.random((1, n_frames, 1, S, S)) < 0.3).astype(np.float64)
    step_masks[:, 0] = 0
    post_masks = (rng.random((1, n_frames, 1, S, S)) < 0.3).astype(np.float64)

    def loss_fn():
        return series_loss(model, frames, step_masks, post, post_masks).total

    params = [p for _, p in model.named_parameters()]
    for name, p in model.named_parameters():
        p.name = name
    return finite_diff_check(loss_fn, params, h=1e-4, max_entries=max_entries, seed=seed)
