"""Training loop, evaluation passes and the checkpoint-selection rule shared by both model kinds."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data.augment import augment_geometric, cutmix_temporal
from .data.series import TileSeries, collate
from .models import BitemporalModel, HiTModel
from .nn import ops
from .nn.optim import AdamW, cosine_lr
from .nn.tensor import Tensor, no_grad
from .segmentation import confusion, f1_from_counts, seg_loss, series_loss
from .vit import ModelConfig

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr_max: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 0.01
    batch_size: int = 4
    seeds: tuple = (0, 1, 2)
    val_fraction: float = 0.1
    augment: bool = True
    cutmix_prob: float = 0.0
    target_f1: Optional[float] = None
    eval_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in (
            self.seeds if isinstance(self.seeds, (tuple, list)) else (self.seeds,))))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainResult:
    seed: int
    best_f1: float
    best_epoch: int
    best_state: dict
    log_lines: list = field(default_factory=list)


def split_train_val(series: list, val_fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic partition by a seeded permutation."""
    if not series:
        raise ValueError("dataset is empty")
    n_val = int(round(val_fraction * len(series)))
    if val_fraction > 0:
        n_val = max(n_val, 1)
    order = np.random.default_rng(seed).permutation(len(series))
    val = [series[i] for i in sorted(order[:n_val])]
    train = [series[i] for i in sorted(order[n_val:])]
    return train, val


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def _augment(batch: list, cfg: TrainConfig, rng: np.random.Generator, donors: list) -> list:
    out = []
    for s in batch:
        if cfg.cutmix_prob > 0 and donors and s.n >= 2 and rng.random() < cfg.cutmix_prob:
            donor = donors[int(rng.integers(len(donors)))]
            s = cutmix_temporal(s, donor, rng)
        if cfg.augment:
            s = augment_geometric(s, rng)
        out.append(s)
    return out


def _donor_changes(series: list) -> list:
    """Post-frame flood patches usable as CutMix donors."""
    donors = []
    for s in series:
        for ev in s.events:
            if ev.step == s.n and ev.region.any():
                donors.append((s.post, ev.region))
    return donors


# ----------------------------------------------------------------- evaluation

def hit_post_logits(model: HiTModel, series: list, prefix: Optional[int] = None,
                    batch_size: int = 16) -> np.ndarray:
    """Absorb the first ``prefix`` pre frames (all by default), then predict the post frame."""
    out = []
    with no_grad():
        for start in range(0, len(series), batch_size):
            chunk = series[start:start + batch_size]
            frames = np.stack([s.frames for s in chunk])
            post = np.stack([s.post for s in chunk])
            s_len = frames.shape[1] if prefix is None else prefix
            he = model.initial_he(len(chunk))
            for t in range(s_len):
                _, he = model.step(frames[:, t], he)
            taps, _ = model.step(post, he)
            out.append(model.decode(taps).data)
    return np.concatenate(out)


def baseline_logits(model: BitemporalModel, firsts: np.ndarray, seconds: np.ndarray,
                    batch_size: int = 16) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(firsts), batch_size):
            out.append(model(firsts[start:start + batch_size], seconds[start:start + batch_size]).data)
    return np.concatenate(out)


def pooled_f1(probabilities: np.ndarray, masks: np.ndarray, threshold: float = 0.5) -> float:
    return f1_from_counts(*confusion(probabilities, masks, threshold))


def evaluate(model, series: list, batch_size: int = 16) -> tuple[float, float]:
    """(loss, pooled change F1) of the post-frame prediction after the full pre series.

    HiT absorbs every pre frame; the baseline sees the (last pre, post) pair.
    Both score through the same F1 code path.
    """
    masks = np.stack([s.post_mask(s.n - 1) for s in series]).astype(np.float32)
    if isinstance(model, HiTModel):
        logits = hit_post_logits(model, series, batch_size=batch_size)
    else:
        logits = baseline_logits(model, np.stack([s.frames[-1] for s in series]),
                                 np.stack([s.post for s in series]), batch_size)
    with no_grad():
        loss = float(seg_loss(Tensor(logits), masks).data)
    return loss, pooled_f1(ops._sigmoid_np(logits), masks)


# ------------------------------------------------------------------ losses

def hit_batch_loss(model: HiTModel, batch: list) -> Tensor:
    b = collate(batch)
    return series_loss(model, b.frames, b.step_masks, b.post, b.post_masks).total


def baseline_pairs(series: TileSeries) -> list:
    """(first, second, mask) for every (pre_i, post) and consecutive (pre_i, pre_i+1) pair."""
    pairs = [(series.frames[i], series.post, series.post_mask(i)) for i in range(series.n)]
    pairs += [(series.frames[i], series.frames[i + 1], series.mask(i, i + 1)) for i in range(series.n - 1)]
    return pairs


def baseline_batch_loss(model: BitemporalModel, batch: list) -> Tensor:
    pairs = [p for s in batch for p in baseline_pairs(s)]
    firsts = np.stack([p[0] for p in pairs])
    seconds = np.stack([p[1] for p in pairs])
    masks = np.stack([p[2] for p in pairs]).astype(np.float32)
    return seg_loss(model(firsts, seconds), masks)


LOSSES: dict[str, Callable] = {"hit": hit_batch_loss, "bitemporal": baseline_batch_loss}


# -------------------------------------------------------------------- loop

def fit_model(model, train_series: list, val_series: list, cfg: TrainConfig, seed: int,
              log_path: Optional[Path] = None) -> TrainResult:
    """Train one model; keep the state with the best validation change F1."""
    loss_fn = LOSSES[model.kind]
    opt = AdamW(model.named_parameters(), lr=cfg.lr_max, weight_decay=cfg.weight_decay)
    donors = _donor_changes(train_series) if cfg.cutmix_prob > 0 else []
    result = TrainResult(seed=seed, best_f1=-1.0, best_epoch=-1, best_state=model.state_dict())
    sink = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            opt.state.lr = cosine_lr(epoch, cfg.epochs - 1, cfg.lr_max, cfg.lr_min)
            rng = np.random.default_rng([seed, epoch])
            losses = []
            for b, idx in enumerate(_batches(len(train_series), cfg.batch_size, rng)):
                batch = _augment([train_series[i] for i in idx], cfg, rng, donors)
                opt.zero_grad()
                loss = loss_fn(model, batch)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
                loss.backward()
                opt.step()
                losses.append(value)
            lines = [f"{epoch},train,{np.mean(losses):.6f},"]
            last = epoch == cfg.epochs - 1
            if val_series and (epoch % cfg.eval_every == 0 or last):
                val_loss, f1 = evaluate(model, val_series)
                lines.append(f"{epoch},val,{val_loss:.6f},{f1:.6f}")
                if f1 > result.best_f1:
                    result.best_f1, result.best_epoch = f1, epoch
                    result.best_state = model.state_dict()
                log.info("seed %d epoch %d lr %.2e loss %.4f val F1 %.4f", seed, epoch, opt.state.lr,
                         np.mean(losses), f1)
            result.log_lines.extend(lines)
            if sink:
                sink.write("".join(line + "\n" for line in lines))
                sink.flush()
            if cfg.target_f1 is not None and result.best_f1 >= cfg.target_f1:
                break
        if not val_series:
            result.best_state = model.state_dict()
            result.best_epoch = cfg.epochs - 1
    finally:
        if sink:
            sink.close()
    model.load_state_dict(result.best_state)
    return result


def build_model(kind: str, mcfg: ModelConfig, seed: int):
    return (HiTModel if kind == "hit" else BitemporalModel)(mcfg, seed=seed)


def train(data: list, mcfg: ModelConfig, cfg: TrainConfig, kind: str = "hit",
          log_path: Optional[Path] = None, val_data: Optional[list] = None):
    """One run per seed; returns ``(best_model, results)`` with the best run by validation F1."""
    if not data:
        raise ValueError("dataset is empty")
    if val_data is None:
        train_data, val_data = split_train_val(data, cfg.val_fraction, seed=cfg.seeds[0])
    else:
        train_data = data
    results, best_model, best = [], None, None
    for seed in cfg.seeds:
        model = build_model(kind, mcfg, seed)
        res = fit_model(model, train_data, val_data, cfg, seed, log_path)
        results.append(res)
        if best is None or res.best_f1 > best.best_f1:
            best, best_model = res, model
    return best_model, results


def train_baseline(data: list, mcfg: ModelConfig, cfg: TrainConfig, **kw):
    return train(data, mcfg, cfg, kind="bitemporal", **kw)
