"""Pyramid decoder from ViT taps to a change-probability map; losses and the F1 metric."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import ops
from .nn.module import Module, xavier_uniform
from .nn.tensor import Parameter, Tensor
from .vit import ModelConfig


class MaskError(ValueError):
    pass


def _level_exponents(n_taps: int) -> list[int]:
    """log2 scale of each tap (shallow -> deep) relative to the token grid.

    Four taps give [2, 1, 0, -1]: 4x, 2x, 1x and 1/2x the grid.
    """
    if n_taps == 1:
        return [0]
    return [n_taps - 2 - j for j in range(n_taps)]


class _Deconv(Module):
    def __init__(self, c_in: int, c_out: int, rng):
        # torch-style fans for a k2 transposed conv: in*4 and out*4
        self.weight = Parameter(xavier_uniform(rng, 4 * c_out, 4 * c_in, (c_in, 4 * c_out)))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))

    def __call__(self, x):
        return ops.deconv_up2(x, self.weight, self.bias)


class _Down(Module):
    def __init__(self, c_in: int, c_out: int, rng):
        self.weight = Parameter(xavier_uniform(rng, 4 * c_in, 4 * c_out, (4 * c_in, c_out)))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))

    def __call__(self, x):
        return ops.conv_down2(x, self.weight, self.bias)


class _Conv(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng):
        self.weight = Parameter(xavier_uniform(rng, c_in * k * k, c_out * k * k, (c_out, c_in, k, k)))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias)


class _Resample(Module):
    """Brings one tap from the token grid to its pyramid level."""

    def __init__(self, dim: int, exponent: int, rng):
        self.ups = [_Deconv(dim, dim, rng) for _ in range(max(exponent, 0))]
        self.down = _Down(dim, dim, rng) if exponent < 0 else None

    def __call__(self, x):
        for i, up in enumerate(self.ups):
            if i:
                x = ops.gelu(x)
            x = up(x)
        if self.down is not None:
            x = self.down(x)
        return x


class FPNDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        D, F = cfg.embed_dim, cfg.fpn_dim
        exps = _level_exponents(len(cfg.decoder_tap_stages))
        self.resample = [_Resample(D, e, rng) for e in exps]
        self.lateral = [_Conv(D, F, 1, rng) for _ in exps]
        self.smooth = [_Conv(F, F, 3, rng) for _ in exps]
        self.head = _Conv(F, 1, 1, rng)
        self._exps = exps
        self._cfg = cfg

    def __call__(self, taps: list[Tensor]) -> Tensor:
        """Tap token sequences (B, g*g, D) -> logits (B, 1, H, W)."""
        cfg = self._cfg
        if len(taps) != len(self._exps):
            raise ValueError(f"decoder expects {len(self._exps)} tap features, got {len(taps)}")
        g = cfg.grid
        maps = []
        for t, rs in zip(taps, self.resample):
            B, n, D = t.shape
            if n != g * g:
                raise ops.ShapeError(f"tap has {n} tokens, expected {g * g}")
            x = ops.transpose(ops.reshape(t, (B, g, g, D)), (0, 3, 1, 2))
            maps.append(rs(x))
        lat = [conv(m) for conv, m in zip(self.lateral, maps)]
        # top-down: deepest (coarsest) level first
        merged = [None] * len(lat)
        p = lat[-1]
        merged[-1] = p
        for j in range(len(lat) - 2, -1, -1):
            p = ops.add(lat[j], ops.upsample_nearest(p, 2 ** (self._exps[j] - self._exps[j + 1])))
            merged[j] = p
        finest = self._exps[0]
        fused = None
        for j, (conv, m) in enumerate(zip(self.smooth, merged)):
            s = ops.upsample_nearest(conv(m), 2 ** (finest - self._exps[j]))
            fused = s if fused is None else ops.add(fused, s)
        # the 1x1 head and bilinear resize are both linear with unit-sum
        # weights, so applying the head first is exact and much cheaper
        logits = self.head(fused)
        return ops.resize_bilinear(logits, cfg.image_size, cfg.image_size)


@dataclass
class SegmentationOutput:
    logits: np.ndarray
    probabilities: np.ndarray


def fpn_decode(tap_features, decoder: FPNDecoder) -> SegmentationOutput:
    taps = [t if isinstance(t, Tensor) else Tensor(np.asarray(t)[None] if np.ndim(t) == 2 else t)
            for t in tap_features]
    logits = decoder(taps).data
    probs = ops._sigmoid_np(logits)
    if logits.shape[0] == 1:
        logits, probs = logits[0], probs[0]
    return SegmentationOutput(logits, probs)


def _check_binary(mask: np.ndarray) -> None:
    if not np.all((mask == 0) | (mask == 1)):
        raise MaskError("change mask must be binary (0/1)")


def bce_loss(logits: Tensor, mask) -> Tensor:
    mask = np.asarray(mask)
    _check_binary(mask)
    return ops.bce_with_logits(logits, mask)


def dice_loss(probabilities: Tensor, mask, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(p y) + s) / (sum p + sum y + s), averaged over the leading batch axis.

    A 3-D input ``(1, H, W)`` is treated as a single image.
    """
    y = np.asarray(mask, dtype=probabilities.dtype)
    if y.shape != probabilities.shape:
        raise ops.ShapeError(f"dice shape mismatch: {probabilities.shape} vs {y.shape}")
    p = probabilities
    if p.ndim == 3:
        p = ops.reshape(p, (1,) + p.shape)
        y = y[None]
    axes = tuple(range(1, p.ndim))
    inter = ops.sum(ops.mul(p, Tensor(y)), axis=axes)
    denom = ops.add(ops.sum(p, axis=axes), float(smooth) + y.sum(axis=axes).astype(p.dtype))
    ratio = ops.div(ops.add(ops.mul(inter, 2.0), float(smooth)), denom)
    return ops.mean(ops.sub(1.0, ratio))


def f1_change(probabilities, mask, threshold: float = 0.5) -> float:
    tp, fp, fn = confusion(probabilities, mask, threshold)
    return f1_from_counts(tp, fp, fn)


def confusion(probabilities, mask, threshold: float = 0.5) -> tuple[int, int, int]:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    pred = np.asarray(probabilities) > threshold
    truth = np.asarray(mask) > 0.5
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return tp, fp, fn


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0
    return 2.0 * tp / denom


def seg_loss(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Cross-entropy plus Dice for one batch of predictions."""
    return ops.add(bce_loss(logits, mask), dice_loss(ops.sigmoid(logits), mask))


@dataclass
class SeriesLoss:
    total: Tensor
    main_terms: list = field(default_factory=list)
    branch_terms: list = field(default_factory=list)

    @property
    def n_terms(self) -> int:
        return len(self.main_terms) + len(self.branch_terms)


def series_loss(model, frames: np.ndarray, step_masks: np.ndarray, post: np.ndarray,
                post_masks: np.ndarray) -> SeriesLoss:
    """Loss over one batch of series.

    frames (B,n,C,H,W); step_masks (B,n,1,H,W) where entry t is the change
    between frames t-1 and t (zeros at t=0); post (B,C,H,W); post_masks
    (B,n,1,H,W) where entry i is the change from frame i to the post frame.

    The main pass folds the history over frames 1..n. After each frame the
    history is forked and the post frame is predicted from it. The total is the
    mean of the 2n (cross-entropy + Dice) terms.
    """
    B, n = frames.shape[:2]
    if step_masks.shape[:2] != (B, n) or post_masks.shape[:2] != (B, n):
        raise MaskError("need one step mask and one post mask per pre frame")
    he = model.initial_he(B)
    main, branch = [], []
    for t in range(n):
        taps, he = model.step(frames[:, t], he)
        main.append(seg_loss(model.decode(taps), step_masks[:, t]))
        # branch: the post frame seen right after frame t; its updated history is discarded
        taps_post, _ = model.step(post, he)
        branch.append(seg_loss(model.decode(taps_post), post_masks[:, t]))
    terms = main + branch
    total = terms[0]
    for term in terms[1:]:
        total = ops.add(total, term)
    return SeriesLoss(ops.mul(total, 1.0 / len(terms)), main, branch)
