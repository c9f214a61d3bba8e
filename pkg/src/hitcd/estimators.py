"""scikit-learn style estimators over lists of TileSeries.

``X`` is a list of TileSeries. ``fit`` trains with the harness loop;
``predict_proba`` returns post-frame change probabilities ``(N, 1, H, W)``.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data.series import TileSeries
from .nn import ops
from .training import (TrainConfig, baseline_logits, hit_post_logits, pooled_f1, split_train_val,
                       train)
from .vit import ModelConfig


def check_series_list(X, bands: int, size: int, min_frames: int = 1) -> list:
    """Validate a list of equally long series matching the model's band count and tile size."""
    if isinstance(X, TileSeries):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("X is empty")
    for i, s in enumerate(X):
        if not isinstance(s, TileSeries):
            raise TypeError(f"X[{i}] is {type(s).__name__}, expected TileSeries")
        if s.frames.shape[1:] != (bands, size, size):
            raise ValueError(f"X[{i}] frames are {s.frames.shape[1:]}, expected {(bands, size, size)}")
        if s.n < min_frames:
            raise ValueError(f"X[{i}] has {s.n} pre frames, need at least {min_frames}")
    if len({s.n for s in X}) > 1:
        raise ValueError("all series must have the same number of pre frames")
    return X


class _ChangeDetector(BaseEstimator):
    _kind = "hit"

    def __init__(self, image_size=16, patch_size=2, bands=6, embed_dim=32, depth=4, heads=2,
                 mlp_ratio=4.0, fuse_stage=1, he_grid=8, he_dim=32, decoder_tap_stages=(2, 3, 4),
                 fpn_dim=16, learned_initial_he=True, pos_temperature=20.0, epochs=120, lr_max=2e-3, lr_min=0.0,
                 weight_decay=0.01, batch_size=8, val_fraction=0.1, augment=True, cutmix_prob=0.0,
                 target_f1=None, threshold=0.5, random_state=0):
        self.image_size = image_size
        self.patch_size = patch_size
        self.bands = bands
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.fuse_stage = fuse_stage
        self.he_grid = he_grid
        self.he_dim = he_dim
        self.decoder_tap_stages = decoder_tap_stages
        self.fpn_dim = fpn_dim
        self.learned_initial_he = learned_initial_he
        self.pos_temperature = pos_temperature
        self.epochs = epochs
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.augment = augment
        self.cutmix_prob = cutmix_prob
        self.target_f1 = target_f1
        self.threshold = threshold
        self.random_state = random_state

    def model_config(self) -> ModelConfig:
        names = ModelConfig.__dataclass_fields__
        return ModelConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr_max=self.lr_max, lr_min=self.lr_min,
                           weight_decay=self.weight_decay, batch_size=self.batch_size,
                           seeds=(self.random_state,), val_fraction=self.val_fraction, augment=self.augment,
                           cutmix_prob=self.cutmix_prob, target_f1=self.target_f1)

    def fit(self, X, y=None, X_val: Optional[list] = None, log_path=None):
        """Train on ``X``; masks come from the series' event bookkeeping, so ``y`` is ignored."""
        mcfg = self.model_config()
        X = check_series_list(X, mcfg.bands, mcfg.image_size)
        if X_val is None:
            X, X_val = split_train_val(X, self.val_fraction, seed=self.random_state)
        else:
            X_val = check_series_list(X_val, mcfg.bands, mcfg.image_size)
        model, results = train(X, mcfg, self.train_config(), kind=self._kind, log_path=log_path, val_data=X_val)
        self.model_ = model
        self.log_ = list(results[0].log_lines)
        self.best_f1_ = results[0].best_f1
        self.best_epoch_ = results[0].best_epoch
        return self

    def _logits(self, X) -> np.ndarray:
        raise NotImplementedError

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_series_list(X, self.model_.cfg.bands, self.model_.cfg.image_size)
        return ops._sigmoid_np(self._logits(X))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > self.threshold).astype(np.uint8)

    def score(self, X, y=None) -> float:
        """Pooled change-class F1 of the post-frame prediction."""
        X = check_series_list(X, self.bands, self.image_size)
        masks = np.stack([s.post_mask(s.n - 1) for s in X])
        return pooled_f1(self.predict_proba(X), masks, self.threshold)


class HiTChangeDetector(_ChangeDetector):
    """Continuous change detector: absorbs every pre frame into the history, then predicts the post frame."""

    _kind = "hit"

    def _logits(self, X) -> np.ndarray:
        return hit_post_logits(self.model_, X)


class BitemporalChangeDetector(_ChangeDetector):
    """Two-frame baseline scored on the (last pre frame, post frame) pair."""

    _kind = "bitemporal"

    def _logits(self, X) -> np.ndarray:
        return baseline_logits(self.model_, np.stack([s.frames[-1] for s in X]), np.stack([s.post for s in X]))
