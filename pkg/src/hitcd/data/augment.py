"""Geometric/radiometric augmentation, temporal CutMix and frame corruption."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .series import EventMap, TileSeries


@dataclass(frozen=True)
class GeometricDraw:
    flip_h: bool = False
    flip_v: bool = False
    rot90: int = 0

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "GeometricDraw":
        return cls(bool(rng.random() < 0.5), bool(rng.random() < 0.5), int(rng.integers(0, 4)))

    def apply(self, a: np.ndarray) -> np.ndarray:
        """Transform the trailing (H, W) axes."""
        if self.flip_h:
            a = a[..., ::-1]
        if self.flip_v:
            a = a[..., ::-1, :]
        if self.rot90:
            a = np.rot90(a, self.rot90, axes=(-2, -1))
        return np.ascontiguousarray(a)


def color_jitter(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-band gain U(0.9, 1.1) and offset U(-0.02, 0.02), re-clamped to [0, 1]."""
    C = image.shape[0]
    gain = rng.uniform(0.9, 1.1, size=(C, 1, 1)).astype(np.float32)
    offset = rng.uniform(-0.02, 0.02, size=(C, 1, 1)).astype(np.float32)
    return np.clip(image * gain + offset, 0.0, 1.0)


def augment_geometric(series: TileSeries, rng: np.random.Generator,
                      draw: GeometricDraw | None = None, jitter: bool = True) -> TileSeries:
    """One flip/rotation draw shared by all frames and masks; jitter on images only."""
    draw = GeometricDraw.sample(rng) if draw is None else draw
    frames = draw.apply(series.frames)
    post = draw.apply(series.post)
    events = [EventMap(ev.step, draw.apply(ev.region)) for ev in series.events]
    if jitter:
        frames = np.stack([color_jitter(f, rng) for f in frames])
        post = color_jitter(post, rng)
    return series.with_frames(frames, post, events)


def insert_event(series: TileSeries, patch: np.ndarray, region: np.ndarray, step: int) -> TileSeries:
    """Paste ``patch`` over ``region`` from frame ``step`` to the end, post frame included."""
    region = np.asarray(region, dtype=bool)
    if region.shape != series.spatial:
        raise ValueError(f"region {region.shape} does not fit tile {series.spatial}")
    if not region.any():
        return series.with_frames()
    if not 0 <= step <= series.n:
        raise ValueError(f"insertion step {step} outside [0, {series.n}]")
    frames = series.frames.copy()
    post = series.post.copy()
    patch = np.asarray(patch, dtype=np.float32)
    for i in range(step, series.n):
        frames[i][:, region] = patch[:, region]
    post[:, region] = patch[:, region]
    return series.with_frames(frames, post, list(series.events) + [EventMap(step, region)])


def cutmix_temporal(series: TileSeries, donor_change, rng: np.random.Generator) -> TileSeries:
    """Insert a donor change at a random step in frames 2..n (1-based); it persists afterwards.

    ``donor_change`` is ``(post_patch, region)`` with the patch at full tile size.
    """
    patch, region = donor_change
    region = np.asarray(region, dtype=bool)
    if not region.any():
        return series.with_frames()
    if series.n < 2:
        raise ValueError("temporal CutMix needs at least two pre frames")
    step = int(rng.integers(1, series.n))
    return insert_event(series, patch, region, step)


def corrupt_frame(frame: np.ndarray, rng: np.random.Generator, sigma: float = 0.3,
                  dropout: float = 0.5) -> np.ndarray:
    """Low-quality acquisition stand-in: additive N(0, sigma) noise, then pixel dropout to 0."""
    noisy = frame + rng.normal(0.0, sigma, size=frame.shape).astype(np.float32)
    keep = rng.random(frame.shape[-2:]) >= dropout
    return np.clip(noisy * keep, 0.0, 1.0).astype(np.float32)
