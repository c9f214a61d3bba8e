"""Synthetic continuous-change tile series: smooth terrain, sensor jitter, persistent floods."""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .augment import insert_event
from .preprocess import REFLECTANCE_MAX, normalize
from .series import TileSeries


@dataclass(frozen=True)
class GenConfig:
    tile_size: int = 32
    n_frames: int = 4
    event_probability: float = 0.7
    noise: float = 0.01
    min_blob_fraction: float = 0.06
    max_blob_fraction: float = 0.25
    smoothness: float = 4.0


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo + 1e-12)


def terrain_dn(rng: np.random.Generator, size: int, smoothness: float) -> np.ndarray:
    """Band-correlated land surface in digital numbers (0..10000)."""
    veg = _smooth_field(rng, (size, size), smoothness)
    soil = _smooth_field(rng, (size, size), smoothness * 1.5)
    bands = np.stack([
        500 + 500 * soil + 150 * veg,      # B02
        700 + 600 * soil + 300 * veg,      # B03
        600 + 1200 * soil - 200 * veg,     # B04
        2400 + 2200 * veg + 400 * soil,    # B08
        1800 + 1200 * soil + 600 * veg,    # B11
        1100 + 1300 * soil + 200 * veg,    # B12
    ])
    return bands.astype(np.float32)


def water_dn(rng: np.random.Generator, size: int) -> np.ndarray:
    """Flood-water signature: visible bands raised, B08/B11/B12 pushed to 200..800 DN."""
    tex = _smooth_field(rng, (size, size), 2.0)
    bands = np.stack([
        1100 + 300 * tex,
        1250 + 300 * tex,
        900 + 200 * tex,
        200 + 600 * tex,
        200 + 500 * tex,
        200 + 400 * tex,
    ])
    return bands.astype(np.float32)


def grow_blob(rng: np.random.Generator, shape: tuple, n_pixels: int,
              blocked: np.ndarray | None = None) -> np.ndarray:
    """A 4-connected region of exactly ``n_pixels`` pixels (fewer only if space runs out).

    Grows from a random free seed, always absorbing the frontier pixel with the
    lowest value of a smooth random priority field.
    """
    H, W = shape
    blocked = np.zeros(shape, bool) if blocked is None else blocked.astype(bool)
    free = np.flatnonzero(~blocked)
    region = np.zeros(shape, bool)
    if n_pixels <= 0 or free.size == 0:
        return region
    priority = gaussian_filter(rng.standard_normal(shape), sigma=2.0)
    seed = int(free[rng.integers(free.size)])
    heap = [(priority.flat[seed], seed)]
    queued = {seed}
    count = 0
    while heap and count < n_pixels:
        _, idx = heapq.heappop(heap)
        r, c = divmod(idx, W)
        region[r, c] = True
        count += 1
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr < H and 0 <= cc < W:
                j = rr * W + cc
                if j not in queued and not blocked[rr, cc]:
                    queued.add(j)
                    heapq.heappush(heap, (priority[rr, cc], j))
    return region


def synth_series(gen: GenConfig, seed: int, tile_key: str | None = None) -> TileSeries:
    """Deterministic per ``seed``. Events may start at any pre frame after the first and at the post frame."""
    rng = np.random.default_rng(seed)
    size, n = gen.tile_size, gen.n_frames
    base = terrain_dn(rng, size, gen.smoothness)
    clean = TileSeries(np.repeat(base[None], n, axis=0), base.copy(), [], tile_key or f"tile_{seed:06d}")
    area = size * size
    flooded = np.zeros((size, size), bool)
    for step in range(1, n + 1):
        if rng.random() >= gen.event_probability:
            continue
        frac = rng.uniform(gen.min_blob_fraction, gen.max_blob_fraction)
        region = grow_blob(rng, (size, size), int(round(frac * area)), blocked=flooded)
        if not region.any():
            continue
        flooded |= region
        clean = insert_event(clean, water_dn(rng, size), region, step)
    return add_sensor_noise(clean, rng, gen.noise)


def add_sensor_noise(series: TileSeries, rng: np.random.Generator, noise: float) -> TileSeries:
    """Per-frame gain drift (+-3%) and Gaussian noise, then normalization to [0, 1]."""
    def acquire(dn):
        gain = rng.uniform(0.97, 1.03)
        noisy = dn * gain + rng.normal(0.0, noise * REFLECTANCE_MAX, size=dn.shape)
        return normalize(noisy)

    frames = np.stack([acquire(f) for f in series.frames])
    return series.with_frames(frames, acquire(series.post), list(series.events))


def synth_dataset(gen: GenConfig, count: int, seed: int) -> list:
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=count)
    return [synth_series(gen, int(s), tile_key=f"tile_{seed}_{i:05d}") for i, s in enumerate(seeds)]
