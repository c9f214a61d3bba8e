"""Band selection, min-max normalization and tiling."""
from __future__ import annotations

import numpy as np

REFLECTANCE_MAX = 10_000.0
TILE = 256

# Sentinel-2 L1C/L2A band order as distributed
S2_BANDS = ("B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B10", "B11", "B12")
SELECTED = ("B02", "B03", "B04", "B08", "B11", "B12")


def select_bands(raw: np.ndarray, names=S2_BANDS) -> np.ndarray:
    """Pick the six model bands, in model order, from a (C,H,W) stack labelled by ``names``."""
    index = {n: i for i, n in enumerate(names)}
    missing = [b for b in SELECTED if b not in index]
    if missing:
        raise ValueError(f"missing bands {missing}")
    return np.asarray(raw)[[index[b] for b in SELECTED]]


def normalize(raw: np.ndarray) -> np.ndarray:
    """Clamp to [0, 10000] and scale to [0, 1]."""
    raw = np.asarray(raw, dtype=np.float32)
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw values must be finite")
    return np.clip(raw, 0.0, REFLECTANCE_MAX) / np.float32(REFLECTANCE_MAX)


def cut_tiles(scene: np.ndarray, tile: int = TILE) -> list:
    """Non-overlapping row-major tiles; partial tiles at the right/bottom edges are dropped."""
    scene = np.asarray(scene)
    H, W = scene.shape[-2:]
    if H < tile or W < tile:
        raise ValueError(f"scene {H}x{W} smaller than one {tile}x{tile} tile")
    return [scene[..., r * tile:(r + 1) * tile, c * tile:(c + 1) * tile].copy()
            for r in range(H // tile) for c in range(W // tile)]
