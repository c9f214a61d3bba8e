"""Tile series with event bookkeeping, batching, and the on-disk series layout."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import config as cfgfile
from .raster import read_raster, write_raster

BANDS = ("B02", "B03", "B04", "B08", "B11", "B12")


@dataclass(frozen=True)
class EventMap:
    """A persistent change first visible in frame ``step`` (0-based; ``n`` is the post frame)."""

    step: int
    region: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "region", np.asarray(self.region, dtype=bool))


@dataclass
class TileSeries:
    frames: np.ndarray
    post: np.ndarray
    events: list = field(default_factory=list)
    tile_key: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.post = np.asarray(self.post, dtype=np.float32)
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be (n, C, H, W), got {self.frames.shape}")
        if self.post.shape != self.frames.shape[1:]:
            raise ValueError(f"post frame shape {self.post.shape} != frame shape {self.frames.shape[1:]}")
        for ev in self.events:
            if not 0 <= ev.step <= self.n:
                raise ValueError(f"event step {ev.step} outside [0, {self.n}]")
            if ev.region.shape != self.spatial:
                raise ValueError("event region must match the frame size")

    @property
    def n(self) -> int:
        return self.frames.shape[0]

    @property
    def spatial(self) -> tuple:
        return self.frames.shape[2:]

    def frame(self, i: int) -> np.ndarray:
        """Frame ``i``; index ``n`` is the post frame."""
        return self.post if i == self.n else self.frames[i]

    def mask(self, i: int, j: int) -> np.ndarray:
        """Change between frames i and j (i <= j): union of events with i < step <= j."""
        if not 0 <= i <= j <= self.n:
            raise ValueError(f"bad frame pair ({i}, {j}) for a series of {self.n} + post")
        out = np.zeros(self.spatial, dtype=bool)
        for ev in self.events:
            if i < ev.step <= j:
                out |= ev.region
        return out.astype(np.uint8)[None]

    def step_mask(self, t: int) -> np.ndarray:
        # the first frame has nothing before it, so its target is all zeros
        return self.mask(max(t - 1, 0), t)

    def post_mask(self, i: int) -> np.ndarray:
        return self.mask(i, self.n)

    def with_frames(self, frames=None, post=None, events=None) -> "TileSeries":
        return replace(self,
                       frames=self.frames.copy() if frames is None else frames,
                       post=self.post.copy() if post is None else post,
                       events=list(self.events) if events is None else events)


@dataclass
class SeriesBatch:
    frames: np.ndarray
    step_masks: np.ndarray
    post: np.ndarray
    post_masks: np.ndarray

    def __len__(self):
        return self.frames.shape[0]


def collate(series: list) -> SeriesBatch:
    if not series:
        raise ValueError("cannot collate an empty batch")
    n = series[0].n
    if any(s.n != n for s in series):
        raise ValueError("all series in a batch must have the same length")
    return SeriesBatch(
        frames=np.stack([s.frames for s in series]),
        step_masks=np.stack([np.stack([s.step_mask(t) for t in range(n)]) for s in series]).astype(np.float32),
        post=np.stack([s.post for s in series]),
        post_masks=np.stack([np.stack([s.post_mask(t) for t in range(n)]) for s in series]).astype(np.float32),
    )


# ---------------------------------------------------------------- disk layout

def write_series(directory, series: TileSeries) -> Path:
    """frame_000.hitr ... post.hitr, event_000.hitr ..., events.txt."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i in range(series.n):
        write_raster(d / f"frame_{i:03d}.hitr", series.frames[i])
    write_raster(d / "post.hitr", series.post)
    manifest = {"tile_key": series.tile_key, "frames": series.n, "events": len(series.events)}
    for k, ev in enumerate(series.events):
        name = f"event_{k:03d}.hitr"
        write_raster(d / name, ev.region.astype(np.uint8)[None])
        manifest[f"event.{k}.step"] = ev.step
        manifest[f"event.{k}.mask"] = name
    cfgfile.dump(d / "events.txt", manifest)
    return d


def read_series(directory) -> TileSeries:
    d = Path(directory)
    manifest = cfgfile.load(d / "events.txt")
    n = int(manifest["frames"])
    frames = np.stack([read_raster(d / f"frame_{i:03d}.hitr") for i in range(n)])
    post = read_raster(d / "post.hitr")
    events = []
    for k in range(int(manifest.get("events", 0))):
        region = read_raster(d / str(manifest[f"event.{k}.mask"]))[0] > 0
        events.append(EventMap(int(manifest[f"event.{k}.step"]), region))
    key = manifest.get("tile_key")
    return TileSeries(frames, post, events, "" if key is None else str(key))


def write_dataset(directory, series_list: list) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(series_list):
        write_series(d / f"series_{i:05d}", s)
    return d


def read_dataset(directory) -> list:
    d = Path(directory)
    return [read_series(p) for p in sorted(d.glob("series_*")) if p.is_dir()]


def dataset_hash(series_list: list) -> str:
    h = hashlib.sha256()
    for s in series_list:
        h.update(s.tile_key.encode("utf-8"))
        h.update(np.ascontiguousarray(s.frames).tobytes())
        h.update(np.ascontiguousarray(s.post).tobytes())
        for ev in s.events:
            h.update(int(ev.step).to_bytes(4, "little"))
            h.update(np.packbits(ev.region).tobytes())
    return h.hexdigest()[:16]
