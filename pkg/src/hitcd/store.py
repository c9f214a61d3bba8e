"""Tile-keyed persistent History Embedding store and the memory-footprint model.

Record file (little-endian): ``HES1``, u16 version (1), u16 key length, UTF-8
key, 8-byte config hash, u32 r, u32 d, u64 timestamp, u64 step count, then
r*r*d f32 values. One record file per tile key; ``MANIFEST`` holds the config
hash and the record count.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .hit import HistoryEmbedding

MAGIC = b"HES1"
VERSION = 1
_FIXED = struct.Struct("<IIQQ")

RAW_TILE_BYTES = 256 * 256 * 6 * 4
TILE_AREA_KM2 = 6.5536  # 256 px * 10 m per side
EUROPE_KM2 = 5_177_344  # Europe without Russia
WORLD_LAND_KM2 = 148_940_000


class StoreError(Exception):
    pass


class RecordNotFound(StoreError, KeyError):
    pass


class IntegrityError(StoreError):
    pass


class ConfigMismatch(StoreError):
    pass


def encode_record(he: HistoryEmbedding) -> bytes:
    key = he.tile_key.encode("utf-8")
    if len(key) > 0xFFFF:
        raise StoreError("tile key too long")
    return b"".join([
        MAGIC,
        struct.pack("<HH", VERSION, len(key)),
        key,
        bytes(he.config_hash),
        _FIXED.pack(he.grid, he.dim, he.timestamp, he.step_count),
        np.ascontiguousarray(he.values, dtype="<f4").tobytes(),
    ])


def decode_record(buf: bytes) -> HistoryEmbedding:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise IntegrityError("bad record magic")
    version, klen = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise IntegrityError(f"unsupported record version {version}")
    off = 8
    if len(buf) < off + klen + 8 + _FIXED.size:
        raise IntegrityError("truncated record header")
    key = buf[off:off + klen].decode("utf-8")
    off += klen
    chash = buf[off:off + 8]
    off += 8
    r, d, ts, steps = _FIXED.unpack_from(buf, off)
    off += _FIXED.size
    if len(buf) - off != 4 * r * r * d:
        raise IntegrityError(f"record {key!r}: payload is {len(buf) - off} bytes, expected {4 * r * r * d}")
    values = np.frombuffer(buf, dtype="<f4", offset=off).reshape(r * r, d).astype(np.float32)
    return HistoryEmbedding(r, d, values, key, chash, timestamp=ts, step_count=steps)


def _record_name(key: str) -> str:
    return key.encode("utf-8").hex() + ".hes"


class HEStore:
    """Directory-backed store. Puts are atomic (temp file, fsync, rename).

    Writes to the same key must be serialized by the caller; distinct keys and
    all reads are safe to run concurrently.
    """

    def __init__(self, directory, config_hash: bytes | None = None, durable: bool = True):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.durable = durable
        manifest = self.dir / "MANIFEST"
        stored = None
        if manifest.exists():
            fields = dict(line.split("=", 1) for line in manifest.read_text().split() if "=" in line)
            stored = bytes.fromhex(fields["config_hash"]) if fields.get("config_hash") else None
        if config_hash is not None and stored is not None and stored != config_hash:
            raise ConfigMismatch(f"store holds config {stored.hex()}, caller expects {config_hash.hex()}")
        self.config_hash = config_hash if config_hash is not None else stored
        self._write_manifest()

    def _path(self, key: str) -> Path:
        return self.dir / _record_name(key)

    def _write_manifest(self) -> None:
        text = f"config_hash={self.config_hash.hex() if self.config_hash else ''}\ncount={len(self)}\n"
        self._atomic_write(self.dir / "MANIFEST", text.encode("ascii"))

    def _atomic_write(self, path: Path, data: bytes) -> None:
        tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
        try:
            with open(tmp, "wb") as fh:
                fh.write(data)
                if self.durable:
                    fh.flush()
                    os.fsync(fh.fileno())
            os.replace(tmp, path)
        finally:
            if tmp.exists():
                tmp.unlink()

    def put(self, key: str, he: HistoryEmbedding) -> None:
        if he.tile_key != key:
            he = HistoryEmbedding(he.grid, he.dim, he.values, key, he.config_hash, he.timestamp, he.step_count)
        if self.config_hash is None:
            self.config_hash = bytes(he.config_hash)
            self._write_manifest()
        elif he.config_hash != self.config_hash:
            raise ConfigMismatch(f"embedding hash {he.config_hash.hex()} != store hash {self.config_hash.hex()}")
        self._atomic_write(self._path(key), encode_record(he))

    def get(self, key: str) -> HistoryEmbedding:
        path = self._path(key)
        try:
            buf = path.read_bytes()
        except FileNotFoundError:
            raise RecordNotFound(key) from None
        he = decode_record(buf)
        if he.tile_key != key:
            raise IntegrityError(f"record file for {key!r} holds key {he.tile_key!r}")
        return he

    def fork(self, key: str) -> HistoryEmbedding:
        return self.get(key).copy()

    def __contains__(self, key: str) -> bool:
        return self._path(key).exists()

    def keys(self) -> list:
        return sorted(bytes.fromhex(p.stem).decode("utf-8") for p in self.dir.glob("*.hes"))

    def __len__(self) -> int:
        return sum(1 for _ in self.dir.glob("*.hes"))

    def flush(self) -> None:
        self._write_manifest()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.flush()


def store_put(store: HEStore, key: str, he: HistoryEmbedding) -> None:
    store.put(key, he)


def store_get(store: HEStore, key: str) -> HistoryEmbedding:
    return store.get(key)


def store_fork(store: HEStore, key: str) -> HistoryEmbedding:
    return store.fork(key)


# ----------------------------------------------------------------- footprint

@dataclass(frozen=True)
class FootprintReport:
    dim: int
    tokens: int
    bytes_per_tile: int
    percent_of_image: float
    europe_total_bytes: int
    world_total_bytes: int

    @property
    def savings_percent(self) -> float:
        return 100.0 - self.percent_of_image

    def row(self) -> str:
        return (f"{format_percent(self.percent_of_image)} | {format_bytes(self.europe_total_bytes)} | "
                f"{format_bytes(self.world_total_bytes)}")


def tiles_for_area(area_km2: float) -> int:
    return math.ceil(area_km2 / TILE_AREA_KM2)


def footprint(dim: int, tokens: int) -> FootprintReport:
    if dim < 1 or tokens < 1:
        raise ValueError("dim and tokens must be >= 1")
    per_tile = 4 * dim * tokens
    return FootprintReport(
        dim=dim,
        tokens=tokens,
        bytes_per_tile=per_tile,
        percent_of_image=100.0 * per_tile / RAW_TILE_BYTES,
        europe_total_bytes=tiles_for_area(EUROPE_KM2) * per_tile,
        world_total_bytes=tiles_for_area(WORLD_LAND_KM2) * per_tile,
    )


def format_percent(p: float) -> str:
    # half-up, so 7.8125 prints as 7.813
    text = str(Decimal(repr(p)).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))
    text = text.rstrip("0").rstrip(".")
    return f"{text}%"


def format_bytes(n: int) -> str:
    """Decimal units, two decimals: GB below 1000 GB, TB above."""
    gb = n / 1e9
    if gb >= 1000:
        return f"{n / 1e12:.2f} TB"
    return f"{gb:.2f} GB"


# (dim, tokens) rows of the reference memory table
TABLE_ROWS = [(192, 256), (192, 64), (192, 16), (192, 4), (168, 256), (120, 256), (72, 256), (24, 256),
              (8, 256), (24, 64)]
