import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hitcd import store as store_mod
from hitcd.hit import HistoryEmbedding
from hitcd.store import (TABLE_ROWS, ConfigMismatch, HEStore, IntegrityError, RecordNotFound, decode_record,
                         encode_record, footprint, store_fork, store_get, store_put)

HASH = b"abcdefgh"


def _he(key="t", r=8, d=24, seed=0, steps=3):
    values = np.random.default_rng(seed).standard_normal((r * r, d)).astype(np.float32)
    return HistoryEmbedding(r, d, values, key, HASH, timestamp=1_700_000_000, step_count=steps)


def test_put_get_bit_exact(tmp_path):
    s = HEStore(tmp_path, HASH)
    he = _he()
    store_put(s, "t", he)
    back = store_get(s, "t")
    assert back.values.tobytes() == he.values.tobytes()
    assert (back.grid, back.dim, back.timestamp, back.step_count, back.config_hash) == (8, 24, he.timestamp, 3, HASH)


def test_get_missing_key(tmp_path):
    with pytest.raises(RecordNotFound):
        HEStore(tmp_path).get("nope")
    with pytest.raises(RecordNotFound):
        HEStore(tmp_path).fork("nope")


def test_ten_thousand_keys_survive_reopen(tmp_path):
    s = HEStore(tmp_path, HASH, durable=False)
    he = _he(r=1, d=2)
    keys = [f"tile/{i:05d}" for i in range(10_000)]
    for k in keys:
        s.put(k, he)
    s.flush()
    reopened = HEStore(tmp_path, HASH)
    assert len(reopened) == 10_000 and reopened.keys() == sorted(keys)
    assert all(reopened.get(k).tile_key == k for k in keys[::997])


def test_fork_isolation_and_copy_semantics(tmp_path):
    s = HEStore(tmp_path, HASH)
    s.put("t", _he())
    fork = store_fork(s, "t")
    fork2 = fork.copy()
    fork.values[:] = 0
    fork2.values[:] = 7
    original = s.get("t")
    np.testing.assert_array_equal(original.values, _he().values)
    assert not fork.values.any() and np.all(fork2.values == 7)
    assert (fork2.step_count, fork2.timestamp) == (original.step_count, original.timestamp)


def test_interrupted_put_keeps_previous_record(tmp_path, monkeypatch):
    s = HEStore(tmp_path, HASH)
    s.put("t", _he(seed=1))

    def crash(*args, **kwargs):
        raise OSError("simulated power loss")

    monkeypatch.setattr(store_mod.os, "replace", crash)
    with pytest.raises(OSError):
        s.put("t", _he(seed=2))
    monkeypatch.undo()
    assert s.get("t").values.tobytes() == _he(seed=1).values.tobytes()
    assert not [p for p in os.listdir(tmp_path) if p.endswith(".tmp")]


def test_corrupted_records_are_integrity_errors(tmp_path):
    s = HEStore(tmp_path, HASH)
    s.put("t", _he())
    path = s._path("t")
    buf = path.read_bytes()
    path.write_bytes(buf[:-4])
    with pytest.raises(IntegrityError):
        s.get("t")
    path.write_bytes(b"NOPE" + buf[4:])
    with pytest.raises(IntegrityError):
        s.get("t")


def test_config_hash_mismatch(tmp_path):
    HEStore(tmp_path, HASH).put("t", _he())
    with pytest.raises(ConfigMismatch):
        HEStore(tmp_path, b"zzzzzzzz")
    other = _he()
    other.config_hash = b"zzzzzzzz"
    with pytest.raises(ConfigMismatch):
        HEStore(tmp_path).put("u", other)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(TABLE_ROWS), st.integers(0, 2**32 - 1), st.text(min_size=1, max_size=20))
def test_record_round_trip_for_table_configs(row, seed, key):
    d, tokens = row
    r = int(np.sqrt(tokens))
    he = _he(key, r=r, d=d, seed=seed)
    back = decode_record(encode_record(he))
    assert back.values.tobytes() == he.values.tobytes() and back.tile_key == key


# (dim, tokens) -> percent, Europe, World as printed in the reference table
TABLE = {
    (192, 256): ("12.5%", "155.32 GB", "4.47 TB"),
    (192, 64): ("3.125%", "38.83 GB", "1.12 TB"),
    (192, 16): ("0.781%", "9.71 GB", "279.26 GB"),
    (192, 4): ("0.195%", "2.43 GB", "69.82 GB"),
    (168, 256): ("10.938%", "135.91 GB", "3.91 TB"),
    (120, 256): ("7.813%", "97.08 GB", "2.79 TB"),
    (72, 256): ("4.688%", "58.25 GB", "1.68 TB"),
    (24, 256): ("1.563%", "19.42 GB", "558.53 GB"),
    (8, 256): ("0.521%", "6.47 GB", "186.18 GB"),
    (24, 64): ("0.391%", "4.85 GB", "139.63 GB"),
}


def _num(text):
    v, unit = text.split()
    return float(v) * (1e12 if unit == "TB" else 1e9)


@pytest.mark.parametrize("row", TABLE_ROWS)
def test_footprint_rows_within_half_percent(row):
    rep = footprint(*row)
    pct, eu, world = TABLE[row]
    assert rep.percent_of_image == pytest.approx(float(pct[:-1]), rel=5e-3)
    assert rep.europe_total_bytes == pytest.approx(_num(eu), rel=5e-3)
    assert rep.world_total_bytes == pytest.approx(_num(world), rel=5e-3)
    assert rep.row() == " | ".join(TABLE[row])


def test_footprint_headline_numbers():
    assert footprint(192, 256).percent_of_image == 12.5
    rep = footprint(24, 64)
    assert rep.bytes_per_tile == 6144
    assert round(rep.savings_percent, 2) == 99.61
    with pytest.raises(ValueError):
        footprint(0, 4)
