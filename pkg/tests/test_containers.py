import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentcut.containers import (
    ContainerError,
    load_bundle,
    load_tensor,
    save_bundle,
    save_tensor,
)


def test_tensor_round_trip_with_tags(tmp_path):
    p = tmp_path / "t.eyts"
    a = np.linspace(-1, 1, 24).reshape(2, 3, 4)
    save_tensor(p, a, tags={"rate_hz": 50.0, "kind": "features"})
    b, tags = load_tensor(p)
    assert b.tobytes() == a.tobytes()
    assert b.shape == a.shape and b.dtype == np.float64
    assert tags == {"rate_hz": 50.0, "kind": "features"}


def test_tensor_f32_round_trip(tmp_path):
    p = tmp_path / "t.eyts"
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    save_tensor(p, a)
    b, tags = load_tensor(p)
    assert b.dtype == np.float32 and np.array_equal(a, b)
    assert tags == {}


def test_layout_is_pinned(tmp_path):
    # magic, u64 LE header length, JSON header, little-endian payload
    p = tmp_path / "t.eyts"
    save_tensor(p, np.array([1.0, -2.0]))
    raw = p.read_bytes()
    assert raw[:4] == b"EYTS"
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen])
    assert header["dtype"] == "f64" and header["shape"] == [2]
    assert raw[12 + hlen:] == struct.pack("<d", 1.0) + struct.pack("<d", -2.0)


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(ContainerError, match="magic"):
        load_tensor(p)


def test_truncated_payload_rejected(tmp_path):
    p = tmp_path / "t.eyts"
    save_tensor(p, np.zeros((4, 4)))
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(ContainerError, match="payload"):
        load_tensor(p)


def test_integer_arrays_rejected(tmp_path):
    with pytest.raises(ContainerError, match="dtype"):
        save_tensor(tmp_path / "t.eyts", np.arange(3))


@pytest.fixture(scope="module")
def prop_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("roundtrip")


@settings(max_examples=40, deadline=None)
@given(
    shape=st.lists(st.integers(0, 5), min_size=0, max_size=4),
    f32=st.booleans(),
    data=st.data(),
)
def test_round_trip_property(prop_dir, shape, f32, data):
    n = int(np.prod(shape, dtype=np.int64)) if shape else 1
    values = data.draw(
        st.lists(
            st.floats(allow_nan=False, allow_infinity=False, width=32),
            min_size=n,
            max_size=n,
        )
    )
    dt = np.float32 if f32 else np.float64
    a = np.array(values, dtype=dt).reshape(shape)
    p = prop_dir / "prop.eyts"
    save_tensor(p, a, tags={"i": 1})
    b, tags = load_tensor(p)
    assert b.tobytes() == a.tobytes() and b.shape == a.shape and b.dtype == dt


def test_bundle_round_trip_with_rng_state(tmp_path):
    rng = np.random.default_rng(3)
    rng.standard_normal(17)
    arrays = {
        "param/w": rng.standard_normal((3, 5)),
        "adam_m/param/w": np.zeros((3, 5)),
        "scalar": np.array(2.5),
        "empty": np.zeros((0, 7)),
    }
    meta = {
        "stage": 1,
        "step": 42,
        "rng_state": rng.bit_generator.state,
        "arch": {"dim": 128, "blocks": 4},
    }
    p = tmp_path / "c.eyck"
    save_bundle(p, meta, arrays)
    meta2, arrays2 = load_bundle(p)
    assert meta2 == meta
    assert set(arrays2) == set(arrays)
    for k in arrays:
        assert arrays2[k].tobytes() == np.asarray(arrays[k]).tobytes()
        assert arrays2[k].shape == np.asarray(arrays[k]).shape
    # restored state drives an identical stream
    r2 = np.random.default_rng()
    r2.bit_generator.state = meta2["rng_state"]
    assert np.array_equal(r2.standard_normal(9), rng.standard_normal(9))


def test_bundle_rejects_corrupt_entry_table(tmp_path):
    p = tmp_path / "c.eyck"
    save_bundle(p, {}, {"a": np.ones(4)})
    raw = bytearray(p.read_bytes())
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen].decode())
    header["entries"][0]["length"] = 9999
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    p.write_bytes(b"EYCK" + struct.pack("<Q", len(blob)) + blob + bytes(raw[12 + hlen:]))
    with pytest.raises(ContainerError):
        load_bundle(p)


def test_bundle_and_tensor_magics_do_not_cross(tmp_path):
    p = tmp_path / "x"
    save_bundle(p, {}, {})
    with pytest.raises(ContainerError, match="magic"):
        load_tensor(p)
