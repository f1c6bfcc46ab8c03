"""Binary tensor and checkpoint containers.

Two sibling formats share one layout: 4 magic bytes, a little-endian u64
header length, a UTF-8 JSON header, then raw payload bytes.

``EYTS`` holds a single tensor (header: dtype, shape, free-form tags;
payload: flat little-endian values, C order). ``EYCK`` holds a named
bundle of tensors plus arbitrary JSON metadata (header: meta and an entry
table with per-tensor dtype/shape/offset; payload: concatenated tensors).
Checkpoints, with their parameters, optimizer moments, and generator
state, are bundles.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"EYTS"
BUNDLE_MAGIC = b"EYCK"
SCHEMA_VERSION = 1

_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}


class ContainerError(ValueError):
    pass


def _dtype_name(array: np.ndarray) -> str:
    for name, dt in _DTYPES.items():
        if array.dtype == dt or array.dtype == dt.newbyteorder("="):
            return name
    raise ContainerError(f"unsupported dtype {array.dtype}; use float64 or float32")


def _encode(magic: bytes, header: dict, payload: bytes) -> bytes:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<Q", len(blob)) + blob + payload


def _decode(data: bytes, magic: bytes) -> tuple[dict, bytes]:
    if len(data) < 12 or data[:4] != magic:
        raise ContainerError(
            f"bad magic {data[:4]!r}, expected {magic!r}"
        )
    (header_len,) = struct.unpack("<Q", data[4:12])
    if len(data) < 12 + header_len:
        raise ContainerError("truncated header")
    try:
        header = json.loads(data[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header: {exc}") from exc
    return header, data[12 + header_len:]


def save_tensor(path: str | Path, array: np.ndarray, tags: dict | None = None) -> None:
    array = np.asarray(array)
    name = _dtype_name(array)
    header = {
        "schema_version": SCHEMA_VERSION,
        "dtype": name,
        "shape": list(array.shape),
        "tags": tags or {},
    }
    payload = np.ascontiguousarray(array, dtype=_DTYPES[name]).tobytes()
    Path(path).write_bytes(_encode(TENSOR_MAGIC, header, payload))


def load_tensor(path: str | Path) -> tuple[np.ndarray, dict]:
    header, payload = _decode(Path(path).read_bytes(), TENSOR_MAGIC)
    if header.get("dtype") not in _DTYPES:
        raise ContainerError(f"unknown dtype {header.get('dtype')!r}")
    dt = _DTYPES[header["dtype"]]
    shape = tuple(header["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(payload) != expected:
        raise ContainerError(
            f"payload is {len(payload)} bytes, shape {shape} needs {expected}"
        )
    array = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    return array, header.get("tags", {})


def save_bundle(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Named tensors + JSON metadata in one file. ``meta`` must be JSON-safe."""
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        array = np.asarray(arrays[name])
        dname = _dtype_name(array)
        raw = np.ascontiguousarray(array, dtype=_DTYPES[dname]).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dname,
                "shape": list(array.shape),
                "offset": offset,
                "length": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = {"schema_version": SCHEMA_VERSION, "meta": meta, "entries": entries}
    Path(path).write_bytes(_encode(BUNDLE_MAGIC, header, b"".join(chunks)))


def load_bundle(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    header, payload = _decode(Path(path).read_bytes(), BUNDLE_MAGIC)
    arrays = {}
    for entry in header.get("entries", []):
        dt = _DTYPES.get(entry.get("dtype"))
        if dt is None:
            raise ContainerError(f"unknown dtype in entry {entry.get('name')!r}")
        start, length = entry["offset"], entry["length"]
        if start + length > len(payload):
            raise ContainerError(f"entry {entry['name']!r} overruns the payload")
        shape = tuple(entry["shape"])
        if int(np.prod(shape, dtype=np.int64)) * dt.itemsize != length:
            raise ContainerError(f"entry {entry['name']!r} length/shape mismatch")
        arrays[entry["name"]] = (
            np.frombuffer(payload[start:start + length], dtype=dt).reshape(shape).copy()
        )
    return header.get("meta", {}), arrays
