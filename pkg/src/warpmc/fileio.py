"""Binary container shared by trajectory, chain and checkpoint files.

Layout::

    8 bytes   magic  b"WARPMC\\x00\\x01"
    8 bytes   header length H, unsigned little-endian
    H bytes   UTF-8 JSON header: {"format_version", "kind", "meta", "arrays": [...]}
    payload   each array in header order, C-contiguous, dtype as declared

Every array entry in the header is ``{"name", "dtype", "shape"}``; floats are
always stored as little-endian float64 (``<f8``).
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"WARPMC\x00\x01"
CONTAINER_VERSION = 1
_ALLOWED = {"<f8", "<i8", "|u1"}


class FormatError(ValueError):
    pass


def _normalise(arr) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype.kind == "f":
        return np.ascontiguousarray(a, dtype="<f8")
    if a.dtype.kind == "b":
        return np.ascontiguousarray(a, dtype="|u1")
    if a.dtype.kind in "iu":
        return np.ascontiguousarray(a, dtype="<i8")
    raise FormatError(f"unsupported dtype {a.dtype}")


def write_container(path, kind: str, meta: dict, arrays: dict) -> str:
    """Write arrays + metadata; returns the sha256 of the file contents."""
    entries, blobs = [], []
    for name, arr in arrays.items():
        a = _normalise(arr)
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        blobs.append(a.tobytes(order="C"))
    header = json.dumps(
        {"format_version": CONTAINER_VERSION, "kind": kind, "meta": meta, "arrays": entries},
        sort_keys=True,
    ).encode()
    data = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def read_container(path, kind: str | None = None) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a warpmc container")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode())
    if header.get("format_version") != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported container version {header.get('format_version')}")
    if kind is not None and header["kind"] != kind:
        raise FormatError(f"{path}: expected a {kind!r} file, found {header['kind']!r}")
    offset = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        if entry["dtype"] not in _ALLOWED:
            raise FormatError(f"{path}: bad dtype {entry['dtype']}")
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=dt).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: trailing bytes after payload")
    return header["meta"], arrays


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
