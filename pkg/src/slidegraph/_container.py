"""Versioned binary container used by checkpoints, feature stores, patch sets
and graph files.

Layout (all integers little-endian):

    bytes 0..3    magic ``b"SGF1"``
    bytes 4..7    uint32 container version (currently 1)
    bytes 8..15   uint64 header length in bytes
    header        UTF-8 JSON object::

                      {"kind": str, "meta": {...},
                       "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}]}

    payload       raw array blocks, row-major, at the stated offsets
                  (relative to the end of the header)

Array dtypes are restricted to little-endian float64 (``<f8``), int64
(``<i8``) and raw bytes (``|u1``) so files round-trip bit-exactly across
platforms. Header JSON is serialized with sorted keys, which makes a
write/read/write cycle byte-identical.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"SGF1"
VERSION = 1

_ALLOWED_DTYPES = {"<f8", "<i8", "|u1"}


class ContainerError(RuntimeError):
    """Malformed container file."""


class ContainerVersionError(ContainerError):
    """Container was written with an unsupported format version."""


def _canonical_dtype(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "<f8"
    if arr.dtype == np.int64:
        return "<i8"
    if arr.dtype == np.uint8:
        return "|u1"
    raise ContainerError(f"unsupported array dtype {arr.dtype}; use f8, i8 or u1")


def write_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    blocks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = _canonical_dtype(arr)
        block = arr.astype(np.dtype(dtype), copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(block),
            }
        )
        blocks.append(block)
        offset += len(block)
    header = json.dumps(
        {"kind": kind, "meta": meta, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(VERSION.to_bytes(4, "little"))
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for block in blocks:
            fh.write(block)


def read_container(path, expect_kind: str | None = None):
    """Return ``(kind, meta, arrays)`` from a container file."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ContainerError(f"{path}: not a slidegraph container (bad magic)")
        version = int.from_bytes(fh.read(4), "little")
        if version != VERSION:
            raise ContainerVersionError(
                f"{path}: container version {version} is not supported "
                f"(this build reads version {VERSION})"
            )
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(f"{path}: expected a '{expect_kind}' file, found '{kind}'")
    arrays = {}
    for entry in header["arrays"]:
        dtype = entry["dtype"]
        if dtype not in _ALLOWED_DTYPES:
            raise ContainerError(f"{path}: illegal dtype {dtype!r} in header")
        start, nbytes = entry["offset"], entry["nbytes"]
        raw = payload[start : start + nbytes]
        if len(raw) != nbytes:
            raise ContainerError(f"{path}: truncated payload for array {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(dtype)).reshape(entry["shape"]).copy()
        arrays[entry["name"]] = arr
    return kind, header["meta"], arrays
