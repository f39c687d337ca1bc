"""Flat binary tensor container: JSON header + little-endian blob.

Layout: 10-byte magic "BLINKCKPT1", uint64-LE header length, UTF-8 JSON header
mapping tensor name -> {dtype, shape, offset}, then the raw tensor bytes.
Offsets are relative to the end of the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BLINKCKPT1"


class CheckpointFormatError(ValueError):
    """Corrupt or truncated checkpoint file."""


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    header: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        header[name] = {
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
        }
        blobs.append(raw)
        offset += len(raw)
    payload = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointFormatError(
                f"{path}: bad magic {magic!r} at byte 0, expected {MAGIC!r}"
            )
        size_raw = fh.read(8)
        if len(size_raw) != 8:
            raise CheckpointFormatError(
                f"{path}: truncated header length at byte {len(MAGIC)}"
            )
        (hsize,) = struct.unpack("<Q", size_raw)
        payload = fh.read(hsize)
        if len(payload) != hsize:
            raise CheckpointFormatError(
                f"{path}: truncated JSON header at byte {len(MAGIC) + 8}"
            )
        try:
            header = json.loads(payload)
        except json.JSONDecodeError as exc:
            raise CheckpointFormatError(
                f"{path}: invalid JSON header at byte {len(MAGIC) + 8}: {exc}"
            ) from exc
        blob = fh.read()
    out: dict[str, np.ndarray] = {}
    for name, meta in header.items():
        dtype = np.dtype(meta["dtype"])
        shape = tuple(meta["shape"])
        start = meta["offset"]
        nbytes = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
        end = start + nbytes
        if end > len(blob):
            raise CheckpointFormatError(
                f"{path}: tensor {name!r} extends past end of blob (byte {end} > {len(blob)})"
            )
        out[name] = np.frombuffer(blob[start:end], dtype=dtype).reshape(shape).copy()
    return out
