"""Writer/reader for the `.csmw` weight interchange format.

Layout: little-endian uint64 header length, UTF-8 JSON header with
{"format", "version", "metadata", "tensors": [{name, shape, dtype,
offset}], "checksum"}, then the raw float32 little-endian payload in
manifest order. The checksum is the SHA-256 hex digest of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_NAME = "csmw"
FORMAT_VERSION = 1


def write_csmw(path: str | Path, metadata: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    names = sorted(tensors)
    manifest = []
    chunks = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset}
        )
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "metadata": dict(metadata),
        "tensors": manifest,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def read_csmw(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    (header_len,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    if header.get("format") != FORMAT_NAME:
        raise ValueError(f"not a {FORMAT_NAME} file")
    payload = raw[8 + header_len :]
    if hashlib.sha256(payload).hexdigest() != header.get("checksum"):
        raise ValueError("payload checksum mismatch")
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=int(entry["offset"]))
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return header["metadata"], tensors
