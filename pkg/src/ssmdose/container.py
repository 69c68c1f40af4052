"""Byte-stable binary container for named float64 arrays plus JSON metadata.

Layout (all integers little-endian)::

    8 bytes   magic  b"SSMDARR\\0"
    4 bytes   uint32 format version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header, keys sorted:
              {"meta": {...}, "arrays": [{"name", "shape", "offset"}, ...]}
    ...       raw little-endian float64 data, arrays back to back

Writing the same arrays and metadata twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"SSMDARR\0"
VERSION = 1


class CorruptFileError(ValueError):
    pass


def encode(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    return b"".join([MAGIC, struct.pack("<IQ", VERSION, len(header)), header, *blobs])


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:8] != MAGIC:
        raise CorruptFileError("not an array container (bad magic)")
    version, hlen = struct.unpack("<IQ", buf[8:20])
    if version != VERSION:
        raise CorruptFileError(f"unsupported container version {version}")
    try:
        header = json.loads(buf[20 : 20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unreadable header: {exc}") from None
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        if start + 8 * n > len(buf):
            raise CorruptFileError(f"array {e['name']} truncated")
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8", count=n, offset=start).reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]


def atomic_write(path: Path, data: bytes) -> None:
    """Write to a temporary sibling then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write atomically; returns the sha256 of the bytes written."""
    data = encode(arrays, meta)
    atomic_write(Path(path), data)
    return hashlib.sha256(data).hexdigest()


def load(path, expected_sha256: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if expected_sha256 is not None and hashlib.sha256(buf).hexdigest() != expected_sha256:
        raise CorruptFileError(f"{path}: checksum mismatch")
    return decode(buf)
