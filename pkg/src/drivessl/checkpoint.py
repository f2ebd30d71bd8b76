"""Self-describing binary container for named parameter arrays.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"DSSLCKPT"
    8       2     format version (uint16, currently 1)
    10      2     reserved, zero
    12      4     header length H in bytes (uint32)
    16      H     header: UTF-8 JSON object
    16+H    P     payload: raw arrays back to back, in header order
    16+H+P  32    SHA-256 digest of every preceding byte

The header holds free-form metadata plus ``"sections"``, a list of
``{"name", "dtype", "shape", "offset", "nbytes"}`` where ``offset`` is relative
to the payload start and ``dtype`` is a numpy dtype string with explicit
byte order (``"<f4"``, ``"<f8"``, ``"<i8"``).
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError

MAGIC = b"DSSLCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sHHI")
_DIGEST = 32


def _le(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=a.dtype.newbyteorder("<"), order="C")


def save_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    sections = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = _le(np.asarray(arr))
        raw = arr.tobytes()
        sections.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "sections": sections}, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, 0, len(head)) + head + b"".join(blobs)
    data = body + hashlib.sha256(body).digest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size + _DIGEST:
        raise CorruptCheckpointError(f"{path}: file too short ({len(data)} bytes)")
    magic, version, _, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported format version {version}")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or modified)")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    payload = body[start + head_len:]
    arrays = {}
    for sec in header.get("sections", []):
        end = sec["offset"] + sec["nbytes"]
        if end > len(payload):
            raise CorruptCheckpointError(f"{path}: section {sec['name']!r} runs past the payload")
        arr = np.frombuffer(payload[sec["offset"]:end], dtype=np.dtype(sec["dtype"]))
        arrays[sec["name"]] = arr.reshape(sec["shape"]).copy()
    return header, arrays
