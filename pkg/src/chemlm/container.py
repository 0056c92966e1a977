"""Binary container shared by language-model and classifier checkpoints.

Layout::

    b"CLM1"
    u64 LE   metadata length
    bytes    metadata, UTF-8 JSON (sorted keys)
    bytes    tensors, little-endian float32, in the order listed in metadata["tensors"]
    u64 LE   blake2b-64 checksum of everything between the magic and the checksum
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CLM1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptPayload(CheckpointError):
    pass


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def encode(meta: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    meta = dict(meta)
    meta["format_version"] = FORMAT_VERSION
    meta["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    doc = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<Q", len(doc)), doc]
    for arr in tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(parts)
    return MAGIC + payload + _checksum(payload)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + 16:
        raise CorruptPayload("file too short to be a checkpoint")
    if blob[:4] != MAGIC:
        raise CorruptPayload(f"bad magic {blob[:4]!r}")
    payload, digest = blob[4:-8], blob[-8:]
    if _checksum(payload) != digest:
        raise CorruptPayload("checksum mismatch (truncated or modified file)")
    (n,) = struct.unpack_from("<Q", payload, 0)
    try:
        meta = json.loads(payload[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayload(f"unreadable metadata: {exc}") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    tensors: dict[str, np.ndarray] = {}
    offset = 8 + n
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(payload):
            raise CorruptPayload(f"tensor {entry['name']} runs past end of payload")
        tensors[entry["name"]] = np.frombuffer(payload[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
        offset = end
    if offset != len(payload):
        raise CorruptPayload("trailing bytes after tensors")
    return meta, tensors


def write(path: str | os.PathLike, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(meta, tensors))
    os.replace(tmp, path)


def read(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
