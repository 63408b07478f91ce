"""Named-tensor checkpoint container.

Layout: 8-byte magic, u32 header length, UTF-8 JSON header, then raw
little-endian float32 payload, then a u32 CRC32 of everything before it.
The header lists ``version`` and, per tensor, ``name``, ``shape`` and
``offset`` (bytes from the payload start).
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"DMNNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"version": VERSION, "tensors": entries, "meta": meta or {}},
                        sort_keys=True).encode()
    body = MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)


def load_tensors(path) -> tuple:
    """Returns ``(tensors, meta)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    (hlen,) = struct.unpack("<I", body[8:12])
    header = json.loads(body[12:12 + hlen])
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    payload = body[12 + hlen:]
    out = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"])
        out[e["name"]] = a.reshape(e["shape"]).astype(np.float32)
    return out, header.get("meta", {})


def save_parameters(path, params, meta=None) -> None:
    save_tensors(path, {p.name: p.data for p in params}, meta)


def load_parameters(path, params) -> dict:
    """Copy stored values into ``params`` (matched by name); returns meta."""
    tensors, meta = load_tensors(path)
    for p in params:
        if p.name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {p.name}")
        if tensors[p.name].shape != p.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {p.name}: "
                                  f"{tensors[p.name].shape} vs {p.data.shape}")
        p.data[...] = tensors[p.name]
    return meta
