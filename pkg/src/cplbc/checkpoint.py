"""Portable binary checkpoint format.

Layout (little-endian)::

    magic   8 bytes  b"CPLBC1\\0\\0"
    version u32      1
    count   u32
    per tensor:
        u16 name length, name bytes (utf-8), u8 ndim, u32 dims..., f32 payload
    checksum u64     FNV-1a over the concatenated f32 payload bytes

Strategy metadata, the epoch counter and anything non-tensor live in a JSON
sidecar next to the binary (``<path>.json``).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CPLBC1\x00\x00"
VERSION = 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


class CheckpointError(ValueError):
    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


def fnv1a64(data: bytes, h: int = _FNV_OFFSET) -> int:
    """64-bit FNV-1a of ``data``, continuing from state ``h``."""
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def payload_checksum(payloads: list) -> int:
    h = _FNV_OFFSET
    for p in payloads:
        h = fnv1a64(p, h)
    return h


def _as_array(v) -> np.ndarray:
    return np.asarray(getattr(v, "data", v), dtype=np.float32)


def encode(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    payloads = []
    for name, value in tensors.items():
        arr = np.array(_as_array(value), dtype="<f4", order="C")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError("bad name", f"tensor name too long ({len(nb)} bytes)")
        if arr.ndim > 255:
            raise CheckpointError("bad shape", f"{name} has {arr.ndim} dims")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.tobytes()
        parts.append(payload)
        payloads.append(payload)
    parts.append(struct.pack("<Q", payload_checksum(payloads)))
    return b"".join(parts)


def decode(blob: bytes) -> dict:
    def need(pos, n, what):
        if pos + n > len(blob):
            raise CheckpointError("truncated", f"file ends while reading {what} at byte {pos}")

    need(0, 16, "header")
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic", f"expected {MAGIC!r}, found {blob[:8]!r}")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError("unsupported version", f"file has version {version}, reader supports {VERSION}")
    pos = 16
    out, payloads = {}, []
    for i in range(count):
        need(pos, 2, f"name length of tensor {i}")
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(pos, nlen + 1, f"name of tensor {i}")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        ndim = blob[pos]
        pos += 1
        need(pos, 4 * ndim, f"dims of {name}")
        dims = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(pos, nbytes, f"payload of {name}")
        payload = blob[pos:pos + nbytes]
        pos += nbytes
        payloads.append(payload)
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    need(pos, 8, "checksum")
    (stored,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if pos != len(blob):
        raise CheckpointError("trailing data", f"{len(blob) - pos} unexpected bytes after checksum")
    actual = payload_checksum(payloads)
    if stored != actual:
        raise CheckpointError("checksum mismatch", f"stored {stored:#018x}, computed {actual:#018x}")
    return out


def save_checkpoint(tensors: dict, meta: dict, path) -> Path:
    """Write ``tensors`` to ``path`` and ``meta`` to ``path.json``; returns the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(tensors)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default))
    return path


def load_checkpoint(path) -> tuple:
    """Return ``(tensors, meta)``; meta is empty when the sidecar is missing."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError("missing", f"no checkpoint at {path}")
    tensors = decode(path.read_bytes())
    sidecar = Path(str(path) + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return tensors, meta


def file_checksum(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# -- model state <-> tensors -----------------------------------------------------------

def model_tensors(weights: dict, adam=None) -> dict:
    """Flatten weights (and optionally Adam state) into named arrays."""
    out = {k: _as_array(v) for k, v in weights.items()}
    if adam is not None:
        for k, v in adam.m.items():
            out[f"adam.m.{k}"] = np.asarray(v, dtype=np.float32)
        for k, v in adam.v.items():
            out[f"adam.v.{k}"] = np.asarray(v, dtype=np.float32)
        out["adam.step"] = np.array([adam.step], dtype=np.float32)
    return out


def split_tensors(tensors: dict) -> tuple:
    """Inverse of model_tensors: (weights arrays, m, v, step or None)."""
    weights = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: a for k, a in tensors.items() if k.startswith("adam.v.")}
    step = int(tensors["adam.step"][0]) if "adam.step" in tensors else None
    return weights, m, v, step
