"""``CMK1`` tensor container.

Layout (little endian)::

    magic "CMK1" | u32 version | u32 meta_len | meta JSON (UTF-8)
    u32 count | count x (u32 name_len, name UTF-8, u32 ndim, ndim x u32 dims)
    f32 payloads, concatenated in manifest order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

MAGIC = b"CMK1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    payloads = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        payloads.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts + payloads))


def load_tensors(path) -> Tuple[Dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    off = 4
    try:
        version, meta_len = struct.unpack_from("<II", raw, off)
        off += 8
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        manifest = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            manifest.append((name, dims))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated manifest") from exc
    out = {}
    for name, dims in manifest:
        n = int(np.prod(dims, dtype=np.int64))
        if off + 4 * n > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        out[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims).copy()
        off += 4 * n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return out, meta


def save_module(path, module, meta: Optional[dict] = None) -> None:
    state = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    save_tensors(path, state, meta)


def load_module_state(module, tensors: Mapping[str, np.ndarray]) -> None:
    import torch

    current = module.state_dict()
    missing = set(current) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
    state = {k: torch.from_numpy(np.asarray(tensors[k])).to(current[k].dtype).reshape(current[k].shape)
             for k in current}
    module.load_state_dict(state)
