"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    b"VFD1"
    meta_len, meta_len bytes of UTF-8 JSON (config echo, step counter, ...)
    repeated until EOF:
        name_len, name bytes, rank, rank extents, prod(extents) float32 LE values
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import CheckpointError, CheckpointMismatch
from .nn import Module

MAGIC = b"VFD1"
_U32 = struct.Struct("<I")


def save_checkpoint(path: Union[str, Path], tensors: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    chunks = [MAGIC]
    blob = json.dumps(meta, sort_keys=True).encode()
    chunks += [_U32.pack(len(blob)), blob]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        key = name.encode()
        chunks += [_U32.pack(len(key)), key, _U32.pack(arr.ndim)]
        chunks += [_U32.pack(n) for n in arr.shape]
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(b"".join(chunks))
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: Union[str, Path]) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(meta, tensors)``; tensors come back as float32 arrays."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path} is truncated")
        out = data[pos : pos + n]
        pos += n
        return out

    def u32() -> int:
        return _U32.unpack(take(4))[0]

    try:
        meta = json.loads(take(u32()).decode())
        tensors = {}
        while pos < len(data):
            name = take(u32()).decode()
            shape = tuple(u32() for _ in range(u32()))
            count = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} is corrupt: {exc}") from exc
    return meta, tensors


def load_into(module: Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy ``prefix``-named tensors into ``module``'s parameters, checking names and shapes."""
    params = dict(module.named_parameters())
    wanted = {prefix + k for k in params}
    missing = sorted(wanted - set(tensors))
    if missing:
        raise CheckpointMismatch(f"checkpoint lacks {len(missing)} parameters, e.g. {missing[0]}")
    extra = sorted(k for k in tensors if k.startswith(prefix) and k not in wanted)
    if prefix == "" and extra:
        raise CheckpointMismatch(f"checkpoint has unexpected parameters, e.g. {extra[0]}")
    for name, p in params.items():
        arr = tensors[prefix + name]
        if arr.shape != p.shape:
            raise CheckpointMismatch(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
    for name, p in params.items():
        p.assign(tensors[prefix + name].astype(p.dtype))
