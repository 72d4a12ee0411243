"""Binary parameter container.

Layout (all integers little-endian)::

    b"MCLX" | u32 version | u32 header bytes | header (UTF-8 JSON)
    u32 tensor count
    per tensor: u16 name bytes | name | u8 dtype tag | u8 rank | u32 dims[rank] | raw f32 data

The header carries the model config plus any caller metadata.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError
from ..numerics import Tensor
from .config import ModelConfig
from .params import ModelParams

MAGIC = b"MCLX"
VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4")}


def save_tensors(path, tensors: dict[str, np.ndarray], header: dict) -> None:
    path = Path(path)
    head = json.dumps(header, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        raw = name.encode()
        arr = np.ascontiguousarray(value, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", 0, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if buf[:4] != MAGIC:
            raise DataError(f"{path} is not a checkpoint (bad magic)")
        version, head_len = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        header = json.loads(buf[pos: pos + head_len].decode())
        pos += head_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos: pos + n].decode()
            pos += n
            tag, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            if tag not in _DTYPE_TAGS:
                raise DataError(f"{path}: tensor {name!r} has unknown dtype tag {tag}")
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            dt = _DTYPE_TAGS[tag]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + size > len(buf):
                raise DataError(f"{path}: truncated data for tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(dims).astype(np.float32)
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from exc
    return tensors, header


def save_model(path, cfg: ModelConfig, params: ModelParams, extra: dict | None = None) -> None:
    header = {"model": cfg.to_dict(), **(extra or {})}
    save_tensors(path, {n: t.value for n, t in params.items()}, header)


def load_model(path) -> tuple[ModelConfig, ModelParams, dict]:
    tensors, header = load_tensors(path)
    if "model" not in header:
        raise DataError(f"{path}: header has no model config")
    cfg = ModelConfig.from_dict(header["model"])
    names = [n for n in tensors if "/" not in n]
    params = ModelParams({n: Tensor(tensors[n]) for n in names})
    params.check(cfg)
    return cfg, params, header
