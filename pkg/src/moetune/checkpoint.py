"""Single-file model checkpoints.

Layout (all integers little-endian ``u32``, floats little-endian ``f64``)::

    magic      4 bytes   b"MOEL"
    version    u32       FORMAT_VERSION
    meta_len   u32       length of the UTF-8 JSON block that follows
    meta       bytes     {"config": ModelConfig fields, "sparse_blocks": [...], "extra": {...}}
    n_buffers  u32
    n_buffers times:
        name_len u32, name (UTF-8)
        ndim     u32, dims (ndim x u32)
        data     prod(dims) x f64, row-major

Buffers are written in ``ToyModel.state_dict()`` order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ToyModel, build
from .tuning import expand_to_moe

MAGIC = b"MOEL"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save(model: ToyModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    meta = {
        "config": model.config.to_dict(),
        "sparse_blocks": model.moe_blocks,
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Raw (meta, buffers) of a checkpoint file."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    meta = json.loads(data[off : off + meta_len].decode())
    off += meta_len
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    buffers = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        buffers[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return meta, buffers


def load(path) -> tuple[ToyModel, dict]:
    """Rebuild the model stored at ``path``; returns (model, extra metadata)."""
    meta, buffers = read(path)
    config = ModelConfig.from_dict(meta["config"])
    model = build(config, 0, dense=True)
    if meta["sparse_blocks"]:
        model = expand_to_moe(model)
        if model.moe_blocks != meta["sparse_blocks"]:
            raise CheckpointError("sparse block layout does not match config placement")
    model.encoder = buffers.pop("encoder")
    params = {name: p for _, name, p in model.named_parameters()}
    if set(params) != set(buffers):
        missing = set(params) ^ set(buffers)
        raise CheckpointError(f"buffer names differ from model: {sorted(missing)[:5]}")
    for name, p in params.items():
        if p.values.shape != buffers[name].shape:
            raise CheckpointError(f"shape mismatch for {name}")
        p.values = buffers[name]
    return model, meta.get("extra", {})
