"""Binary blob container for weights, optimizer state and packed data.

Layout (all integers uint32 little-endian, all floats float32 little-endian)::

    b"ZBRA1"
    header length, header bytes (key-sorted key=value text, UTF-8)
    tensor count
    per tensor: name length, name, rank, dims..., data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from lgattn.errors import ContractError
from lgattn.model import ModelConfig, TransformerWeights
from lgattn.numerics import Tensor

MAGIC = b"ZBRA1"
_U32 = struct.Struct("<I")
MOMENT_PREFIXES = ("adam.m.", "adam.v.")
STEP_KEY = "train.step"


def write_blobs(path, header: str, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC]
    head = header.encode("utf-8")
    parts += [_U32.pack(len(head)), head, _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(s) for s in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_blobs(path) -> tuple[str, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ContractError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(buf):
            raise ContractError(f"{path}: truncated")
        (val,) = _U32.unpack_from(buf, pos)
        pos += 4
        return val

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise ContractError(f"{path}: truncated")
        out = buf[pos:pos + nbytes]
        pos += nbytes
        return out

    header = take(u32()).decode("utf-8")
    tensors = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise ContractError(f"{path}: {len(buf) - pos} trailing bytes")
    return header, tensors


def save_checkpoint(path, weights: TransformerWeights, optim=None) -> None:
    """Weights plus, optionally, an optimizer state (moments and step)."""
    blobs = {name: t.data for name, t in weights.params.items()}
    if optim is not None:
        for name in weights.params:
            blobs["adam.m." + name] = optim.m[name]
            blobs["adam.v." + name] = optim.v[name]
        blobs[STEP_KEY] = np.array([optim.step], dtype=np.float32)
    write_blobs(path, weights.config.to_text(), blobs)


def load_checkpoint(path, dtype=np.float32):
    """Returns ``(weights, moments)``; ``moments`` is None when no optimizer state was saved."""
    header, blobs = read_blobs(path)
    config = ModelConfig.from_text(header)
    params = {}
    moments = {"m": {}, "v": {}, "step": None}
    for name, arr in blobs.items():
        if name == STEP_KEY:
            moments["step"] = int(arr[0])
        elif name.startswith("adam.m."):
            moments["m"][name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            moments["v"][name[len("adam.v."):]] = arr
        else:
            params[name] = Tensor(arr.astype(dtype), name=name)
    weights = TransformerWeights(config, params)
    return weights, (moments if moments["step"] is not None else None)
