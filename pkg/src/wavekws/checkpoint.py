"""Binary checkpoint format.

Layout (all integers little-endian u32, all floats little-endian f32)::

    b"WKNT" | version | header_len | header (UTF-8 JSON: architecture, features)
    | dim | mean[dim] | std[dim]
    | num_tensors | for each tensor: ndim | shape[ndim] | data[prod(shape)]

Tensors follow the declaration order of :func:`wavekws.network.param_shapes`.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from wavekws.errors import DataError
from wavekws.features import FeatureConfig, FeatureNormalizer
from wavekws.network import Architecture, Params, check_params, param_shapes

MAGIC = b"WKNT"
VERSION = 1


@dataclass
class Checkpoint:
    arch: Architecture
    params: Params
    normalizer: FeatureNormalizer
    features: FeatureConfig = FeatureConfig()


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _f32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def to_bytes(ckpt: Checkpoint) -> bytes:
    check_params(ckpt.params, ckpt.arch)
    header = json.dumps(
        {"architecture": ckpt.arch.to_dict(), "features": asdict(ckpt.features)}, sort_keys=True
    ).encode()
    buf = io.BytesIO()
    buf.write(MAGIC + _u32(VERSION) + _u32(len(header)) + header)
    buf.write(_u32(len(ckpt.normalizer.mean)) + _f32(ckpt.normalizer.mean) + _f32(ckpt.normalizer.std))
    buf.write(_u32(len(ckpt.params)))
    for tensor in ckpt.params.values():
        buf.write(_u32(tensor.ndim) + b"".join(_u32(n) for n in tensor.shape) + _f32(tensor))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, source):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"{self.source}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def from_bytes(data: bytes, source="<bytes>") -> Checkpoint:
    r = _Reader(data, source)
    if r.take(4) != MAGIC:
        raise DataError(f"{source}: not a WKNT checkpoint")
    version = r.u32()
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    header = json.loads(r.take(r.u32()).decode())
    arch = Architecture.from_dict(header["architecture"])
    features = FeatureConfig(**header.get("features", {}))
    dim = r.u32()
    normalizer = FeatureNormalizer(r.f32(dim), r.f32(dim))
    shapes = param_shapes(arch)
    count = r.u32()
    if count != len(shapes):
        raise DataError(f"{source}: {count} tensors stored, architecture declares {len(shapes)}")
    params = {}
    for name, expected in shapes.items():
        shape = tuple(r.u32() for _ in range(r.u32()))
        if shape != expected:
            raise DataError(f"{source}: tensor {name} has shape {shape}, expected {expected}")
        params[name] = r.f32(int(np.prod(shape))).reshape(shape)
    if r.pos != len(data):
        raise DataError(f"{source}: {len(data) - r.pos} trailing bytes")
    return Checkpoint(arch, params, normalizer, features)


def save_checkpoint(path, ckpt: Checkpoint):
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as err:
        raise DataError(f"cannot read checkpoint {path}: {err}") from None
    return from_bytes(data, path)
