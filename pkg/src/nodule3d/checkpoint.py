"""Binary checkpoint format.

Layout (all integers and floats little-endian)::

    b"V3DC"                     magic
    u32   version               (1)
    u32   input_edge, u32 input_channels, u8 batchnorm, u32 n_layers
    n_layers x (u8 kind, u32 a, u32 b, u32 c)
          kind 1 conv (in_ch, out_ch, kernel), 2 pool (size, 0, 0),
          3 flatten (0, 0, 0), 4 dense (in_features, out_features, 0)
    f64   learning rate, f64 momentum, u64 epochs completed
    f32[] parameters, in network order
    f32[] optimizer velocity, same order and shapes
    f32[] batch-norm running moments (only when batchnorm is set)
    u32   CRC32 of every preceding byte
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import BadMagic, CrcMismatch, ShapeIncompatible, VersionMismatch
from .network import (ConvSpec, DenseSpec, FlattenSpec, Model, NetworkSpec, PoolSpec, assemble,
                      buffer_shapes, param_shapes)
from .optim import OptimizerState

MAGIC = b"V3DC"
VERSION = 1

_HEAD = struct.Struct("<4sI")
_NET = struct.Struct("<IIBI")
_LAYER = struct.Struct("<BIII")
_OPT = struct.Struct("<ddQ")
_CRC = struct.Struct("<I")


def _encode_layer(layer) -> bytes:
    if isinstance(layer, ConvSpec):
        return _LAYER.pack(1, layer.in_ch, layer.out_ch, layer.kernel)
    if isinstance(layer, PoolSpec):
        return _LAYER.pack(2, layer.size, 0, 0)
    if isinstance(layer, FlattenSpec):
        return _LAYER.pack(3, 0, 0, 0)
    if isinstance(layer, DenseSpec):
        return _LAYER.pack(4, layer.in_features, layer.out_features, 0)
    raise ShapeIncompatible(f"cannot encode layer {layer!r}")


def _decode_layer(kind, a, b, c):
    if kind == 1:
        return ConvSpec(a, b, c)
    if kind == 2:
        return PoolSpec(a)
    if kind == 3:
        return FlattenSpec()
    if kind == 4:
        return DenseSpec(a, b)
    raise ShapeIncompatible(f"unknown layer kind {kind}")


def checkpoint_bytes(model: Model, state: OptimizerState, epoch: int = 0) -> bytes:
    spec = model.spec
    velocity = state.velocity or [np.zeros_like(p) for p in model.params]
    parts = [
        _HEAD.pack(MAGIC, VERSION),
        _NET.pack(spec.input_edge, spec.input_channels, int(spec.batchnorm), len(spec.layers)),
        *(_encode_layer(layer) for layer in spec.layers),
        _OPT.pack(state.lr, state.momentum, epoch),
    ]
    for arr in [*model.params, *velocity, *model.buffers]:
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def save_checkpoint(path: str | os.PathLike, model: Model, state: OptimizerState,
                    epoch: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(model, state, epoch)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def parse_checkpoint(data: bytes):
    """Decode checkpoint bytes into ``(model, state, epoch)``."""
    if len(data) < _HEAD.size or data[:4] != MAGIC:
        raise BadMagic("not a V3DC checkpoint")
    _, version = _HEAD.unpack_from(data)
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    if len(data) < _HEAD.size + _CRC.size or \
            zlib.crc32(data[:-_CRC.size]) != _CRC.unpack_from(data, len(data) - _CRC.size)[0]:
        raise CrcMismatch("checkpoint CRC32 does not match (file truncated or corrupt)")

    body = memoryview(data)[:-_CRC.size]
    offset = _HEAD.size
    edge, channels, batchnorm, n_layers = _NET.unpack_from(body, offset)
    offset += _NET.size
    layers = []
    for _ in range(n_layers):
        layers.append(_decode_layer(*_LAYER.unpack_from(body, offset)))
        offset += _LAYER.size
    lr, momentum, epoch = _OPT.unpack_from(body, offset)
    offset += _OPT.size

    spec = NetworkSpec(tuple(layers), input_edge=edge, input_channels=channels,
                       batchnorm=bool(batchnorm))
    spec.summary()

    def take(shapes):
        nonlocal offset
        out = []
        for shape in shapes:
            n = int(np.prod(shape))
            out.append(np.frombuffer(body, "<f4", n, offset).astype(np.float32).reshape(shape))
            offset += 4 * n
        return out

    shapes = param_shapes(spec)
    try:
        params, velocity, buffers = take(shapes), take(shapes), take(buffer_shapes(spec))
    except ValueError as exc:
        raise CrcMismatch(f"checkpoint payload too short: {exc}") from exc
    if offset != len(body):
        raise CrcMismatch(f"checkpoint payload length mismatch ({len(body) - offset} stray bytes)")
    return assemble(spec, params, buffers), OptimizerState(lr, momentum, velocity), epoch


def load_checkpoint(path: str | os.PathLike):
    return parse_checkpoint(Path(path).read_bytes())
