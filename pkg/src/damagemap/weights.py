"""``DMGW`` tensor container and network weight files.

Layout, all little-endian, no padding::

    b"DMGW"  u32 version (=1)  u32 tensor_count
    repeated: u16 name_len, name (UTF-8), u8 rank, u64 dims[rank], f32 data
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .network import Network, NetworkConfig, param_shapes

MAGIC = b"DMGW"
VERSION = 1


class WeightFileError(Exception):
    """Base class for unreadable weight files."""


class WeightFormatError(WeightFileError):
    """Bad magic bytes or unsupported version."""


class TruncatedWeightsError(WeightFileError):
    """File ends before the declared content."""


class WeightShapeError(WeightFileError):
    """Tensor shapes or names do not match the network configuration."""


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedWeightsError(f"file truncated at byte {len(self.buf)} (needed {self.pos + n})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_tensors(path) -> dict[str, np.ndarray]:
    r = _Reader(Path(path).read_bytes())
    if len(r.buf) < 4 or r.take(4) != MAGIC:
        raise WeightFormatError(f"{path}: not a DMGW file (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported DMGW version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise WeightFormatError(f"{path}: tensor name is not UTF-8") from e
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    if r.pos != len(r.buf):
        raise WeightFormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes after last tensor")
    return tensors


def network_tensors(network: Network) -> dict[str, np.ndarray]:
    return {f"{layer}.{kind}": arr for layer, p in network.params.items() for kind, arr in p.items()}


def save_weights(network: Network, path) -> None:
    write_tensors(path, network_tensors(network))


def load_weights(path, config: NetworkConfig) -> Network:
    """Read a weight file into a network built from ``config``."""
    tensors = read_tensors(path)
    expected = param_shapes(config)
    params = {}
    for layer, shapes in expected.items():
        params[layer] = {}
        for kind, shape in shapes.items():
            key = f"{layer}.{kind}"
            if key not in tensors:
                raise WeightShapeError(f"layer {layer!r}: missing tensor {key!r}")
            if tensors[key].shape != shape:
                raise WeightShapeError(
                    f"layer {layer!r}: {kind} shape {tensors[key].shape} does not match config {shape}"
                )
            params[layer][kind] = tensors.pop(key)
    if tensors:
        raise WeightShapeError(f"unexpected tensors not in config: {', '.join(sorted(tensors))}")
    return Network(config, params, np.float32)
