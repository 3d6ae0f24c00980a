"""Spiking network container and the SNNC file format.

SNNC layout (little-endian)::

    b"SNNC" | u16 version | u8 encoding | u16 class_count
    | u8 input rank | rank x u32 input dims | u32 layer count
    | layer table: count x (u32 fan_in | u32 fan_out | f32 threshold)
    | per layer: fan_out*fan_in f32 weights (row-major) then fan_out f32 bias
    | u32 CRC32 of all preceding bytes
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from ..errors import ChecksumError, ContractError, DimensionError
from ..ir.serialize import _check_envelope

MAGIC = b"SNNC"
VERSION = 1
ENCODINGS = ("constant_current", "poisson")

# Weight matrices below this density are simulated as CSR.
SPARSE_DENSITY = 0.25


@dataclass
class SpikingLayer:
    """One IF population fed by ``weights @ spikes_prev + bias`` each step."""

    weights: np.ndarray  # [fan_out, fan_in]
    bias: np.ndarray  # [fan_out]
    threshold: float = 1.0
    name: str = ""
    _kernel: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float32).reshape(-1)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(f"weights {self.weights.shape} and bias {self.bias.shape} disagree")
        if not self.threshold > 0:
            raise ContractError(f"threshold must be positive, got {self.threshold}")

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    def kernel(self):
        """Transposed weights for ``spikes @ kernel`` (CSR when sparse enough)."""
        if self._kernel is None:
            density = np.count_nonzero(self.weights) / max(self.weights.size, 1)
            wt = self.weights.T
            self._kernel = sparse.csr_matrix(wt) if density < SPARSE_DENSITY else np.ascontiguousarray(wt)
        return self._kernel

    def currents(self, spikes: np.ndarray) -> np.ndarray:
        out = spikes @ self.kernel()
        return np.asarray(out, dtype=np.float32) + self.bias


@dataclass
class SpikingNetwork:
    layers: list
    input_shape: tuple
    class_count: int
    input_encoding: str = "constant_current"

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.input_encoding not in ENCODINGS:
            raise ContractError(f"unknown input encoding {self.input_encoding!r}")
        if not self.layers:
            raise ContractError("a spiking network needs at least one layer")
        fan = int(np.prod(self.input_shape))
        for i, layer in enumerate(self.layers):
            if layer.fan_in != fan:
                raise DimensionError(f"layer {i}: fan-in {layer.fan_in} != previous size {fan}")
            fan = layer.fan_out
        if fan != self.class_count:
            raise DimensionError(f"output layer has {fan} neurons, expected {self.class_count}")

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def sizes(self) -> list:
        return [layer.fan_out for layer in self.layers]


def dumps_network(net: SpikingNetwork) -> bytes:
    parts = [MAGIC, struct.pack("<HBH", VERSION, ENCODINGS.index(net.input_encoding), net.class_count),
             struct.pack("<B", len(net.input_shape)),
             struct.pack(f"<{len(net.input_shape)}I", *net.input_shape),
             struct.pack("<I", len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<IIf", layer.fan_in, layer.fan_out, layer.threshold))
    for layer in net.layers:
        parts.append(layer.weights.astype("<f4").tobytes())
        parts.append(layer.bias.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads_network(data: bytes) -> SpikingNetwork:
    _check_envelope(data, MAGIC, VERSION)
    try:
        _, encoding, classes = struct.unpack_from("<HBH", data, 4)
        off = 9
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        table = []
        for _ in range(count):
            table.append(struct.unpack_from("<IIf", data, off))
            off += 12
        layers = []
        for fan_in, fan_out, theta in table:
            w = np.frombuffer(data, "<f4", fan_in * fan_out, off).reshape(fan_out, fan_in)
            off += 4 * fan_in * fan_out
            b = np.frombuffer(data, "<f4", fan_out, off)
            off += 4 * fan_out
            layers.append(SpikingLayer(w.copy(), b.copy(), float(theta)))
    except (struct.error, ValueError) as exc:
        raise ChecksumError(f"SNNC payload malformed: {exc}") from exc
    if off + 4 != len(data):
        raise ChecksumError("SNNC payload length does not match its layer table")
    if encoding >= len(ENCODINGS):
        raise ChecksumError(f"unknown encoding code {encoding}")
    return SpikingNetwork(layers, shape, classes, ENCODINGS[encoding])


def save_network(net: SpikingNetwork, path) -> None:
    Path(path).write_bytes(dumps_network(net))


def load_network(path) -> SpikingNetwork:
    return loads_network(Path(path).read_bytes())
