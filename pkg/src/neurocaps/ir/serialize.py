"""NNIR model files.

Layout (little-endian)::

    b"NNIR" | u16 version | u32 manifest length | manifest (UTF-8 JSON)
    | u64 blob length | float32 parameter blob | u32 CRC32 of all preceding bytes

Parameters are stored in manifest order, each as raw row-major float32.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import BadMagicError, ChecksumError, VersionError
from ..tensor import Tensor
from .graph import ModelGraph
from .layers import layer_from_dict

MAGIC = b"NNIR"
VERSION = 1


def _check_envelope(data: bytes, magic: bytes, version: int) -> int:
    """Validate magic, version and CRC trailer; return the payload version."""
    if len(data) < 4 or data[:4] != magic:
        raise BadMagicError(f"not a {magic.decode()} file")
    if len(data) < 10:
        raise ChecksumError("file truncated before the checksum trailer")
    (found,) = struct.unpack_from("<H", data, 4)
    if found != version:
        raise VersionError(f"{magic.decode()} version {found} unsupported (expected {version})")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch (file corrupted or truncated)")
    return found


def dumps_model(model: ModelGraph) -> bytes:
    names = list(model.params)
    blob = b"".join(np.ascontiguousarray(model.params[n].data, dtype="<f4").tobytes() for n in names)
    manifest = {
        "format": "NNIR",
        "version": VERSION,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "layers": [layer.to_dict() for layer in model.layers],
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "blob_crc32": zlib.crc32(blob) & 0xFFFFFFFF,
        "metadata": model.metadata,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<HI", VERSION, len(text)) + text + struct.pack("<Q", len(blob)) + blob
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads_model(data: bytes) -> ModelGraph:
    _check_envelope(data, MAGIC, VERSION)
    (mlen,) = struct.unpack_from("<I", data, 6)
    manifest = json.loads(data[10:10 + mlen].decode("utf-8"))
    off = 10 + mlen
    (blen,) = struct.unpack_from("<Q", data, off)
    off += 8
    blob = data[off:off + blen]
    if len(blob) != blen or off + blen + 4 != len(data):
        raise ChecksumError("parameter blob length does not match the file size")
    layers = [layer_from_dict(d) for d in manifest["layers"]]
    params = {}
    pos = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(shape)
        params[entry["name"]] = Tensor(arr)
        pos += 4 * count
    if pos != blen:
        raise ChecksumError("parameter blob has trailing bytes")
    return ModelGraph(layers, tuple(manifest["input_shape"]), int(manifest["class_count"]),
                      params, manifest.get("metadata", {}))


def save_model(model: ModelGraph, path) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path) -> ModelGraph:
    return loads_model(Path(path).read_bytes())
