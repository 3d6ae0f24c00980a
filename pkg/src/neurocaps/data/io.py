"""NGDS dataset files.

Layout (little-endian)::

    b"NGDS" | u16 version | u32 count | u32 H | u32 W | u32 C
    | count x (u16 label | u32 patient_id | H*W*C float32) | u32 CRC32

Pixels of a sample are written channel-major (``[C, H, W]`` row-major).
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import ChecksumError
from ..ir.serialize import _check_envelope
from .dataset import CLASS_NAMES, LabeledImageSet

MAGIC = b"NGDS"
VERSION = 1
_HEADER = struct.Struct("<4sHIIII")


def _record_dtype(pixels: int) -> np.dtype:
    return np.dtype([("label", "<u2"), ("patient", "<u4"), ("pixels", "<f4", (pixels,))])


def _image_dims(ds: LabeledImageSet):
    shape = ds.sample_shape
    if len(shape) == 3:
        c, h, w = shape
    elif len(shape) == 2:
        (h, w), c = shape, 1
    elif len(shape) == 1:
        c, h, w = 1, 1, shape[0]
    else:
        raise ValueError(f"cannot store samples of shape {shape}")
    return h, w, c


def dumps_dataset(ds: LabeledImageSet) -> bytes:
    h, w, c = _image_dims(ds)
    rec = np.zeros(len(ds), dtype=_record_dtype(h * w * c))
    rec["label"] = ds.labels
    rec["patient"] = ds.patient_ids
    rec["pixels"] = ds.images.reshape(len(ds), h * w * c)
    body = _HEADER.pack(MAGIC, VERSION, len(ds), h, w, c) + rec.tobytes()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads_dataset(data: bytes, class_names=None) -> LabeledImageSet:
    _check_envelope(data, MAGIC, VERSION)
    if len(data) < _HEADER.size + 4:
        raise ChecksumError("dataset header truncated")
    _, _, count, h, w, c = _HEADER.unpack_from(data, 0)
    dt = _record_dtype(h * w * c)
    if _HEADER.size + count * dt.itemsize + 4 != len(data):
        raise ChecksumError("dataset size does not match its header")
    rec = np.frombuffer(data, dtype=dt, count=count, offset=_HEADER.size)
    images = rec["pixels"].astype(np.float32).reshape(count, c, h, w)
    labels = rec["label"].astype(np.int64)
    if class_names is None:
        k = int(labels.max()) + 1 if count else len(CLASS_NAMES)
        class_names = CLASS_NAMES if k <= len(CLASS_NAMES) else tuple(f"class-{i}" for i in range(k))
    return LabeledImageSet(images, labels, rec["patient"].astype(np.int64), class_names)


def save_dataset(ds: LabeledImageSet, path) -> None:
    Path(path).write_bytes(dumps_dataset(ds))


def load_dataset(path, class_names=None) -> LabeledImageSet:
    return loads_dataset(Path(path).read_bytes(), class_names)
