#!/usr/bin/env python3
"""
Tensor I/O
TensorContainer ("BTSR") codec for float and bit-packed arrays, plus binary PGM images
"""

import logging
import os
import struct
from typing import Tuple

import numpy as np

from errors import FormatError, MalformedFileError, RankError, ValidationError, VersionMismatchError

logger = logging.getLogger(__name__)

MAGIC = b"BTSR"
FORMAT_VERSION = 1

DTYPE_FLOAT64 = 1
DTYPE_BITS = 2

_HEADER = struct.Struct("<4sHBB")
_DIM = struct.Struct("<Q")


def _payload_size(code: int, shape: Tuple[int, ...]) -> int:
    if code == DTYPE_FLOAT64:
        return int(np.prod(shape, dtype=np.int64)) * 8
    rows = int(np.prod(shape[:-1], dtype=np.int64))
    return rows * ((shape[-1] + 7) // 8)


def encode_tensor(array: np.ndarray, kind: str = "float64") -> bytes:
    """Serialize an array to TensorContainer bytes (little-endian, row-major)"""
    array = np.asarray(array)
    if kind == "float64":
        code = DTYPE_FLOAT64
        payload = np.ascontiguousarray(array, dtype="<f8").tobytes()
    elif kind == "bits":
        if array.ndim < 1:
            raise RankError("bit-packed tensors need rank >= 1")
        if array.size and not np.isin(array, (0, 1)).all():
            raise ValidationError("bit tensor contains values other than 0 and 1")
        code = DTYPE_BITS
        packed = np.packbits(np.ascontiguousarray(array, dtype=np.uint8), axis=-1, bitorder="little")
        payload = packed.tobytes()
    else:
        raise ValidationError(f"unknown tensor kind '{kind}'")

    if array.ndim > 255:
        raise RankError(f"rank {array.ndim} too large")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, code, array.ndim)
    dims = b"".join(_DIM.pack(int(d)) for d in array.shape)
    return header + dims + payload


def decode_tensor(blob: bytes) -> np.ndarray:
    """Parse TensorContainer bytes; float tensors come back as float64, bit tensors as uint8"""
    if len(blob) < _HEADER.size:
        raise MalformedFileError("file too short for a tensor header")
    magic, version, code, rank = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise MalformedFileError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    if code not in (DTYPE_FLOAT64, DTYPE_BITS):
        raise MalformedFileError(f"unknown element type code {code}")
    if code == DTYPE_BITS and rank < 1:
        raise RankError("bit-packed tensor with rank 0")

    offset = _HEADER.size
    if len(blob) < offset + rank * _DIM.size:
        raise MalformedFileError("truncated shape")
    shape = tuple(_DIM.unpack_from(blob, offset + i * _DIM.size)[0] for i in range(rank))
    offset += rank * _DIM.size

    expected = _payload_size(code, shape)
    payload = blob[offset:]
    if len(payload) != expected:
        raise MalformedFileError(f"payload is {len(payload)} bytes, expected {expected}")

    if code == DTYPE_FLOAT64:
        return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)

    row_bytes = (shape[-1] + 7) // 8
    packed = np.frombuffer(payload, dtype=np.uint8).reshape(shape[:-1] + (row_bytes,))
    bits = np.unpackbits(packed, axis=-1, count=shape[-1], bitorder="little")
    return bits.reshape(shape)


def write_tensor(path: str, array: np.ndarray, kind: str = "float64") -> str:
    blob = encode_tensor(array, kind)
    with open(path, "wb") as f:
        f.write(blob)
    logger.info(f"✓ Wrote {kind} tensor {tuple(np.shape(array))} to {path}")
    return path


def read_tensor(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise FormatError(f"tensor file not found: {path}")
    with open(path, "rb") as f:
        return decode_tensor(f.read())


def _pgm_tokens(blob: bytes, count: int) -> Tuple[list, int]:
    """Read `count` whitespace separated header tokens, skipping # comments"""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedFileError("truncated PGM header")
        tokens.append(blob[start:pos])
    # single whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path: str) -> Tuple[np.ndarray, int]:
    """Read a binary (P5) PGM; returns the raw integer image and its maxval"""
    with open(path, "rb") as f:
        blob = f.read()
    tokens, offset = _pgm_tokens(blob, 4)
    if tokens[0] != b"P5":
        raise MalformedFileError(f"{path} is not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise MalformedFileError(f"bad PGM header in {path}: {e}")
    if not 0 < maxval < 65536:
        raise MalformedFileError(f"PGM maxval {maxval} out of range")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    raster = blob[offset:offset + width * height * dtype.itemsize]
    if len(raster) != width * height * dtype.itemsize:
        raise MalformedFileError(f"truncated PGM raster in {path}")
    image = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return image.astype(np.int64), maxval


def write_pgm(path: str, image: np.ndarray, maxval: int = 65535) -> str:
    """Write integer image values in [0, maxval] as a binary PGM"""
    image = np.asarray(image)
    if image.ndim != 2:
        raise RankError("PGM images must be 2-D")
    if image.size and (image.min() < 0 or image.max() > maxval):
        raise ValidationError(f"PGM values must lie in [0, {maxval}]")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    height, width = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n{maxval}\n".encode("ascii"))
        f.write(np.ascontiguousarray(image, dtype=dtype).tobytes())
    logger.info(f"✓ Wrote PGM {width}x{height} to {path}")
    return path


def write_display_pgm(path: str, image: np.ndarray, range_max: float) -> str:
    """Quantize a [0, range_max] float image to 16-bit PGM for viewing"""
    scaled = np.clip(np.asarray(image, dtype=np.float64) / range_max, 0.0, 1.0) * 65535.0
    return write_pgm(path, np.rint(scaled).astype(np.int64), 65535)
