"""DFNC binary tensor container.

Layout: magic "DFNC", format version u16, tensor count u32, then per tensor:
name length u16 + UTF-8 name, dtype byte (0=float32, 1=float64), rank u8,
one u64 per extent, raw little-endian data in C order. All integers are
little-endian. A file either parses completely or raises; callers never see
a partial load.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"DFNC"
VERSION = 1

_DTYPE_BY_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_BY_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_tensors(path, tensors) -> None:
    """Write named float32/float64 arrays; ``tensors`` is a name->array
    mapping or an iterable of (name, array) pairs."""
    pairs = list(tensors.items()) if hasattr(tensors, "items") else list(tensors)
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<HI", VERSION, len(pairs))
    for name, arr in pairs:
        arr = np.asarray(arr)
        code = _CODE_BY_DTYPE.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise FormatError(f"tensor {name!r} has unsupported dtype "
                              f"{arr.dtype}; only float32/float64 are stored")
        encoded = name.encode("utf-8")
        if not 1 <= len(encoded) <= 0xFFFF:
            raise FormatError(f"tensor name {name!r} must encode to "
                              "1..65535 bytes")
        if arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} rank {arr.ndim} exceeds 255")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
        buf += struct.pack("<BB", code, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype=_DTYPE_BY_CODE[code]).tobytes()
    Path(path).write_bytes(bytes(buf))


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return data


def load_tensors(path) -> "dict[str, np.ndarray]":
    """Parse a DFNC file back into a name->array dict."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    f = io.BytesIO(raw)
    if _read_exact(f, 4, "magic") != MAGIC:
        raise FormatError(f"{path} is not a DFNC checkpoint (bad magic)")
    version, count = struct.unpack("<HI", _read_exact(f, 6, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} "
                          f"(expected {VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        what = f"tensor {i}"
        (name_len,) = struct.unpack("<H", _read_exact(f, 2, f"{what} name length"))
        try:
            name = _read_exact(f, name_len, f"{what} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} name is not valid UTF-8") from exc
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        code, rank = struct.unpack("<BB", _read_exact(f, 2, f"{name} header"))
        dtype = _DTYPE_BY_CODE.get(code)
        if dtype is None:
            raise FormatError(f"tensor {name!r} has unknown dtype byte {code}")
        shape = struct.unpack(f"<{rank}Q",
                              _read_exact(f, 8 * rank, f"{name} extents"))
        n_bytes = int(np.prod(shape, dtype=object)) * dtype.itemsize
        data = _read_exact(f, n_bytes, f"{name} data")
        arr = np.frombuffer(data, dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if f.read(1):
        raise FormatError(f"{path} has trailing bytes after the last tensor")
    return tensors


def load_external_stage_features(path) -> "list[np.ndarray]":
    """Load precomputed backbone stage outputs: rank-4 tensors named

    stage0..stage{k-1} for k of 3 or 4, shallow to deep.
    """
    tensors = load_tensors(path)
    for k in (3, 4):
        expected = [f"stage{i}" for i in range(k)]
        if set(tensors) == set(expected):
            stages = [tensors[name] for name in expected]
            for name, arr in zip(expected, stages):
                if arr.ndim != 4:
                    raise FormatError(f"{name} must be rank 4, got rank "
                                      f"{arr.ndim}")
            return stages
    raise FormatError(
        f"expected tensors named stage0..stage2 or stage0..stage3, found "
        f"{sorted(tensors)}")
