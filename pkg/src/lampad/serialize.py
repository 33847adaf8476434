"""Flat binary container for named float arrays.

Layout (all integers little-endian u32 unless noted):

    magic           6 bytes, b"LAMPv1"
    precision flag  1 byte: 0 = float32, 1 = float64
    count           u32, number of records
    record * count:
        name_len    u32
        name        name_len bytes, UTF-8
        rank        u32
        dims        rank * u32
        payload     prod(dims) little-endian floats per the precision flag

Every array in one container shares the precision. Round-trips are
bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"LAMPv1"

_FLAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_FLAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_tensors(path, arrays):
    """Write a name -> ndarray mapping; insertion order is preserved."""
    if not arrays:
        raise FormatError("refusing to write an empty container")
    dtypes = {np.dtype(a.dtype) for a in arrays.values()}
    if len(dtypes) != 1:
        raise FormatError(f"container arrays must share one dtype, got {sorted(map(str, dtypes))}")
    dtype = dtypes.pop()
    if dtype not in _DTYPE_TO_FLAG:
        raise FormatError(f"unsupported dtype {dtype}; only float32/float64")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", _DTYPE_TO_FLAG[dtype]))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<")).tobytes())


def _read(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated container while reading {what}")
    return buf


def load_tensors(path):
    """Read a container back into an ordered name -> ndarray dict."""
    out = {}
    with open(path, "rb") as fh:
        if _read(fh, len(MAGIC), "magic") != MAGIC:
            raise FormatError(f"bad magic; not a {MAGIC.decode()} container")
        flag = struct.unpack("<B", _read(fh, 1, "precision flag"))[0]
        if flag not in _FLAG_TO_DTYPE:
            raise FormatError(f"unknown precision flag {flag}")
        dtype = _FLAG_TO_DTYPE[flag]
        count = struct.unpack("<I", _read(fh, 4, "record count"))[0]
        for i in range(count):
            name_len = struct.unpack("<I", _read(fh, 4, f"record {i} name length"))[0]
            name = _read(fh, name_len, f"record {i} name").decode("utf-8")
            rank = struct.unpack("<I", _read(fh, 4, f"{name} rank"))[0]
            dims = struct.unpack(f"<{rank}I", _read(fh, 4 * rank, f"{name} dims")) if rank else ()
            n_elem = 1
            for d in dims:
                n_elem *= d
            payload = _read(fh, n_elem * dtype.itemsize, f"{name} payload")
            arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
            out[name] = arr.astype(dtype.newbyteorder("="))
        if fh.read(1):
            raise FormatError("trailing bytes after final record")
    return out
