"""Flat binary checkpoints: (name, shape, raw little-endian values) triples.

Layout (all integers little-endian, documented in docs/checkpoint_format.md):

    byte 0          format version (currently 1)
    per entry:
        uint16      name length in bytes
        bytes       utf-8 name
        uint8       dtype code: 4 = float32, 8 = float64
        uint8       rank
        uint32 * r  dimension sizes
        bytes       row-major values, little-endian

Entries repeat until end of file. Round trips are bit-exact, which is what
makes pretrain-to-tracker weight transfer reproducible.
"""

from __future__ import annotations

import struct

import numpy as np

FORMAT_VERSION = 1
_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def save_checkpoint(path, arrays):
    """Write a dict of name -> float array to `path`."""
    with open(path, "wb") as f:
        f.write(bytes([FORMAT_VERSION]))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _CODE_FOR_KIND:
                arr = arr.astype(np.float64)
            code = _CODE_FOR_KIND[arr.dtype]
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", code, arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype(f"<f{code}").tobytes(order="C"))


def load_checkpoint(path):
    """Read a checkpoint back into a dict of name -> array (native order)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 1:
        raise CheckpointError(f"{path}: empty file")
    if blob[0] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {blob[0]}")
    arrays = {}
    off = 1
    total = len(blob)

    def need(n, what):
        if off + n > total:
            raise CheckpointError(f"{path}: truncated {what} at byte {off}")

    while off < total:
        need(2, "name length")
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        need(nlen, "name")
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        need(2, "dtype/rank header")
        code, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: unknown dtype code {code} at byte {off - 2}")
        need(4 * rank, "shape")
        shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        nbytes = count * code
        need(nbytes, f"values of {name!r}")
        arr = np.frombuffer(blob, dtype=_DTYPE_CODES[code], count=count, offset=off)
        off += nbytes
        arrays[name] = arr.astype(arr.dtype.newbyteorder("=")).reshape(shape)
    return arrays
