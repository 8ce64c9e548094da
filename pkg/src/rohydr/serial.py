"""Binary tensor blobs shared by checkpoints and dataset files.

Layout per blob: magic ``RHDR``, then little-endian u32 version (1),
u32 rank, one u32 extent per dimension, then the values as row-major
little-endian IEEE-754 float64.  Readers fail with a byte offset so a
damaged file can be located precisely.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"RHDR"
VERSION = 1
_MAX_RANK = 32


class FormatError(ValueError):
    """A file does not match the blob layout; ``offset`` locates the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def write_array(path, arr):
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_array(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, expected {MAGIC!r}", offset=0)
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated before version field", offset=4)
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated before rank field", offset=8)
    rank = struct.unpack_from("<I", blob, 8)[0]
    if rank > _MAX_RANK:
        raise FormatError(f"{path}: implausible rank {rank}", offset=8)
    header_end = 12 + 4 * rank
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated inside extents", offset=len(blob))
    extents = struct.unpack_from(f"<{rank}I", blob, 12)
    count = 1
    for e in extents:
        count *= e
    expected = header_end + 8 * count
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for shape {extents}, "
            f"found {len(blob)}", offset=min(len(blob), expected))
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=header_end)
    return data.reshape(extents).astype(np.float64, copy=True)
