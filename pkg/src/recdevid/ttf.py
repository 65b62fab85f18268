"""TTF1 feature files.

Layout (little-endian): magic ``TTF1``; uint32 n_samples, n_frames, n_dims;
an optional table of n_samples uint32 labels (0xFFFFFFFF = unlabeled); then
n_samples * n_frames * n_dims float32 values, row-major.  The label table is
omitted when no sample is labeled, and its presence is recognised on read
from the file size.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TTF1"
UNLABELED = 0xFFFFFFFF
HEADER = struct.Struct("<4sIII")


class TTFFormatError(ValueError):
    pass


def encode(features, labels=None) -> bytes:
    x = np.asarray(features)
    if x.ndim != 3:
        raise TTFFormatError(f"features must be (n_samples, n_frames, n_dims), got {x.shape}")
    if x.dtype != np.float32:
        x = x.astype(np.float32)
    n = x.shape[0]
    out = [HEADER.pack(MAGIC, *x.shape)]
    if labels is not None:
        labels = [UNLABELED if lab is None else int(lab) for lab in labels]
        if len(labels) != n:
            raise TTFFormatError(f"{len(labels)} labels for {n} samples")
        if any(not 0 <= lab <= UNLABELED for lab in labels):
            raise TTFFormatError("labels must fit in uint32")
        if any(lab != UNLABELED for lab in labels):
            out.append(np.asarray(labels, dtype="<u4").tobytes())
    out.append(np.ascontiguousarray(x, dtype="<f4").tobytes())
    return b"".join(out)


def decode(data: bytes):
    """Return ``(features float32 (n, frames, dims), labels list[int | None])``."""
    if len(data) < HEADER.size:
        raise TTFFormatError("file shorter than the TTF1 header")
    magic, n, frames, dims = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TTFFormatError(f"bad magic {magic!r}")
    payload = 4 * n * frames * dims
    rest = len(data) - HEADER.size
    if rest == payload + 4 * n and n:
        raw = np.frombuffer(data, dtype="<u4", count=n, offset=HEADER.size)
        labels = [None if v == UNLABELED else int(v) for v in raw]
        offset = HEADER.size + 4 * n
    elif rest == payload:
        labels = [None] * n
        offset = HEADER.size
    else:
        raise TTFFormatError(f"size mismatch: {rest} payload bytes for {n}x{frames}x{dims} floats")
    x = np.frombuffer(data, dtype="<f4", count=n * frames * dims, offset=offset)
    return x.reshape(n, frames, dims).astype(np.float32), labels


def write_ttf1(path, features, labels=None) -> None:
    Path(path).write_bytes(encode(features, labels))


def read_ttf1(path):
    return decode(Path(path).read_bytes())
