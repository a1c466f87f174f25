"""MNIST IDX ingestion and minibatch plumbing.

IDX is the classic big-endian format: 4-byte magic (0x00000803 for u8 image
tensors, 0x00000801 for u8 label vectors), one 4-byte big-endian size per
dimension, then raw bytes. Gzipped files are accepted transparently.
"""

from __future__ import annotations

import gzip
import struct

import numpy as np

from .errors import FormatError

_IMAGE_MAGIC = 0x00000803
_LABEL_MAGIC = 0x00000801


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{what}: truncated at byte {len(raw)}, magic missing")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatError(f"{what}: bad magic 0x{got:08x} at byte 0, "
                          f"expected 0x{magic:08x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{what}: truncated at byte {len(raw)}, "
                          f"dimension header runs to {header_end}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) != header_end + count:
        raise FormatError(f"{what}: expected {count} data bytes after byte "
                          f"{header_end}, file has {len(raw) - header_end}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """(x, y) with x float64 (N, 1, 28, 28) scaled to [0, 1] and y int64 (N,)."""
    images = _parse_idx(_read_bytes(images_path), _IMAGE_MAGIC, 3, f"{images_path}")
    labels = _parse_idx(_read_bytes(labels_path), _LABEL_MAGIC, 1, f"{labels_path}")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images_path}: {images.shape[0]} images but "
                          f"{labels.shape[0]} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return x, labels.astype(np.int64)


def train_val_split(x, y, val_fraction: float, rng) -> tuple:
    """Shuffled split; validation gets round(val_fraction * N) examples."""
    n = x.shape[0]
    n_val = int(round(val_fraction * n))
    idx = rng.permutation(n)
    val, train = idx[:n_val], idx[n_val:]
    return x[train], y[train], x[val], y[val]
