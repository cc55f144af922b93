"""Packed uint8 image archives.

Layout (little-endian)::

    b"PKU8" | uint32 count | uint32 height | uint32 width | count*height*width bytes

Images are stored row-major, one after another.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PKU8"
HEADER = struct.Struct("<4sIII")


class CorpusError(IOError):
    pass


def write_packed(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.ndim != 3:
        raise ValueError(f"expected [count, height, width] images, got shape {images.shape}")
    if images.dtype != np.uint8:
        raise ValueError(f"packed archives hold uint8 images, got {images.dtype}")
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, n, h, w))
        fh.write(np.ascontiguousarray(images).tobytes())


def read_packed(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CorpusError(f"cannot read image archive {path}: {exc.strerror}") from None
    if len(raw) < HEADER.size:
        raise CorpusError(f"{path}: truncated header")
    magic, n, h, w = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorpusError(f"{path}: not a packed uint8 archive (bad magic {magic!r})")
    expected = HEADER.size + n * h * w
    if len(raw) != expected:
        raise CorpusError(f"{path}: expected {expected} bytes for {n}x{h}x{w}, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=HEADER.size).reshape(n, h, w)


def load_corpus(path) -> np.ndarray:
    """Read a packed archive or a MedMNIST-style ``.npz`` (all ``*_images`` arrays concatenated)."""
    path = Path(path)
    if path.suffix == ".npz":
        try:
            with np.load(path) as npz:
                keys = sorted(k for k in npz.files if k.endswith("images"))
                if not keys:
                    raise CorpusError(f"{path}: no '*images' arrays in archive")
                arrays = [npz[k] for k in keys]
        except (OSError, ValueError) as exc:
            raise CorpusError(f"cannot read corpus {path}: {exc}") from None
        imgs = np.concatenate(arrays, axis=0)
        if imgs.ndim == 4:
            imgs = imgs[..., 0] if imgs.shape[-1] == 1 else imgs.mean(axis=-1).round()
        return imgs.astype(np.uint8)
    return read_packed(path)
