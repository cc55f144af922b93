"""Binary checkpoint container.

Layout, all integers little-endian::

    b"PGCK"  uint32 version  uint32 header_len  header (UTF-8 JSON, sorted keys)
    uint32 n_tensors
    n_tensors x { uint16 name_len, name (UTF-8), uint8 dtype, uint8 ndim,
                  uint32 dims[ndim], raw little-endian data }

dtype codes: 0 float64, 1 float32, 2 int64. Tensors are written in sorted
name order; names are ``param/<name>``, ``adam.m/<name>``, ``adam.v/<name>``
and ``mtl/log_sigma``. The header holds the model configuration, epoch,
optimizer scalars and the trainer RNG state.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PGCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    tensors: dict = field(default_factory=dict)
    epoch: int = 0
    optimizer: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def params(self) -> dict[str, np.ndarray]:
        return {k[len("param/"):]: v for k, v in self.tensors.items() if k.startswith("param/")}

    def to_bytes(self) -> bytes:
        header = json.dumps({
            "model_config": self.model_config,
            "epoch": self.epoch,
            "optimizer": self.optimizer,
            "rng_state": self.rng_state,
            "extra": self.extra,
        }, sort_keys=True, separators=(",", ":")).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(header)))
        buf.write(header)
        buf.write(struct.pack("<I", len(self.tensors)))
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name])
            code = _CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
            bname = name.encode()
            buf.write(struct.pack("<H", len(bname)))
            buf.write(bname)
            buf.write(struct.pack("<BB", code, arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        return buf.getvalue()

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        pos = 4
        try:
            version, hlen = struct.unpack_from("<II", raw, pos)
            if version != VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            pos += 8
            header = json.loads(raw[pos:pos + hlen].decode())
            pos += hlen
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            tensors = {}
            for _ in range(n):
                (nlen,) = struct.unpack_from("<H", raw, pos)
                pos += 2
                name = raw[pos:pos + nlen].decode()
                pos += nlen
                code, ndim = struct.unpack_from("<BB", raw, pos)
                pos += 2
                shape = struct.unpack_from(f"<{ndim}I", raw, pos)
                pos += 4 * ndim
                dt = _DTYPES[code]
                count = int(np.prod(shape)) if ndim else 1
                arr = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(shape)
                pos += count * dt.itemsize
                tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
        except (struct.error, KeyError, ValueError) as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc}") from None
        if pos != len(raw):
            raise CheckpointError(f"corrupt checkpoint: {len(raw) - pos} trailing bytes")
        return cls(header["model_config"], tensors, header["epoch"], header["optimizer"],
                   header["rng_state"], header.get("extra", {}))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
        return cls.from_bytes(raw)


def check_config(ckpt: Checkpoint, expected: dict) -> None:
    if ckpt.model_config != expected:
        diff = sorted(k for k in set(ckpt.model_config) | set(expected)
                      if ckpt.model_config.get(k) != expected.get(k))
        raise CheckpointError(f"checkpoint model config differs from the requested one in {diff}")
