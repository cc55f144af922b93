"""Layers built on the diffcore primitives."""
from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from .diffcore import Tensor, ops

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) resampled outside +-2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=data.dtype)


class Module:
    """Container tracking parameters and submodules by attribute name."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64,
                 zero: bool = False, bias: bool = True):
        w = np.zeros((d_in, d_out), dtype=dtype) if zero else trunc_normal(rng, (d_in, d_out), dtype=dtype)
        self.weight = param(w)
        self.bias = param(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64):
        self.gain = param(np.ones(dim, dtype=dtype))
        self.bias = param(np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, dtype=np.float64):
        std = math.sqrt(2.0 / (c_in * k * k))
        self.kernel = param((rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype))
        self.bias = param(np.zeros((1, c_out, 1, 1), dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(ops.conv2d(x, self.kernel, self.stride, self.padding), self.bias)


class ResidualStage(Module):
    """conv3x3(stride) -> ReLU -> conv3x3, plus a 1x1 projection shortcut, then ReLU."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng, dtype=np.float64):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, padding=1, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, stride=1, padding=1, dtype=dtype)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = Conv2d(c_in, c_out, 1, rng, stride=stride, padding=0, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv2(ops.relu(self.conv1(x)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return ops.relu(ops.add(h, skip))


class ResidualCNN(Module):
    def __init__(self, c_in: int, channels, strides, rng, dtype=np.float64):
        if len(channels) != len(strides):
            raise ValueError(f"channel plan {list(channels)} and strides {list(strides)} differ in length")
        self.stages = []
        prev = c_in
        for c, s in zip(channels, strides):
            self.stages.append(ResidualStage(prev, c, s, rng, dtype=dtype))
            prev = c
        self.downsample = int(np.prod(strides)) if strides else 1

    def __call__(self, x: Tensor) -> Tensor:
        for stage in self.stages:
            x = stage(x)
        return x


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype=np.float64):
        if dim % heads:
            raise ValueError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor, record: Optional[list] = None) -> Tensor:
        B, T, D = x.shape
        h, d = self.heads, D // self.heads

        def split(t):
            return ops.transpose(ops.reshape(t, (B, T, h, d)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
        attn = ops.softmax(scores, axis=-1)
        if record is not None:
            record.append(attn.data.copy())
        ctx = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (B, T, D))
        return self.out(ctx)


class EncoderLayer(Module):
    def __init__(self, dim: int, heads: int, ffn_width: int, dropout: float, rng, dtype=np.float64):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, rng, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.fc1 = Linear(dim, ffn_width, rng, dtype)
        self.fc2 = Linear(ffn_width, dim, rng, dtype)
        self.dropout = dropout

    def __call__(self, h: Tensor, train: bool, rng, record=None) -> Tensor:
        z = ops.add(ops.dropout(self.attn(self.ln1(h), record), self.dropout, train, rng), h)
        m = self.fc2(ops.dropout(ops.gelu(self.fc1(self.ln2(z))), self.dropout, train, rng))
        return ops.add(ops.dropout(m, self.dropout, train, rng), z)


class TransformerEncoder(Module):
    """Pre-norm encoder: optional learnable start token, learnable positions, L layers."""

    def __init__(self, seq_len: int, dim: int, depth: int, heads: int, ffn_width: int, dropout: float,
                 rng, prepend_cls: bool = True, dtype=np.float64):
        if depth < 0:
            raise ValueError(f"encoder depth must be >= 0, got {depth}")
        if dim % heads:
            raise ValueError(f"width {dim} is not divisible by {heads} heads")
        self.prepend_cls = prepend_cls
        self.cls = param(trunc_normal(rng, (1, 1, dim), dtype=dtype)) if prepend_cls else None
        total = seq_len + 1 if prepend_cls else seq_len
        self.pos = param(trunc_normal(rng, (1, total, dim), dtype=dtype))
        self.layers = [EncoderLayer(dim, heads, ffn_width, dropout, rng, dtype) for _ in range(depth)]

    def __call__(self, seq: Tensor, train: bool = False, rng=None, record=None) -> Tensor:
        B = seq.shape[0]
        if self.prepend_cls:
            seq = ops.concat([ops.broadcast_to(self.cls, (B, 1, seq.shape[2])), seq], axis=1)
        if seq.shape[1:] != self.pos.shape[1:]:
            raise ValueError(f"encoder expects sequences of shape {self.pos.shape[1:]}, got {seq.shape[1:]}")
        h = ops.add(seq, self.pos)
        for layer in self.layers:
            h = layer(h, train, rng, record)
        return h
