"""Image -> (current stage, K-horizon course) network.

A residual CNN turns the image into a grid of super-pixel tokens, a diagnosis
transformer classifies the current stage from its start token, a context
network embeds the predicted stage (and optional clinical vector), and a
prognosis transformer over the context-augmented tokens feeds K per-horizon
heads. Each head emits ``n_prognosis_classes + 2`` logits: the stage at that
horizon followed by a 2-way "progressed by then" flag.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .diffcore import Tensor, ops
from .nn import LayerNorm, Linear, Module, ResidualCNN, TransformerEncoder

N_PROGRESSION_CLASSES = 2


@dataclass
class ModelConfig:
    image_height: int = 256
    image_width: int = 256
    image_channels: int = 1
    cnn_channels: tuple = (16, 32, 64, 128)
    cnn_strides: tuple = (2, 2, 2, 2)
    context_width: int = 64
    embed_width: int = 32
    depth_D: int = 2
    depth_P: int = 8
    heads: int = 4
    ffn_width: int = 256
    K: int = 8
    n_prognosis_classes: int = 5
    dropout_rate: float = 0.3
    use_clinical: bool = False
    clinical_dim: int = 0
    fuse_mode: str = "probs"
    detach_diag: bool = False
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.cnn_channels = tuple(int(c) for c in self.cnn_channels)
        self.cnn_strides = tuple(int(s) for s in self.cnn_strides)
        self.validate()

    @property
    def C(self) -> int:
        return self.cnn_channels[-1] if self.cnn_channels else self.image_channels

    @property
    def downsample(self) -> int:
        return int(np.prod(self.cnn_strides)) if self.cnn_strides else 1

    @property
    def n_tokens(self) -> int:
        return (self.image_height // self.downsample) * (self.image_width // self.downsample)

    @property
    def logit_width(self) -> int:
        return self.n_prognosis_classes + N_PROGRESSION_CLASSES

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> None:
        if self.heads < 1 or self.C % self.heads:
            raise ValueError(f"token width C={self.C} must be divisible by heads={self.heads}")
        if (self.C + self.context_width) % self.heads:
            raise ValueError(f"C + C0 = {self.C + self.context_width} must be divisible by heads={self.heads}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.depth_D < 0 or self.depth_P < 0:
            raise ValueError("transformer depths must be >= 0")
        if self.fuse_mode not in ("probs", "argmax"):
            raise ValueError(f"fuse_mode must be 'probs' or 'argmax', got {self.fuse_mode!r}")
        if self.use_clinical and self.clinical_dim < 1:
            raise ValueError("use_clinical requires clinical_dim >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if len(self.cnn_channels) != len(self.cnn_strides):
            raise ValueError("cnn_channels and cnn_strides must have equal length")
        ds = self.downsample
        if self.image_height % ds or self.image_width % ds:
            raise ValueError(f"image size {self.image_height}x{self.image_width} must be a multiple "
                             f"of the CNN downsample factor {ds}")
        if self.n_tokens + 1 < self.K:
            raise ValueError(f"sequence of {self.n_tokens + 1} positions is shorter than K={self.K}; "
                             "enlarge the image or reduce K")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        d["cnn_strides"] = list(self.cnn_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class PrognosisOutput:
    diag_logits: Tensor
    horizon_logits: Tensor
    attention: Optional[list] = field(default=None, repr=False)

    @property
    def n_classes(self) -> int:
        return self.diag_logits.shape[1]

    def diag_probs(self) -> np.ndarray:
        return _softmax_np(self.diag_logits.data)

    def prognosis_probs(self) -> np.ndarray:
        return _softmax_np(self.horizon_logits.data[..., : self.n_classes])

    def progression_probs(self) -> np.ndarray:
        return _softmax_np(self.horizon_logits.data[..., self.n_classes:])


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class HorizonHead(Module):
    """LN -> FC -> GELU -> FC producing one horizon's logits."""

    def __init__(self, dim: int, hidden: int, out: int, rng, dtype):
        self.ln = LayerNorm(dim, dtype)
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, out, rng, dtype, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(self.ln(x))))


class PrognosisModel(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        dt = config.np_dtype
        C, C0, n = config.C, config.context_width, config.n_tokens
        self.cnn = ResidualCNN(config.image_channels, config.cnn_channels, config.cnn_strides, rng, dt)
        self.encoder_D = TransformerEncoder(n, C, config.depth_D, config.heads, config.ffn_width,
                                            config.dropout_rate, rng, prepend_cls=True, dtype=dt)
        self.diag_ln = LayerNorm(C, dt)
        self.diag_fc = Linear(C, config.n_prognosis_classes, rng, dt)
        self.stage_embed = Linear(config.n_prognosis_classes, config.embed_width, rng, dt)
        self.clinical_embed = (Linear(config.clinical_dim, config.embed_width, rng, dt)
                               if config.use_clinical else None)
        ctx_in = config.embed_width * (2 if config.use_clinical else 1)
        self.context_fc = Linear(ctx_in, C0, rng, dt)
        self.context_ln = LayerNorm(C0, dt)
        # no second start token: P consumes positions 0..K-1 of the fused sequence
        self.encoder_P = TransformerEncoder(n + 1, C + C0, config.depth_P, config.heads, config.ffn_width,
                                            config.dropout_rate, rng, prepend_cls=False, dtype=dt)
        self.horizon_heads = [HorizonHead(C + C0, config.ffn_width, config.logit_width, rng, dt)
                              for _ in range(config.K)]

    # stages of the forward pass

    def extract_superpixels(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.config.np_dtype))
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.image_channels:
            raise ValueError(f"images must be [B, {cfg.image_channels}, H, W], got {x.shape}")
        H, W = x.shape[2:]
        ds = cfg.downsample
        if H % ds or W % ds:
            raise ValueError(f"image size {H}x{W} must be a multiple of {ds} (CNN downsample factor)")
        if (H, W) != (cfg.image_height, cfg.image_width):
            raise ValueError(f"model built for {cfg.image_height}x{cfg.image_width} images, got {H}x{W}")
        fmap = self.cnn(x)
        B, C, Hl, Wl = fmap.shape
        # row-major over (Hl, Wl)
        return ops.reshape(ops.transpose(fmap, (0, 2, 3, 1)), (B, Hl * Wl, C))

    def transformer_encode(self, seq: Tensor, train: bool = False, rng=None) -> Tensor:
        return self.encoder_D(seq, train, rng)

    def diagnose(self, states: Tensor) -> Tensor:
        return self.diag_fc(self.diag_ln(states[:, 0, :]))

    def context_token(self, diag_probs: Tensor, clinical=None) -> Tensor:
        if clinical is not None and not self.config.use_clinical:
            raise ValueError("clinical data supplied but the model was built with use_clinical=false")
        if clinical is None and self.config.use_clinical:
            raise ValueError("model was built with use_clinical=true but no clinical data was given")
        parts = [self.stage_embed(diag_probs)]
        if clinical is not None:
            m = clinical if isinstance(clinical, Tensor) else Tensor(np.asarray(clinical, dtype=self.config.np_dtype))
            parts.append(self.clinical_embed(m))
        emb = parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)
        return self.context_ln(ops.relu(self.context_fc(emb)))

    def fuse_context(self, diag_probs: Tensor, clinical, states: Tensor) -> Tensor:
        B, T, _ = states.shape
        token = self.context_token(diag_probs, clinical)
        C0 = token.shape[1]
        rep = ops.broadcast_to(ops.reshape(token, (B, 1, C0)), (B, T, C0))
        return ops.concat([states, rep], axis=2)

    def prognose(self, fused: Tensor, train: bool = False, rng=None, record=None) -> Tensor:
        K = self.config.K
        if fused.shape[1] < K:
            raise ValueError(f"sequence of {fused.shape[1]} positions is shorter than K={K}; "
                             "enlarge the image or reduce K")
        out = self.encoder_P(fused, train, rng, record)
        B = out.shape[0]
        logits = [ops.reshape(head(out[:, k, :]), (B, 1, -1)) for k, head in enumerate(self.horizon_heads)]
        return logits[0] if K == 1 else ops.concat(logits, axis=1)

    def _stage_input(self, diag_logits: Tensor) -> Tensor:
        cfg = self.config
        if cfg.fuse_mode == "argmax":
            idx = np.argmax(diag_logits.data, axis=1)
            return Tensor(np.eye(cfg.n_prognosis_classes, dtype=cfg.np_dtype)[idx])
        probs = ops.softmax(diag_logits, axis=1)
        return Tensor(probs.data) if cfg.detach_diag else probs

    def forward(self, images, clinical=None, train: bool = False, rng: np.random.Generator | None = None,
                record_attention: bool = False) -> PrognosisOutput:
        if train and self.config.dropout_rate > 0 and rng is None:
            raise ValueError("train mode with dropout needs an rng")
        tokens = self.extract_superpixels(images)
        states = self.transformer_encode(tokens, train, rng)
        diag_logits = self.diagnose(states)
        fused = self.fuse_context(self._stage_input(diag_logits), clinical, states)
        record = [] if record_attention else None
        horizon_logits = self.prognose(fused, train, rng, record)
        return PrognosisOutput(diag_logits, horizon_logits, record)

    __call__ = forward


def export_attention(output: PrognosisOutput) -> list[np.ndarray]:
    """Per-layer attention weights of the prognosis transformer, each [B, heads, T, T]."""
    if output.attention is None:
        raise ValueError("attention maps were not recorded; run forward(..., record_attention=True)")
    return [a.copy() for a in output.attention]
