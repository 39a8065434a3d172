"""Convolutional subsampler followed by BLSTM layers or Conformer blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .nn import (LSTM, BatchNorm, Conv2d, DepthwiseConv1d, Dropout, LayerNorm, Linear, Module,
                 length_mask)
from .tensor import Tensor

NEG_LARGE = -1e9


@dataclass
class ConformerConfig:
    num_blocks: int = 17
    d_model: int = 512
    num_heads: int = 8
    conv_kernel: int = 32
    d_ffn: int = 2048
    dropout: float = 0.1
    subsample_channels: int = 256

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.num_blocks < 1 or self.conv_kernel < 1:
            raise ValueError("num_blocks and conv_kernel must be positive")


@dataclass
class BlstmConfig:
    """``d_model`` is the concatenated (forward + backward) width; 1280 gives 640 per direction."""

    num_layers: int = 6
    d_model: int = 1280
    dropout: float = 0.1
    subsample_channels: int = 256

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.d_model % 2:
            raise ValueError("d_model must be even (split across two directions)")


def subsampled_length(num_frames):
    """Length after two stride-2, kernel-3, padding-1 convolutions: ceil(ceil(T/2)/2)."""
    t = np.asarray(num_frames)
    return -(-(-(-t // 2)) // 2)


class Conv2dSubsampler(Module):
    """Two 3x3 stride-2 convolutions with ReLU, flattened and projected to ``d_model``."""

    def __init__(self, num_mel: int, channels: int, d_model: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(1, channels, 3, 2, 1, rng)
        self.conv2 = Conv2d(channels, channels, 3, 2, 1, rng)
        freq = subsampled_length(num_mel)
        self.proj = Linear(channels * int(freq), d_model, rng)

    def __call__(self, feats, lengths) -> Tuple[Tensor, np.ndarray]:
        x = T.as_tensor(feats)
        if x.ndim != 3:
            raise T.ShapeError(f"subsampler expects (B, T, F) features, got {x.shape}")
        b, t, _ = x.shape
        len1 = -(-np.asarray(lengths) // 2)
        len2 = subsampled_length(lengths)
        x = T.reshape(x, (b, 1, t, x.shape[2]))
        x = T.relu(self.conv1(x))
        # zero the padding so batched results equal per-utterance ones
        x = x * length_mask(len1, x.shape[2])[:, None, :, None]
        x = T.relu(self.conv2(x))
        b, c, t2, f2 = x.shape
        x = T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t2, c * f2))
        return self.proj(x), len2


def relative_positions(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal encodings of relative offsets length-1, ..., -(length-1)."""
    pos = np.arange(length - 1, -length, -1, dtype=np.float64)[:, None]
    inv = 1.0 / (10000.0 ** (np.arange(0, d_model, 2) / d_model))
    pe = np.zeros((2 * length - 1, d_model))
    pe[:, 0::2] = np.sin(pos * inv)
    pe[:, 1::2] = np.cos(pos * inv)
    return pe


class RelPositionMultiHeadAttention(Module):
    """Self-attention with Transformer-XL relative position scores.

    score(i, j) = (q_i + u) . k_j + (q_i + v) . r_{i-j}, scaled by 1/sqrt(d_k),
    where r is a learned projection of the sinusoidal encoding of i - j.
    """

    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator):
        super().__init__()
        self.h = num_heads
        self.dk = d_model // num_heads
        self.w_q = Linear(d_model, d_model, rng)
        self.w_k = Linear(d_model, d_model, rng)
        self.w_v = Linear(d_model, d_model, rng)
        self.w_pos = Linear(d_model, d_model, rng, bias=False)
        self.w_out = Linear(d_model, d_model, rng)
        lim = math.sqrt(6.0 / (num_heads + self.dk))
        self.pos_bias_u = T.parameter(rng.uniform(-lim, lim, size=(num_heads, 1, self.dk)))
        self.pos_bias_v = T.parameter(rng.uniform(-lim, lim, size=(num_heads, 1, self.dk)))
        self.last_weights: Optional[np.ndarray] = None

    def _heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return T.transpose(T.reshape(x, (b, t, self.h, self.dk)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        b, t, d = x.shape
        q = self._heads(self.w_q(x))
        k = self._heads(self.w_k(x))
        v = self._heads(self.w_v(x))
        pe = Tensor(relative_positions(t, d))
        p = T.transpose(T.reshape(self.w_pos(pe), (2 * t - 1, self.h, self.dk)), (1, 2, 0))
        content = T.matmul(q + self.pos_bias_u, T.swapaxes(k, -1, -2))
        pos_full = T.matmul(q + self.pos_bias_v, p)
        rows = np.arange(t)[:, None]
        cols = t - 1 - rows + np.arange(t)[None, :]
        position = pos_full[:, :, rows, cols]
        scores = (content + position) * (1.0 / math.sqrt(self.dk))
        scores = T.masked_fill(scores, ~mask[:, None, None, :], NEG_LARGE)
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = T.matmul(weights, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.w_out(ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ffn: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        self.norm = LayerNorm(d_model)
        self.fc1 = Linear(d_model, d_ffn, rng)
        self.fc2 = Linear(d_ffn, d_model, rng)
        self.drop = Dropout(dropout, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.drop(self.fc2(self.drop(T.swish(self.fc1(self.norm(x))))))


class ConvModule(Module):
    """LayerNorm, pointwise conv, GLU, depthwise conv, BatchNorm, Swish, pointwise conv, dropout."""

    def __init__(self, d_model: int, kernel: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        self.norm = LayerNorm(d_model)
        self.pointwise1 = Linear(d_model, 2 * d_model, rng)
        self.depthwise = DepthwiseConv1d(d_model, kernel, rng)
        self.batch_norm = BatchNorm(d_model)
        self.pointwise2 = Linear(d_model, d_model, rng)
        self.drop = Dropout(dropout, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        y = T.glu(self.pointwise1(self.norm(x)), axis=-1)
        y = y * mask[:, :, None]
        y = self.batch_norm(self.depthwise(y), mask=mask)
        return self.drop(self.pointwise2(T.swish(y)))


class ConformerBlock(Module):
    def __init__(self, cfg: ConformerConfig, rng: np.random.Generator):
        super().__init__()
        self.ffn1 = FeedForward(cfg.d_model, cfg.d_ffn, cfg.dropout, rng)
        self.attn_norm = LayerNorm(cfg.d_model)
        self.attn = RelPositionMultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.attn_drop = Dropout(cfg.dropout, rng)
        self.conv = ConvModule(cfg.d_model, cfg.conv_kernel, cfg.dropout, rng)
        self.ffn2 = FeedForward(cfg.d_model, cfg.d_ffn, cfg.dropout, rng)
        self.final_norm = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = x + 0.5 * self.ffn1(x)
        x = x + self.attn_drop(self.attn(self.attn_norm(x), mask))
        x = x + self.conv(x, mask)
        x = x + 0.5 * self.ffn2(x)
        return self.final_norm(x)


class ConformerEncoder(Module):
    def __init__(self, cfg: ConformerConfig, rng: np.random.Generator, num_mel: int = 80):
        super().__init__()
        self.cfg = cfg
        self.subsample = Conv2dSubsampler(num_mel, cfg.subsample_channels, cfg.d_model, rng)
        self.drop = Dropout(cfg.dropout, rng)
        self.blocks = [ConformerBlock(cfg, rng) for _ in range(cfg.num_blocks)]

    @property
    def d_out(self) -> int:
        return self.cfg.d_model

    def encode_subsampled(self, x: Tensor, lengths) -> Tensor:
        if x.shape[-1] != self.cfg.d_model:
            raise T.ShapeError(f"conformer expects d_model={self.cfg.d_model}, got {x.shape[-1]}")
        mask = length_mask(lengths, x.shape[1])
        x = self.drop(x)
        for block in self.blocks:
            x = block(x, mask)
        return x

    def __call__(self, feats, lengths) -> Tuple[Tensor, np.ndarray]:
        x, out_len = self.subsample(feats, lengths)
        return self.encode_subsampled(x, out_len), out_len


def reverse_padded(x: Tensor, lengths) -> Tensor:
    """Reverse each sequence within its own length; padding stays in place."""
    b, t = x.shape[0], x.shape[1]
    lengths = np.asarray(lengths)
    pos = np.arange(t)[None, :]
    idx = np.where(pos < lengths[:, None], lengths[:, None] - 1 - pos, pos)
    return x[np.arange(b)[:, None], idx]


class BlstmLayer(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fwd = LSTM(d_in, hidden, rng)
        self.bwd = LSTM(d_in, hidden, rng)

    def __call__(self, x: Tensor, lengths) -> Tensor:
        out_f, _ = self.fwd.run(x)
        out_b, _ = self.bwd.run(reverse_padded(x, lengths))
        return T.concat([out_f, reverse_padded(out_b, lengths)], axis=-1)


class BlstmEncoder(Module):
    def __init__(self, cfg: BlstmConfig, rng: np.random.Generator, num_mel: int = 80):
        super().__init__()
        self.cfg = cfg
        self.subsample = Conv2dSubsampler(num_mel, cfg.subsample_channels, cfg.d_model, rng)
        self.layers = [BlstmLayer(cfg.d_model, cfg.d_model // 2, rng) for _ in range(cfg.num_layers)]
        self.drops = [Dropout(cfg.dropout, rng) for _ in range(cfg.num_layers)]

    @property
    def d_out(self) -> int:
        return self.cfg.d_model

    def encode_subsampled(self, x: Tensor, lengths) -> Tensor:
        if x.shape[-1] != self.cfg.d_model:
            raise T.ShapeError(f"BLSTM expects input width {self.cfg.d_model}, got {x.shape[-1]}")
        for layer, drop in zip(self.layers, self.drops):
            x = drop(layer(x, lengths))
        return x

    def __call__(self, feats, lengths) -> Tuple[Tensor, np.ndarray]:
        x, out_len = self.subsample(feats, lengths)
        return self.encode_subsampled(x, out_len), out_len


def build_encoder(kind: str, cfg, rng: np.random.Generator, num_mel: int = 80):
    if kind == "conformer":
        cfg = cfg if isinstance(cfg, ConformerConfig) else ConformerConfig(**cfg)
        return ConformerEncoder(cfg, rng, num_mel)
    if kind == "blstm":
        cfg = cfg if isinstance(cfg, BlstmConfig) else BlstmConfig(**cfg)
        return BlstmEncoder(cfg, rng, num_mel)
    raise ValueError(f"unknown encoder type {kind!r} (expected 'conformer' or 'blstm')")


def encoder_config_dict(encoder) -> dict:
    return asdict(encoder.cfg)
