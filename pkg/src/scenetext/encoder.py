"""Attentional residual CNN and stacked Bi-LSTM context encoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import ops
from .nn import BatchNorm, BiLSTM, Conv2d, Module, _param
from .ops import ConfigurationError
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    in_h: int = 32
    in_w: int = 100
    stem_channels: int = 32
    block_channels: tuple = (64, 128, 256, 512)
    block_units: tuple = (3, 4, 6, 3)
    pool_kernels: tuple = ((2, 2), (2, 1), (2, 1), (2, 1))
    pool_strides: tuple = ((2, 2), (2, 1), (2, 1), (2, 1))
    final_channels: int = 1024
    final_kernel: tuple = (2, 2)
    lstm_hidden: int = 512
    reduction: int = 16
    use_attention: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


FULL = EncoderConfig()
TOY = EncoderConfig(stem_channels=16, block_channels=(16, 32, 64, 64), block_units=(1, 1, 1, 1),
                    final_channels=128, lstm_hidden=64, reduction=4)


def shape_schedule(cfg: EncoderConfig) -> list[tuple[int, int, int]]:
    """``(H, W, C)`` after the stem, each block, and the final convolution."""
    h, w = cfg.in_h, cfg.in_w
    out = [(h, w, cfg.stem_channels)]
    for c, (kh, kw), (sh, sw) in zip(cfg.block_channels, cfg.pool_kernels, cfg.pool_strides):
        h, w = (h - kh) // sh + 1, (w - kw) // sw + 1
        out.append((h, w, c))
    fh, fw = cfg.final_kernel
    out.append((h - fh + 1, w - fw + 1, cfg.final_channels))
    return out


@dataclass
class AttentionMasks:
    channel_mask: np.ndarray  # N x 1 x 1 x C
    spatial_mask: np.ndarray  # N x H x W x 1


class ChannelAttention(Module):
    """Shared bottleneck over global average- and max-pooled descriptors."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator, dtype=np.float64):
        if channels % reduction:
            raise ConfigurationError(
                f"reduction ratio {reduction} does not divide channel count {channels}")
        hidden = channels // reduction
        self.w1 = _param(rng.normal(0, np.sqrt(2.0 / channels), (channels, hidden)), dtype)
        self.b1 = _param(np.zeros(hidden), dtype)
        self.w2 = _param(rng.normal(0, np.sqrt(1.0 / hidden), (hidden, channels)), dtype)
        self.b2 = _param(np.zeros(channels), dtype)

    def _mlp(self, d: Tensor) -> Tensor:
        return ops.linear(ops.relu(ops.linear(d, self.w1, self.b1)), self.w2, self.b2)

    def forward(self, f: Tensor) -> Tensor:
        n, c = f.shape[0], f.shape[-1]
        avg = ops.reshape(ops.mean(f, axis=(1, 2)), (n, c))
        mx = ops.reshape(ops.max(f, axis=(1, 2)), (n, c))
        mask = ops.sigmoid(ops.add(self._mlp(avg), self._mlp(mx)))
        return ops.reshape(mask, (n, 1, 1, c))


class SpatialAttention(Module):
    """3x3 convolution over channel-wise mean and max maps."""

    def __init__(self, rng: np.random.Generator, dtype=np.float64):
        self.conv = Conv2d(2, 1, 3, rng, bias=True, dtype=dtype)

    def forward(self, f: Tensor) -> Tensor:
        avg = ops.mean(f, axis=-1, keepdims=True)
        mx = ops.max(f, axis=-1, keepdims=True)
        return ops.sigmoid(self.conv(ops.concat([avg, mx], axis=-1)))


class CBAM(Module):
    """Channel mask first, then a spatial mask computed on the refined map."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator, dtype=np.float64):
        self.channel = ChannelAttention(channels, reduction, rng, dtype)
        self.spatial = SpatialAttention(rng, dtype)
        self._last: Optional[AttentionMasks] = None

    @property
    def last_masks(self) -> Optional[AttentionMasks]:
        return self._last

    def forward(self, f: Tensor) -> Tensor:
        mc = self.channel(f)
        refined = ops.mul(f, mc)
        ma = self.spatial(refined)
        self._last = AttentionMasks(mc.data, ma.data)
        return ops.mul(refined, ma)


def channel_attention(f: Tensor, module: ChannelAttention) -> Tensor:
    return module(f)


def spatial_attention(f: Tensor, module: SpatialAttention) -> Tensor:
    return module(f)


class AttentionalResidualUnit(Module):
    """``norm/relu/conv`` twice, CBAM on the trunk, then add the shortcut."""

    def __init__(self, c_in: int, c_out: int, reduction: int, rng: np.random.Generator,
                 dtype=np.float64, use_attention: bool = True):
        self.norm1 = BatchNorm(c_in, dtype)
        self.conv1 = Conv2d(c_in, c_out, 3, rng, dtype=dtype)
        self.norm2 = BatchNorm(c_out, dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, dtype=dtype)
        self.cbam = CBAM(c_out, reduction, rng, dtype) if use_attention else None
        self.shortcut = Conv2d(c_in, c_out, 1, rng, dtype=dtype) if c_in != c_out else None

    def forward(self, x: Tensor) -> Tensor:
        trunk = self.conv1(ops.relu(self.norm1(x)))
        trunk = self.conv2(ops.relu(self.norm2(trunk)))
        if self.cbam is not None:
            trunk = self.cbam(trunk)
        short = x if self.shortcut is None else self.shortcut(x)
        return ops.add(trunk, short)


def attentional_residual_block(f: Tensor, unit: AttentionalResidualUnit) -> Tensor:
    return unit(f)


class VisualEncoder(Module):
    """Image ``N x 32 x 100 x 3`` to a height-1 feature sequence ``N x 1 x W' x C'``."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
        self._cfg = cfg
        self.stem = Conv2d(3, cfg.stem_channels, 3, rng, dtype=dtype)
        self.blocks = []
        c_in = cfg.stem_channels
        for c_out, units in zip(cfg.block_channels, cfg.block_units):
            block = []
            for u in range(units):
                block.append(AttentionalResidualUnit(c_in if u == 0 else c_out, c_out,
                                                     cfg.reduction, rng, dtype, cfg.use_attention))
            self.blocks.append(_Block(block))
            c_in = c_out
        self.final_norm_in = BatchNorm(c_in, dtype)
        self.final = Conv2d(c_in, cfg.final_channels, cfg.final_kernel, rng, padding="valid",
                            dtype=dtype)
        self.final_norm = BatchNorm(cfg.final_channels, dtype)

    @property
    def config(self) -> EncoderConfig:
        return self._cfg

    def forward(self, images: Tensor) -> Tensor:
        cfg = self._cfg
        x = self.stem(images)
        for block, kernel, stride in zip(self.blocks, cfg.pool_kernels, cfg.pool_strides):
            x = ops.maxpool2d(block(x), kernel, stride)
        x = self.final(ops.relu(self.final_norm_in(x)))
        x = ops.relu(self.final_norm(x))
        if x.shape[1] != 1:
            raise ConfigurationError(f"encoder output height is {x.shape[1]}, expected 1")
        return x


class _Block(Module):
    def __init__(self, units):
        self.units = units

    def forward(self, x: Tensor) -> Tensor:
        for unit in self.units:
            x = unit(x)
        return x


class ContextEncoder(Module):
    """Two stacked bidirectional LSTMs over the width axis: ``N x T x 2D'``."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        self.layer1 = BiLSTM(d_in, hidden, rng, dtype)
        self.layer2 = BiLSTM(2 * hidden, hidden, rng, dtype)

    def forward(self, features: Tensor) -> Tensor:
        if features.ndim == 4:
            n, h, w, c = features.shape
            if h != 1:
                raise ConfigurationError(f"context encoder needs height 1, got {h}")
            features = ops.reshape(features, (n, w, c))
        return self.layer2(self.layer1(features))


def encode_visual(images: Tensor, encoder: VisualEncoder) -> Tensor:
    return encoder(images)


def encode_context(features: Tensor, context: ContextEncoder) -> Tensor:
    return context(features)
