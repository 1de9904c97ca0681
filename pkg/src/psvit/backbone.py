"""Convolutional feature extractor: ResNet stem, bottleneck blocks, 1x1 projection."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Iterator

import numpy as np

from . import ops
from .autograd import Tensor
from .ops import conv_out_size

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
STRIDE = 4


class BackboneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 64
    width: int = 64
    out_channels: int = 256
    blocks: int = 2
    # "batch": batch statistics in training, running averages in eval.
    # "affine": per-channel scale/shift only; used for exact gradient audits.
    norm: str = "batch"

    def __post_init__(self):
        if self.norm not in ("batch", "affine"):
            raise BackboneConfigError(f"unknown norm {self.norm!r}")
        if self.blocks < 0:
            raise BackboneConfigError("block count must be non-negative")

    @classmethod
    def toy(cls) -> "BackboneConfig":
        return cls(stem_channels=8, width=4, out_channels=16, blocks=2, norm="affine")

    def to_dict(self) -> dict:
        return asdict(self)


def _he_conv(rng, cout, cin, k) -> Tensor:
    std = np.sqrt(2.0 / (cout * k * k))
    return Tensor(rng.standard_normal((cout, cin, k, k)) * std, requires_grad=True)


class Norm:
    def __init__(self, channels: int, kind: str):
        self.kind = kind
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def __call__(self, x: Tensor, train_mode: bool) -> Tensor:
        if self.kind == "affine":
            return ops.channel_affine(x, self.gamma, self.beta)
        if train_mode:
            d = x.data
            m = d.shape[0] * d.shape[2] * d.shape[3]
            mean = d.mean(axis=(0, 2, 3))
            var = d.var(axis=(0, 2, 3)) * (m / max(m - 1, 1))
            dt = self.running_mean.dtype
            self.running_mean = ((1 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * mean).astype(dt)
            self.running_var = ((1 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * var).astype(dt)
            return ops.batch_norm_train(x, self.gamma, self.beta, eps=BN_EPS)
        return ops.batch_norm_eval(
            x, self.gamma, self.beta,
            mean=self.running_mean.astype(x.data.dtype), var=self.running_var.astype(x.data.dtype), eps=BN_EPS,
        )

    def named_parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta


class Bottleneck:
    """1x1 -> 3x3 -> 1x1 residual block with post-add ReLU, stride 1."""

    def __init__(self, cin: int, width: int, cout: int, norm: str, rng: np.random.Generator):
        self.conv1 = _he_conv(rng, width, cin, 1)
        self.norm1 = Norm(width, norm)
        self.conv2 = _he_conv(rng, width, width, 3)
        self.norm2 = Norm(width, norm)
        self.conv3 = _he_conv(rng, cout, width, 1)
        self.norm3 = Norm(cout, norm)
        if cin != cout:
            self.shortcut = _he_conv(rng, cout, cin, 1)
            self.shortcut_norm = Norm(cout, norm)
        else:
            self.shortcut = None
            self.shortcut_norm = None

    @property
    def in_channels(self) -> int:
        return self.conv1.shape[1]

    def _norms(self):
        yield "norm1", self.norm1
        yield "norm2", self.norm2
        yield "norm3", self.norm3
        if self.shortcut_norm is not None:
            yield "shortcut_norm", self.shortcut_norm

    def named_parameters(self):
        yield "conv1", self.conv1
        yield "conv2", self.conv2
        yield "conv3", self.conv3
        if self.shortcut is not None:
            yield "shortcut", self.shortcut
        for name, norm in self._norms():
            for pname, p in norm.named_parameters():
                yield f"{name}.{pname}", p

    def named_norms(self):
        yield from self._norms()


def residual_block(x: Tensor, block: Bottleneck, train_mode: bool = False) -> Tensor:
    if x.shape[1] != block.in_channels:
        raise BackboneConfigError(f"block expects {block.in_channels} channels, got {x.shape[1]}")
    h = ops.relu(block.norm1(ops.conv2d(x, block.conv1), train_mode))
    h = ops.relu(block.norm2(ops.conv2d(h, block.conv2, padding=1), train_mode))
    h = block.norm3(ops.conv2d(h, block.conv3), train_mode)
    skip = x
    if block.shortcut is not None:
        skip = block.shortcut_norm(ops.conv2d(x, block.shortcut), train_mode)
    return ops.relu(h + skip)


class Backbone:
    def __init__(self, config: BackboneConfig, dim: int, rng: np.random.Generator):
        self.config = config
        c = config
        self.stem = _he_conv(rng, c.stem_channels, 3, 7)
        self.stem_norm = Norm(c.stem_channels, c.norm)
        self.blocks = []
        cin = c.stem_channels
        for _ in range(c.blocks):
            self.blocks.append(Bottleneck(cin, c.width, c.out_channels, c.norm, rng))
            cin = c.out_channels
        self.proj = _he_conv(rng, dim, cin, 1)
        self.proj_bias = Tensor(np.zeros(dim), requires_grad=True)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "stem.conv", self.stem
        for name, p in self.stem_norm.named_parameters():
            yield f"stem.norm.{name}", p
        for i, block in enumerate(self.blocks):
            for name, p in block.named_parameters():
                yield f"blocks.{i}.{name}", p
        yield "proj.weight", self.proj
        yield "proj.bias", self.proj_bias

    def named_norms(self):
        yield "stem.norm", self.stem_norm
        for i, block in enumerate(self.blocks):
            for name, norm in block.named_norms():
                yield f"blocks.{i}.{name}", norm

    @staticmethod
    def count(config: BackboneConfig, dim: int) -> int:
        c = config
        total = c.stem_channels * 3 * 49 + 2 * c.stem_channels
        cin = c.stem_channels
        for _ in range(c.blocks):
            total += cin * c.width + 9 * c.width * c.width + c.width * c.out_channels
            total += 2 * (2 * c.width + c.out_channels)
            if cin != c.out_channels:
                total += cin * c.out_channels + 2 * c.out_channels
            cin = c.out_channels
        return total + cin * dim + dim


def feature_size(h: int, w: int) -> tuple[int, int]:
    """Spatial size after the stem: 7x7/2 conv then 3x3/2 max pool."""
    h1, w1 = conv_out_size(h, 7, 2, 3), conv_out_size(w, 7, 2, 3)
    return conv_out_size(h1, 3, 2, 1), conv_out_size(w1, 3, 2, 1)


def extract_features(image: Tensor, backbone: Backbone, train_mode: bool = False) -> Tensor:
    """Dense ``C x H/4 x W/4`` feature map for a ``3 x H x W`` image (or a batch)."""
    x = image if image.ndim == 4 else image.reshape((1,) + image.shape)
    if x.shape[1] != 3:
        raise BackboneConfigError(f"expected 3 input channels, got {x.shape[1]}")
    h, w = x.shape[2:]
    if h % STRIDE or w % STRIDE:
        raise BackboneConfigError(f"input size {h}x{w} is not divisible by {STRIDE}")
    x = ops.relu(backbone.stem_norm(ops.conv2d(x, backbone.stem, stride=2, padding=3), train_mode))
    x = ops.max_pool2d(x, k=3, stride=2, padding=1)
    for block in backbone.blocks:
        x = residual_block(x, block, train_mode)
    x = ops.conv2d(x, backbone.proj) + backbone.proj_bias.reshape(-1, 1, 1)
    assert x.shape[2:] == (h // STRIDE, w // STRIDE)
    return x if image.ndim == 4 else x.reshape(x.shape[1:])
