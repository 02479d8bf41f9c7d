"""ResNet50-style encoder with attention inside each bottleneck.

The attention block sits after conv3 + BN and before the residual sum, and
the classifier (avgpool + fc) does not exist: the encoder returns the five
feature maps Feat0..Feat4 at strides 2, 4, 8, 16, 32.
"""

from __future__ import annotations

import numpy as np

from .attention import make_attention
from .config import ModelConfig
from .nn import BatchNorm2d, Conv2d, Module, maxpool2d_3x3_s2, relu
from .tensor import Tensor

EXPANSION = 4


class Bottleneck(Module):
    def __init__(self, c_in: int, mid: int, stride: int, cfg: ModelConfig,
                 attention: bool, rng: np.random.Generator):
        bn = dict(eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        c_out = EXPANSION * mid
        self.conv1 = Conv2d(c_in, mid, 1, rng=rng)
        self.bn1 = BatchNorm2d(mid, **bn)
        self.conv2 = Conv2d(mid, mid, 3, stride=stride, padding=1, rng=rng)
        self.bn2 = BatchNorm2d(mid, **bn)
        self.conv3 = Conv2d(mid, c_out, 1, rng=rng)
        self.bn3 = BatchNorm2d(c_out, **bn)
        self.attn = make_attention(cfg.attention, c_out, cfg.gca, cfg.baseline_reduction, rng) \
            if attention else None
        if stride != 1 or c_in != c_out:
            self.down_conv = Conv2d(c_in, c_out, 1, stride=stride, rng=rng)
            self.down_bn = BatchNorm2d(c_out, **bn)
        else:
            self.down_conv = self.down_bn = None

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.bn1(self.conv1(x)))
        h = relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        if self.attn is not None:
            h = self.attn(h)
        shortcut = self.down_bn(self.down_conv(x)) if self.down_conv is not None else x
        if h.shape != shortcut.shape:
            raise ValueError(f"residual branch {h.shape} does not match shortcut {shortcut.shape}")
        return relu(h + shortcut)


class Stem(Module):
    def __init__(self, c_in: int, c_out: int, cfg: ModelConfig, rng):
        self.conv = Conv2d(c_in, c_out, 7, stride=2, padding=3, rng=rng)
        self.bn = BatchNorm2d(c_out, eps=cfg.bn_eps, momentum=cfg.bn_momentum)

    def forward(self, x):
        return relu(self.bn(self.conv(x)))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        stem = cfg.width(cfg.stem_channels)
        self.stem = Stem(cfg.in_channels, stem, cfg, rng)
        self.stages = []
        c_in = stem
        for depth, mid, stride, attn in zip(cfg.stage_depths, cfg.stage_mids,
                                            cfg.stage_strides, cfg.attention_stages):
            mid = cfg.width(mid)
            blocks = []
            for i in range(depth):
                blocks.append(Bottleneck(c_in, mid, stride if i == 0 else 1, cfg, attn, rng))
                c_in = EXPANSION * mid
            self.stages.append(Stage(blocks))
        self.out_channels = [stem] + [EXPANSION * cfg.width(m) for m in cfg.stage_mids]

    def forward(self, image: Tensor) -> list:
        _, c, h, w = image.shape
        if c != self.cfg.in_channels:
            raise ValueError(f"encoder expects {self.cfg.in_channels} input channels, got {c}")
        if h % 32 or w % 32:
            raise ValueError(f"input spatial size {h}x{w} must be divisible by 32")
        feat0 = self.stem(image)
        feats = [feat0]
        x = maxpool2d_3x3_s2(feat0)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def encoder_forward(image: Tensor, encoder: Encoder) -> list:
    return encoder(image)
