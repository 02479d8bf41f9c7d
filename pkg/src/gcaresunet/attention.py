"""Grouped coordinate attention and the SE / CBAM / coordinate-attention baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module, conv2d, record_macs, relu, sigmoid
from .tensor import Tensor

POOLING_MODES = ("avg", "max", "both")
ATTENTION_KINDS = ("none", "SE", "CBAM", "CoordAtt", "GCA")


@dataclass
class GcaConfig:
    groups: int = 2
    reduction: int = 2
    pooling: str = "both"
    min_mid: int = 4
    share_across_groups: bool = False

    def validate(self, channels: int | None = None) -> None:
        for name in ("groups", "reduction", "min_mid"):
            if getattr(self, name) < 1:
                raise ValueError(f"GcaConfig.{name} must be a positive integer")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if channels is not None and channels % self.groups:
            raise ValueError(f"C={channels} is not divisible by G={self.groups}")

    def mid(self, channels: int) -> int:
        """Bottleneck width per group: max(C_g // r, min_mid)."""
        return max(channels // self.groups // self.reduction, self.min_mid)


def gca_param_count(channels: int, cfg: GcaConfig) -> int:
    """Closed-form element count of a GCA block, BN running stats included."""
    cfg.validate(channels)
    cg = channels // cfg.groups
    mid = cfg.mid(channels)
    if cfg.share_across_groups:
        return 2 * cg * mid + cfg.groups * 4 * mid
    return cfg.groups * (2 * cg * mid + 4 * mid)


def _directional_pool(x: Tensor, axis: str, pooling: str) -> Tensor:
    if pooling == "avg":
        return T.reduce_axis(x, axis, "mean")
    if pooling == "max":
        return T.reduce_axis(x, axis, "max")
    return T.add(T.reduce_axis(x, axis, "mean"), T.reduce_axis(x, axis, "max"))


class GroupedCoordAttention(Module):
    """Channel-grouped coordinate attention.

    Each of the G channel groups pools its slice along W (keeping H) and
    along H (keeping W), stacks the two descriptors along the spatial axis,
    and runs them through its own 1x1 conv -> BN -> ReLU -> 1x1 conv ->
    sigmoid bottleneck.  The result is split back into a per-row gate and a
    per-column gate that multiply the group's input.  The G bottlenecks are
    evaluated together as grouped convolutions, which keeps groups
    independent while avoiding a Python loop.
    """

    def __init__(self, channels: int, cfg: GcaConfig | None = None,
                 rng: np.random.Generator | None = None):
        cfg = cfg or GcaConfig()
        cfg.validate(channels)
        self.cfg = cfg
        self.channels = channels
        g = cfg.groups
        cg, mid = channels // g, cfg.mid(channels)
        if cfg.share_across_groups:
            self.conv1 = Conv2d(cg, mid, 1, rng=rng)
            self.bn = BatchNorm2d(g * mid)
            self.conv2 = Conv2d(mid, cg, 1, rng=rng)
        else:
            self.conv1 = Conv2d(channels, g * mid, 1, groups=g, rng=rng)
            self.bn = BatchNorm2d(g * mid)
            self.conv2 = Conv2d(g * mid, channels, 1, groups=g, rng=rng)

    def _weights(self):
        w1, w2 = self.conv1.weight, self.conv2.weight
        if self.cfg.share_across_groups and self.cfg.groups > 1:
            w1 = T.concat([w1] * self.cfg.groups, "B")
            w2 = T.concat([w2] * self.cfg.groups, "B")
        return w1, w2

    def forward(self, x: Tensor) -> Tensor:
        return gca_forward(x, self.cfg, self)


def gca_forward(x: Tensor, cfg: GcaConfig, params: GroupedCoordAttention) -> Tensor:
    b, c, h, w = x.shape
    if c % cfg.groups:
        raise ValueError(f"C={c} is not divisible by G={cfg.groups}")
    f_h = _directional_pool(x, "W", cfg.pooling)                      # (B, C, H, 1)
    f_w = T.transpose_hw(_directional_pool(x, "H", cfg.pooling))      # (B, C, W, 1)
    fused = T.concat([f_h, f_w], "H")                                  # (B, C, H+W, 1)
    w1, w2 = params._weights()
    hidden = conv2d(fused, w1, groups=cfg.groups)
    record_macs(params.conv1, hidden.shape, w1.shape)
    hidden = relu(params.bn(hidden))
    gate = conv2d(hidden, w2, groups=cfg.groups)
    record_macs(params.conv2, gate.shape, w2.shape)
    gate = sigmoid(gate)
    a_h, a_w = T.split(gate, [h, w], "H")
    return x * a_h * T.transpose_hw(a_w)


class SqueezeExcitation(Module):
    """Global average pool -> FC -> ReLU -> FC -> sigmoid channel gate."""

    def __init__(self, channels: int, reduction: int = 16, min_mid: int = 4,
                 rng: np.random.Generator | None = None):
        mid = max(channels // reduction, min_mid)
        self.fc1 = Conv2d(channels, mid, 1, bias=True, rng=rng)
        self.fc2 = Conv2d(mid, channels, 1, bias=True, rng=rng)

    def forward(self, x):
        s = T.mean(x, ("H", "W"))
        return x * sigmoid(self.fc2(relu(self.fc1(s))))


class CBAM(Module):
    """Channel gate from summed avg/max descriptors, then a 7x7 spatial gate."""

    def __init__(self, channels: int, reduction: int = 16, min_mid: int = 4,
                 rng: np.random.Generator | None = None):
        mid = max(channels // reduction, min_mid)
        self.fc1 = Conv2d(channels, mid, 1, rng=rng)
        self.fc2 = Conv2d(mid, channels, 1, rng=rng)
        self.spatial = Conv2d(2, 1, 7, padding=3, rng=rng)

    def _mlp(self, d):
        return self.fc2(relu(self.fc1(d)))

    def forward(self, x):
        avg = T.mean(x, ("H", "W"))
        mx = T.reduce_axis(T.reduce_axis(x, "H", "max"), "W", "max")
        x = x * sigmoid(T.add(self._mlp(avg), self._mlp(mx)))
        maps = T.concat([T.mean(x, ("C",)), T.reduce_any(x, "C", "max")], "C")
        return x * sigmoid(self.spatial(maps))


def coord_attention(channels: int, min_mid: int = 4, reduction: int = 2,
                    rng: np.random.Generator | None = None) -> GroupedCoordAttention:
    """Ungrouped, average-pooled coordinate attention (the G=1 reference)."""
    cfg = GcaConfig(groups=1, reduction=reduction, pooling="avg", min_mid=min_mid)
    return GroupedCoordAttention(channels, cfg, rng)


def make_attention(kind: str, channels: int, gca: GcaConfig | None = None,
                   baseline_reduction: int = 16, rng: np.random.Generator | None = None):
    """Build the attention block for ``kind``; ``none`` returns None."""
    gca = gca or GcaConfig()
    if kind == "none":
        return None
    if kind == "GCA":
        return GroupedCoordAttention(channels, gca, rng)
    if kind == "CoordAtt":
        return coord_attention(channels, gca.min_mid, gca.reduction, rng)
    if kind == "SE":
        return SqueezeExcitation(channels, baseline_reduction, gca.min_mid, rng)
    if kind == "CBAM":
        return CBAM(channels, baseline_reduction, gca.min_mid, rng)
    raise ValueError(f"unknown attention kind {kind!r}; expected one of {ATTENTION_KINDS}")


def baseline_attention_forward(kind: str, x: Tensor, params: Module) -> Tensor:
    expected = {"SE": SqueezeExcitation, "CBAM": CBAM, "CoordAtt": GroupedCoordAttention}
    if kind not in expected:
        raise ValueError(f"unknown baseline attention kind {kind!r}")
    if not isinstance(params, expected[kind]):
        raise TypeError(f"{kind} needs {expected[kind].__name__} params, got {type(params).__name__}")
    return params(x)
