"""Convolutional building blocks: Conv-BN-SiLU, Go-ELAN, SPPELAN, ADown, CBLinear, CBFuse."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from goelan.config import ConfigError

VALID_STRIDES = (1, 2, 4, 8, 16, 32)


@dataclass
class FeatureMap:
    """A (batch, channels, height, width) tensor tagged with its stride to the network input."""

    data: Tensor
    stride: int = 1

    def __post_init__(self) -> None:
        if self.data.dim() != 4:
            raise ValueError(f"feature map must be 4-D, got shape {tuple(self.data.shape)}")
        _, c, h, w = self.data.shape
        if min(c, h, w) < 1:
            raise ValueError(f"degenerate feature map shape {tuple(self.data.shape)}")
        if self.stride not in VALID_STRIDES:
            raise ValueError(f"stride {self.stride} not in {VALID_STRIDES}")

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]


class BlockKind(str, enum.Enum):
    CONV = "ConvBNAct"
    GOELAN = "GoELAN"
    SPPELAN = "SPPELAN"
    ADOWN = "ADown"
    CBLINEAR = "CBLinear"
    CBFUSE = "CBFuse"


@dataclass
class BlockSpec:
    kind: BlockKind
    out_channels: int
    kernel: int = 1
    stride: int = 1
    internal_widths: list[int] = field(default_factory=list)
    pool_sizes: list[int] = field(default_factory=list)
    name: str = ""

    def __post_init__(self) -> None:
        self.kind = BlockKind(self.kind)
        label = self.name or self.kind.value
        if self.out_channels <= 0:
            raise ConfigError(f"{label}: out_channels must be positive, got {self.out_channels}")
        if self.kernel % 2 == 0:
            raise ConfigError(f"{label}: kernel must be odd, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ConfigError(f"{label}: stride must be 1 or 2, got {self.stride}")


class ConvBNAct(nn.Module):
    """Conv2d (no bias) -> BatchNorm2d -> SiLU with same padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 1, stride: int = 1, name: str = ""):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.name = name or f"ConvBNAct({in_channels}->{out_channels}, k{kernel}, s{stride})"
        self.conv = nn.Conv2d(in_channels, out_channels, kernel, stride, kernel // 2, bias=False)
        self.bn = nn.BatchNorm2d(out_channels, eps=1e-3, momentum=0.03)
        self.act = nn.SiLU()

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(self, x)
        return self.act(self.bn(self.conv(x)))


class GoELAN(nn.Module):
    """CSP + ELAN aggregation.

    The input is split channel-wise in two halves. One half bypasses; the other
    runs through a chain of computational paths (two 3x3 ConvBNAct each). The
    bypass half and every path output are concatenated and fused by a 1x1
    transition conv.
    """

    stride = 1

    def __init__(self, in_channels: int, out_channels: int, internal_widths: Sequence[int], name: str = ""):
        super().__init__()
        self.name = name or "GoELAN"
        if not internal_widths:
            raise ConfigError(f"{self.name}: internal_widths must not be empty")
        if in_channels % 2:
            raise ConfigError(f"{self.name}: input width {in_channels} must be even for the CSP split")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.internal_widths = list(internal_widths)
        prev = in_channels // 2
        paths = []
        for w in self.internal_widths:
            paths.append(nn.Sequential(ConvBNAct(prev, w, 3), ConvBNAct(w, w, 3)))
            prev = w
        self.paths = nn.ModuleList(paths)
        self.concat_channels = in_channels // 2 + sum(self.internal_widths)
        self.transition = ConvBNAct(self.concat_channels, out_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(self, x)
        bypass, y = x.chunk(2, 1)
        outs = [bypass]
        for path in self.paths:
            y = path(y)
            outs.append(y)
        return self.transition(torch.cat(outs, 1))


class SPPELAN(nn.Module):
    """Parallel stride-1 max pools over a 1x1 projection, concatenated and fused."""

    stride = 1

    def __init__(self, in_channels: int, out_channels: int, pool_sizes: Sequence[int], hidden: int | None = None, name: str = ""):
        super().__init__()
        self.name = name or "SPPELAN"
        if not pool_sizes or min(pool_sizes) < 1:
            raise ConfigError(f"{self.name}: pool_sizes must be non-empty positive ints")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.pool_sizes = list(pool_sizes)
        hidden = hidden or max(1, out_channels // 2)
        self.conv_in = ConvBNAct(in_channels, hidden, 1)
        self.conv_out = ConvBNAct(hidden * (1 + len(self.pool_sizes)), out_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(self, x)
        if max(self.pool_sizes) > min(x.shape[2], x.shape[3]):
            raise ConfigError(
                f"{self.name}: pool window {max(self.pool_sizes)} larger than feature map {tuple(x.shape[2:])}"
            )
        y = self.conv_in(x)
        return self.conv_out(torch.cat([y] + self.pool(y), 1))

    def pool(self, y: Tensor) -> list[Tensor]:
        """Same-size max pool per window; even windows pad one extra row/column at the end."""
        outs = []
        for k in self.pool_sizes:
            lo, hi = (k - 1) // 2, k // 2
            padded = F.pad(y, (lo, hi, lo, hi), value=float("-inf")) if k > 1 else y
            outs.append(F.max_pool2d(padded, k, 1))
        return outs


class ADown(nn.Module):
    """Average-pool + strided-conv downsampling.

    Channels are split in half: one half goes through 2x2 average pooling and a
    1x1 conv, the other through a 3x3 stride-2 conv. Output spatial size is
    ceil(input / 2).
    """

    stride = 2

    def __init__(self, in_channels: int, out_channels: int, name: str = ""):
        super().__init__()
        self.name = name or "ADown"
        if in_channels % 2 or out_channels % 2:
            raise ConfigError(f"{self.name}: in/out widths must be even, got {in_channels}->{out_channels}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        half_in, half_out = in_channels // 2, out_channels // 2
        self.pool_conv = ConvBNAct(half_in, half_out, 1)
        self.stride_conv = ConvBNAct(half_in, half_out, 3, 2)

    def avg_path(self, x: Tensor) -> Tensor:
        return F.avg_pool2d(x, 2, 2, ceil_mode=True)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(self, x)
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise ValueError(f"{self.name}: degenerate input {tuple(x.shape[2:])}, need at least 2x2")
        a, b = x.chunk(2, 1)
        return torch.cat([self.pool_conv(self.avg_path(a)), self.stride_conv(b)], 1)


class CBLinear(nn.Module):
    """One 1x1 projection (with bias) split into several requested widths."""

    stride = 1

    def __init__(self, in_channels: int, out_channel_list: Sequence[int], name: str = ""):
        super().__init__()
        self.name = name or "CBLinear"
        if not out_channel_list:
            raise ConfigError(f"{self.name}: out_channel_list must not be empty")
        if min(out_channel_list) <= 0:
            raise ConfigError(f"{self.name}: non-positive width in {list(out_channel_list)}")
        self.in_channels = in_channels
        self.out_channel_list = list(out_channel_list)
        self.conv = nn.Conv2d(in_channels, sum(self.out_channel_list), 1)

    def forward(self, x: Tensor) -> list[Tensor]:
        _check_channels(self, x)
        return list(self.conv(x).split(self.out_channel_list, 1))


def cb_fuse(features: Sequence[Tensor], target: Tensor) -> Tensor:
    """Nearest-resample every feature to ``target``'s size and sum them with it."""
    out = target
    for f in features:
        if f.shape[1] != target.shape[1]:
            raise ConfigError(f"CBFuse: channel mismatch {f.shape[1]} vs target {target.shape[1]}")
        if f.shape[2:] != target.shape[2:]:
            f = F.interpolate(f, size=target.shape[2:], mode="nearest")
        out = out + f
    return out


class CBFuse(nn.Module):
    """Module wrapper around :func:`cb_fuse`; holds no parameters."""

    stride = 1

    def forward(self, features: Sequence[Tensor], target: Tensor) -> Tensor:
        return cb_fuse(features, target)


def _check_channels(block: nn.Module, x: Tensor) -> None:
    if x.shape[1] != block.in_channels:
        raise ConfigError(
            f"{getattr(block, 'name', type(block).__name__)}: expected {block.in_channels} input channels, got {x.shape[1]}"
        )


def make_block(spec: BlockSpec, in_channels: int) -> nn.Module:
    """Instantiate the module described by ``spec``."""
    if spec.kind is BlockKind.CONV:
        return ConvBNAct(in_channels, spec.out_channels, spec.kernel, spec.stride, name=spec.name)
    if spec.kind is BlockKind.GOELAN:
        return GoELAN(in_channels, spec.out_channels, spec.internal_widths, name=spec.name)
    if spec.kind is BlockKind.SPPELAN:
        return SPPELAN(in_channels, spec.out_channels, spec.pool_sizes, name=spec.name)
    if spec.kind is BlockKind.ADOWN:
        return ADown(in_channels, spec.out_channels, name=spec.name)
    if spec.kind is BlockKind.CBLINEAR:
        return CBLinear(in_channels, spec.internal_widths or [spec.out_channels], name=spec.name)
    if spec.kind is BlockKind.CBFUSE:
        return CBFuse()
    raise ConfigError(f"unsupported block kind {spec.kind}")


def block_stride(block: nn.Module) -> int:
    return getattr(block, "stride", 1)


def apply_block(block: nn.Module, x: FeatureMap) -> FeatureMap:
    """Run ``block`` on a tagged feature map, propagating the stride annotation."""
    return FeatureMap(block(x.data), x.stride * block_stride(block))


def conv_bn_act(x: FeatureMap, block: ConvBNAct) -> FeatureMap:
    return apply_block(block, x)


def go_elan_block(x: FeatureMap, block: GoELAN) -> FeatureMap:
    return apply_block(block, x)


def sppelan(x: FeatureMap, block: SPPELAN) -> FeatureMap:
    return apply_block(block, x)


def adown(x: FeatureMap, block: ADown) -> FeatureMap:
    return apply_block(block, x)


def cb_linear(x: FeatureMap, block: CBLinear) -> list[FeatureMap]:
    return [FeatureMap(t, x.stride) for t in block(x.data)]


def fuse_feature_maps(features: Sequence[FeatureMap], target: FeatureMap) -> FeatureMap:
    return FeatureMap(cb_fuse([f.data for f in features], target.data), target.stride)
