"""Convolutional building blocks shared by the backbone, neck and heads."""
from __future__ import annotations

import torch
from torch import nn


def focus_transform(x: torch.Tensor) -> torch.Tensor:
    """Space-to-depth: ``(N, C, H, W) -> (N, 4C, H/2, W/2)``.

    Channel blocks are ordered (even row, even col), (odd row, even col),
    (even row, odd col), (odd row, odd col).  Pure rearrangement.
    """
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError(f"focus_transform needs even spatial dims, got {tuple(x.shape[-2:])}")
    return torch.cat(
        [x[..., ::2, ::2], x[..., 1::2, ::2], x[..., ::2, 1::2], x[..., 1::2, 1::2]], dim=-3
    )


def inverse_focus_transform(y: torch.Tensor) -> torch.Tensor:
    c = y.shape[-3] // 4
    h, w = y.shape[-2] * 2, y.shape[-1] * 2
    x = y.new_empty(*y.shape[:-3], c, h, w)
    x[..., ::2, ::2] = y[..., :c, :, :]
    x[..., 1::2, ::2] = y[..., c:2 * c, :, :]
    x[..., ::2, 1::2] = y[..., 2 * c:3 * c, :, :]
    x[..., 1::2, 1::2] = y[..., 3 * c:, :, :]
    return x


class BaseConv(nn.Module):
    """Conv -> BatchNorm -> SiLU."""

    def __init__(self, in_channels, out_channels, ksize, stride=1, act=True):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, ksize, stride, (ksize - 1) // 2, bias=False)
        self.bn = nn.BatchNorm2d(out_channels, eps=1e-3, momentum=0.03)
        self.act = nn.SiLU() if act else nn.Identity()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, in_channels, out_channels, shortcut=True, expansion=1.0):
        super().__init__()
        hidden = int(out_channels * expansion)
        self.conv1 = BaseConv(in_channels, hidden, 1)
        self.conv2 = BaseConv(hidden, out_channels, 3)
        self.use_add = shortcut and in_channels == out_channels

    def forward(self, x):
        y = self.conv2(self.conv1(x))
        return y + x if self.use_add else y


class CSPLayer(nn.Module):
    """Cross Stage Partial block.

    Half of the channels run through ``n`` bottlenecks, the other half skip
    them; the two paths are concatenated and fused by a 1x1 conv.  Spatial size
    is unchanged.
    """

    def __init__(self, in_channels, out_channels, n=1, shortcut=True, expansion=0.5):
        super().__init__()
        hidden = int(out_channels * expansion)
        self.in_channels = in_channels
        self.conv1 = BaseConv(in_channels, hidden, 1)
        self.conv2 = BaseConv(in_channels, hidden, 1)
        self.conv3 = BaseConv(2 * hidden, out_channels, 1)
        self.m = nn.Sequential(*[Bottleneck(hidden, hidden, shortcut, 1.0) for _ in range(n)])

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"CSPLayer expects {self.in_channels} channels, got {x.shape[1]}")
        x1 = self.m(self.conv1(x))
        x2 = self.conv2(x)
        return self.conv3(torch.cat((x1, x2), dim=1))


class SPPBottleneck(nn.Module):
    """Spatial pyramid pooling with parallel max-pools of increasing size."""

    def __init__(self, in_channels, out_channels, kernel_sizes=(5, 9, 13)):
        super().__init__()
        hidden = in_channels // 2
        self.conv1 = BaseConv(in_channels, hidden, 1)
        self.pools = nn.ModuleList(nn.MaxPool2d(k, 1, k // 2) for k in kernel_sizes)
        self.conv2 = BaseConv(hidden * (len(kernel_sizes) + 1), out_channels, 1)

    def forward(self, x):
        x = self.conv1(x)
        return self.conv2(torch.cat([x] + [p(x) for p in self.pools], dim=1))


class Focus(nn.Module):
    def __init__(self, in_channels, out_channels, ksize=3):
        super().__init__()
        self.conv = BaseConv(in_channels * 4, out_channels, ksize)

    def forward(self, x):
        return self.conv(focus_transform(x))
