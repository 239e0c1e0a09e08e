"""Path-aggregation neck, self-calibrated convolution and decoupled heads."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..layers import BaseConv, CSPLayer


def _conv_bn(in_channels, out_channels):
    return nn.Sequential(nn.Conv2d(in_channels, out_channels, 3, 1, 1, bias=False),
                         nn.BatchNorm2d(out_channels, eps=1e-3, momentum=0.03))


class SCConv(nn.Module):
    """Self-calibrated convolution.

    The input is split channel-wise into ``x1`` and ``x2``.  ``x1`` is gated by
    ``sigmoid(x1 + up(k2(avgpool_r(x1))))`` after ``k3`` and fused by ``k4``;
    ``x2`` only goes through ``k1``.  Halves are concatenated back.
    """

    def __init__(self, channels, pooling_rate=4):
        super().__init__()
        if channels % 2:
            raise ValueError(f"self-calibrated conv needs an even channel count, got {channels}")
        half = channels // 2
        self.rate = pooling_rate
        self.k1 = _conv_bn(half, half)
        self.k2 = _conv_bn(half, half)
        self.k3 = _conv_bn(half, half)
        self.k4 = _conv_bn(half, half)

    def gate(self, x1):
        pooled = F.avg_pool2d(x1, self.rate, self.rate, ceil_mode=True)
        return torch.sigmoid(x1 + F.interpolate(self.k2(pooled), size=x1.shape[-2:], mode="nearest"))

    def forward(self, x):
        x1, x2 = torch.chunk(x, 2, dim=1)
        y1 = self.k4(self.k3(x1) * self.gate(x1))
        y2 = self.k1(x2)
        return torch.cat((y1, y2), dim=1)


class PAFPN(nn.Module):
    """Top-down then bottom-up fusion of the three backbone levels."""

    def __init__(self, in_channels, depth=1):
        super().__init__()
        c3, c4, c5 = in_channels
        self.lateral_conv0 = BaseConv(c5, c4, 1)
        self.C3_p4 = CSPLayer(2 * c4, c4, depth, False)
        self.reduce_conv1 = BaseConv(c4, c3, 1)
        self.C3_p3 = CSPLayer(2 * c3, c3, depth, False)
        self.bu_conv2 = BaseConv(c3, c3, 3, 2)
        self.C3_n3 = CSPLayer(2 * c3, c4, depth, False)
        self.bu_conv1 = BaseConv(c4, c4, 3, 2)
        self.C3_n4 = CSPLayer(2 * c4, c5, depth, False)

    def forward(self, levels):
        x2, x1, x0 = levels
        fpn_out0 = self.lateral_conv0(x0)
        f_out0 = self.C3_p4(torch.cat((F.interpolate(fpn_out0, scale_factor=2, mode="nearest"), x1), 1))
        fpn_out1 = self.reduce_conv1(f_out0)
        pan_out2 = self.C3_p3(torch.cat((F.interpolate(fpn_out1, scale_factor=2, mode="nearest"), x2), 1))
        pan_out1 = self.C3_n3(torch.cat((self.bu_conv2(pan_out2), fpn_out1), 1))
        pan_out0 = self.C3_n4(torch.cat((self.bu_conv1(pan_out1), fpn_out0), 1))
        return pan_out2, pan_out1, pan_out0


@dataclass
class HeadOutput:
    """Raw per-level head maps; ``reg`` is (N,4,H,W), ``obj`` (N,1,H,W), ``cls`` (N,C,H,W)."""

    reg: list[torch.Tensor]
    obj: list[torch.Tensor]
    cls: list[torch.Tensor]
    strides: tuple[int, ...] = (8, 16, 32)

    @property
    def shapes(self):
        return [tuple(r.shape[-2:]) for r in self.reg]

    def flatten(self):
        """Concatenate levels into ``reg (N,A,4)``, ``obj (N,A)``, ``cls (N,A,C)``."""
        reg = torch.cat([r.flatten(2) for r in self.reg], dim=2).transpose(1, 2)
        obj = torch.cat([o.flatten(2) for o in self.obj], dim=2)[:, 0]
        cls = torch.cat([c.flatten(2) for c in self.cls], dim=2).transpose(1, 2)
        return reg, obj, cls


class DecoupledHead(nn.Module):
    """Per level: 1x1 stem, then separate classification and regression/objectness towers."""

    def __init__(self, num_classes, in_channels, hidden, scconv=False, scconv_rate=4, prior_prob=0.01):
        super().__init__()
        self.num_classes = num_classes
        self.sc = nn.ModuleList(SCConv(c, scconv_rate) for c in in_channels) if scconv else None
        self.stems = nn.ModuleList(BaseConv(c, hidden, 1) for c in in_channels)
        self.cls_convs = nn.ModuleList(
            nn.Sequential(BaseConv(hidden, hidden, 3), BaseConv(hidden, hidden, 3)) for _ in in_channels)
        self.reg_convs = nn.ModuleList(
            nn.Sequential(BaseConv(hidden, hidden, 3), BaseConv(hidden, hidden, 3)) for _ in in_channels)
        self.cls_preds = nn.ModuleList(nn.Conv2d(hidden, num_classes, 1) for _ in in_channels)
        self.reg_preds = nn.ModuleList(nn.Conv2d(hidden, 4, 1) for _ in in_channels)
        self.obj_preds = nn.ModuleList(nn.Conv2d(hidden, 1, 1) for _ in in_channels)
        bias = -math.log((1 - prior_prob) / prior_prob)
        for conv in list(self.cls_preds) + list(self.obj_preds):
            nn.init.constant_(conv.bias, bias)

    def forward(self, levels) -> HeadOutput:
        regs, objs, clss = [], [], []
        for k, x in enumerate(levels):
            if self.sc is not None:
                x = self.sc[k](x)
            x = self.stems[k](x)
            cls_feat = self.cls_convs[k](x)
            reg_feat = self.reg_convs[k](x)
            clss.append(self.cls_preds[k](cls_feat))
            regs.append(self.reg_preds[k](reg_feat))
            objs.append(self.obj_preds[k](reg_feat))
        return HeadOutput(regs, objs, clss)
