"""Shared CSP backbone with the transformer enhancement stage at stride 32."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .config import ModelConfig
from .dtfe import DTFE
from .layers import BaseConv, CSPLayer, Focus, SPPBottleneck


@dataclass
class FeaturePyramid:
    """Detection levels at strides 8/16/32 plus decoder skips keyed ``"s<stride>"``."""

    c3: torch.Tensor
    c4: torch.Tensor
    c5: torch.Tensor
    skips: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def levels(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.c3, self.c4, self.c5


class Backbone(nn.Module):
    strides = (8, 16, 32)

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        b, n = cfg.base_channels, cfg.base_depth
        self.input_size = cfg.input_size
        self.stem = Focus(3, b, 3)
        self.dark2 = nn.Sequential(BaseConv(b, 2 * b, 3, 2), CSPLayer(2 * b, 2 * b, n))
        self.dark3 = nn.Sequential(BaseConv(2 * b, 4 * b, 3, 2), CSPLayer(4 * b, 4 * b, 3 * n))
        self.dark4 = nn.Sequential(BaseConv(4 * b, 8 * b, 3, 2), CSPLayer(8 * b, 8 * b, 3 * n))
        dark5 = [BaseConv(8 * b, 16 * b, 3, 2)]
        if cfg.spp:
            dark5.append(SPPBottleneck(16 * b, 16 * b))
        dark5.append(CSPLayer(16 * b, 16 * b, n, shortcut=False))
        self.dark5 = nn.Sequential(*dark5)
        side = cfg.input_size // 32
        self.dtfe = DTFE(16 * b, (side, side), cfg.dtfe_heads) if cfg.dtfe else None
        self.out_channels = (4 * b, 8 * b, 16 * b)
        self.skip_channels = {"s4": 2 * b, "s8": 4 * b, "s16": 8 * b}

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input spatial dims must be divisible by 32, got {(h, w)}")
        x = self.stem(x)
        s4 = self.dark2(x)
        c3 = self.dark3(s4)
        c4 = self.dark4(c3)
        c5 = self.dark5(c4)
        if self.dtfe is not None:
            c5 = self.dtfe(c5)
        return FeaturePyramid(c3, c4, c5, {"s4": s4, "s8": c3, "s16": c4})
