"""Training-only decoder that reconstructs the clean image from backbone features.

Three stride-2 transposed convolutions walk the deepest map back up to
stride 4, each fused with the backbone feature of matching resolution; a 3x3
projection to RGB, a 4x upsample and ``tanh`` finish at input resolution.
The output lives in ``[-1, 1]``; clean targets in ``[0, 1]`` are mapped there
by ``2 * target - 1`` before the squared error.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeaturePyramid

SKIP_ORDER = ("s16", "s8", "s4")


class DeconvStage(nn.Module):
    def __init__(self, in_channels, out_channels, skip_channels):
        super().__init__()
        self.up = nn.Sequential(
            nn.ConvTranspose2d(in_channels, out_channels, 4, 2, 1, bias=False),
            nn.BatchNorm2d(out_channels, eps=1e-3, momentum=0.03),
            nn.SiLU(),
        )
        self.skip = nn.Sequential(
            nn.Conv2d(skip_channels, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels, eps=1e-3, momentum=0.03),
        )

    def forward(self, x, skip):
        return self.up(x) + self.skip(skip)


class RestorationDecoder(nn.Module):
    def __init__(self, deepest_channels: int, skip_channels: dict[str, int]):
        super().__init__()
        stages, ch = [], deepest_channels
        for key in SKIP_ORDER:
            stages.append(DeconvStage(ch, ch // 2, skip_channels[key]))
            ch //= 2
        self.stages = nn.ModuleList(stages)
        self.to_rgb = nn.Conv2d(ch, 3, 3, 1, 1)
        self.upscale = 4

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        x = pyramid.c5
        for key, stage in zip(SKIP_ORDER, self.stages):
            if key not in pyramid.skips:
                raise KeyError(f"restoration decoder needs skip feature {key!r}")
            x = stage(x, pyramid.skips[key])
        x = F.interpolate(self.to_rgb(x), scale_factor=self.upscale, mode="bilinear",
                          align_corners=False)
        return torch.tanh(x)


def restoration_loss(pred: torch.Tensor, clean_target: torch.Tensor) -> torch.Tensor:
    """Mean squared error against ``2 * clean_target - 1``, averaged over every element."""
    if pred.shape != clean_target.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(pred.shape)} vs target {tuple(clean_target.shape)}")
    return torch.mean((pred - (2.0 * clean_target - 1.0)) ** 2)


def to_unit_range(restored: torch.Tensor) -> torch.Tensor:
    return (restored + 1.0) / 2.0
