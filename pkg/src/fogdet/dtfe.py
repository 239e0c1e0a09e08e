"""Dynamic transformer feature enhancement.

Two deformable convolutions (dynamic feature transformation) followed by one
pre-norm transformer block over the spatial positions of the map.  Deformable
convolution is implemented directly on top of bilinear sampling so every
piece is differentiable through autograd.

Offsets use ``2*K*K`` channels ordered ``(dy_0, dx_0, dy_1, dx_1, ...)`` with
taps in row-major kernel order, in pixel units at input resolution.
"""
from __future__ import annotations

import math

import torch
from torch import nn


def bilinear_sample(feature: torch.Tensor, y: float, x: float) -> torch.Tensor:
    """Sample a ``C x H x W`` map at a real coordinate, zero outside the map."""
    _, h, w = feature.shape
    y0, x0 = math.floor(y), math.floor(x)
    ly, lx = y - y0, x - x0
    out = feature.new_zeros(feature.shape[0])
    for yy, wy in ((y0, 1 - ly), (y0 + 1, ly)):
        for xx, wx in ((x0, 1 - lx), (x0 + 1, lx)):
            if 0 <= yy < h and 0 <= xx < w and wy * wx != 0:
                out = out + wy * wx * feature[:, yy, xx]
    return out


def _bilinear_gather(x: torch.Tensor, py: torch.Tensor, px: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` (N, C, H, W) at positions ``py, px`` (N, L); returns (N, C, L)."""
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    ly, lx = py - y0, px - x0
    y0, x0 = y0.long(), x0.long()
    out = 0
    for dy, wy in ((0, 1 - ly), (1, ly)):
        for dx, wx in ((0, 1 - lx), (1, lx)):
            yi, xi = y0 + dy, x0 + dx
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).unsqueeze(1).expand(n, c, -1)
            weight = (wy * wx * valid.to(x.dtype)).unsqueeze(1)
            out = out + torch.gather(flat, 2, idx) * weight
    return out


def deform_conv2d(x: torch.Tensor, weight: torch.Tensor, offset: torch.Tensor,
                  bias: torch.Tensor | None = None, stride: int = 1, padding: int = 0,
                  dilation: int = 1) -> torch.Tensor:
    """Deformable 2-D convolution (offsets only, no modulation)."""
    n, c, h, w = x.shape
    out_ch, in_ch, kh, kw = weight.shape
    if in_ch != c:
        raise ValueError(f"weight expects {in_ch} input channels, input has {c}")
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    taps = kh * kw
    if offset.shape != (n, 2 * taps, ho, wo):
        raise ValueError(f"offset must have shape {(n, 2 * taps, ho, wo)}, got {tuple(offset.shape)}")

    dev, dt = x.device, x.dtype
    base_y = torch.arange(ho, device=dev, dtype=dt) * stride - padding
    base_x = torch.arange(wo, device=dev, dtype=dt) * stride - padding
    tap_y = (torch.arange(kh, device=dev, dtype=dt) * dilation).repeat_interleave(kw)
    tap_x = (torch.arange(kw, device=dev, dtype=dt) * dilation).repeat(kh)
    # (taps, ho, wo) grid of undeformed sampling positions
    grid_y = tap_y[:, None, None] + base_y[None, :, None]
    grid_x = tap_x[:, None, None] + base_x[None, None, :]
    off = offset.reshape(n, taps, 2, ho, wo)
    py = (grid_y + off[:, :, 0]).reshape(n, -1)
    px = (grid_x + off[:, :, 1]).reshape(n, -1)

    cols = _bilinear_gather(x, py, px).reshape(n, c * taps, ho * wo)
    out = torch.matmul(weight.reshape(out_ch, c * taps), cols).reshape(n, out_ch, ho, wo)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


class DeformConv2d(nn.Module):
    """Deformable conv whose offsets come from a zero-initialized plain conv.

    With zero offsets the layer is an ordinary convolution, so training starts
    from the undeformed grid.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1, bias=False):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.offset_conv = nn.Conv2d(in_channels, 2 * kernel_size * kernel_size, kernel_size,
                                     stride, padding, bias=True)
        nn.init.zeros_(self.offset_conv.weight)
        nn.init.zeros_(self.offset_conv.bias)

    def forward(self, x):
        offset = self.offset_conv(x)
        return deform_conv2d(x, self.weight, offset, self.bias, self.stride, self.padding)


class DynamicFeatureTransform(nn.Module):
    """Two deformable conv -> BN -> SiLU layers; shape preserving."""

    def __init__(self, channels, kernel_size=3):
        super().__init__()
        pad = kernel_size // 2
        self.channels = channels
        self.layers = nn.ModuleList()
        for _ in range(2):
            self.layers.append(nn.ModuleDict({
                "dcn": DeformConv2d(channels, channels, kernel_size, 1, pad),
                "bn": nn.BatchNorm2d(channels, eps=1e-3, momentum=0.03),
            }))
        self.act = nn.SiLU()

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        for layer in self.layers:
            x = self.act(layer["bn"](layer["dcn"](x)))
        return x


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim, num_heads=4):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"embedding width {dim} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def attend(self, tokens):
        """Return ``(mixed values before output projection, attention weights)``."""
        b, n, d = tokens.shape
        qkv = self.qkv(tokens).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return mixed, attn

    def forward(self, tokens):
        return self.proj(self.attend(tokens)[0])


class TransformerEnhance(nn.Module):
    """One pre-norm transformer block over the ``H*W`` positions of a feature map.

    The learned positional embedding is added to the normalized tokens that
    feed attention, not to the residual stream, so a block with zeroed output
    projections is an exact identity.
    """

    def __init__(self, channels, size, num_heads=4, mlp_ratio=4.0):
        super().__init__()
        self.size = tuple(size)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.size[0] * self.size[1], channels))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.norm1 = nn.LayerNorm(channels)
        self.attn = MultiHeadSelfAttention(channels, num_heads)
        self.norm2 = nn.LayerNorm(channels)
        hidden = int(channels * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.GELU(), nn.Linear(hidden, channels))

    def _tokens(self, x):
        n, c, h, w = x.shape
        if (h, w) != self.size:
            raise ValueError(f"transformer block is sized for {self.size} maps, got {(h, w)}")
        return x.flatten(2).transpose(1, 2)

    def attention_weights(self, x):
        tokens = self._tokens(x)
        return self.attn.attend(self.norm1(tokens) + self.pos_embed)[1]

    def forward(self, x):
        n, c, h, w = x.shape
        tokens = self._tokens(x)
        tokens = tokens + self.attn(self.norm1(tokens) + self.pos_embed)
        tokens = tokens + self.mlp(self.norm2(tokens))
        return tokens.transpose(1, 2).reshape(n, c, h, w)


class DTFE(nn.Module):
    def __init__(self, channels, size, num_heads=4, mlp_ratio=4.0):
        super().__init__()
        self.dft = DynamicFeatureTransform(channels)
        self.tfe = TransformerEnhance(channels, size, num_heads, mlp_ratio)

    def forward(self, x):
        return self.tfe(self.dft(x))
