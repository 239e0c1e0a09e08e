"""Deformable convolution and the transformer enhancement block, checked against plain torch ops."""
import torch
import torch.nn.functional as F

from fogdet.dtfe import DTFE, TransformerEnhance, deform_conv2d

torch.manual_seed(0)
x = torch.randn(1, 4, 8, 8)
w = torch.randn(6, 4, 3, 3)

# zero offsets reduce to an ordinary convolution
offsets = torch.zeros(1, 18, 8, 8)
print("zero offsets vs conv2d:", (deform_conv2d(x, w, offsets, padding=1) - F.conv2d(x, w, padding=1)).abs().max().item())

# a constant +1 horizontal offset samples one pixel to the right
offsets[:, 1::2] = 1.0
shifted = torch.zeros_like(x)
shifted[..., :-1] = x[..., 1:]
diff = (deform_conv2d(x, w, offsets, padding=1) - F.conv2d(shifted, w, padding=1))[..., 1:-2]
print("unit shift vs shifted conv2d (interior):", diff.abs().max().item())

# half-pixel offsets interpolate between neighbours
offsets[:, 1::2] = 0.5
half = deform_conv2d(x, w, offsets, padding=1)
mid = 0.5 * (F.conv2d(x, w, padding=1) + F.conv2d(shifted, w, padding=1))
print("half shift vs average of neighbours (interior):", (half - mid)[..., 1:-2].abs().max().item())

# attention over the 8x8 grid of tokens
tfe = TransformerEnhance(32, (8, 8))
attn = tfe.attention_weights(torch.randn(1, 32, 8, 8))
print("attention", tuple(attn.shape), "row sums within", (attn.sum(-1) - 1).abs().max().item())

block = DTFE(32, (8, 8))
y = block(torch.randn(2, 32, 8, 8))
print("DTFE output", tuple(y.shape), "parameters", sum(p.numel() for p in block.parameters()))
