import numpy as np
import pytest
import torch
import torch.nn.functional as F

from fogdet.dtfe import (DTFE, DeformConv2d, DynamicFeatureTransform, MultiHeadSelfAttention, TransformerEnhance,
                         bilinear_sample, deform_conv2d)
from oracles import central_difference, conv2d_loop, rel_error


def test_bilinear_examples():
    f = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
    assert bilinear_sample(f, 1, 0).item() == 3.0
    assert bilinear_sample(f, 0.5, 0.5).item() == pytest.approx(2.5)
    assert bilinear_sample(f, 40.0, -12.0).item() == 0.0
    # half outside: the missing neighbors count as zero
    assert bilinear_sample(f, -0.5, 0.0).item() == pytest.approx(0.5)


def test_bilinear_linear_between_adjacent_rows():
    torch.manual_seed(0)
    f = torch.randn(2, 4, 5)
    for a in (0.0, 0.3, 0.75, 1.0):
        s = bilinear_sample(f, a * 1 + (1 - a) * 2, 3)
        torch.testing.assert_close(s, a * f[:, 1, 3] + (1 - a) * f[:, 2, 3])


def test_zero_offset_equals_conv():
    torch.manual_seed(0)
    x = torch.randn(2, 4, 9, 11)
    w = torch.randn(6, 4, 3, 3)
    b = torch.randn(6)
    off = torch.zeros(2, 18, 9, 11)
    out = deform_conv2d(x, w, off, b, padding=1)
    assert (out - F.conv2d(x, w, b, padding=1)).abs().max() < 1e-5
    torch.testing.assert_close(deform_conv2d(x[:1].double(), w.double(), off[:1].double(), padding=1)[0],
                               conv2d_loop(x[0].double(), w.double(), 1))


def test_stride_and_padding_match_conv():
    torch.manual_seed(1)
    x = torch.randn(1, 3, 10, 10)
    w = torch.randn(5, 3, 3, 3)
    out = deform_conv2d(x, w, torch.zeros(1, 18, 5, 5), stride=2, padding=1)
    assert (out - F.conv2d(x, w, stride=2, padding=1)).abs().max() < 1e-5


def test_uniform_shift_equals_shifted_conv():
    torch.manual_seed(2)
    x = torch.randn(1, 3, 8, 8)
    w = torch.randn(4, 3, 3, 3)
    off = torch.zeros(1, 18, 8, 8)
    off[:, 1::2] = 1.0  # dx = +1 on every tap
    out = deform_conv2d(x, w, off, padding=1)
    shifted = torch.zeros_like(x)
    shifted[..., :-1] = x[..., 1:]  # content moved one pixel left
    ref = F.conv2d(shifted, w, padding=1)
    # columns whose taps all stay inside the original map
    assert (out[..., 1:-2] - ref[..., 1:-2]).abs().max() < 1e-5


def test_offset_shape_error():
    with pytest.raises(ValueError):
        deform_conv2d(torch.randn(1, 2, 5, 5), torch.randn(2, 2, 3, 3), torch.zeros(1, 9, 5, 5), padding=1)


def _gradcheck_fixture():
    g = torch.Generator().manual_seed(3)
    x = torch.randn(1, 1, 5, 5, dtype=torch.float64, generator=g, requires_grad=True)
    w = torch.randn(2, 1, 3, 3, dtype=torch.float64, generator=g, requires_grad=True)
    # keep samples off integer lattice lines where bilinear is not differentiable
    off = (torch.rand(1, 18, 5, 5, dtype=torch.float64, generator=g) * 0.6 + 0.2).requires_grad_()
    readout = torch.randn(1, 2, 5, 5, dtype=torch.float64, generator=g)
    return x, w, off, readout


@pytest.mark.parametrize("which", ["input", "weight", "offset"])
def test_deform_gradients_match_finite_differences(which):
    x, w, off, readout = _gradcheck_fixture()

    def fn():
        return (deform_conv2d(x, w, off, padding=1) * readout).sum()

    fn().backward()
    target = {"input": x, "weight": w, "offset": off}[which]
    flat = target.grad.flatten()
    for i in range(flat.numel()):
        idx = np.unravel_index(i, target.shape)
        fd = central_difference(fn, target.data, idx, eps=1e-6)
        assert rel_error(flat[i].item(), fd, floor=1e-6) < 1e-3, (which, idx)


def test_deform_layer_starts_as_conv():
    torch.manual_seed(4)
    layer = DeformConv2d(4, 4)
    x = torch.randn(1, 4, 6, 6)
    assert (layer(x) - F.conv2d(x, layer.weight, padding=1)).abs().max() < 1e-5


def test_dft_shape_and_two_conv_start():
    torch.manual_seed(5)
    dft = DynamicFeatureTransform(128).eval()
    x = torch.randn(1, 128, 5, 5)
    assert dft(x).shape == x.shape
    ref = x
    for layer in dft.layers:
        ref = F.silu(layer["bn"](F.conv2d(ref, layer["dcn"].weight, padding=1)))
    assert (dft(x) - ref).abs().max() < 1e-5
    with pytest.raises(ValueError):
        dft(torch.randn(1, 64, 5, 5))


def test_attention_rows_sum_to_one():
    torch.manual_seed(6)
    tfe = TransformerEnhance(32, (5, 5))
    attn = tfe.attention_weights(torch.randn(2, 32, 5, 5))
    assert attn.shape == (2, 4, 25, 25)
    assert (attn >= 0).all()
    assert (attn.sum(-1) - 1).abs().max() < 1e-6


def test_zeroed_block_is_identity():
    torch.manual_seed(7)
    tfe = TransformerEnhance(32, (5, 5))
    with torch.no_grad():
        for lin in (tfe.attn.proj, tfe.mlp[2]):
            lin.weight.zero_()
            lin.bias.zero_()
    x = torch.randn(2, 32, 5, 5)
    assert torch.equal(tfe(x), x)


def test_single_token_attention_is_value_projection():
    torch.manual_seed(8)
    mha = MultiHeadSelfAttention(16, 4)
    tok = torch.randn(3, 1, 16)
    mixed, attn = mha.attend(tok)
    value = F.linear(tok, mha.qkv.weight[32:], mha.qkv.bias[32:])
    torch.testing.assert_close(mixed, value)
    assert torch.equal(attn, torch.ones_like(attn))


def test_tfe_config_errors():
    with pytest.raises(ValueError):
        TransformerEnhance(30, (5, 5), num_heads=4)
    with pytest.raises(ValueError):
        TransformerEnhance(32, (5, 5))(torch.randn(1, 32, 4, 4))


def test_dtfe_composition_and_determinism():
    torch.manual_seed(9)
    block = DTFE(32, (5, 5)).eval()
    x = torch.randn(2, 32, 5, 5)
    y = block(x)
    assert y.shape == x.shape
    assert torch.equal(y, block(x))
    assert torch.equal(y, block.tfe(block.dft(x)))


def test_dtfe_batch_permutation():
    torch.manual_seed(10)
    block = DTFE(32, (5, 5)).eval()
    x = torch.randn(4, 32, 5, 5)
    perm = torch.tensor([2, 0, 3, 1])
    torch.testing.assert_close(block(x[perm]), block(x)[perm])


def test_dtfe_gradient_spot_checks():
    torch.manual_seed(11)
    block = DTFE(16, (3, 3)).double().eval()
    with torch.no_grad():
        # nonzero offsets so the deformable path is exercised
        for layer in block.dft.layers:
            layer["dcn"].offset_conv.weight.normal_(0, 0.05)
    x = torch.randn(1, 16, 3, 3, dtype=torch.float64, requires_grad=True)
    readout = torch.randn(1, 16, 3, 3, dtype=torch.float64)

    def fn():
        return (block(x) * readout).sum()

    fn().backward()
    rng = np.random.default_rng(0)
    for _ in range(8):
        idx = (0, int(rng.integers(16)), int(rng.integers(3)), int(rng.integers(3)))
        fd = central_difference(fn, x.data, idx, eps=1e-6)
        assert rel_error(x.grad[idx].item(), fd, floor=1e-6) < 1e-2
