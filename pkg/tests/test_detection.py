import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from fogdet.datakit import BBox
from fogdet.detection import (Detection, DecoupledHead, HeadOutput, PAFPN, SCConv, assign_image, assign_targets,
                              decode_boxes, decode_predictions, detection_loss, encode_boxes, focal_loss,
                              focal_loss_with_logits, iou, iou_matrix, make_grids, nms, nms_detections,
                              read_detections, write_detections)
from oracles import nms_reference, scalar_iou


def _conv_bn_ref(seq, x):
    conv, bn = seq
    y = F.conv2d(x, conv.weight, None, 1, 1)
    return (y - bn.running_mean[None, :, None, None]) / torch.sqrt(bn.running_var + bn.eps)[None, :, None, None] \
        * bn.weight[None, :, None, None] + bn.bias[None, :, None, None]


# -- self-calibrated conv -----------------------------------------------------------


def test_scconv_shape_and_errors():
    sc = SCConv(8)
    assert sc(torch.randn(2, 8, 10, 10)).shape == (2, 8, 10, 10)
    assert sc(torch.randn(1, 8, 5, 5)).shape == (1, 8, 5, 5)
    with pytest.raises(ValueError):
        SCConv(7)


def test_scconv_gate_is_half_for_zero_branch():
    sc = SCConv(4).eval()
    with torch.no_grad():
        sc.k2[0].weight.zero_()
        sc.k2[1].bias.zero_()
    gate = sc.gate(torch.zeros(1, 2, 8, 8))
    assert torch.equal(gate, torch.full_like(gate, 0.5))


def test_scconv_matches_step_by_step_dataflow():
    torch.manual_seed(0)
    sc = SCConv(4, pooling_rate=4).eval()
    for m in sc.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.uniform_(-0.1, 0.1)
            m.running_var.uniform_(0.5, 1.5)
            m.weight.data.uniform_(0.5, 1.5)
            m.bias.data.uniform_(-0.1, 0.1)
    x = torch.randn(1, 4, 8, 8)
    x1, x2 = x[:, :2], x[:, 2:]
    pooled = torch.zeros(1, 2, 2, 2)
    for i in range(2):
        for j in range(2):
            pooled[..., i, j] = x1[..., 4 * i:4 * i + 4, 4 * j:4 * j + 4].mean(dim=(-1, -2))
    calib = _conv_bn_ref(sc.k2, pooled).repeat_interleave(4, -1).repeat_interleave(4, -2)
    gate = torch.sigmoid(x1 + calib)
    y1 = _conv_bn_ref(sc.k4, _conv_bn_ref(sc.k3, x1) * gate)
    y2 = _conv_bn_ref(sc.k1, x2)
    torch.testing.assert_close(sc(x), torch.cat([y1, y2], 1), atol=1e-5, rtol=1e-5)


# -- neck and heads ---------------------------------------------------------------


def test_neck_strides_finite_and_gradients_reach_all_levels():
    torch.manual_seed(1)
    neck = PAFPN((16, 32, 64))
    levels = [torch.randn(1, c, s, s, requires_grad=True) for c, s in ((16, 20), (32, 10), (64, 5))]
    outs = neck(levels)
    assert [o.shape[-1] for o in outs] == [20, 10, 5]
    assert [o.shape[1] for o in outs] == [16, 32, 64]
    const = neck([torch.ones(1, c, s, s) for c, s in ((16, 20), (32, 10), (64, 5))])
    assert all(torch.isfinite(o).all() for o in const)
    for k in range(3):
        grads = torch.autograd.grad(outs[k].sum(), levels, retain_graph=True)
        assert all(g.abs().sum() > 0 for g in grads), k


def test_head_output_channels():
    head = DecoupledHead(5, (16, 32, 64), hidden=16, scconv=True)
    out = head([torch.randn(2, c, s, s) for c, s in ((16, 20), (32, 10), (64, 5))])
    assert [r.shape[1] for r in out.reg] == [4, 4, 4]
    assert [o.shape[1] for o in out.obj] == [1, 1, 1]
    assert [c.shape[1] for c in out.cls] == [5, 5, 5]
    reg, obj, cls = out.flatten()
    assert reg.shape == (2, 525, 4) and obj.shape == (2, 525) and cls.shape == (2, 525, 5)
    # prior bias puts initial objectness near 0.01
    assert torch.sigmoid(head.obj_preds[0].bias).item() == pytest.approx(0.01)


# -- decoding ---------------------------------------------------------------------


def _single_level(h, w, stride, num_classes=2, obj_fill=-30.0):
    return HeadOutput([torch.zeros(1, 4, h, w)], [torch.full((1, 1, h, w), obj_fill)],
                      [torch.full((1, num_classes, h, w), -30.0)], strides=(stride,))


def test_decode_hand_set_cell():
    heads = _single_level(4, 5, 8)
    heads.reg[0][0, :, 2, 3] = torch.tensor([0.5, 0.5, math.log(2), math.log(2)])
    heads.obj[0][0, 0, 2, 3] = 30.0
    heads.cls[0][0, 1, 2, 3] = 30.0
    (boxes, scores, classes), = decode_predictions(heads, 0.5)
    np.testing.assert_allclose(boxes, [[20, 12, 36, 28]], atol=1e-5)  # center (28, 20), size 16
    assert classes.tolist() == [1]
    assert scores[0] == pytest.approx(1.0, abs=1e-6)


def test_decode_all_negative_is_empty():
    (boxes, scores, classes), = decode_predictions(_single_level(4, 4, 8), 0.01)
    assert len(boxes) == len(scores) == len(classes) == 0
    with pytest.raises(ValueError):
        decode_predictions(_single_level(4, 4, 8), 1.5)


def test_encode_decode_identity():
    g = torch.Generator().manual_seed(2)
    grid, strides = make_grids([(20, 20), (10, 10), (5, 5)], (8, 16, 32))
    xy = torch.rand(grid.shape[0], 2, generator=g) * 150
    wh = torch.rand(grid.shape[0], 2, generator=g) * 100 + 1
    boxes = torch.cat([xy, xy + wh], 1)
    back = decode_boxes(encode_boxes(boxes, grid, strides), grid, strides)
    assert (back - boxes).abs().max() < 1e-4


# -- IoU and NMS --------------------------------------------------------------------


def test_iou_hand_cases():
    a = BBox(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(5, 5, 6, 6)) == 0.0
    assert iou(a, BBox(1, 1, 3, 3)) == 1 / 7
    assert iou(a, BBox(2, 0, 4, 2)) == 0.0  # touching edge


@given(st.lists(st.floats(0, 50), min_size=8, max_size=8))
def test_iou_symmetric_bounded(v):
    a = BBox(min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]) + 1, max(v[2], v[3]) + 1)
    b = BBox(min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]) + 1, max(v[6], v[7]) + 1)
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0 <= iou(a, b) <= 1
    assert iou(a, b) == pytest.approx(scalar_iou(a.as_list(), b.as_list()))
    assert iou_matrix([a.as_list()], [b.as_list()])[0, 0] == pytest.approx(iou(a, b))


def _random_set(rng, n):
    xy = rng.uniform(0, 60, (n, 2))
    wh = rng.uniform(5, 30, (n, 2))
    return np.concatenate([xy, xy + wh], 1), rng.uniform(size=n), rng.integers(0, 3, n)


def test_nms_matches_reference():
    rng = np.random.default_rng(3)
    for _ in range(100):
        boxes, scores, classes = _random_set(rng, int(rng.integers(1, 15)))
        keep = nms(boxes, scores, classes, 0.45)
        assert keep.tolist() == nms_reference(boxes.tolist(), scores.tolist(), classes.tolist(), 0.45)
        kept = boxes[keep]
        for i in range(len(keep)):
            for j in range(i + 1, len(keep)):
                if classes[keep[i]] == classes[keep[j]]:
                    assert scalar_iou(kept[i], kept[j]) <= 0.45
        again = nms(kept, scores[keep], classes[keep], 0.45)
        assert again.tolist() == list(range(len(keep)))


def test_nms_simple_cases():
    d = Detection(BBox(0, 0, 10, 10), 0.9, 0, "a")
    assert nms_detections([d], 0.45) == [d]
    e = Detection(BBox(0, 0, 10, 10), 0.8, 0, "a")
    assert nms_detections([e, d], 0.45) == [d]
    f = Detection(BBox(0, 0, 10, 10), 0.8, 1, "a")
    assert nms_detections([f, d], 0.45) == [d, f]
    assert nms_detections([], 0.45) == []
    with pytest.raises(ValueError):
        nms(np.zeros((1, 4)), np.ones(1), np.zeros(1), 1.5)


def test_detection_file_round_trip(tmp_path):
    dets = [Detection(BBox(1.5, 2.25, 30, 40, 1), 0.75, 1, "img1"), Detection(BBox(0, 0, 5, 5, 0), 0.5, 0, "img2")]
    write_detections(dets, tmp_path / "d.txt", ["a", "b"])
    assert read_detections(tmp_path / "d.txt", ["a", "b"]) == dets
    with pytest.raises(ValueError):
        Detection(BBox(0, 0, 1, 1), 1.2, 0)


# -- focal loss -------------------------------------------------------------------


def test_focal_scalar_values():
    assert focal_loss(0.9, 1, 0.25, 2).item() == pytest.approx(-0.25 * 0.01 * math.log(0.9), rel=1e-12)
    assert focal_loss(0.9, 1, 0.25, 2).item() == pytest.approx(2.6341e-4, abs=1e-8)
    assert focal_loss(0.5, 0, 0.25, 2).item() == pytest.approx(0.12996, abs=1e-5)


def test_focal_gamma_zero_is_weighted_bce():
    p = torch.linspace(0.01, 0.99, 99, dtype=torch.float64)
    for t in (0.0, 1.0):
        target = torch.full_like(p, t)
        bce = F.binary_cross_entropy(p, target, reduction="none")
        assert (focal_loss(p, target, 0.5, 0.0) - 0.5 * bce).abs().max() < 1e-7
        alpha_t = 0.25 if t else 0.75
        assert (focal_loss(p, target, 0.25, 0.0) - alpha_t * bce).abs().max() < 1e-7


def test_focal_logits_matches_probability_form():
    logits = torch.linspace(-6, 6, 49, dtype=torch.float64)
    for t in (0.0, 1.0):
        target = torch.full_like(logits, t)
        torch.testing.assert_close(focal_loss_with_logits(logits, target),
                                   focal_loss(torch.sigmoid(logits), target), atol=1e-9, rtol=1e-9)


def test_focal_monotone_in_pt():
    pt = torch.linspace(0.01, 0.99, 200, dtype=torch.float64)
    for gamma in (0.0, 0.5, 2.0, 5.0):
        vals = focal_loss(pt, torch.ones_like(pt), 0.25, gamma)
        assert (vals[1:] < vals[:-1]).all()
        vals = focal_loss(1 - pt, torch.zeros_like(pt), 0.25, gamma)
        assert (vals[1:] < vals[:-1]).all()


# -- assignment -------------------------------------------------------------------


def _assign_loop(boxes, shape, stride, radius=2.5):
    """Cell-by-cell enumeration of the center-prior rule."""
    h, w = shape
    out = np.full((h, w), -1)
    for r in range(h):
        for c in range(w):
            cx, cy = (c + 0.5) * stride, (r + 0.5) * stride
            best, best_area = -1, math.inf
            for k, (x0, y0, x1, y1) in enumerate(boxes):
                inside = x0 < cx < x1 and y0 < cy < y1
                near = abs(cx - (x0 + x1) / 2) < radius * stride and abs(cy - (y0 + y1) / 2) < radius * stride
                area = (x1 - x0) * (y1 - y0)
                if inside and near and area < best_area:
                    best, best_area = k, area
            out[r, c] = best
    return out


def test_assignment_smaller_box_wins():
    boxes = [(0, 0, 8, 8), (4, 4, 10, 10)]
    grid, strides = make_grids([(10, 10)], (1,))
    matched = assign_image(torch.tensor(boxes, dtype=torch.float32), torch.tensor([0, 1]), grid, strides)
    expected = _assign_loop(boxes, (10, 10), 1)
    np.testing.assert_array_equal(matched.reshape(10, 10).numpy(), expected)
    assert expected[5, 5] == 1  # the only contested cell


def test_assignment_full_image_box():
    shapes, strides = [(20, 20), (10, 10), (5, 5)], (8, 16, 32)
    t = assign_targets([np.array([[0, 0, 160, 160]])], [np.array([2])], shapes, strides, 3)
    start = 0
    for (h, w), s in zip(shapes, strides):
        got = t.fg[0, start:start + h * w].reshape(h, w).numpy()
        np.testing.assert_array_equal(got, _assign_loop([(0, 0, 160, 160)], (h, w), s) == 0)
        start += h * w
    assert (t.cls[0][t.fg[0]].argmax(-1) == 2).all()


def test_assignment_empty_and_fallback():
    shapes, strides = [(20, 20), (10, 10), (5, 5)], (8, 16, 32)
    t = assign_targets([np.zeros((0, 4))], [np.zeros(0)], shapes, strides, 3)
    assert t.fg.sum() == 0 and t.obj.sum() == 0
    # a 2 px box has no cell center inside it, so it falls back to its finest-level cell
    t = assign_targets([np.array([[81, 81, 83, 83]])], [np.array([0])], shapes, strides, 3)
    assert t.fg.sum() == 1
    assert t.fg[0, 10 * 20 + 10]


# -- detection loss ---------------------------------------------------------------


def test_two_cell_loss_fixture():
    sig = lambda z: 1 / (1 + math.exp(-z))
    heads = HeadOutput([torch.tensor([[[[0.5, 0.0]], [[0.5, 0.0]], [[math.log(0.5), 0.0]], [[0.0, 0.0]]]])],
                       [torch.tensor([[[[1.0, -2.0]]]])],
                       [torch.tensor([[[[0.0, 0.0]], [[-1.0, 0.0]]]])], strides=(8,))
    t = assign_targets([np.array([[0, 0, 8, 8]])], [np.array([0])], heads.shapes, heads.strides, 2)
    assert t.fg.tolist() == [[True, False]]
    out = detection_loss(heads, t, 5.0, True, 0.25, 2.0)
    # predicted box (2, 0, 6, 8) against (0, 0, 8, 8): IoU 32 / 64
    iou_l = 0.5
    cls_l = -math.log(sig(0.0)) - math.log(1 - sig(-1.0))
    obj_l = -0.25 * (1 - sig(1.0)) ** 2 * math.log(sig(1.0)) - 0.75 * sig(-2.0) ** 2 * math.log(1 - sig(-2.0))
    assert out.iou_loss.item() == pytest.approx(iou_l, rel=1e-6)
    assert out.cls_loss.item() == pytest.approx(cls_l, rel=1e-6)
    assert out.focal_loss.item() == pytest.approx(obj_l, rel=1e-5)
    assert out.num_fg == 1
    plain = detection_loss(heads, t, 5.0, False)
    bce = -math.log(sig(1.0)) - math.log(1 - sig(-2.0))
    assert plain.focal_loss.item() == pytest.approx(bce, rel=1e-6)


def test_loss_identity_and_degenerate_cases():
    torch.manual_seed(4)
    shapes, strides = [(4, 4), (2, 2), (1, 1)], (8, 16, 32)
    heads = HeadOutput([torch.randn(2, 4, h, w) for h, w in shapes], [torch.randn(2, 1, h, w) for h, w in shapes],
                       [torch.randn(2, 3, h, w) for h, w in shapes], strides)
    gt = [np.array([[3, 5, 20, 27], [10, 2, 31, 14]]), np.zeros((0, 4))]
    t = assign_targets(gt, [np.array([0, 2]), np.zeros(0)], shapes, strides, 3)
    out = detection_loss(heads, t)
    assert out.detection_total.item() == (5.0 * out.iou_loss + out.cls_loss + out.focal_loss).item()

    empty = assign_targets([np.zeros((0, 4))] * 2, [np.zeros(0)] * 2, shapes, strides, 3)
    out = detection_loss(heads, empty)
    assert out.iou_loss.item() == 0 and out.cls_loss.item() == 0
    assert out.detection_total.item() == out.focal_loss.item() > 0


def test_perfect_box_has_zero_iou_loss():
    shapes, strides = [(4, 4)], (8,)
    box = torch.tensor([[4.0, 6.0, 20.0, 22.0]])
    t = assign_targets([box.numpy()], [np.array([0])], shapes, strides, 1)
    grid, s = make_grids(shapes, strides)
    reg = encode_boxes(box.expand(16, 4), grid, s)  # every cell predicts the gt exactly
    heads = HeadOutput([reg.T.reshape(1, 4, 4, 4)], [torch.zeros(1, 1, 4, 4)], [torch.zeros(1, 1, 4, 4)], strides)
    assert detection_loss(heads, t).iou_loss.item() == pytest.approx(0.0, abs=1e-6)
