"""Center-prior label assignment and the detection loss.

The detection loss is ``iou_weight * L_iou + L_cls + L_obj`` where

* ``L_iou`` is the mean of ``1 - IoU`` over positive cells,
* ``L_cls`` is class-wise binary cross-entropy summed over classes and
  averaged over positive cells,
* ``L_obj`` is the focal loss (or plain BCE when focal is disabled) on the
  objectness logit of every cell, summed and divided by ``max(#positives, 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .boxes import decode_boxes, make_grids, paired_iou
from .heads import HeadOutput

CENTER_RADIUS = 2.5


@dataclass
class Targets:
    fg: torch.Tensor        # (N, A) bool
    matched: torch.Tensor   # (N, A) long, -1 for background
    boxes: torch.Tensor     # (N, A, 4) xyxy of the matched ground truth
    cls: torch.Tensor       # (N, A, C) one-hot
    obj: torch.Tensor       # (N, A) float


def assign_image(boxes: torch.Tensor, labels: torch.Tensor, grid: torch.Tensor, strides: torch.Tensor,
                 center_radius: float = CENTER_RADIUS) -> torch.Tensor:
    """Index of the ground truth assigned to each cell, ``-1`` for background.

    A cell is a candidate for a box when its center lies strictly inside the
    box and within ``center_radius * stride`` of the box center on both axes.
    Cells claimed by several boxes go to the smallest one.  A box left with no
    candidate at all gets the finest-level cell containing its center.
    """
    num_cells = grid.shape[0]
    matched = torch.full((num_cells,), -1, dtype=torch.long)
    if boxes.numel() == 0:
        return matched
    centers = (grid + 0.5) * strides[:, None]
    cx, cy = centers[:, 0][None], centers[:, 1][None]
    x0, y0, x1, y1 = (boxes[:, i:i + 1] for i in range(4))
    in_box = (cx > x0) & (cx < x1) & (cy > y0) & (cy < y1)
    gcx, gcy = (x0 + x1) / 2, (y0 + y1) / 2
    radius = center_radius * strides[None]
    in_center = ((cx - gcx).abs() < radius) & ((cy - gcy).abs() < radius)
    cand = in_box & in_center
    area = ((x1 - x0) * (y1 - y0)).expand_as(cand)
    cost = torch.where(cand, area, torch.full_like(area, float("inf")))
    best_cost, best = cost.min(dim=0)
    fg = torch.isfinite(best_cost)
    matched[fg] = best[fg]

    finest = strides == strides.min()
    fine_idx = torch.nonzero(finest).squeeze(1)
    fine_grid = grid[fine_idx]
    fine_w = int(fine_grid[:, 0].max()) + 1
    fine_h = int(fine_grid[:, 1].max()) + 1
    s = strides.min()
    box_area = area[:, 0]
    for k in torch.nonzero(~cand.any(dim=1)).flatten().tolist():
        col = min(max(int(gcx[k, 0] // s), 0), fine_w - 1)
        row = min(max(int(gcy[k, 0] // s), 0), fine_h - 1)
        cell = int(fine_idx[row * fine_w + col])
        current = int(matched[cell])
        if current < 0 or box_area[k] < box_area[current]:
            matched[cell] = k
    return matched


def assign_targets(gt_boxes, gt_labels, shapes, strides, num_classes,
                   center_radius: float = CENTER_RADIUS, device=None) -> Targets:
    """Build per-cell targets for a batch; ``gt_boxes``/``gt_labels`` are per-image sequences."""
    grid, stride_t = make_grids(shapes, strides, device=device)
    fg, matched_all, box_t, cls_t = [], [], [], []
    for boxes, labels in zip(gt_boxes, gt_labels):
        boxes = torch.as_tensor(boxes, dtype=torch.float32, device=device).reshape(-1, 4)
        labels = torch.as_tensor(labels, dtype=torch.long, device=device).reshape(-1)
        matched = assign_image(boxes, labels, grid, stride_t, center_radius)
        pos = matched >= 0
        safe = matched.clamp(min=0)
        tb = torch.zeros(grid.shape[0], 4, device=device)
        tc = torch.zeros(grid.shape[0], num_classes, device=device)
        if boxes.numel():
            tb[pos] = boxes[safe[pos]]
            tc[pos] = F.one_hot(labels[safe[pos]], num_classes).float()
        fg.append(pos)
        matched_all.append(matched)
        box_t.append(tb)
        cls_t.append(tc)
    fg = torch.stack(fg)
    return Targets(fg, torch.stack(matched_all), torch.stack(box_t), torch.stack(cls_t), fg.float())


def focal_loss(prob, target, alpha: float = 0.25, gamma: float = 2.0, eps: float = 1e-7):
    """Elementwise ``-a_t * (1 - p_t)**gamma * log(p_t)`` on probabilities."""
    if not torch.is_tensor(prob):
        prob = torch.tensor(prob, dtype=torch.float64)
    target = torch.as_tensor(target, dtype=prob.dtype)
    p = prob.clamp(eps, 1 - eps)
    pt = torch.where(target > 0.5, p, 1 - p)
    a = torch.where(target > 0.5, torch.full_like(p, alpha), torch.full_like(p, 1 - alpha))
    return -a * (1 - pt) ** gamma * torch.log(pt)


def focal_loss_with_logits(logits, target, alpha: float = 0.25, gamma: float = 2.0):
    """Same value as ``focal_loss(sigmoid(logits), target)``, stable for large logits."""
    pos = target > 0.5
    log_pt = torch.where(pos, F.logsigmoid(logits), F.logsigmoid(-logits))
    a = torch.where(pos, torch.full_like(logits, alpha), torch.full_like(logits, 1 - alpha))
    return -a * (1 - log_pt.exp()) ** gamma * log_pt


@dataclass
class LossBreakdown:
    iou_loss: torch.Tensor
    cls_loss: torch.Tensor
    focal_loss: torch.Tensor  # objectness term; plain BCE when focal is off
    restoration_loss: torch.Tensor
    detection_total: torch.Tensor
    grand_total: torch.Tensor
    num_fg: int = 0

    def as_floats(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if torch.is_tensor(v) else v
        return out


def detection_loss(heads: HeadOutput, targets: Targets, iou_weight: float = 5.0, use_focal: bool = True,
                   alpha: float = 0.25, gamma: float = 2.0) -> LossBreakdown:
    reg, obj, cls = heads.flatten()
    grid, stride_t = make_grids(heads.shapes, heads.strides, device=reg.device, dtype=reg.dtype)
    fg = targets.fg
    num_fg = int(fg.sum())
    norm = max(num_fg, 1)
    zero = reg.sum() * 0.0
    if num_fg:
        pred_boxes = decode_boxes(reg, grid, stride_t)[fg]
        iou_loss = (1.0 - paired_iou(pred_boxes, targets.boxes[fg].to(reg.dtype))).sum() / num_fg
        cls_loss = F.binary_cross_entropy_with_logits(
            cls[fg], targets.cls[fg].to(cls.dtype), reduction="sum") / num_fg
    else:
        iou_loss, cls_loss = zero, zero
    obj_t = targets.obj.to(obj.dtype)
    if use_focal:
        obj_loss = focal_loss_with_logits(obj, obj_t, alpha, gamma).sum() / norm
    else:
        obj_loss = F.binary_cross_entropy_with_logits(obj, obj_t, reduction="sum") / norm
    total = iou_weight * iou_loss + cls_loss + obj_loss
    return LossBreakdown(iou_loss, cls_loss, obj_loss, zero, total, total, num_fg)
