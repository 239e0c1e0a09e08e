"""Box geometry, anchor-free decoding, NMS and the detection interchange format."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from ..datakit import BBox


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float
    class_id: int
    image_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def paired_iou(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """Differentiable row-wise IoU of two ``(N, 4)`` xyxy tensors."""
    lt = torch.maximum(a[:, :2], b[:, :2])
    rb = torch.minimum(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    return inter / (area_a + area_b - inter + eps)


# -- anchor-free box coding ------------------------------------------------------

# Size logits are clamped before exp() so a diverging regression cannot overflow.
MAX_SIZE_LOGIT = 8.0


def make_grids(shapes: Sequence[tuple[int, int]], strides: Sequence[int], device=None, dtype=torch.float32):
    """Flattened ``(A, 2)`` cell indices (col, row) and ``(A,)`` strides over all levels."""
    grids, stride_list = [], []
    for (h, w), s in zip(shapes, strides):
        ys, xs = torch.meshgrid(torch.arange(h, device=device, dtype=dtype),
                                torch.arange(w, device=device, dtype=dtype), indexing="ij")
        grids.append(torch.stack((xs, ys), dim=-1).reshape(-1, 2))
        stride_list.append(torch.full((h * w,), float(s), device=device, dtype=dtype))
    return torch.cat(grids), torch.cat(stride_list)


def decode_boxes(reg: torch.Tensor, grid: torch.Tensor, strides: torch.Tensor) -> torch.Tensor:
    """``reg`` (..., A, 4) = (dx, dy, log w, log h) in stride units -> xyxy pixels.

    Center is ``(cell + offset) * stride`` and size is ``exp(logit) * stride``.
    """
    s = strides.unsqueeze(-1)
    center = (grid + reg[..., :2]) * s
    size = torch.exp(reg[..., 2:].clamp(max=MAX_SIZE_LOGIT)) * s
    return torch.cat((center - size / 2, center + size / 2), dim=-1)


def encode_boxes(boxes: torch.Tensor, grid: torch.Tensor, strides: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`decode_boxes`."""
    s = strides.unsqueeze(-1)
    center = (boxes[..., :2] + boxes[..., 2:]) / 2
    size = boxes[..., 2:] - boxes[..., :2]
    return torch.cat((center / s - grid, torch.log(size / s)), dim=-1)


def nms(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy per-class NMS; returns kept indices sorted by descending score."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in [0, 1]")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    overlaps = iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= (classes == classes[i]) & (overlaps[i] > iou_threshold)
    return np.array(keep, dtype=np.int64)


def nms_detections(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    if not dets:
        return []
    keep = nms(np.array([d.box.as_list() for d in dets]), np.array([d.score for d in dets]),
               np.array([d.class_id for d in dets]), iou_threshold)
    return [dets[i] for i in keep]


# -- interchange format ----------------------------------------------------------
# One detection per line: image_id class score x_min y_min x_max y_max


def write_detections(dets: Iterable[Detection], path, class_names: Sequence[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for d in dets:
            cls = class_names[d.class_id] if class_names else str(d.class_id)
            b = d.box
            fh.write(f"{d.image_id} {cls} {d.score:.6f} {b.x_min:.2f} {b.y_min:.2f} {b.x_max:.2f} {b.y_max:.2f}\n")


def read_detections(path, class_names: Sequence[str] | None = None) -> list[Detection]:
    index = {name: i for i, name in enumerate(class_names)} if class_names else None
    dets = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        image_id, cls, score, *coords = parts
        class_id = index[cls] if index is not None else int(cls)
        box = BBox(*map(float, coords), class_id=class_id)
        dets.append(Detection(box, float(score), class_id, image_id))
    return dets
