"""Turn raw head maps into scored detections."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from ..datakit import BBox, Letterbox
from .boxes import Detection, decode_boxes, make_grids, nms
from .heads import HeadOutput

EVAL_CONF_THRESHOLD = 0.01
DEMO_CONF_THRESHOLD = 0.25
NMS_IOU_THRESHOLD = 0.45


def decode_predictions(heads: HeadOutput, conf_threshold: float = EVAL_CONF_THRESHOLD):
    """Per image ``(boxes (K,4), scores (K,), classes (K,))`` numpy arrays, before NMS.

    Each cell votes for its best class with score ``sigmoid(obj) * sigmoid(cls)``.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError("conf_threshold must lie in [0, 1]")
    with torch.no_grad():
        reg, obj, cls = heads.flatten()
        grid, stride_t = make_grids(heads.shapes, heads.strides, device=reg.device, dtype=reg.dtype)
        boxes = decode_boxes(reg, grid, stride_t)
        cls_prob, cls_id = torch.sigmoid(cls).max(dim=-1)
        scores = torch.sigmoid(obj) * cls_prob
    out = []
    for i in range(reg.shape[0]):
        keep = scores[i] >= conf_threshold
        out.append((boxes[i][keep].double().cpu().numpy(), scores[i][keep].double().cpu().numpy(),
                    cls_id[i][keep].cpu().numpy()))
    return out


def postprocess(heads: HeadOutput, image_ids: Sequence[str], geometry: Sequence[Letterbox] | None = None,
                image_sizes: Sequence[tuple[int, int]] | None = None,
                conf_threshold: float = EVAL_CONF_THRESHOLD,
                nms_threshold: float = NMS_IOU_THRESHOLD, max_detections: int = 100) -> list[list[Detection]]:
    """Decode, NMS, map back through the letterbox and clip to ``image_sizes`` ``(w, h)``."""
    results = []
    for i, (boxes, scores, classes) in enumerate(decode_predictions(heads, conf_threshold)):
        keep = nms(boxes, scores, classes, nms_threshold)[:max_detections]
        boxes, scores, classes = boxes[keep], scores[keep], classes[keep]
        if geometry is not None:
            boxes = geometry[i].inverse_boxes(boxes)
        if image_sizes is not None:
            w, h = image_sizes[i]
            boxes = np.clip(boxes, 0, [w, h, w, h])
        dets = []
        for b, s, c in zip(boxes, scores, classes):
            if b[0] < b[2] and b[1] < b[3]:
                dets.append(Detection(BBox(*map(float, b), class_id=int(c)), float(min(max(s, 0.0), 1.0)),
                                      int(c), image_ids[i]))
        results.append(dets)
    return results
