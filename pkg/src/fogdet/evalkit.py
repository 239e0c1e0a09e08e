"""VOC-style average precision and mAP.

Detections of a class are ranked by descending score over the whole set;
each one claims the highest-IoU *unclaimed* ground truth of its class in the
same image when that IoU reaches the threshold, otherwise it is a false
positive.  AP is the area under the monotone precision envelope
(all-point interpolation) or, optionally, the 11-point VOC2007 variant.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datakit import Annotation, BBox
from .detection.boxes import Detection, iou_matrix


@dataclass
class EvalResult:
    per_class_ap: dict[str, float]
    map_score: float
    pr_curves: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    num_gt: dict[str, int] = field(default_factory=dict)
    iou_threshold: float = 0.5

    def to_dict(self) -> dict:
        return {
            "map": self.map_score,
            "iou_threshold": self.iou_threshold,
            "per_class_ap": self.per_class_ap,
            "num_gt": self.num_gt,
        }

    def summary(self) -> str:
        lines = [f"mAP@{self.iou_threshold:g}: {self.map_score:.4f}"]
        for name, ap in self.per_class_ap.items():
            shown = "n/a" if math.isnan(ap) else f"{ap:.4f}"
            lines.append(f"  {name:<12} AP {shown}  (gt {self.num_gt.get(name, 0)})")
        return "\n".join(lines)


def _ranked(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: -d.score)  # stable: ties keep input order


def match_detections(dets: Sequence[Detection], gts: Mapping[str, Sequence[BBox]],
                     iou_threshold: float = 0.5) -> np.ndarray:
    """True-positive flags for ``dets`` taken in descending-score order.

    ``gts`` maps image id to ground-truth boxes; only same-class boxes can be
    matched.  The returned flags follow the ranked order, not the input order.
    """
    claimed = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in gts.items()}
    arrays = {img: (np.array([b.as_list() for b in boxes]).reshape(-1, 4),
                    np.array([b.class_id for b in boxes], dtype=np.int64)) for img, boxes in gts.items()}
    flags = []
    for d in _ranked(dets):
        if d.image_id not in arrays:
            flags.append(False)
            continue
        boxes, labels = arrays[d.image_id]
        overlaps = iou_matrix(np.array([d.box.as_list()]), boxes)[0]
        eligible = (labels == d.class_id) & ~claimed[d.image_id]
        overlaps = np.where(eligible, overlaps, -1.0)
        if overlaps.size and overlaps.max() >= iou_threshold:
            claimed[d.image_id][int(np.argmax(overlaps))] = True
            flags.append(True)
        else:
            flags.append(False)
    return np.array(flags, dtype=bool)


def precision_recall(flags: np.ndarray, num_gt: int):
    tp = np.cumsum(flags, dtype=np.float64)
    fp = np.cumsum(~np.asarray(flags, dtype=bool), dtype=np.float64)
    recall = tp / num_gt if num_gt > 0 else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).tiny)
    return recall, precision


def average_precision(flags, num_gt: int, scores=None, method: str = "all_point") -> float:
    """AP from true-positive flags; NaN when the class has no ground truth.

    ``flags`` are taken in ranked order unless ``scores`` is given, in which
    case they are re-sorted by descending score first.
    """
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    flags = np.asarray(flags, dtype=bool)
    if scores is not None:
        flags = flags[np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")]
    if num_gt == 0:
        return float("nan")
    if flags.size == 0:
        return 0.0
    recall, precision = precision_recall(flags, num_gt)
    if method == "voc07":
        ap = 0.0
        for r in np.linspace(0, 1, 11):
            above = precision[recall >= r]
            ap += (above.max() if above.size else 0.0) / 11
        return float(ap)
    if method != "all_point":
        raise ValueError(f"unknown AP method {method!r}")
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def _as_boxes(value) -> list[BBox]:
    return list(value.boxes) if isinstance(value, Annotation) else list(value)


def mean_ap(detections: Sequence[Detection], ground_truth: Mapping[str, Sequence[BBox] | Annotation],
            class_names: Sequence[str], iou_threshold: float = 0.5, method: str = "all_point") -> EvalResult:
    """Per-class AP and their mean over classes that have at least one ground truth."""
    gts = {img: _as_boxes(v) for img, v in ground_truth.items()}
    by_class = defaultdict(list)
    for d in detections:
        by_class[d.class_id].append(d)
    per_class, curves, counts = {}, {}, {}
    for cid, name in enumerate(class_names):
        num_gt = sum(1 for boxes in gts.values() for b in boxes if b.class_id == cid)
        counts[name] = num_gt
        dets = by_class.get(cid, [])
        flags = match_detections(dets, gts, iou_threshold)
        per_class[name] = average_precision(flags, num_gt, method=method)
        if num_gt and flags.size:
            r, p = precision_recall(flags, num_gt)
            curves[name] = list(zip(r.tolist(), p.tolist()))
        else:
            curves[name] = []
    valid = [ap for ap in per_class.values() if not math.isnan(ap)]
    score = float(np.mean(valid)) if valid else float("nan")
    return EvalResult(per_class, score, curves, counts, iou_threshold)


class MAPAccumulator:
    """Collect detections and ground truth image by image, then evaluate once."""

    def __init__(self, class_names: Sequence[str], iou_threshold: float = 0.5, method: str = "all_point"):
        self.class_names = tuple(class_names)
        self.iou_threshold = iou_threshold
        self.method = method
        self.detections: list[Detection] = []
        self.ground_truth: dict[str, list[BBox]] = {}

    def add(self, image_id: str, dets: Sequence[Detection], gt_boxes: Sequence[BBox]) -> None:
        if image_id in self.ground_truth:
            raise ValueError(f"image {image_id!r} added twice")
        self.ground_truth[image_id] = list(gt_boxes)
        self.detections.extend(d if d.image_id == image_id else Detection(d.box, d.score, d.class_id, image_id)
                               for d in dets)

    def merge(self, other: "MAPAccumulator") -> "MAPAccumulator":
        for image_id, boxes in sorted(other.ground_truth.items()):
            self.add(image_id, [d for d in other.detections if d.image_id == image_id], boxes)
        return self

    def result(self) -> EvalResult:
        # Sorting by image id makes the result independent of how images were sharded.
        dets = sorted(self.detections, key=lambda d: d.image_id)
        return mean_ap(dets, self.ground_truth, self.class_names, self.iou_threshold, self.method)


def write_report(result: EvalResult, path, extra: dict | None = None) -> None:
    """Write ``<path>.json`` (machine-readable) and ``<path>.txt`` (human-readable)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(result.to_dict(), **(extra or {}))
    path.with_suffix(".json").write_text(json.dumps(payload, indent=2, allow_nan=True) + "\n")
    path.with_suffix(".txt").write_text(result.summary() + "\n")


def plot_pr_curves(result: EvalResult, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    plotted = False
    for name, pts in result.pr_curves.items():
        if pts:
            r, p = zip(*pts)
            ax.step(r, p, where="post", label=f"{name} ({result.per_class_ap[name]:.3f})")
            plotted = True
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_title(f"mAP@{result.iou_threshold:g} = {result.map_score:.3f}")
    if plotted:
        ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
