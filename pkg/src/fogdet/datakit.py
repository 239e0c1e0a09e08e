"""Annotations, toy scenes, paired clean/foggy samples and batching.

On-disk layout shared by the toy generator and the fog synthesizer::

    root/
      images/<id>.png          clean rasters (toy datasets)
      clean/<id>.png           clean member of a pair (synthesized datasets)
      foggy/<id>.png           foggy member of a pair
      annotations/<id>.xml     VOC-style annotation
      index.txt                one "<id> <split>" line per image
"""
from __future__ import annotations

import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .weathersim import FogParams, apply_fog, load_image, sample_beta

logger = logging.getLogger(__name__)

VOC_FOG_CLASSES = ("person", "bicycle", "car", "motorbike", "bus")
TOY_CLASSES = ("rectangle", "ellipse", "triangle")


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def clip(self, width: float, height: float) -> "BBox | None":
        """Clip to ``[0, width] x [0, height]``; ``None`` if nothing is left."""
        x0, y0 = max(self.x_min, 0.0), max(self.y_min, 0.0)
        x1, y1 = min(self.x_max, float(width)), min(self.y_max, float(height))
        if x0 >= x1 or y0 >= y1:
            return None
        return BBox(x0, y0, x1, y1, self.class_id)


@dataclass(frozen=True)
class Annotation:
    image_id: str
    width: int
    height: int
    boxes: tuple[BBox, ...] = ()
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        for b in self.boxes:
            if b.x_min < 0 or b.y_min < 0 or b.x_max > self.width or b.y_max > self.height:
                raise ValueError(f"box {b} outside {self.width}x{self.height} image {self.image_id}")

    def boxes_array(self) -> np.ndarray:
        return np.array([b.as_list() for b in self.boxes], dtype=np.float64).reshape(-1, 4)

    def labels_array(self) -> np.ndarray:
        return np.array([b.class_id for b in self.boxes], dtype=np.int64)


@dataclass(frozen=True)
class PairedSample:
    foggy: np.ndarray
    clean: np.ndarray
    annotation: Annotation
    fog: FogParams


# -- VOC XML -----------------------------------------------------------------


def parse_voc_annotation(document: str, classes: Sequence[str] = VOC_FOG_CLASSES,
                         image_id: str | None = None) -> Annotation:
    """Parse a PASCAL-VOC annotation, keeping only objects named in ``classes``.

    Unknown classes are skipped and counted in a warning.  Boxes are clipped to
    the declared image size.  The ``difficult`` flag is ignored.
    """
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        line, col = exc.position
        snippet = document.splitlines()[line - 1] if 0 < line <= len(document.splitlines()) else ""
        raise AnnotationError(f"malformed VOC XML at line {line}, column {col}: {snippet.strip()!r}") from exc

    size = root.find("size")
    if size is None:
        raise AnnotationError("VOC XML has no <size> element")
    width = int(float(size.findtext("width", "0")))
    height = int(float(size.findtext("height", "0")))
    if width < 1 or height < 1:
        raise AnnotationError(f"invalid image size {width}x{height}")
    if image_id is None:
        image_id = Path(root.findtext("filename", "")).stem

    index = {name: i for i, name in enumerate(classes)}
    boxes, skipped, difficult = [], 0, 0
    for obj in root.iter("object"):
        name = (obj.findtext("name") or "").strip()
        if name not in index:
            skipped += 1
            continue
        if obj.findtext("difficult", "0").strip() == "1":
            difficult += 1
        bb = obj.find("bndbox")
        if bb is None:
            raise AnnotationError(f"object {name!r} has no <bndbox>")
        coords = [float(bb.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax")]
        box = BBox(*coords, class_id=index[name]).clip(width, height)
        if box is not None:
            boxes.append(box)
    if skipped:
        logger.warning("%s: skipped %d object(s) with classes outside the class list", image_id, skipped)
    if difficult:
        logger.warning("%s: 'difficult' flag ignored on %d object(s)", image_id, difficult)
    return Annotation(image_id, width, height, tuple(boxes), tuple(classes))


def annotation_to_voc(ann: Annotation) -> str:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = f"{ann.image_id}.png"
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(ann.width)
    ET.SubElement(size, "height").text = str(ann.height)
    ET.SubElement(size, "depth").text = "3"
    for b in ann.boxes:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = ann.class_names[b.class_id]
        ET.SubElement(obj, "difficult").text = "0"
        bb = ET.SubElement(obj, "bndbox")
        for key, value in zip(("xmin", "ymin", "xmax", "ymax"), b.as_list()):
            ET.SubElement(bb, key).text = f"{value:g}"
    ET.indent(root)
    return ET.tostring(root, encoding="unicode")


def filter_classes(ann: Annotation, keep: Sequence[str]) -> Annotation:
    """Keep boxes whose class name is in ``keep`` and renumber ids in ``keep`` order."""
    if not keep:
        raise ValueError("keep list must be non-empty")
    remap = {name: i for i, name in enumerate(keep)}
    boxes = []
    for b in ann.boxes:
        name = ann.class_names[b.class_id]
        if name in remap:
            boxes.append(replace(b, class_id=remap[name]))
    return replace(ann, boxes=tuple(boxes), class_names=tuple(keep))


# -- toy scenes ----------------------------------------------------------------


@dataclass(frozen=True)
class SceneConfig:
    width: int = 160
    height: int = 160
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 16
    max_size: int = 56
    # Largest allowed IoU between two object boxes; 0 keeps shapes apart.
    max_overlap: float = 0.0
    max_retries: int = 50
    background: str = "gradient"  # "gradient" or "flat"
    classes: tuple[str, ...] = TOY_CLASSES

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError(f"need 1 <= min_objects <= max_objects, got {self.min_objects}, {self.max_objects}")
        if not 1 <= self.min_size <= self.max_size:
            raise ValueError(f"need 1 <= min_size <= max_size, got {self.min_size}, {self.max_size}")
        if self.max_size > min(self.width, self.height):
            raise ValueError(f"max_size {self.max_size} exceeds the {self.width}x{self.height} canvas")


@dataclass
class ToyScene:
    image: np.ndarray
    annotation: Annotation
    colors: list[tuple[int, int, int]] = field(default_factory=list)
    # True when fewer objects than requested could be placed.
    incomplete: bool = False


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _saturated_color(rng: np.random.Generator) -> tuple[int, int, int]:
    # Saturated fills never coincide with the grayish background.
    hi = int(rng.integers(200, 256))
    lo = int(rng.integers(0, 50))
    mid = int(rng.integers(0, 256))
    channels = [hi, lo, mid]
    order = rng.permutation(3)
    return tuple(channels[i] for i in order)


def _background(rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    h, w = cfg.height, cfg.width
    base = rng.uniform(90, 170)
    if cfg.background == "flat":
        gray = np.full((h, w), base)
    else:
        angle = rng.uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = (np.cos(angle) * xx + np.sin(angle) * yy) / max(h, w)
        gray = base + 40 * ramp + rng.normal(0, 6, size=(h, w))
    gray = np.clip(gray, 60, 200)
    tint = rng.uniform(-8, 8, size=3)
    rgb = np.clip(gray[..., None] + tint, 50, 210)
    return np.rint(rgb).astype(np.uint8)


def _shape_mask(kind: str, box, rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    x0, y0, x1, y1 = box
    mask = Image.new("L", (cfg.width, cfg.height), 0)
    draw = ImageDraw.Draw(mask)
    if kind == "rectangle":
        draw.rectangle([x0, y0, x1 - 1, y1 - 1], fill=255)
    elif kind == "ellipse":
        draw.ellipse([x0, y0, x1 - 1, y1 - 1], fill=255)
    elif kind == "triangle":
        apex = int(rng.integers(x0, x1))
        draw.polygon([(apex, y0), (x0, y1 - 1), (x1 - 1, y1 - 1)], fill=255)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return np.asarray(mask) > 0


def _tight_box(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def generate_toy_scene(rng: np.random.Generator, config: SceneConfig = SceneConfig(),
                       image_id: str = "toy") -> ToyScene:
    """Draw filled shapes on a textured background.

    Each class is a shape kind.  Boxes are the tight extent of each shape's
    visible pixels, so they always enclose exactly what was drawn.
    """
    cfg = config
    canvas = _background(rng, cfg)
    target = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed, colors = [], []
    visible = np.zeros((cfg.height, cfg.width), dtype=np.int32)  # 0 = background
    for _ in range(target):
        for _attempt in range(cfg.max_retries):
            bw = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            bh = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            x0 = int(rng.integers(0, cfg.width - bw + 1))
            y0 = int(rng.integers(0, cfg.height - bh + 1))
            cand = (x0, y0, x0 + bw, y0 + bh)
            # One-pixel margin keeps non-overlapping shapes from touching.
            grown = (x0 - 1, y0 - 1, x0 + bw + 1, y0 + bh + 1)
            if all(_box_iou(grown if cfg.max_overlap == 0 else cand, p[1]) <= cfg.max_overlap
                   for p in placed):
                break
        else:
            continue
        class_id = int(rng.integers(len(cfg.classes)))
        mask = _shape_mask(cfg.classes[class_id], cand, rng, cfg)
        if _tight_box(mask) is None:
            continue
        color = _saturated_color(rng)
        while color in colors:
            color = _saturated_color(rng)
        canvas[mask] = color
        visible[mask] = len(placed) + 1
        placed.append((class_id, cand))
        colors.append(color)

    boxes, kept_colors = [], []
    for k, (class_id, _) in enumerate(placed):
        tight = _tight_box(visible == k + 1)
        if tight is None:  # fully occluded
            continue
        boxes.append(BBox(*map(float, tight), class_id=class_id))
        kept_colors.append(colors[k])
    incomplete = len(boxes) < target
    if incomplete:
        logger.debug("%s: placed %d of %d objects", image_id, len(boxes), target)
    image = canvas.astype(np.float64).transpose(2, 0, 1) / 255.0
    ann = Annotation(image_id, cfg.width, cfg.height, tuple(boxes), cfg.classes)
    return ToyScene(image, ann, kept_colors, incomplete)


def make_paired_sample(clean: np.ndarray, ann: Annotation, fog: FogParams,
                       quantize: bool = False) -> PairedSample:
    """Fog ``clean``; with ``quantize`` both members go through 8-bit rounding as on disk."""
    foggy = apply_fog(clean, fog)
    if quantize:
        foggy = np.rint(foggy * 255.0) / 255.0
        clean = np.rint(np.asarray(clean) * 255.0) / 255.0
    return PairedSample(foggy, np.asarray(clean, dtype=np.float64), ann, fog)


def toy_fog_dataset(count: int, seed: int, beta_range: tuple[float, float], airlight: float = 0.5,
                    config: SceneConfig = SceneConfig(), prefix: str = "toy") -> list[PairedSample]:
    """In-memory equivalent of ``make-dataset`` followed by ``synth-fog`` (8-bit quantized)."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        scene = generate_toy_scene(rng, config, f"{prefix}_{i:05d}")
        fog = FogParams(airlight, sample_beta(beta_range, rng))
        out.append(make_paired_sample(scene.image, scene.annotation, fog, quantize=True))
    return out


# -- resizing and batching ----------------------------------------------------


@dataclass(frozen=True)
class Letterbox:
    """Aspect-preserving resize into a square canvas: ``x' = scale * x + pad``."""

    scale: float
    pad_x: float
    pad_y: float

    def forward_boxes(self, boxes: np.ndarray) -> np.ndarray:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        return boxes * self.scale + np.array([self.pad_x, self.pad_y, self.pad_x, self.pad_y])

    def inverse_boxes(self, boxes: np.ndarray) -> np.ndarray:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        return (boxes - np.array([self.pad_x, self.pad_y, self.pad_x, self.pad_y])) / self.scale


def letterbox_geometry(width: int, height: int, target: int) -> Letterbox:
    scale = min(target / width, target / height)
    new_w, new_h = round(width * scale), round(height * scale)
    return Letterbox(scale, (target - new_w) // 2, (target - new_h) // 2)


def letterbox_image(image: np.ndarray, target: int, fill: float = 0.5):
    """Resize a ``C x H x W`` image into ``C x target x target``; returns (image, geometry)."""
    c, h, w = image.shape
    geo = letterbox_geometry(w, h, target)
    new_w, new_h = round(w * geo.scale), round(h * geo.scale)
    if (new_w, new_h) == (w, h):
        resized = np.asarray(image, dtype=np.float64)
    else:
        planes = [np.asarray(Image.fromarray(np.asarray(p, dtype=np.float32), mode="F")
                             .resize((new_w, new_h), Image.BILINEAR)) for p in image]
        resized = np.stack(planes).astype(np.float64)
    out = np.full((c, target, target), fill, dtype=np.float64)
    py, px = int(geo.pad_y), int(geo.pad_x)
    out[:, py:py + new_h, px:px + new_w] = resized
    return out, geo


@dataclass
class Batch:
    foggy: np.ndarray           # N x 3 x S x S
    clean: np.ndarray           # N x 3 x S x S
    boxes: list[np.ndarray]     # per image K x 4, letterboxed coordinates
    labels: list[np.ndarray]    # per image K
    image_ids: list[str]
    geometry: list[Letterbox]

    def __len__(self):
        return len(self.image_ids)


def collate(samples: Sequence[PairedSample], target_size: int) -> Batch:
    foggy, clean, boxes, labels, ids, geos = [], [], [], [], [], []
    for s in samples:
        f, geo = letterbox_image(s.foggy, target_size)
        c, _ = letterbox_image(s.clean, target_size)
        foggy.append(f)
        clean.append(c)
        boxes.append(geo.forward_boxes(s.annotation.boxes_array()))
        labels.append(s.annotation.labels_array())
        ids.append(s.annotation.image_id)
        geos.append(geo)
    return Batch(np.stack(foggy), np.stack(clean), boxes, labels, ids, geos)


def batch_iterator(dataset: Sequence[PairedSample], batch_size: int, target_size: int,
                   rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """Yield letterboxed batches; order is shuffled by ``rng`` when given.

    The final partial batch is emitted.  No mosaic or other mixing augmentation.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(dataset))
    if rng is not None:
        order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield collate([dataset[i] for i in order[start:start + batch_size]], target_size)


# -- dataset directories -------------------------------------------------------


def write_index(root, entries) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "index.txt").write_text("".join(f"{i} {split}\n" for i, split in entries))


def read_index(root, split: str | None = None) -> list[tuple[str, str]]:
    entries = []
    for line in (Path(root) / "index.txt").read_text().splitlines():
        if not line.strip():
            continue
        image_id, sp = line.split()[:2]
        if split is None or sp == split:
            entries.append((image_id, sp))
    return entries


def load_annotation(root, image_id: str, classes: Sequence[str]) -> Annotation:
    text = (Path(root) / "annotations" / f"{image_id}.xml").read_text()
    return parse_voc_annotation(text, classes, image_id=image_id)


def load_paired_dataset(root, split: str, classes: Sequence[str]) -> list[PairedSample]:
    """Load a directory written by the fog synthesizer into memory."""
    root = Path(root)
    fog_params = read_fog_params(root)
    samples = []
    for image_id, _ in read_index(root, split):
        ann = load_annotation(root, image_id, classes)
        foggy = load_image(root / "foggy" / f"{image_id}.png")
        clean = load_image(root / "clean" / f"{image_id}.png")
        samples.append(PairedSample(foggy, clean, ann, fog_params.get(image_id, FogParams(beta=0.0))))
    return samples


def read_fog_params(root) -> dict[str, FogParams]:
    path = Path(root) / "fog_params.jsonl"
    params = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                params[rec["image_id"]] = FogParams(A=rec["A"], beta=rec["beta"])
    return params
