"""Joint optimization of detection and restoration, plus ablation drivers."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import random
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import VARIANTS, WEIGHT_GRID, TrainConfig
from .datakit import Batch, PairedSample, batch_iterator
from .detection.losses import LossBreakdown, assign_targets, detection_loss
from .detection.predict import postprocess
from .evalkit import EvalResult, MAPAccumulator
from .model import JointDetector, save_checkpoint
from .restoration import restoration_loss

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, step, image_ids, losses):
        self.step, self.image_ids, self.losses = step, list(image_ids), losses
        super().__init__(f"non-finite loss at step {step} on images {self.image_ids}: {losses}")


def set_determinism(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic, warn_only=True)


def total_loss(det: LossBreakdown, restoration, weights=(0.2, 0.8)):
    """``w_det * detection_total + w_rest * restoration``.

    A zero restoration weight drops the term entirely, so the decoder receives
    no gradient.
    """
    w_det, w_rest = weights
    if w_det < 0 or w_rest < 0 or (w_det == 0 and w_rest == 0):
        raise ValueError(f"invalid loss weights {weights}")
    out = w_det * det.detection_total
    if w_rest != 0 and restoration is not None:
        out = out + w_rest * restoration
    return out


def lr_schedule(step: int, total_steps: int, base_lr: float, floor: float = 0.0) -> float:
    """Cosine annealing from ``base_lr`` at step 0 down to ``floor`` at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return floor + (base_lr - floor) * (1 + math.cos(math.pi * step / total_steps)) / 2


def build_model(cfg: TrainConfig) -> JointDetector:
    return JointDetector(cfg.model_config())


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if p.ndim > 1 and "pos_embed" not in name else no_decay).append(p)
    return torch.optim.SGD([
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ], lr=cfg.base_lr, momentum=cfg.momentum, nesterov=False)


def batch_tensors(batch: Batch, dtype=torch.float32):
    return torch.from_numpy(batch.foggy).to(dtype), torch.from_numpy(batch.clean).to(dtype)


def compute_losses(model: JointDetector, batch: Batch, cfg: TrainConfig) -> tuple[torch.Tensor, LossBreakdown]:
    foggy, clean = batch_tensors(batch, next(model.parameters()).dtype)
    use_restoration = cfg.restoration and model.restoration is not None
    heads, restored = model(foggy, restore=use_restoration)
    targets = assign_targets(batch.boxes, batch.labels, heads.shapes, heads.strides, model.cfg.num_classes)
    det = detection_loss(heads, targets, cfg.iou_weight, cfg.focal, cfg.focal_alpha, cfg.focal_gamma)
    rest = restoration_loss(restored, clean) if restored is not None else None
    weights = (cfg.det_weight, cfg.rest_weight if use_restoration else 0.0)
    if weights == (0.0, 0.0):
        raise ValueError("detection weight is 0 and restoration is disabled: nothing to optimize")
    loss = total_loss(det, rest, weights)
    det.restoration_loss = rest if rest is not None else det.restoration_loss
    det.grand_total = loss
    return loss, det


def train_step(model: JointDetector, optimizer: torch.optim.Optimizer, batch: Batch, cfg: TrainConfig,
               lr: float, step: int = 0) -> LossBreakdown:
    """One SGD update on the weighted total loss."""
    model.train()
    for group in optimizer.param_groups:
        group["lr"] = lr
    loss, breakdown = compute_losses(model, batch, cfg)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(step, batch.image_ids, breakdown.as_floats())
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return breakdown


@dataclasses.dataclass
class TrainResult:
    model: JointDetector
    history: list[dict]
    checkpoint: Path | None = None


def fit(cfg: TrainConfig, train_set: Sequence[PairedSample], out_dir=None,
        on_log: Callable[[dict], None] | None = None) -> TrainResult:
    """Train from scratch; writes ``metrics.jsonl`` and checkpoints under ``out_dir`` if given."""
    cfg.validate()
    set_determinism(cfg.seed, cfg.deterministic)
    model = build_model(cfg)
    optimizer = build_optimizer(model, cfg)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    data_rng = np.random.default_rng(cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "w")
    history, step = [], 0
    try:
        for epoch in range(cfg.epochs):
            for batch in batch_iterator(train_set, cfg.batch_size, cfg.image_size, data_rng):
                lr = lr_schedule(step, total_steps, cfg.base_lr, cfg.min_lr)
                losses = train_step(model, optimizer, batch, cfg, lr, step).as_floats()
                record = {"step": step, "epoch": epoch, "lr": lr, **losses}
                history.append(record)
                if log_fh is not None and (step % cfg.log_every == 0 or step == total_steps - 1):
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                if on_log is not None and step % cfg.log_every == 0:
                    on_log(record)
                step += 1
            if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, out_dir / f"epoch_{epoch + 1:03d}.pt", {"train_config": cfg.to_dict()})
    finally:
        if log_fh is not None:
            log_fh.close()
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "final.pt"
        save_checkpoint(model, ckpt, {"train_config": cfg.to_dict(), "steps": step})
    return TrainResult(model, history, ckpt)


@torch.no_grad()
def predict(model: JointDetector, samples: Sequence[PairedSample], image_size: int, batch_size: int = 16,
            conf_threshold: float = 0.01, nms_threshold: float = 0.45, use_foggy: bool = True):
    """Detections per sample in original image coordinates."""
    model.eval()
    out = []
    for batch in batch_iterator(samples, batch_size, image_size):
        images = torch.from_numpy(batch.foggy if use_foggy else batch.clean).float()
        heads, _ = model(images)
        idx = len(out)
        sizes = [(s.annotation.width, s.annotation.height) for s in samples[idx:idx + len(batch)]]
        out.extend(postprocess(heads, batch.image_ids, batch.geometry, sizes, conf_threshold, nms_threshold))
    return out


def evaluate(model: JointDetector, samples: Sequence[PairedSample], cfg: TrainConfig) -> EvalResult:
    acc = MAPAccumulator(cfg.classes)
    detections = predict(model, samples, cfg.image_size, conf_threshold=cfg.conf_threshold,
                         nms_threshold=cfg.nms_threshold)
    for sample, dets in zip(samples, detections):
        acc.add(sample.annotation.image_id, dets, sample.annotation.boxes)
    return acc.result()


def run_ablation(variants: Sequence[str], cfg: TrainConfig, train_set, test_set, seeds: Sequence[int] = (0,),
                 out_dir=None) -> list[dict]:
    """Train and evaluate every variant under every seed; one row per (variant, seed)."""
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants {unknown}")
    rows = []
    for name in variants:
        for seed in seeds:
            vcfg = dataclasses.replace(cfg.with_variant(name), seed=seed)
            run_dir = Path(out_dir) / f"{name}_seed{seed}" if out_dir is not None else None
            logger.info("training %s seed %d", name, seed)
            result = fit(vcfg, train_set, run_dir)
            ev = evaluate(result.model, test_set, vcfg)
            row = {"variant": name, "seed": seed, "map": ev.map_score, **VARIANTS[name],
                   "final_loss": result.history[-1]["grand_total"]}
            logger.info("%s seed %d mAP %.4f", name, seed, ev.map_score)
            rows.append(row)
    return rows


def sweep_weights(cfg: TrainConfig, train_set, test_set, grid=WEIGHT_GRID, seeds: Sequence[int] = (0,),
                  out_dir=None) -> list[dict]:
    rows = []
    for w_det, w_rest in grid:
        for seed in seeds:
            wcfg = dataclasses.replace(cfg, det_weight=w_det, rest_weight=w_rest, seed=seed)
            run_dir = Path(out_dir) / f"w{w_det:g}_{w_rest:g}_seed{seed}" if out_dir is not None else None
            result = fit(wcfg, train_set, run_dir)
            ev = evaluate(result.model, test_set, wcfg)
            rows.append({"det_weight": w_det, "rest_weight": w_rest, "label": f"{w_det:g}&{w_rest:g}",
                         "seed": seed, "map": ev.map_score})
    return rows


def summarize(rows: Sequence[dict], key: str) -> dict[str, float]:
    """Mean mAP per ``key`` value, in first-seen order."""
    groups: dict[str, list[float]] = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r["map"])
    return {k: float(np.mean(v)) for k, v in groups.items()}
