"""Joint detector: shared backbone, detection neck/heads and the training-only decoder.

Checkpoints are ``torch.save`` dictionaries::

    {"format": "fogdet-checkpoint", "version": 1,
     "model_config": {...}, "tensors": {"backbone.stem.conv.conv.weight": ..., ...},
     "extra": {...}}

Tensor keys are the module paths, so a model built without the restoration
decoder loads a full checkpoint by ignoring every ``restoration.*`` key.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

import torch
from torch import nn

from .backbone import Backbone, FeaturePyramid
from .config import ModelConfig
from .detection.heads import PAFPN, DecoupledHead, HeadOutput
from .restoration import RestorationDecoder

CHECKPOINT_FORMAT = "fogdet-checkpoint"
CHECKPOINT_VERSION = 1
RESTORATION_PREFIX = "restoration."


class JointDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.backbone = Backbone(cfg)
        self.neck = PAFPN(self.backbone.out_channels, cfg.base_depth)
        self.head = DecoupledHead(cfg.num_classes, self.backbone.out_channels, int(256 * cfg.width),
                                  scconv=cfg.scconv, scconv_rate=cfg.scconv_rate)
        self.restoration = (RestorationDecoder(self.backbone.out_channels[-1], self.backbone.skip_channels)
                            if cfg.restoration else None)

    def detect(self, pyramid: FeaturePyramid) -> HeadOutput:
        return self.head(self.neck(pyramid.levels))

    def forward(self, images: torch.Tensor, restore: bool = False):
        """Return ``(head outputs, restored image or None)``.

        The decoder only runs when ``restore`` is set and the module exists.
        """
        pyramid = self.backbone(images)
        heads = self.detect(pyramid)
        restored = None
        if restore and self.restoration is not None:
            restored = self.restoration(pyramid)
        return heads, restored


def save_checkpoint(model: JointDetector, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": dataclasses.asdict(model.cfg),
        "tensors": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }, path)


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    return blob


def load_checkpoint(path, for_inference: bool = True) -> JointDetector:
    """Build a model from a checkpoint.

    With ``for_inference`` the restoration decoder is never constructed and any
    of its tensors in the file are skipped; every other key must match.
    """
    blob = read_checkpoint(path)
    cfg = ModelConfig(**blob["model_config"])
    tensors = blob["tensors"]
    has_restoration = any(k.startswith(RESTORATION_PREFIX) for k in tensors)
    if for_inference or not has_restoration:
        cfg = dataclasses.replace(cfg, restoration=False)
        tensors = {k: v for k, v in tensors.items() if not k.startswith(RESTORATION_PREFIX)}
    model = JointDetector(cfg)
    model.load_state_dict(tensors, strict=True)
    return model


def strip_restoration(src, dst) -> int:
    """Write a copy of a checkpoint without restoration tensors; returns how many were dropped."""
    blob = read_checkpoint(src)
    before = len(blob["tensors"])
    blob["tensors"] = {k: v for k, v in blob["tensors"].items() if not k.startswith(RESTORATION_PREFIX)}
    blob["model_config"]["restoration"] = False
    Path(dst).parent.mkdir(parents=True, exist_ok=True)
    torch.save(blob, dst)
    return before - len(blob["tensors"])
