"""Model and run configuration.

Run configs are INI files (``configparser``) with ``[data]``, ``[model]``,
``[train]`` and ``[eval]`` sections; every key maps onto a dataclass field.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .weathersim import DEFAULT_AIRLIGHT, TEST_BETA_RANGE, TRAIN_BETA_RANGE


class ConfigError(ValueError):
    """Raised with every invalid key listed in the message."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class ModelConfig:
    num_classes: int = 3
    input_size: int = 160
    depth: float = 0.33
    width: float = 0.25
    spp: bool = True
    dtfe: bool = True
    dtfe_heads: int = 4
    scconv: bool = True
    scconv_rate: int = 4
    restoration: bool = True

    def validate(self):
        problems = []
        if self.num_classes < 1:
            problems.append("model.num_classes must be >= 1")
        if self.input_size < 32 or self.input_size % 32:
            problems.append("model.input_size must be a positive multiple of 32")
        if self.width <= 0 or self.depth <= 0:
            problems.append("model.width and model.depth must be > 0")
        if self.dtfe and (int(16 * int(64 * self.width)) % self.dtfe_heads):
            problems.append("model.dtfe_heads must divide the deepest channel width")
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def base_channels(self) -> int:
        return int(64 * self.width)

    @property
    def base_depth(self) -> int:
        return max(round(3 * self.depth), 1)


# Ablation grid: which components each variant enables.
VARIANTS = {
    "Base": dict(restoration=False, dtfe=False, focal=False, scconv=False),
    "V1": dict(restoration=True, dtfe=False, focal=False, scconv=False),
    "V2": dict(restoration=True, dtfe=True, focal=False, scconv=False),
    "V3": dict(restoration=True, dtfe=True, focal=True, scconv=False),
    "V4": dict(restoration=True, dtfe=True, focal=True, scconv=True),
    "V5": dict(restoration=False, dtfe=True, focal=True, scconv=True),
    "V6": dict(restoration=True, dtfe=False, focal=True, scconv=True),
    "V7": dict(restoration=True, dtfe=True, focal=False, scconv=True),
}

# Detection / restoration loss weight pairs swept in the loss-weight study.
WEIGHT_GRID = ((1.0, 1.0), (0.7, 0.3), (0.5, 0.5), (0.2, 0.6), (0.2, 0.8), (0.2, 1.0), (0.1, 1.2))


@dataclass
class TrainConfig:
    data_root: str = "data/toy_fog"
    classes: tuple = ("rectangle", "ellipse", "triangle")
    image_size: int = 160
    epochs: int = 20
    batch_size: int = 8
    base_lr: float = 1e-2
    min_lr: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    det_weight: float = 0.2
    rest_weight: float = 0.8
    iou_weight: float = 5.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    seed: int = 0
    deterministic: bool = True
    restoration: bool = True
    dtfe: bool = True
    focal: bool = True
    scconv: bool = True
    width: float = 0.25
    depth: float = 0.33
    beta_range: tuple = TRAIN_BETA_RANGE
    test_beta_range: tuple = TEST_BETA_RANGE
    airlight: float = DEFAULT_AIRLIGHT
    conf_threshold: float = 0.01
    nms_threshold: float = 0.45
    log_every: int = 10
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only

    def validate(self):
        problems = []
        if self.det_weight < 0 or self.rest_weight < 0:
            problems.append("train.det_weight and train.rest_weight must be >= 0")
        if self.det_weight == 0 and self.rest_weight == 0:
            problems.append("train.det_weight and train.rest_weight cannot both be 0")
        if self.epochs < 1:
            problems.append("train.epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("train.batch_size must be >= 1")
        if self.base_lr < 0:
            problems.append("train.base_lr must be >= 0")
        if self.image_size % 32:
            problems.append("data.image_size must be a multiple of 32")
        lo, hi = self.beta_range
        if not 0 < lo <= hi:
            problems.append("data.beta_range must satisfy 0 < lo <= hi")
        if not 0 <= self.airlight <= 1:
            problems.append("data.airlight must lie in [0, 1]")
        if not self.classes:
            problems.append("data.classes must be non-empty")
        if problems:
            raise ConfigError(problems)
        return self

    def with_variant(self, name: str) -> "TrainConfig":
        if name not in VARIANTS:
            raise ConfigError([f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}"])
        return dataclasses.replace(self, **VARIANTS[name])

    def model_config(self) -> ModelConfig:
        return ModelConfig(num_classes=len(self.classes), input_size=self.image_size,
                           depth=self.depth, width=self.width, dtfe=self.dtfe,
                           scconv=self.scconv, restoration=self.restoration).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Which INI section each TrainConfig key lives in.
_SECTIONS = {
    "data": ("data_root", "classes", "image_size", "beta_range", "test_beta_range", "airlight"),
    "model": ("width", "depth", "restoration", "dtfe", "focal", "scconv"),
    "eval": ("conf_threshold", "nms_threshold"),
}


def _section_of(key: str) -> str:
    for section, keys in _SECTIONS.items():
        if key in keys:
            return section
    return "train"


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.replace(",", " ").split()]
        if default and isinstance(default[0], float):
            return tuple(float(p) for p in parts)
        return tuple(parts)
    return type(default)(raw.strip())


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Apply ``{key: raw string}`` overrides, collecting every bad key before failing."""
    known = {f.name: f for f in fields(TrainConfig)}
    values, problems = {}, []
    for key, raw in overrides.items():
        name = key.split(".", 1)[-1]
        if name not in known:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            values[name] = _parse_value(str(raw), getattr(cfg, name))
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    cfg = dataclasses.replace(cfg, **values)
    if problems:
        # report value problems in the keys that did parse alongside the bad keys
        try:
            cfg.validate()
        except ConfigError as exc:
            problems += exc.problems
        raise ConfigError(problems)
    return cfg


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Read an INI run config; ``overrides`` (e.g. from CLI flags) win over the file."""
    cfg = TrainConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError([f"cannot read config file {path}"])
        raw = {}
        for section in parser.sections():
            for key, value in parser.items(section):
                raw[f"{section}.{key}"] = value
        cfg = apply_overrides(cfg, raw)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def save_config(cfg: TrainConfig, path) -> None:
    parser = configparser.ConfigParser()
    for key, value in cfg.to_dict().items():
        section = _section_of(key)
        if not parser.has_section(section):
            parser.add_section(section)
        if isinstance(value, (tuple, list)):
            value = ", ".join(str(v) for v in value)
        parser.set(section, key, str(value))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        parser.write(fh)
