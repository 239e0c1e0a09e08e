"""Synthetic fog via the atmospheric scattering model.

A clean image ``J`` is blended with a constant airlight ``A`` through a
transmission map ``t = exp(-beta * d)``::

    I = J * t + A * (1 - t)

The depth ``d`` is a radial profile that is largest at the image center, so
the fog is thickest in the middle of the frame.  Images are channel-major
float arrays in ``[0, 1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "FogParams",
    "TRAIN_BETA_RANGE",
    "TEST_BETA_RANGE",
    "DEFAULT_AIRLIGHT",
    "T_FLOOR",
    "compute_depth",
    "compute_transmission",
    "apply_fog",
    "invert_fog",
    "sample_beta",
    "load_image",
    "save_image",
]

DEFAULT_AIRLIGHT = 0.5
TRAIN_BETA_RANGE = (0.07, 0.12)
TEST_BETA_RANGE = (0.05, 0.14)
# Below this transmission the inverse amplifies quantization noise without bound.
T_FLOOR = 0.05
DEPTH_SLOPE = 0.04


@dataclass(frozen=True)
class FogParams:
    """Airlight ``A`` and scattering coefficient ``beta``."""

    A: float = DEFAULT_AIRLIGHT
    beta: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.A <= 1.0:
            raise ValueError(f"atmospheric light must lie in [0, 1], got {self.A}")
        if self.beta < 0.0 or not math.isfinite(self.beta):
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")


def compute_depth(width: int, height: int) -> np.ndarray:
    """Radial pseudo-depth of shape ``(height, width)``.

    ``d = max(0, -0.04 * rho + sqrt(max(width, height)))`` where ``rho`` is the
    Euclidean pixel distance to the center pixel ``(w // 2, h // 2)`` (the
    exact geometric center for odd sizes).
    """
    if int(width) != width or int(height) != height or width < 1 or height < 1:
        raise ValueError(f"image dimensions must be positive integers, got {width}x{height}")
    ys = np.arange(height, dtype=np.float64) - height // 2
    xs = np.arange(width, dtype=np.float64) - width // 2
    rho = np.hypot(ys[:, None], xs[None, :])
    depth = -DEPTH_SLOPE * rho + math.sqrt(max(width, height))
    return np.maximum(depth, 0.0)


def compute_transmission(depth: np.ndarray, beta: float) -> np.ndarray:
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return np.exp(-beta * np.asarray(depth, dtype=np.float64))


def _check_image(image: np.ndarray, name: str) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"{name} must be channel-major C x H x W, got shape {image.shape}")
    return image


def apply_fog(clean: np.ndarray, params: FogParams) -> np.ndarray:
    """Fog a ``C x H x W`` image in ``[0, 1]``; one transmission map is shared by all channels."""
    clean = _check_image(clean, "clean")
    if clean.size and (clean.min() < 0.0 or clean.max() > 1.0):
        raise ValueError("clean image values must lie in [0, 1]")
    _, h, w = clean.shape
    t = compute_transmission(compute_depth(w, h), params.beta)
    return clean * t + params.A * (1.0 - t)


def invert_fog(foggy: np.ndarray, params: FogParams, t_floor: float = T_FLOOR):
    """Analytic inverse of :func:`apply_fog`.

    Returns ``(restored, trusted)`` where ``restored`` is clamped to ``[0, 1]``
    and ``trusted`` is an ``H x W`` boolean mask of pixels with ``t >= t_floor``.
    """
    foggy = _check_image(foggy, "foggy")
    _, h, w = foggy.shape
    t = compute_transmission(compute_depth(w, h), params.beta)
    restored = (foggy - params.A * (1.0 - t)) / t
    return np.clip(restored, 0.0, 1.0), t >= t_floor


def sample_beta(beta_range, rng: np.random.Generator) -> float:
    lo, hi = beta_range
    if lo > hi:
        raise ValueError(f"empty beta range ({lo}, {hi})")
    if lo <= 0:
        raise ValueError(f"beta range must be positive, got ({lo}, {hi})")
    if lo == hi:
        return float(lo)
    return float(rng.uniform(lo, hi))


def load_image(path) -> np.ndarray:
    """Read an 8-bit raster into a ``3 x H x W`` float array in ``[0, 1]``."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def to_uint8(image: np.ndarray) -> np.ndarray:
    """``C x H x W`` float in ``[0, 1]`` to ``H x W x C`` uint8, rounding to nearest."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    return arr.transpose(1, 2, 0)


def save_image(image: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)
