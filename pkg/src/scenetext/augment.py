"""Training-time image augmentation and canonical resizing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

CANONICAL_H, CANONICAL_W = 32, 100


@dataclass(frozen=True)
class AugmentationConfig:
    rotation_deg: float = 3.0
    elastic_px: float = 2.0
    hue: float = 0.05
    brightness: float = 0.2
    contrast: float = 0.2
    rotate_tall: bool = True
    rotation: bool = True
    elastic: bool = True
    color: bool = True

    def __post_init__(self):
        if not 0.0 <= self.rotation_deg <= 3.0:
            raise ValueError(f"rotation range must lie within [-3, 3] degrees, got {self.rotation_deg}")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(rotation=False, elastic=False, color=False)


def rotate_if_tall(image: np.ndarray) -> np.ndarray:
    """Rotate 90 degrees counter-clockwise when height exceeds three times the width."""
    h, w = image.shape[:2]
    return np.rot90(image, k=1).copy() if h > 3 * w else image


def warp(image: np.ndarray, src_x: np.ndarray, src_y: np.ndarray) -> np.ndarray:
    """Bilinear lookup of ``image`` (float) at pixel coordinates, border clamped."""
    h, w = image.shape[:2]
    x = np.clip(src_x, 0, w - 1)
    y = np.clip(src_y, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros_like(x, dtype=int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros_like(y, dtype=int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def random_rotation(image: np.ndarray, max_deg: float, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    theta = np.deg2rad(rng.uniform(-max_deg, max_deg))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2, (h - 1) / 2
    c, s = np.cos(theta), np.sin(theta)
    src_x = cx + c * (xx - cx) - s * (yy - cy)
    src_y = cy + s * (xx - cx) + c * (yy - cy)
    return warp(image, src_x, src_y)


def elastic_deformation(image: np.ndarray, strength: float, rng: np.random.Generator,
                        grid: tuple = (3, 6)) -> np.ndarray:
    """Coarse random displacement field, bilinearly upsampled, ``strength`` px at most."""
    h, w = image.shape[:2]
    coarse = rng.uniform(-strength, strength, (2,) + grid)
    gy = np.linspace(0, grid[0] - 1, h)
    gx = np.linspace(0, grid[1] - 1, w)
    yy, xx = np.meshgrid(gy, gx, indexing="ij")
    field = warp(np.moveaxis(coarse, 0, -1), xx, yy)
    base_y, base_x = np.mgrid[0:h, 0:w].astype(np.float64)
    return warp(image, base_x + field[..., 0], base_y + field[..., 1])


def color_jitter(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Hue shift, brightness scale and contrast stretch on a [0, 1] float image."""
    shift = rng.uniform(-cfg.hue, cfg.hue)
    if shift:
        hsv = np.asarray(Image.fromarray(_to_uint8(image)).convert("HSV")).astype(np.int16)
        hsv[..., 0] = (hsv[..., 0] + int(round(shift * 255))) % 256
        image = np.asarray(Image.fromarray(hsv.astype(np.uint8), "HSV").convert("RGB"),
                           dtype=np.float64) / 255.0
    image = image * (1.0 + rng.uniform(-cfg.brightness, cfg.brightness))
    mean = image.mean()
    image = (image - mean) * (1.0 + rng.uniform(-cfg.contrast, cfg.contrast)) + mean
    return np.clip(image, 0.0, 1.0)


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def resize(image: np.ndarray, height: int = CANONICAL_H, width: int = CANONICAL_W) -> np.ndarray:
    """Resize an RGB image (uint8 or [0, 1] float) to ``height x width``; returns [0, 1] float."""
    if image.dtype != np.uint8:
        image = _to_uint8(image)
    if image.shape[:2] != (height, width):
        image = np.asarray(Image.fromarray(image).resize((width, height), Image.BILINEAR))
    return image.astype(np.float64) / 255.0


def normalize(image01: np.ndarray) -> np.ndarray:
    """Map [0, 1] to [-1, 1]."""
    return image01 * 2.0 - 1.0


def prepare(image: np.ndarray, height: int = CANONICAL_H, width: int = CANONICAL_W) -> np.ndarray:
    """Inference preprocessing: tall-image rotation, resize, normalize."""
    return normalize(resize(rotate_if_tall(np.asarray(image)), height, width))


def augment(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator,
            height: int = CANONICAL_H, width: int = CANONICAL_W) -> np.ndarray:
    """Randomized pipeline on a decoded RGB image; returns ``height x width x 3`` in [-1, 1]."""
    image = np.asarray(image)
    if cfg.rotate_tall:
        image = rotate_if_tall(image)
    x = resize(image, height, width)
    if cfg.rotation and cfg.rotation_deg > 0:
        x = random_rotation(x, cfg.rotation_deg, rng)
    if cfg.elastic and cfg.elastic_px > 0:
        x = elastic_deformation(x, cfg.elastic_px, rng)
    if cfg.color:
        x = color_jitter(x, cfg, rng)
    return normalize(x)
