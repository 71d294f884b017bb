"""Synthetic text-image generator.

Random strings are drawn with the built-in bitmap glyphs onto noisy,
randomly colored backgrounds.  Geometry (size, position, slant and, for the
``curved`` style, rotation and arc bending) is sampled per image.  Output is
fully determined by the seed.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .glyphs import GLYPH_H, GLYPHS, text_bitmap

STYLES = ("plain", "curved")


@dataclass(frozen=True)
class SynthSpec:
    charset: str
    min_len: int = 1
    max_len: int = 5
    count: int = 1000
    seed: int = 0
    style: str = "plain"
    height: int = 32
    width: int = 100

    def validate(self) -> None:
        if not self.charset:
            raise ValueError("charset is empty")
        missing = sorted({c for c in self.charset if c not in GLYPHS})
        if missing:
            raise ValueError(f"no glyphs for {missing}")
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"invalid length range [{self.min_len}, {self.max_len}]")
        if self.style not in STYLES:
            raise ValueError(f"style must be one of {STYLES}, got {self.style!r}")


def _sample_bitmap(bitmap: np.ndarray, ty: np.ndarray, tx: np.ndarray) -> np.ndarray:
    """Bilinear coverage of ``bitmap`` at fractional (row, col) positions; zero outside."""
    padded = np.pad(bitmap, 1)
    y = ty - 0.5 + 1
    x = tx - 0.5 + 1
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    fy, fx = y - y0, x - x0
    h, w = padded.shape
    ok = (y0 >= 0) & (x0 >= 0) & (y0 + 1 < h) & (x0 + 1 < w)
    y0c = np.clip(y0, 0, h - 2)
    x0c = np.clip(x0, 0, w - 2)
    v = (padded[y0c, x0c] * (1 - fy) * (1 - fx) + padded[y0c, x0c + 1] * (1 - fy) * fx
         + padded[y0c + 1, x0c] * fy * (1 - fx) + padded[y0c + 1, x0c + 1] * fy * fx)
    return np.where(ok, v, 0.0)


def _luminance(c: np.ndarray) -> float:
    return float(c @ np.array([0.299, 0.587, 0.114]))


def render(text: str, rng: np.random.Generator, style: str = "plain", height: int = 32,
           width: int = 100) -> np.ndarray:
    """Render ``text`` to an ``height x width x 3`` uint8 image."""
    bitmap = text_bitmap(text)
    bw = bitmap.shape[1]
    curved = style == "curved"
    gh = rng.uniform(10.0, 15.0) if curved else rng.uniform(14.0, 22.0)
    gh *= height / 32.0
    sy = gh / GLYPH_H
    sx = sy * rng.uniform(0.8, 1.15)
    max_tw = width * (0.8 if curved else 0.94)
    if bw * sx > max_tw:
        sx = max_tw / bw
    tw = bw * sx
    margin_y = 2.0
    amp = rng.uniform(-0.22, 0.22) * height if curved else 0.0
    angle = np.deg2rad(rng.uniform(-12.0, 12.0)) if curved else 0.0
    slack_y = height - gh - 2 * margin_y - (abs(amp) if curved else 0.0)
    x0 = rng.uniform(2.0, max(2.0, width - 2.0 - tw))
    y0 = margin_y + rng.uniform(0.0, max(slack_y, 0.0)) + (max(-amp, 0.0) if curved else 0.0)
    if curved:
        y0 = float(np.clip(y0, 1.0, height - gh - 1.0))
    shear = rng.uniform(-0.25, 0.25)
    xc, yc = x0 + tw / 2, y0 + gh / 2

    v, u = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    if curved:
        ca, sa = np.cos(-angle), np.sin(-angle)
        du, dv = u - xc, v - yc
        u, v = xc + ca * du - sa * dv, yc + sa * du + ca * dv
        rel = np.clip((u - xc) / (tw / 2), -1.5, 1.5)
        v = v - amp * (1.0 - rel * rel)
    u = u - shear * (v - yc)
    cover = _sample_bitmap(bitmap, (v - y0) / sy, (u - x0) / sx)

    bg = rng.uniform(0.0, 1.0, 3)
    fg = rng.uniform(0.0, 1.0, 3)
    for _ in range(20):
        if abs(_luminance(fg) - _luminance(bg)) >= 0.35:
            break
        fg = rng.uniform(0.0, 1.0, 3)
    else:
        fg = np.zeros(3) if _luminance(bg) > 0.5 else np.ones(3)
    grad_dir = rng.normal(size=2)
    ramp = (grad_dir[0] * (np.arange(width)[None, :] / width - 0.5)
            + grad_dir[1] * (np.arange(height)[:, None] / height - 0.5))
    back = bg + rng.uniform(-0.15, 0.15) * ramp[..., None]
    img = back * (1 - cover[..., None]) + fg * cover[..., None]
    img = img + rng.normal(0.0, rng.uniform(0.0, 0.06), img.shape)
    if rng.random() < 0.3:
        pad = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
        img = sum(pad[i:i + height, j:j + width] for i in range(3) for j in range(3)) / 9.0
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def random_text(rng: np.random.Generator, charset: str, min_len: int, max_len: int) -> str:
    n = int(rng.integers(min_len, max_len + 1))
    return "".join(charset[i] for i in rng.integers(0, len(charset), n))


def synth_dataset(spec: SynthSpec, out_dir, overwrite: bool = False) -> Path:
    """Write ``count`` rendered images plus ``labels.tsv`` into ``out_dir``."""
    spec.validate()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise FileExistsError(f"target directory {out} exists and is not empty")
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    digits = max(6, len(str(spec.count - 1)))
    lines = []
    for i in range(spec.count):
        text = random_text(rng, spec.charset, spec.min_len, spec.max_len)
        img = render(text, rng, spec.style, spec.height, spec.width)
        rel = f"images/{i:0{digits}d}.png"
        Image.fromarray(img).save(out / rel, format="PNG")
        lines.append(f"{rel}\t{text}\n")
    with open(out / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)
    return out


def in_memory(spec: SynthSpec) -> tuple[np.ndarray, list[str]]:
    """Rendered images and labels without touching disk (same stream as :func:`synth_dataset`)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    images, labels = [], []
    for _ in range(spec.count):
        text = random_text(rng, spec.charset, spec.min_len, spec.max_len)
        images.append(render(text, rng, spec.style, spec.height, spec.width))
        labels.append(text)
    return np.stack(images), labels
