"""Procedural two-texture images with per-pixel texture labels.

Each image is split into two irregular regions by thresholding a smooth
random field; one region is filled with texture 0, the other with texture 1.
Colours, orientations and phases are randomised per image so that only the
texture structure identifies the class.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from sprout.imageio import save_png

TEXTURE_PERIODS = (4.0, 11.0)


def _region_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    field = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(-2.0, 2.0, size=2)
        field += np.cos(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    return field > np.median(field)


def _grating(rng: np.random.Generator, size: int, period: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.cos(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period + phase)
    return wave


def two_texture_image(rng: np.random.Generator, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Return (H x W x 3 uint8 image, H x W uint8 label in {0, 1})."""
    mask = _region_mask(rng, size)
    tex = np.where(mask, _grating(rng, size, TEXTURE_PERIODS[1]), _grating(rng, size, TEXTURE_PERIODS[0]))
    base = rng.uniform(0.3, 0.7, size=3)
    tint = rng.uniform(0.15, 0.3, size=3) * rng.choice([-1.0, 1.0], size=3)
    img = base[None, None, :] + tex[..., None] * tint[None, None, :]
    img += rng.normal(0.0, 0.03, size=img.shape)
    rgb = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return rgb, mask.astype(np.uint8)


def two_texture_corpus(n: int, size: int = 64, seed: int = 0):
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for _ in range(n):
        img, lab = two_texture_image(rng, size)
        images.append(img)
        labels.append(lab)
    return np.stack(images), np.stack(labels)


def write_corpus(out_dir, n: int, size: int = 64, seed: int = 0, with_labels: bool = False) -> Path:
    """Write ``images/NNNNNN.png`` (and ``labels/NNNNNN.png``) under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if with_labels:
        (out / "labels").mkdir(parents=True, exist_ok=True)
    images, labels = two_texture_corpus(n, size, seed)
    for i, (img, lab) in enumerate(zip(images, labels)):
        save_png(out / "images" / f"{i:06d}.png", img)
        if with_labels:
            save_png(out / "labels" / f"{i:06d}.png", lab)
    return out
