"""Image directory ingestion and atomic artifact writes."""

from __future__ import annotations

import io
import os
import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from sprout.errors import ArgumentError, IngestError, PersistedStateError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


def list_images(directory) -> list[Path]:
    """Image files under ``directory`` sorted by relative POSIX path."""
    root = Path(directory)
    if not root.is_dir():
        raise IngestError(f"not a directory: {root}")
    files = [p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(files, key=lambda p: p.relative_to(root).as_posix())


def load_rgb(path) -> np.ndarray:
    """8-bit H x W x 3 array; raises IngestError on undecodable files."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise IngestError(f"cannot decode image {path}: {exc}") from exc


def load_label(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise IngestError(f"cannot decode label map {path}: {exc}") from exc


def to_model_range(rgb: np.ndarray) -> torch.Tensor:
    """uint8 H x W x 3 -> float32 3 x H x W in [-1, 1]."""
    return torch.from_numpy(rgb.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def resize_square(rgb: np.ndarray, size: int) -> np.ndarray:
    """Center-crop to a square, then bilinear-resize to ``size``."""
    h, w = rgb.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    crop = rgb[top : top + side, left : left + side]
    if side == size:
        return crop
    return np.asarray(Image.fromarray(crop).resize((size, size), Image.BILINEAR))


def load_image_tensor(directory, size: int | None = None, limit: int | None = None) -> torch.Tensor:
    """All images in a directory as an N x 3 x S x S tensor in [-1, 1]."""
    paths = list_images(directory)
    if limit is not None:
        paths = paths[:limit]
    if not paths:
        raise IngestError(f"no images found in {directory}")
    out = []
    for p in paths:
        rgb = load_rgb(p)
        if size is not None:
            rgb = resize_square(rgb, size)
        out.append(to_model_range(rgb))
    shapes = {tuple(x.shape) for x in out}
    if len(shapes) != 1:
        raise IngestError(f"images in {directory} differ in size {sorted(shapes)}; pass a size to resize")
    return torch.stack(out)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, fsync, then rename."""
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise ArgumentError(f"output directory does not exist: {parent}")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise PersistedStateError(f"failed writing {path}: {exc}") from exc


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_png(path, array: np.ndarray) -> None:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(array)).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
