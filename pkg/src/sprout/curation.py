"""Three-stage dataset filtration: visual quality, feature, content.

Stage 1 removes badly exposed and blurred images, stage 2 removes
near-duplicates (greedy cosine scan over global embeddings) and images with
low patch-feature variance, stage 3 removes images a pluggable classifier
scores as non-biological. Every input image receives exactly one verdict.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Protocol

import numpy as np
from PIL import Image

from sprout import kernels
from sprout.errors import ArgumentError, ConfigurationError, FormatError, IngestError
from sprout.imageio import list_images, load_rgb

log = logging.getLogger(__name__)

STAGES = ("quality", "feature", "content", "none")
REASONS = ("overexposed", "underexposed", "blurred", "near-duplicate", "low-semantic-content", "non-biological", "kept")
UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class CurationConfig:
    exposure_low: float = 0.02
    exposure_high: float = 0.98
    max_fraction: float = 0.60
    blur_threshold: float = 25.0
    # gray-level std under which an image has no edges to judge sharpness by;
    # such images are left to the semantic-variance check
    flat_std: float = 1.0
    dedup_threshold: float = 0.95
    variance_threshold: float = 1e-3
    content_threshold: float = 0.5
    embedder: str = "pixel-stats"
    classifier: str = "accept-all"

    def __post_init__(self):
        if not 0.0 <= self.exposure_low < self.exposure_high <= 1.0:
            raise ConfigurationError("need 0 <= exposure_low < exposure_high <= 1")
        if not 0.0 < self.max_fraction <= 1.0:
            raise ConfigurationError("max_fraction must lie in (0, 1]")
        if self.blur_threshold < 0 or self.flat_std < 0 or self.variance_threshold < 0:
            raise ConfigurationError("blur_threshold, flat_std and variance_threshold must be >= 0")
        if not 0.0 < self.dedup_threshold <= 1.0:
            raise ConfigurationError("dedup_threshold must lie in (0, 1]")
        if not 0.0 <= self.content_threshold <= 1.0:
            raise ConfigurationError("content_threshold must lie in [0, 1]")


class Fragment(NamedTuple):
    """Outcome of one stage for one image; ``reason`` is None when it passes."""

    reason: str | None
    score: float

    @property
    def removed(self) -> bool:
        return self.reason is not None


@dataclass
class CurationVerdict:
    image_id: str
    decision: str
    stage: str
    reason: str | None
    score: float | None
    duplicate_of: str | None = None
    detail: str = ""

    def __post_init__(self):
        if self.decision == "removed" and (self.stage == "none" or self.reason in (None, "kept")):
            raise ArgumentError(f"removed verdict for {self.image_id} needs a stage and a removal reason")
        if self.reason == "near-duplicate" and not self.duplicate_of:
            raise ArgumentError(f"near-duplicate verdict for {self.image_id} lacks duplicate_of")

    def to_line(self) -> str:
        score = "-" if self.score is None else f"{self.score:.6g}"
        cols = [self.image_id, self.decision, self.stage, self.reason or "-", score, self.duplicate_of or "-"]
        return "\t".join(cols)


@dataclass
class CurationManifest:
    verdicts: list[CurationVerdict]
    stage_removals: dict[str, int] = field(default_factory=dict)

    def count(self, decision: str) -> int:
        return sum(v.decision == decision for v in self.verdicts)

    @property
    def kept(self) -> list[str]:
        return [v.image_id for v in self.verdicts if v.decision == "kept"]

    def to_text(self) -> str:
        lines = ["# curation-manifest v1"]
        lines += [v.to_line() for v in self.verdicts]
        per_stage = " ".join(f"{s}={self.stage_removals.get(s, 0)}" for s in STAGES[:3])
        lines.append(f"# stages {per_stage}")
        lines.append(
            f"# summary kept={self.count('kept')} removed={self.count('removed')} errored={self.count('errored')}"
        )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CurationManifest":
        lines = text.splitlines()
        if not lines or lines[0] != "# curation-manifest v1":
            raise FormatError("manifest: missing '# curation-manifest v1' header")
        verdicts, removals = [], {}
        for ln in lines[1:]:
            if ln.startswith("# stages "):
                removals = {k: int(v) for k, v in (kv.split("=") for kv in ln[len("# stages ") :].split())}
                continue
            if ln.startswith("#") or not ln:
                continue
            cols = ln.split("\t")
            if len(cols) != 6:
                raise FormatError(f"manifest: expected 6 tab-separated columns, got {len(cols)}")
            path, decision, stage, reason, score, dup = cols
            verdicts.append(
                CurationVerdict(
                    path,
                    decision,
                    stage,
                    None if reason == "-" else reason,
                    None if score == "-" else float(score),
                    None if dup == "-" else dup,
                )
            )
        return cls(verdicts, removals)


# -- pluggable providers ---------------------------------------------------


class Embedder(Protocol):
    name: str

    def embed_global(self, image: np.ndarray) -> np.ndarray: ...

    def embed_patches(self, image: np.ndarray) -> np.ndarray: ...


class PixelStatsEmbedder:
    """Dependency-free embedder built from raw pixel statistics.

    Global: a 32x32 RGB thumbnail, mean-centred and L2-normalised (flat
    images map to the constant direction). Patches: a ``grid`` x ``grid``
    tiling where each cell is a ``cell`` x ``cell`` RGB thumbnail in [0, 1].
    """

    name = "pixel-stats"

    def __init__(self, thumb: int = 32, grid: int = 8, cell: int = 4):
        self.thumb = thumb
        self.grid = grid
        self.cell = cell

    def embed_global(self, image):
        small = np.asarray(Image.fromarray(image).resize((self.thumb, self.thumb), Image.BILINEAR), dtype=np.float64)
        vec = (small - small.mean()).ravel()
        norm = np.linalg.norm(vec)
        if norm < 1e-9:
            return np.full(vec.size, 1.0 / np.sqrt(vec.size))
        return vec / norm

    def embed_patches(self, image):
        # each grid cell becomes a cell x cell RGB thumbnail (box-filtered), scaled to [0, 1]
        side = self.grid * self.cell
        small = np.asarray(Image.fromarray(image).resize((side, side), Image.BOX), dtype=np.float64) / 255.0
        cells = small.reshape(self.grid, self.cell, self.grid, self.cell, -1).transpose(0, 2, 1, 3, 4)
        return cells.reshape(self.grid * self.grid, -1)


def accept_all(image) -> float:
    return 1.0


def excess_green_score(image) -> float:
    """Share of vegetation-coloured pixels (excess-green index), saturating at 10%."""
    rgb = image.astype(np.float64)
    total = rgb.sum(axis=-1) + 1e-9
    r, g, b = (rgb[..., i] / total for i in range(3))
    frac = float(((2 * g - r - b) > 0.05).mean())
    return min(1.0, 10.0 * frac)


EMBEDDERS: dict[str, Callable[[], Embedder]] = {"pixel-stats": PixelStatsEmbedder}
CLASSIFIERS: dict[str, Callable[[np.ndarray], float]] = {"accept-all": accept_all, "excess-green": excess_green_score}


def get_embedder(name: str) -> Embedder:
    try:
        return EMBEDDERS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown embedder {name!r}; expected one of {sorted(EMBEDDERS)}") from None


def get_classifier(name: str):
    try:
        return CLASSIFIERS[name]
    except KeyError:
        raise ConfigurationError(f"unknown classifier {name!r}; expected one of {sorted(CLASSIFIERS)}") from None


# -- stages ------------------------------------------------------------------


def to_gray(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma on the 0..255 scale, float64."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def quality_filter(image: np.ndarray, config: CurationConfig = CurationConfig()) -> Fragment:
    gray = to_gray(image)
    over = float((gray > config.exposure_high * 255.0).mean())
    if over > config.max_fraction:
        return Fragment("overexposed", over)
    under = float((gray < config.exposure_low * 255.0).mean())
    if under > config.max_fraction:
        return Fragment("underexposed", under)
    sharpness = kernels.laplacian_variance(gray)
    if gray.std() >= config.flat_std and sharpness < config.blur_threshold:
        return Fragment("blurred", sharpness)
    return Fragment(None, sharpness)


def dedup(embeddings: dict, threshold: float = 0.95) -> dict:
    """Greedy first-kept scan in lexicographic id order.

    Returns ``{removed_id: kept_id_it_duplicates}``.
    """
    ids = sorted(embeddings)
    if not ids:
        return {}
    mat = np.stack([np.asarray(embeddings[i], dtype=np.float64).ravel() for i in ids])
    norms = np.linalg.norm(mat, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if bad.size:
        raise ArgumentError(f"embedding for {ids[bad[0]]!r} is not unit-norm (|v| = {norms[bad[0]]:.6g})")
    dup_of = kernels.greedy_dedup(mat, threshold)
    return {ids[i]: ids[j] for i, j in enumerate(dup_of) if j >= 0}


def patch_feature_variance(patches: np.ndarray) -> float:
    """Per-dimension variance across patch rows, averaged over dimensions."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[0] == 0:
        raise ArgumentError(f"expected a P x E patch matrix, got shape {patches.shape}")
    if patches.shape[0] == 1:
        return 0.0
    return float(patches.var(axis=0).mean())


def semantic_variance_filter(image, embedder: Embedder, threshold: float = 1e-3) -> Fragment:
    score = patch_feature_variance(embedder.embed_patches(image))
    return Fragment("low-semantic-content" if score < threshold else None, score)


def content_filter(image, classifier=accept_all, threshold: float = 0.5) -> Fragment:
    score = float(classifier(image))
    return Fragment("non-biological" if score < threshold else None, score)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("SPROUT_THREADS", "1")))
    except ValueError:
        return 1


def run_pipeline(directory, config: CurationConfig = CurationConfig(), embedder=None, classifier=None) -> CurationManifest:
    root = Path(directory)
    paths = list_images(root)
    if not paths:
        raise ArgumentError(f"no images found in {root}")
    embedder = embedder if embedder is not None else get_embedder(config.embedder)
    classifier = classifier if classifier is not None else get_classifier(config.classifier)
    ids = [p.relative_to(root).as_posix() for p in paths]
    where = dict(zip(ids, paths))
    verdicts: dict[str, CurationVerdict] = {}
    removals = {"quality": 0, "feature": 0, "content": 0}

    def remove(image_id, stage, frag, dup=None):
        verdicts[image_id] = CurationVerdict(image_id, "removed", stage, frag.reason, frag.score, dup)
        removals[stage] += 1

    def errored(image_id, stage, exc):
        log.warning("curation error for %s at %s stage: %s", image_id, stage, exc)
        verdicts[image_id] = CurationVerdict(image_id, "errored", stage, None, None, detail=str(exc))

    def score_quality(image_id):
        try:
            return quality_filter(load_rgb(where[image_id]), config)
        except IngestError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        quality = list(pool.map(score_quality, ids))
    survivors = []
    for image_id, frag in zip(ids, quality):
        if isinstance(frag, Exception):
            errored(image_id, "quality", frag)
        elif frag.removed:
            remove(image_id, "quality", frag)
        else:
            survivors.append(image_id)

    embeddings = {}
    for image_id in survivors:
        try:
            embeddings[image_id] = embedder.embed_global(load_rgb(where[image_id]))
        except Exception as exc:  # embedder failures are recorded, not fatal
            errored(image_id, "feature", exc)
    dups = dedup(embeddings, config.dedup_threshold)
    survivors = [i for i in survivors if i in embeddings]
    for image_id in survivors:
        if image_id in dups:
            sim = float(np.dot(embeddings[image_id], embeddings[dups[image_id]]))
            remove(image_id, "feature", Fragment("near-duplicate", sim), dups[image_id])
    survivors = [i for i in survivors if i not in dups]

    remaining = []
    for image_id in survivors:
        try:
            frag = semantic_variance_filter(load_rgb(where[image_id]), embedder, config.variance_threshold)
        except Exception as exc:
            errored(image_id, "feature", exc)
            continue
        if frag.removed:
            remove(image_id, "feature", frag)
        else:
            remaining.append(image_id)

    for image_id in remaining:
        try:
            frag = content_filter(load_rgb(where[image_id]), classifier, config.content_threshold)
        except Exception as exc:
            errored(image_id, "content", exc)
            continue
        if frag.removed:
            remove(image_id, "content", frag)
        else:
            verdicts[image_id] = CurationVerdict(image_id, "kept", "none", "kept", frag.score)

    manifest = CurationManifest([verdicts[i] for i in ids], removals)
    assert manifest.count("kept") + manifest.count("removed") + manifest.count("errored") == len(ids)
    return manifest
