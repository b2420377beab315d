"""Training-free timestep selection by maximal effective rank of features."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from sprout import kernels
from sprout.diffusion import NoiseSchedule, forward_diffuse, make_schedule
from sprout.errors import ArgumentError, DegenerateInputError, FormatError

POOLINGS = ("image-mean", "token")
DEFAULT_GRID = tuple(round(0.1 * i, 10) for i in range(11))
# singular values below this fraction of the largest are treated as zero
RELATIVE_SV_CUTOFF = 1e-10


@dataclass
class FeatureMatrix:
    data: np.ndarray
    pooling: str = "image-mean"
    source_t: float | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ArgumentError(f"feature matrix must be 2-D, got shape {self.data.shape}")
        n, d = self.data.shape
        if n < 2 or d < 2:
            raise ArgumentError(f"feature matrix needs N >= 2 and D >= 2, got {n} x {d}")
        if not np.isfinite(self.data).all():
            raise ArgumentError("feature matrix contains non-finite entries")
        if self.pooling not in POOLINGS:
            raise ArgumentError(f"unknown pooling {self.pooling!r}")


@dataclass
class ErankReport:
    grid: list[float]
    eranks: list[float]
    t_star: float
    spectra: dict[float, np.ndarray] = field(default_factory=dict, repr=False)

    def to_text(self) -> str:
        lines = ["erank-report v1"]
        lines += [f"t {t!r} erank {e!r}" for t, e in zip(self.grid, self.eranks)]
        lines.append(f"t_star {self.t_star!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ErankReport":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != "erank-report v1":
            raise FormatError("erank report: missing 'erank-report v1' header")
        grid, eranks, t_star = [], [], None
        for ln in lines[1:]:
            parts = ln.split()
            try:
                if len(parts) == 4 and parts[0] == "t" and parts[2] == "erank":
                    grid.append(float(parts[1]))
                    eranks.append(float(parts[3]))
                    continue
                if len(parts) == 2 and parts[0] == "t_star":
                    t_star = float(parts[1])
                    continue
            except ValueError:
                pass
            raise FormatError(f"erank report: unparseable line {ln!r}")
        if t_star is None:
            raise FormatError("erank report: missing t_star line")
        return cls(grid, eranks, t_star)


def spectrum_entropy(sv: np.ndarray) -> float:
    total = float(sv.sum())
    p = sv[sv > 0] / total
    return float(-(p * np.log(p)).sum())


def effective_rank(F, return_spectrum: bool = False):
    """exp of the Shannon entropy of the sum-normalized singular values."""
    data = F.data if isinstance(F, FeatureMatrix) else FeatureMatrix(F).data
    sv = kernels.singular_values(data)
    if sv.size == 0 or sv[0] <= 0.0:
        raise DegenerateInputError("all-zero feature matrix: singular value sum is zero")
    sv = np.where(sv < RELATIVE_SV_CUTOFF * sv[0], 0.0, sv)
    q = min(data.shape)
    value = min(max(math.exp(spectrum_entropy(sv)), 1.0), float(q))
    return (value, sv) if return_spectrum else value


def _batches(images) -> Iterable[torch.Tensor]:
    if isinstance(images, torch.Tensor):
        return [images] if images.dim() == 4 else [images.unsqueeze(0)]
    return images


def collect_features(
    model,
    images,
    t: float,
    sched: NoiseSchedule | None = None,
    pooling: str = "image-mean",
    seed: int = 0,
    layer=None,
) -> FeatureMatrix:
    """Noise each image to ``t`` with seeded noise and stack tap features.

    ``images`` is a B x C x H x W tensor or an iterable of such batches in
    [-1, 1]. Noise is drawn batch by batch from one generator, so the same
    image set and seed give identical noise at every ``t``.
    """
    if pooling not in POOLINGS:
        raise ArgumentError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")
    sched = sched or make_schedule()
    gen = torch.Generator().manual_seed(seed)
    rows = []
    with torch.no_grad():
        for batch in _batches(images):
            batch = torch.as_tensor(batch)
            eps = torch.randn(batch.shape, generator=gen, dtype=batch.dtype)
            tt = torch.full((batch.shape[0],), float(t), dtype=batch.dtype)
            xt = forward_diffuse(batch, eps, tt, sched).xt
            feats = model.extract_features(xt, tt, layer=layer)
            feats = feats.reshape(feats.shape[0], -1, feats.shape[-1])
            if pooling == "image-mean":
                rows.append(feats.mean(dim=1).double().numpy())
            else:
                rows.append(feats.reshape(-1, feats.shape[-1]).double().numpy())
    if not rows:
        raise ArgumentError("no images supplied for feature collection")
    return FeatureMatrix(np.concatenate(rows, axis=0), pooling=pooling, source_t=float(t))


def select_timestep(
    model,
    images,
    grid: Sequence[float] = DEFAULT_GRID,
    sched: NoiseSchedule | None = None,
    pooling: str = "image-mean",
    seed: int = 0,
    layer=None,
    keep_spectra: bool = False,
) -> ErankReport:
    """Evaluate effective rank over ``grid`` and return the argmax timestep.

    Ties go to the smaller t. ``images`` must be re-iterable (a tensor or a
    list of batches) since it is traversed once per grid point.
    """
    grid = [float(t) for t in grid]
    if not grid:
        raise ArgumentError("timestep grid is empty")
    if any(not 0.0 <= t <= 1.0 for t in grid):
        raise ArgumentError("timestep grid entries must lie in [0, 1]")
    if not isinstance(images, torch.Tensor):
        images = list(images)
    eranks, spectra = [], {}
    for t in grid:
        feats = collect_features(model, images, t, sched, pooling, seed, layer)
        try:
            value, sv = effective_rank(feats, return_spectrum=True)
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"at t={t!r}: {exc}") from exc
        eranks.append(value)
        if keep_spectra:
            spectra[t] = sv
    best = max(range(len(grid)), key=lambda i: (eranks[i], -grid[i]))
    return ErankReport(grid, eranks, grid[best], spectra)


def parse_grid(text: str) -> list[float]:
    """``A:B:N`` -> N evenly spaced points including both ends."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ArgumentError(f"grid must look like A:B:N, got {text!r}")
    try:
        a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ArgumentError(f"grid must look like A:B:N, got {text!r}") from None
    if n < 1:
        raise ArgumentError("grid needs at least one point")
    if n == 1:
        if a != b:
            raise ArgumentError("a one-point grid needs A == B")
        return [a]
    return [a + (b - a) * i / (n - 1) for i in range(n)]
