"""Frozen-feature evaluation: 1x1-conv segmentation probe, tiled inference,
mIoU scoring and PCA-to-RGB feature visualization."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from sprout import kernels
from sprout.diffusion import NoiseSchedule, forward_diffuse, make_schedule
from sprout.errors import ArgumentError, FormatError, LabelError, ShapeError

IGNORE_INDEX = 255
DEFAULT_PROBE_T = 0.25


@dataclass
class SegSample:
    image: np.ndarray  # H x W x 3 uint8
    label: np.ndarray  # H x W class indices, IGNORE_INDEX for unlabeled

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.label = np.asarray(self.label)
        if self.image.ndim != 3 or self.image.shape[-1] != 3:
            raise ShapeError(f"image must be H x W x 3, got {self.image.shape}")
        if self.label.shape != self.image.shape[:2]:
            raise ShapeError(f"label shape {self.label.shape} does not match image {self.image.shape[:2]}")


class ProbeHead(nn.Module):
    """One 1x1 convolution from D feature channels to K class logits."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.conv = nn.Conv2d(dim, num_classes, kernel_size=1)

    def forward(self, feats: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        """``feats`` is B x h x w x D; returns B x K x H x W logits."""
        logits = self.conv(feats.permute(0, 3, 1, 2))
        return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)


def weights_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _image_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 127.5 - 1.0
    return torch.as_tensor(arr, dtype=dtype).permute(2, 0, 1)


def noisy_input(image: np.ndarray, t: float, sched: NoiseSchedule, seed: int) -> torch.Tensor:
    """1 x 3 x H x W noised image; noise depends only on (seed, H, W)."""
    x0 = _image_tensor(image).unsqueeze(0)
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(x0.shape, generator=gen)
    return forward_diffuse(x0, eps, torch.full((1,), float(t)), sched).xt


def backbone_features(model, xt: torch.Tensor, t: float, tap=None) -> torch.Tensor:
    tt = torch.full((xt.shape[0],), float(t), dtype=xt.dtype)
    return model.extract_features(xt, tt, layer=tap)


def _check_labels(samples: Sequence[SegSample], num_classes: int):
    for i, s in enumerate(samples):
        bad = (s.label != IGNORE_INDEX) & ((s.label < 0) | (s.label >= num_classes))
        if bad.any():
            raise LabelError(f"sample {i}: class index {int(s.label[bad][0])} >= {num_classes}")


def fit_probe(
    model,
    samples: Sequence[SegSample],
    num_classes: int,
    t: float = DEFAULT_PROBE_T,
    epochs: int = 100,
    lr: float = 1e-2,
    sched: NoiseSchedule | None = None,
    seed: int = 0,
    tap=None,
    batch_size: int = 16,
    finetune: bool = False,
    return_history: bool = False,
):
    """Train a 1x1-conv head on backbone features with pixel cross-entropy.

    The backbone stays frozen unless ``finetune`` is set, in which case all
    of its weights are optimized together with the head.
    """
    if not samples:
        raise ArgumentError("no training samples")
    _check_labels(samples, num_classes)
    sched = sched or make_schedule()
    gen = torch.Generator().manual_seed(seed)
    xts = [noisy_input(s.image, t, sched, seed + i) for i, s in enumerate(samples)]
    labels = [torch.as_tensor(s.label.astype(np.int64)) for s in samples]
    shapes = {tuple(x.shape) for x in xts}
    stacked = len(shapes) == 1
    if not finetune:
        with torch.no_grad():
            feats = [backbone_features(model, x, t, tap) for x in xts]
        dim = feats[0].shape[-1]
    else:
        with torch.no_grad():
            dim = backbone_features(model, xts[0], t, tap).shape[-1]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = ProbeHead(dim, num_classes)
    params = list(head.parameters()) + (list(model.parameters()) if finetune else [])
    opt = torch.optim.Adam(params, lr=lr)
    history = []
    n = len(samples)
    for _ in range(epochs):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size].tolist()
            if stacked:
                groups = [idx]
            else:
                groups = [[i] for i in idx]
            opt.zero_grad(set_to_none=True)
            loss_sum = 0.0
            for g in groups:
                if finetune:
                    model.train()
                    f = backbone_features(model, torch.cat([xts[i] for i in g]), t, tap)
                else:
                    f = torch.cat([feats[i] for i in g])
                y = torch.stack([labels[i] for i in g])
                logits = head(f, tuple(y.shape[-2:]))
                loss = F.cross_entropy(logits, y, ignore_index=IGNORE_INDEX) * (len(g) / len(idx))
                loss.backward()
                loss_sum += float(loss.detach())
            opt.step()
            total += loss_sum * len(idx)
        history.append(total / n)
    model.eval()
    head.eval()
    return (head, history) if return_history else head


def window_origins(size: int, window: int, stride: int) -> list[int]:
    """Window starts covering [0, size) with the last window flush to the edge."""
    if size < window:
        raise ArgumentError(f"image side {size} smaller than window {window}; pad the image first")
    if stride < 1:
        raise ArgumentError("stride must be >= 1")
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


def coverage_map(h: int, w: int, window: int, stride: int) -> np.ndarray:
    cover = np.zeros((h, w), dtype=np.int64)
    for y in window_origins(h, window, stride):
        for x in window_origins(w, window, stride):
            cover[y : y + window, x : x + window] += 1
    return cover


@torch.no_grad()
def predict_logits(model, head: ProbeHead, image: np.ndarray, t: float = DEFAULT_PROBE_T, sched=None, seed: int = 0, tap=None):
    """K x H x W logits for a whole image in one pass."""
    sched = sched or make_schedule()
    xt = noisy_input(image, t, sched, seed)
    return head(backbone_features(model, xt, t, tap), tuple(xt.shape[-2:]))[0]


@torch.no_grad()
def sliding_window_infer(
    model,
    head: ProbeHead,
    image: np.ndarray,
    window: int = 256,
    stride: int = 128,
    t: float = DEFAULT_PROBE_T,
    sched: NoiseSchedule | None = None,
    seed: int = 0,
    tap=None,
    return_logits: bool = False,
):
    """Average window logits over overlaps, then argmax to an H x W class map.

    The whole image is noised once, so every window sees the same noisy
    pixels regardless of tiling.
    """
    sched = sched or make_schedule()
    h, w = np.asarray(image).shape[:2]
    ys, xs = window_origins(h, window, stride), window_origins(w, window, stride)
    xt = noisy_input(image, t, sched, seed)
    acc = torch.zeros(head.num_classes, h, w, dtype=torch.float64)
    count = torch.zeros(1, h, w, dtype=torch.float64)
    for y in ys:
        for x in xs:
            crop = xt[..., y : y + window, x : x + window]
            logits = head(backbone_features(model, crop, t, tap), (window, window))[0]
            acc[:, y : y + window, x : x + window] += logits.double()
            count[:, y : y + window, x : x + window] += 1
    avg = acc / count
    classes = avg.argmax(dim=0).numpy().astype(np.uint8)
    return (classes, avg) if return_logits else classes


@dataclass
class IoUResult:
    per_class: list[float | None]
    miou: float
    confusion: np.ndarray = field(repr=False, default=None)

    def to_text(self) -> str:
        lines = ["iou-report v1"]
        for k, v in enumerate(self.per_class):
            lines.append(f"class {k} iou {'absent' if v is None else repr(v)}")
        lines.append(f"miou {self.miou!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "IoUResult":
        lines = [ln.split() for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != ["iou-report", "v1"]:
            raise FormatError("iou report: missing 'iou-report v1' header")
        per_class, miou = [], None
        for parts in lines[1:]:
            if len(parts) == 4 and parts[0] == "class" and parts[2] == "iou":
                per_class.append(None if parts[3] == "absent" else float(parts[3]))
            elif len(parts) == 2 and parts[0] == "miou":
                miou = float(parts[1])
            else:
                raise FormatError(f"iou report: unparseable line {' '.join(parts)!r}")
        if miou is None:
            raise FormatError("iou report: missing miou line")
        return cls(per_class, miou)


def confusion_from_maps(predictions, labels, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    if isinstance(predictions, np.ndarray) and predictions.ndim == 2:
        predictions, labels = [predictions], [labels]
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise ArgumentError(f"{len(predictions)} predictions for {len(labels)} label maps")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, l in zip(predictions, labels):
        p, l = np.asarray(p), np.asarray(l)
        if p.shape != l.shape:
            raise ShapeError(f"prediction shape {p.shape} != label shape {l.shape}")
        cm += kernels.confusion_matrix(p, l, num_classes, ignore_index)
    return cm


def iou_from_confusion(cm: np.ndarray) -> IoUResult:
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = [None if d == 0 else float(tp[k] / d) for k, d in enumerate(denom)]
    present = [v for v in per_class if v is not None]
    miou = float(np.mean(present)) if present else float("nan")
    return IoUResult(per_class, miou, cm)


def compute_miou(predictions, labels, num_classes: int, ignore_index: int = IGNORE_INDEX) -> IoUResult:
    """Dataset-level IoU per class; classes absent from both sides are skipped."""
    return iou_from_confusion(confusion_from_maps(predictions, labels, num_classes, ignore_index))


@dataclass
class PCAVisual:
    rgb: np.ndarray
    degenerate: bool
    components: np.ndarray | None = None
    explained_variance: np.ndarray | None = None


def pca_visualize(features, var_tol: float = 1e-9) -> PCAVisual:
    """Project h x w x D features on their top-3 principal axes as 8-bit RGB.

    Each channel is min-max scaled independently. A component's sign is fixed
    so that its largest-magnitude loading is positive. Zero-variance input
    gives a mid-gray image with ``degenerate=True``.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3:
        raise ShapeError(f"expected h x w x D features, got shape {feats.shape}")
    h, w, d = feats.shape
    if h * w < 3:
        raise ArgumentError("need at least 3 tokens for a 3-component projection")
    if not np.isfinite(feats).all():
        raise ArgumentError("features contain non-finite values")
    x = feats.reshape(h * w, d)
    x = x - x.mean(axis=0)
    gray = np.full((h, w, 3), 128, dtype=np.uint8)
    if np.abs(x).max() <= var_tol * max(1.0, float(np.abs(feats).max())):
        return PCAVisual(gray, True)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    k = min(3, vt.shape[0])
    comps = vt[:k].copy()
    for i in range(k):
        if comps[i, np.argmax(np.abs(comps[i]))] < 0:
            comps[i] = -comps[i]
    proj = x @ comps.T
    rgb = gray.reshape(h * w, 3).copy()
    scale = s[0] if s.size else 0.0
    for c in range(k):
        col = proj[:, c]
        lo, hi = col.min(), col.max()
        if s[c] > 1e-9 * scale and hi > lo:
            rgb[:, c] = np.round((col - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return PCAVisual(rgb.reshape(h, w, 3), False, comps, (s[:k] ** 2) / (h * w))
