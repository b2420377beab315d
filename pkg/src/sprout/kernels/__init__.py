"""Hot numerical kernels with a compiled core and a numpy fallback.

The Cython extension ``_ckernels`` is used when it was built at install
time; otherwise (or when ``SPROUT_KERNELS=python``) the numpy versions in
``_pykernels`` are used. ``BACKEND`` names the active implementation.
"""

import os

import numpy as np

from sprout.errors import ArgumentError, LabelError
from sprout.kernels import _pykernels

try:
    from sprout.kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None

if _ckernels is not None and os.environ.get("SPROUT_KERNELS", "").lower() != "python":
    _impl = _ckernels
    BACKEND = "cython"
else:
    _impl = _pykernels
    BACKEND = "python"


def backends():
    """Map of available backend name -> implementation module."""
    out = {"python": _pykernels}
    if _ckernels is not None:
        out["cython"] = _ckernels
    return out


def singular_values(a, impl=None) -> np.ndarray:
    """Singular values of a 2-D matrix, sorted descending (length min(N, D))."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or 0 in a.shape:
        raise ArgumentError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ArgumentError("matrix contains non-finite entries")
    return (impl or _impl).singular_values(a)


def laplacian_variance(gray, impl=None) -> float:
    """Variance of the 4-neighbour Laplacian over the image interior."""
    gray = np.ascontiguousarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ArgumentError(f"expected a 2-D grayscale image, got shape {gray.shape}")
    return float((impl or _impl).laplacian_variance(gray))


def greedy_dedup(embeddings, threshold: float, impl=None) -> np.ndarray:
    """Greedy first-kept near-duplicate scan over rows in the given order.

    Returns, for each row, the index of the earlier kept row it duplicates
    (cosine >= threshold) or -1 when the row is kept.
    """
    emb = np.ascontiguousarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ArgumentError(f"expected an N x E embedding matrix, got shape {emb.shape}")
    if emb.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    return (impl or _impl).greedy_dedup(emb, float(threshold))


def confusion_matrix(pred, label, num_classes: int, ignore_index: int = 255, impl=None) -> np.ndarray:
    """K x K counts, rows indexed by label and columns by prediction."""
    pred = np.ascontiguousarray(pred, dtype=np.int64).ravel()
    label = np.ascontiguousarray(label, dtype=np.int64).ravel()
    if pred.shape != label.shape:
        raise ArgumentError(f"prediction/label size mismatch: {pred.size} vs {label.size}")
    valid = label != ignore_index
    if ((label < 0) | (label >= num_classes))[valid].any():
        raise LabelError(f"label index outside [0, {num_classes}) and not ignore={ignore_index}")
    if ((pred < 0) | (pred >= num_classes))[valid].any():
        raise ArgumentError(f"prediction index outside [0, {num_classes})")
    return (impl or _impl).confusion_matrix(pred, label, int(num_classes), int(ignore_index))
