"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or when
``SPROUT_KERNELS=python`` is set. Inputs are assumed already validated and
converted by :mod:`sprout.kernels`.
"""

import numpy as np

MAX_SWEEPS = 60
JACOBI_EPS = 1e-15


def _round_robin(n):
    # circle method: n even, every pair appears exactly once over n-1 rounds
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        rounds.append((np.array(players[:half]), np.array(players[::-1][:half])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def singular_values(a):
    """Singular values of ``a`` by one-sided (Hestenes) Jacobi rotations.

    Rotations within a round act on disjoint column pairs, so each round is
    applied as a single vectorized update.
    """
    if a.shape[1] > a.shape[0]:
        a = a.T
    cols = np.array(a.T, dtype=np.float64, order="C")
    n = cols.shape[0]
    if n == 1:
        return np.sqrt(np.sum(cols * cols, axis=1))
    if n % 2:
        cols = np.vstack([cols, np.zeros((1, cols.shape[1]))])
    rounds = _round_robin(cols.shape[0])
    for _ in range(MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            wp, wq = cols[p], cols[q]
            alpha = np.einsum("ij,ij->i", wp, wp)
            beta = np.einsum("ij,ij->i", wq, wq)
            gamma = np.einsum("ij,ij->i", wp, wq)
            active = np.abs(gamma) > JACOBI_EPS * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            wp, wq = wp[active], wq[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            sign = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            cols[p] = c[:, None] * wp - s[:, None] * wq
            cols[q] = s[:, None] * wp + c[:, None] * wq
        if not rotated:
            break
    sv = np.sqrt(np.einsum("ij,ij->i", cols, cols))[:n]
    return np.sort(sv)[::-1]


def laplacian_variance(gray):
    if gray.shape[0] < 3 or gray.shape[1] < 3:
        return 0.0
    lap = (
        gray[:-2, 1:-1]
        + gray[2:, 1:-1]
        + gray[1:-1, :-2]
        + gray[1:-1, 2:]
        - 4.0 * gray[1:-1, 1:-1]
    )
    return float(lap.var())


def greedy_dedup(emb, threshold):
    n = emb.shape[0]
    dup_of = np.full(n, -1, dtype=np.int64)
    kept_rows = np.empty_like(emb)
    kept_ids = np.empty(n, dtype=np.int64)
    k = 0
    for i in range(n):
        if k:
            hits = np.flatnonzero(kept_rows[:k] @ emb[i] >= threshold)
            if hits.size:
                dup_of[i] = kept_ids[hits[0]]
                continue
        kept_rows[k] = emb[i]
        kept_ids[k] = i
        k += 1
    return dup_of


def confusion_matrix(pred, label, num_classes, ignore_index):
    keep = label != ignore_index
    flat = label[keep] * num_classes + pred[keep]
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes).astype(np.int64)
