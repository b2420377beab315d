"""Both kernel backends against independent oracles (LAPACK SVD, scipy
convolution, brute-force loops)."""

import numpy as np
import pytest
from scipy import ndimage

from sprout import kernels
from sprout.errors import ArgumentError, LabelError

BACKENDS = sorted(kernels.backends())


@pytest.fixture(params=BACKENDS)
def impl(request):
    return kernels.backends()[request.param]


def test_compiled_backend_built():
    # the package ships a Cython core; the fallback is only for environments without a compiler
    assert "cython" in kernels.backends()


@pytest.mark.parametrize("shape", [(1, 1), (2, 2), (5, 3), (3, 5), (4, 4), (7, 7), (64, 16), (30, 90)])
def test_singular_values_match_lapack(impl, shape):
    a = np.random.default_rng(sum(shape)).standard_normal(shape)
    ref = np.linalg.svd(a, compute_uv=False)
    got = kernels.singular_values(a, impl=impl)
    assert got.shape == (min(shape),)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12 * ref[0])


def test_singular_values_rank_deficient(impl):
    rng = np.random.default_rng(3)
    a = rng.standard_normal((20, 2)) @ rng.standard_normal((2, 9))
    got = kernels.singular_values(a, impl=impl)
    ref = np.linalg.svd(a, compute_uv=False)
    np.testing.assert_allclose(got[:2], ref[:2], rtol=1e-12)
    assert np.all(got[2:] < 1e-12 * got[0])


def test_singular_values_known_spectrum(impl):
    rng = np.random.default_rng(4)
    u, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    v, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    a = u[:, :4] @ np.diag([5.0, 3.0, 1.0, 0.5]) @ v.T
    np.testing.assert_allclose(kernels.singular_values(a, impl=impl), [5.0, 3.0, 1.0, 0.5], atol=1e-12)


def test_singular_values_rejects_bad_input():
    with pytest.raises(ArgumentError):
        kernels.singular_values(np.zeros(3))
    with pytest.raises(ArgumentError):
        kernels.singular_values(np.array([[np.inf, 0.0], [0.0, 1.0]]))


def _laplacian_oracle(gray):
    kernel = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)
    full = ndimage.convolve(gray.astype(np.float64), kernel, mode="constant")
    return full[1:-1, 1:-1].var()


@pytest.mark.parametrize("shape", [(3, 3), (17, 23), (64, 64)])
def test_laplacian_variance(impl, shape):
    gray = np.random.default_rng(5).integers(0, 256, size=shape).astype(np.float64)
    assert kernels.laplacian_variance(gray, impl=impl) == pytest.approx(_laplacian_oracle(gray), rel=1e-10)


def test_laplacian_variance_flat_and_tiny(impl):
    assert kernels.laplacian_variance(np.full((10, 10), 77.0), impl=impl) == 0.0
    assert kernels.laplacian_variance(np.ones((2, 5)), impl=impl) == 0.0


def _dedup_oracle(emb, threshold):
    kept, out = [], []
    for i, e in enumerate(emb):
        hit = next((k for k in kept if float(np.dot(emb[k], e)) >= threshold), -1)
        out.append(hit)
        if hit < 0:
            kept.append(i)
    return np.array(out)


def test_greedy_dedup_matches_loop_oracle(impl):
    rng = np.random.default_rng(6)
    base = rng.standard_normal((10, 8))
    emb = np.concatenate([base, base[[1, 3, 3]] + 0.05 * rng.standard_normal((3, 8))])
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    for th in (0.5, 0.9, 0.99):
        np.testing.assert_array_equal(kernels.greedy_dedup(emb, th, impl=impl), _dedup_oracle(emb, th))


def test_greedy_dedup_hand_trace(impl):
    # a.b = 0.96, a.c = 0.90, b.c = 0.96: b duplicates a; c survives against {a}
    a = np.array([1.0, 0.0, 0.0])
    b = np.array([0.96, np.sqrt(1 - 0.96**2), 0.0])
    cx = 0.90
    cy = (0.96 - 0.96 * cx) / b[1]
    c = np.array([cx, cy, np.sqrt(1 - cx**2 - cy**2)])
    emb = np.stack([a, b, c])
    assert np.dot(b, c) == pytest.approx(0.96)
    np.testing.assert_array_equal(kernels.greedy_dedup(emb, 0.95, impl=impl), [-1, 0, -1])


def test_confusion_matrix(impl):
    rng = np.random.default_rng(7)
    label = rng.integers(0, 4, size=500)
    label[::7] = 255
    pred = rng.integers(0, 4, size=500)
    ref = np.zeros((4, 4), dtype=np.int64)
    for p, l in zip(pred, label):
        if l != 255:
            ref[l, p] += 1
    np.testing.assert_array_equal(kernels.confusion_matrix(pred, label, 4, impl=impl), ref)


def test_confusion_matrix_validation():
    with pytest.raises(LabelError):
        kernels.confusion_matrix([0, 1], [0, 5], 3)
    with pytest.raises(ArgumentError):
        kernels.confusion_matrix([0, 9], [0, 1], 3)
    with pytest.raises(ArgumentError):
        kernels.confusion_matrix([0, 1, 1], [0, 1], 3)
