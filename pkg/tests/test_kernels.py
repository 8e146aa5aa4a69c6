"""The numba and numpy kernel paths must agree."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seada import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


def test_backend_flag_is_consistent():
    assert K.BACKEND in ("numba", "numpy")
    assert K.USE_NUMBA == (K.BACKEND == "numba")


def test_gaussian_kernel_normalised_and_truncated():
    taps = K.gaussian_kernel1d(1.5)
    assert taps.sum() == pytest.approx(1.0, abs=1e-15)
    assert len(taps) == 2 * int(3 * 1.5 + 0.5) + 1
    assert K.gaussian_kernel1d(0.0).tolist() == [1.0]


@pytest.mark.parametrize("sigma", [0.5, 1.0, 1.5])
def test_blur_paths_agree(sigma):
    v = np.random.default_rng(0).random((9, 11, 7))
    a = K.gaussian_blur3d(v, sigma, backend="numpy")
    b = K.gaussian_blur3d(v, sigma, backend="numba")
    np.testing.assert_allclose(a, b, atol=1e-13)


def test_blur_preserves_constants():
    v = np.full((6, 6, 6), 0.42)
    for backend in ("numpy", "numba"):
        np.testing.assert_allclose(K.gaussian_blur3d(v, 1.2, backend=backend), 0.42, atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_box_paths_agree(seed, w):
    v = np.random.default_rng(seed).random((8, 6, 7))
    a = K.box_mean3d(v, w, backend="numpy")
    b = K.box_mean3d(v, w, backend="numba")
    np.testing.assert_allclose(a, b, atol=1e-13)
    # spot check one window
    np.testing.assert_allclose(a[1, 0, 2], v[1:1 + w, 0:w, 2:2 + w].mean(), atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 3)), min_size=1, max_size=40))
def test_contingency_paths_agree(pairs):
    a, b = (np.array(x) for x in zip(*pairs))
    t1 = K.contingency(a, b, 5, 4, backend="numpy")
    t2 = K.contingency(a, b, 5, 4, backend="numba")
    assert np.array_equal(t1, t2)
    assert t1.sum() == len(pairs)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_knn_paths_agree(seed, k):
    rng = np.random.default_rng(seed)
    train = rng.normal(size=(15, 4))
    y = rng.integers(0, 3, size=15)
    q = rng.normal(size=(6, 4))
    d = K.cosine_distances(q, train)
    assert np.array_equal(K.knn_vote(d, y, k, 3, 0, backend="numpy"), K.knn_vote(d, y, k, 3, 0, backend="numba"))
