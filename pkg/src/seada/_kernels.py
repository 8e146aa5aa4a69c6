"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``SEADA_DISABLE_NUMBA``
is unset (or ``0``). Both paths are always importable as ``*_numpy`` /
``*_numba`` so tests and the benchmark can compare them directly.
"""
from __future__ import annotations

import os

import numpy as np

_disabled = os.environ.get("SEADA_DISABLE_NUMBA", "").strip() not in ("", "0")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _disabled
BACKEND = "numba" if USE_NUMBA else "numpy"


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian taps, truncated at 3 sigma."""
    if sigma <= 0:
        return np.ones(1)
    radius = max(1, int(3.0 * sigma + 0.5))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


# --------------------------------------------------------------------------
# separable convolution along one axis, edge-replicating boundary
# --------------------------------------------------------------------------


def convolve_axis_numpy(vol: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    r = (taps.shape[0] - 1) // 2
    if r == 0:
        return vol * taps[0]
    pad = [(0, 0)] * vol.ndim
    pad[axis] = (r, r)
    padded = np.pad(vol, pad, mode="edge")
    n = vol.shape[axis]
    out = np.zeros_like(vol)
    for i, w in enumerate(taps):
        out += w * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def _convolve_axis0_loop(vol, taps):
    d0, d1, d2 = vol.shape
    r = (taps.shape[0] - 1) // 2
    out = np.zeros_like(vol)
    for i in range(d0):
        for t in range(-r, r + 1):
            src = min(max(i + t, 0), d0 - 1)
            w = taps[t + r]
            for j in range(d1):
                for k in range(d2):
                    out[i, j, k] += w * vol[src, j, k]
    return out


if HAVE_NUMBA:
    _convolve_axis0_jit = njit(cache=True)(_convolve_axis0_loop)


def convolve_axis_numba(vol: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    moved = np.ascontiguousarray(np.moveaxis(vol, axis, 0))
    out = _convolve_axis0_jit(moved, np.ascontiguousarray(taps, dtype=np.float64))
    return np.moveaxis(out, 0, axis)


def gaussian_blur3d(vol: np.ndarray, sigma: float, backend: str | None = None) -> np.ndarray:
    """Separable Gaussian blur (float64 out). ``sigma == 0`` returns a copy."""
    vol = np.asarray(vol, dtype=np.float64)
    if sigma <= 0:
        return vol.copy()
    taps = gaussian_kernel1d(sigma)
    conv = convolve_axis_numba if (backend or BACKEND) == "numba" else convolve_axis_numpy
    out = vol
    for axis in range(3):
        out = conv(out, taps, axis)
    return out


# --------------------------------------------------------------------------
# valid-mode box mean over cubic windows
# --------------------------------------------------------------------------


def box_mean3d_numpy(vol: np.ndarray, w: int) -> np.ndarray:
    out = np.asarray(vol, dtype=np.float64)
    for axis in range(3):
        c = np.cumsum(out, axis=axis)
        zero = np.zeros_like(np.take(c, [0], axis=axis))
        c = np.concatenate([zero, c], axis=axis)
        n = out.shape[axis]
        hi = np.take(c, np.arange(w, n + 1), axis=axis)
        lo = np.take(c, np.arange(0, n - w + 1), axis=axis)
        out = hi - lo
    return out / float(w**3)


def _box_sum_axis0_loop(vol, w):
    d0, d1, d2 = vol.shape
    n = d0 - w + 1
    out = np.zeros((n, d1, d2))
    for j in range(d1):
        for k in range(d2):
            acc = 0.0
            for i in range(w):
                acc += vol[i, j, k]
            out[0, j, k] = acc
            for i in range(1, n):
                acc += vol[i + w - 1, j, k] - vol[i - 1, j, k]
                out[i, j, k] = acc
    return out


if HAVE_NUMBA:
    _box_sum_axis0_jit = njit(cache=True)(_box_sum_axis0_loop)


def box_mean3d_numba(vol: np.ndarray, w: int) -> np.ndarray:
    out = np.asarray(vol, dtype=np.float64)
    for axis in range(3):
        moved = np.ascontiguousarray(np.moveaxis(out, axis, 0))
        out = np.moveaxis(_box_sum_axis0_jit(moved, w), 0, axis)
    return out / float(w**3)


def box_mean3d(vol: np.ndarray, w: int, backend: str | None = None) -> np.ndarray:
    """Mean over every fully contained ``w**3`` window (valid mode)."""
    if min(vol.shape) < w:
        raise ValueError(f"volume shape {vol.shape} smaller than window {w}")
    if (backend or BACKEND) == "numba":
        return box_mean3d_numba(vol, w)
    return box_mean3d_numpy(vol, w)


# --------------------------------------------------------------------------
# contingency table of two integer labelings
# --------------------------------------------------------------------------


def contingency_numpy(a: np.ndarray, b: np.ndarray, na: int, nb: int) -> np.ndarray:
    flat = np.bincount(a * nb + b, minlength=na * nb)
    return flat.reshape(na, nb).astype(np.int64)


def _contingency_loop(a, b, na, nb):
    out = np.zeros((na, nb), dtype=np.int64)
    for i in range(a.shape[0]):
        out[a[i], b[i]] += 1
    return out


if HAVE_NUMBA:
    _contingency_jit = njit(cache=True)(_contingency_loop)


def contingency_numba(a: np.ndarray, b: np.ndarray, na: int, nb: int) -> np.ndarray:
    return _contingency_jit(a.astype(np.int64), b.astype(np.int64), na, nb)


def contingency(a: np.ndarray, b: np.ndarray, na: int, nb: int, backend: str | None = None) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if (backend or BACKEND) == "numba":
        return contingency_numba(a, b, na, nb)
    return contingency_numpy(a, b, na, nb)


# --------------------------------------------------------------------------
# k-NN majority vote under cosine distance
# --------------------------------------------------------------------------


def cosine_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return 1.0 - an @ bn.T


def knn_vote_numpy(dist: np.ndarray, train_y: np.ndarray, k: int, n_classes: int, prefer: int) -> np.ndarray:
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    out = np.empty(dist.shape[0], dtype=np.int64)
    for i, idx in enumerate(order):
        votes = np.bincount(train_y[idx], minlength=n_classes)
        tied = np.flatnonzero(votes == votes.max())
        if tied.size == 1:
            out[i] = tied[0]
        elif prefer in tied:
            out[i] = prefer
        else:
            # nearest neighbour among the tied classes
            out[i] = next(int(train_y[j]) for j in idx if train_y[j] in tied)
    return out


def _knn_vote_loop(dist, train_y, k, n_classes, prefer):
    m = dist.shape[0]
    out = np.empty(m, dtype=np.int64)
    for i in range(m):
        idx = np.argsort(dist[i], kind="mergesort")[:k]
        votes = np.zeros(n_classes, dtype=np.int64)
        for j in idx:
            votes[train_y[j]] += 1
        best = votes.max()
        n_tied = 0
        for c in range(n_classes):
            if votes[c] == best:
                n_tied += 1
        if n_tied == 1:
            out[i] = np.argmax(votes)
        elif votes[prefer] == best:
            out[i] = prefer
        else:
            for j in idx:
                if votes[train_y[j]] == best:
                    out[i] = train_y[j]
                    break
    return out


if HAVE_NUMBA:
    _knn_vote_jit = njit(cache=True)(_knn_vote_loop)


def knn_vote_numba(dist, train_y, k, n_classes, prefer):
    return _knn_vote_jit(np.ascontiguousarray(dist), train_y.astype(np.int64), k, n_classes, prefer)


def knn_vote(dist: np.ndarray, train_y: np.ndarray, k: int, n_classes: int, prefer: int = 0,
             backend: str | None = None) -> np.ndarray:
    """Majority vote of the ``k`` nearest training rows for each query row.

    Ties go to ``prefer`` when it is among the tied classes, otherwise to the
    tied class of the nearest neighbour. Distance ties keep training order.
    """
    train_y = np.asarray(train_y, dtype=np.int64)
    k = min(k, dist.shape[1])
    if (backend or BACKEND) == "numba":
        return knn_vote_numba(dist, train_y, k, n_classes, prefer)
    return knn_vote_numpy(dist, train_y, k, n_classes, prefer)


def warmup() -> None:
    """Trigger JIT compilation so timings exclude it."""
    if not HAVE_NUMBA:
        return
    v = np.random.default_rng(0).random((8, 8, 8))
    convolve_axis_numba(v, gaussian_kernel1d(1.0), 0)
    box_mean3d_numba(v, 3)
    contingency_numba(np.zeros(3, np.int64), np.zeros(3, np.int64), 1, 1)
    knn_vote_numba(np.random.default_rng(0).random((3, 4)), np.array([0, 1, 0, 1]), 3, 2, 0)


__all__ = [
    "BACKEND",
    "HAVE_NUMBA",
    "USE_NUMBA",
    "box_mean3d",
    "contingency",
    "cosine_distances",
    "gaussian_blur3d",
    "gaussian_kernel1d",
    "knn_vote",
]
