"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat N]

JIT compilation is triggered once before timing. Results are printed as a
table of best-of-N wall times per call and the numpy/numba ratio.
"""
import argparse
import time

import numpy as np

from seada import _kernels as K


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    vol = rng.random((32, 32, 32))
    big = rng.random((80, 112, 80))
    a = rng.integers(0, 7, 5000)
    b = rng.integers(0, 7, 5000)
    train = rng.normal(size=(400, 64))
    y = rng.integers(0, 2, 400)
    dist = K.cosine_distances(rng.normal(size=(200, 64)), train)
    for backend in ("numpy", "numba"):
        yield "blur 32^3 sigma=1.5", backend, lambda be=backend: K.gaussian_blur3d(vol, 1.5, backend=be)
        yield "blur 80x112x80 sigma=1.5", backend, lambda be=backend: K.gaussian_blur3d(big, 1.5, backend=be)
        yield "box mean 32^3 w=7", backend, lambda be=backend: K.box_mean3d(vol, 7, backend=be)
        yield "box mean 80x112x80 w=7", backend, lambda be=backend: K.box_mean3d(big, 7, backend=be)
        yield "contingency n=5000", backend, lambda be=backend: K.contingency(a, b, 7, 7, backend=be)
        yield "knn vote 200x400 k=5", backend, lambda be=backend: K.knn_vote(dist, y, 5, 2, 0, backend=be)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    results = {}
    for name, backend, fn in cases(np.random.default_rng(0)):
        results.setdefault(name, {})[backend] = best_of(fn, args.repeat)
    print(f"{'kernel':<28}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>9}")
    for name, r in results.items():
        print(f"{name:<28}{1e3 * r['numpy']:>12.3f}{1e3 * r['numba']:>12.3f}{r['numpy'] / r['numba']:>8.1f}x")


if __name__ == "__main__":
    main()
