"""Compiled kernels vs the pure-numpy fallback on fitting-sized workloads.

Run: python3 benchmarks/bench_kernels.py [--points 3000] [--repeat 5]

Both backends are checked to agree before timing: bit for bit on the
neighbour queries, to 1e-12 on the eigen solver (its floating-point
operation order differs). The first compiled call is excluded as JIT warm-up. Query timings include
building the tree, which the numpy fallback skips (it scans all points).
"""
import argparse
import time

import numpy as np

from patchstitch import _accel, kernels


def workloads(n, rng):
    pts = rng.normal(size=(n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    nrm = pts.copy()
    labels = rng.integers(0, 25, n)
    C = rng.normal(size=(n, 3, 3))
    C = C @ np.swapaxes(C, 1, 2)

    def chamfer_nn():
        return kernels.knn(kernels.build_tree(pts), pts[::-1].copy(), 1)

    def constrained():
        return kernels.knn(kernels.build_tree(pts), pts, 8, self_idx=np.arange(n), normals=nrm, qnormals=nrm,
                           theta=120.0)

    def cross_patch():
        return kernels.knn(kernels.build_tree(pts), pts, 1, labels=labels, qlabels=labels,
                           label_mode=kernels.LABEL_OTHER)

    def overlap_count():
        return kernels.count_labels_within(kernels.build_tree(pts), pts, 0.05, labels, 25)

    def eigh():
        return kernels.sym3_eigh(C)

    return {"knn k=1": chamfer_nn, "knn k=8 angular": constrained,
            "knn other-label": cross_patch, "count labels r=0.05": overlap_count, "sym3_eigh": eigh}


def timed(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def same(a, b, tol=0.0):
    if isinstance(a, tuple):
        return all(same(x, y, tol) for x, y in zip(a, b))
    if tol:
        return np.allclose(a, b, rtol=0, atol=tol * max(1.0, np.abs(a).max()))
    return np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=3000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    jobs = workloads(args.points, np.random.default_rng(args.seed))
    print(f"{'kernel':<22}{'numba [ms]':>12}{'numpy [ms]':>12}{'speed-up':>10}")
    prev = _accel.get_backend()
    try:
        for name, fn in jobs.items():
            _accel.set_backend("numba")
            ref = fn()  # JIT warm-up
            t_nb = timed(fn, args.repeat)
            _accel.set_backend("numpy")
            if not same(ref, fn(), 1e-12 if name == "sym3_eigh" else 0.0):
                raise SystemExit(f"{name}: backends disagree")
            t_np = timed(fn, args.repeat)
            print(f"{name:<22}{1e3 * t_nb:>12.2f}{1e3 * t_np:>12.2f}{t_np / t_nb:>9.1f}x")
    finally:
        _accel.set_backend(prev)


if __name__ == "__main__":
    main()
