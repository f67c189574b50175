"""Timing of the compiled kernels against the NumPy reference implementation.

Run with ``python benchmarks/bench_kernels.py``; add ``--quick`` for a short run.
Both backends are imported directly, so the comparison works whatever backend
``diffsqueeze.kernels`` selected at import.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from diffsqueeze import _kernels_py as py

try:
    from diffsqueeze import _kernels as cy
except ImportError:  # extension not built
    cy = None


def _cases(rng, scale):
    n_atoms, k = 500, 4096
    p = rng.random((k, n_atoms + 1))
    cdf = np.cumsum(p / p.sum(axis=1, keepdims=True), axis=1)
    cdf[:, -1] = 1.0
    rows = rng.integers(0, k, 1000 * scale)
    u = rng.random(1000 * scale)

    t = rng.uniform(0, 2 * np.pi, (100 * scale // 10 + 1, 1000))
    x = -0.9 * np.sin(t + 0.3) + 0.01 * rng.standard_normal(t.shape)
    y = -0.8 * np.sin(t - 0.3) + 0.01 * rng.standard_normal(t.shape)

    uu = rng.uniform(-2, 2, 1000 * scale)
    vv = rng.uniform(-2, 2, 1000 * scale)
    return {
        "searchsorted_rows": lambda m: m.searchsorted_rows(cdf, rows, u),
        "scatter_matrices": lambda m: m.scatter_matrices(x, y),
        "g_means": lambda m: m.g_means(x, y, 0.9, 0.8),
        "project_to_ellipse": lambda m: m.project_to_ellipse(uu, vv, 1.3, 0.7),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    scale = 10 if args.quick else 100
    rng = np.random.default_rng(1)
    cases = _cases(rng, scale)
    print(f"{'kernel':<22}{'python [ms]':>14}{'cython [ms]':>14}{'speedup':>10}")
    for name, fn in cases.items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{name:<22}{t_py:>14.2f}{'n/a':>14}{'':>10}")
            continue
        a, b = fn(py), fn(cy)
        same = all(np.allclose(p, q, rtol=1e-12, atol=1e-12) for p, q in
                   zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)))
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        flag = "" if same else "  MISMATCH"
        print(f"{name:<22}{t_py:>14.2f}{t_cy:>14.2f}{t_py / t_cy:>9.1f}x{flag}")


if __name__ == "__main__":
    main()
