"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly, so the comparison does not depend on
``TOKENPGD_PURE_PYTHON``. Outputs are checked for bit-equality before timing.
"""

import argparse
import sys
import timeit

import numpy as np

from tokenpgd import _kernels_py

try:
    from tokenpgd import _kernels as _compiled
except ImportError:
    _compiled = None

TOL, ITERS = 1e-10, 100


def cases(rng):
    pts = [rng.normal(size=8) * 2 for _ in range(200)]
    rows = rng.normal(size=(10, 4))
    counts = np.array([4, 3, 4, 2, 4, 4, 1, 3, 4, 4])
    keys = np.array([int(k) for k in rng.integers(0, 2**63, size=20, dtype=np.int64)], dtype=np.uint64)
    return {
        "project_c1 (200 x dim 8, k=2)": lambda m: [m.project_c1(p, 2.0, TOL, ITERS) for p in pts],
        "project_c2 (200 x dim 8)": lambda m: [m.project_c2(p, TOL, ITERS) for p in pts],
        "project_c2_rows (10 x 4)": lambda m: m.project_c2_rows(rows, counts, TOL, ITERS),
        "uniform_block (20 keys x 20)": lambda m: m.uniform_block(keys, 20),
    }


def _same(a, b):
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if _compiled is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}  parity")
    for name, fn in cases(rng).items():
        same = _same(fn(_kernels_py), fn(_compiled))
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: fn(_compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:34s} {t_py:10.3f} {t_cy:10.3f} {t_py / t_cy:7.1f}x  {'ok' if same else 'MISMATCH'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
