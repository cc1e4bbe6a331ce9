"""Pure-Python versions of the hot kernels.

Every routine here mirrors ``_kernels.pyx`` operation for operation (same
summation order, same clipping, same bisection midpoints) so that both
backends return bit-identical results.
"""

import numpy as np

BACKEND = "python"

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV53 = 2.0 ** -53


def _clipped_sum(values, shift):
    s = 0.0
    for v in values:
        t = v - shift
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        s += t
    return s


def _clip_shift(values, shift):
    out = np.empty(len(values))
    for i, v in enumerate(values):
        t = v - shift
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        out[i] = t
    return out


def project_c1(point, k, tol, max_iters):
    """Returns ``(projection, status)``; status 0 is success, 1 non-convergence."""
    values = [float(v) for v in point]
    k = float(k)
    if _clipped_sum(values, 0.0) <= k:
        return _clip_shift(values, 0.0), 0
    lo = 0.0
    hi = max(values)
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        s = _clipped_sum(values, mid)
        if abs(s - k) <= tol:
            return _clip_shift(values, mid), 0
        if s > k:
            lo = mid
        else:
            hi = mid
    return _clip_shift(values, 0.5 * (lo + hi)), 1


def project_c2(point, tol, max_iters):
    values = [float(v) for v in point]
    if len(values) == 1:
        return np.ones(1), 0
    lo = min(values) - 1.0
    hi = max(values)
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        s = _clipped_sum(values, mid)
        if abs(s - 1.0) <= tol:
            return _clip_shift(values, mid), 0
        if s > 1.0:
            lo = mid
        else:
            hi = mid
    return _clip_shift(values, 0.5 * (lo + hi)), 1


def project_c2_rows(rows, counts, tol, max_iters):
    """Project the first ``counts[i]`` entries of every row; padding is zeroed."""
    rows = np.asarray(rows, dtype=np.float64)
    out = np.zeros_like(rows)
    status = 0
    for i in range(rows.shape[0]):
        m = int(counts[i])
        if m == 0:
            continue
        proj, st = project_c2(rows[i, :m], tol, max_iters)
        out[i, :m] = proj
        status |= st
    return out, status


def splitmix64(x):
    """Scalar splitmix64 finalizer on Python ints."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _splitmix64_array(x):
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def uniform_block(keys, n):
    """Uniforms in [0, 1): entry ``(r, j)`` is a pure function of ``(keys[r], j)``."""
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1, 1)
    counters = _splitmix64_array(np.arange(n, dtype=np.uint64)).reshape(1, -1)
    bits = _splitmix64_array(keys ^ counters)
    return (bits >> np.uint64(11)).astype(np.float64) * _INV53
