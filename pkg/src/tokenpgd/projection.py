"""Euclidean projections onto the relaxed feasible sets.

``C1 = {z in [0,1]^L : sum(z) <= k}`` (site selection) and
``C2 = {u in [0,1]^m : sum(u) = 1}`` (replacement weights). Both reduce to a
clipped shift ``clip(p - mu, 0, 1)``; the scalar shift is found by bisection
on the monotone residual ``sum(clip(p - mu)) - target``.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from . import kernels


class BisectionError(ArithmeticError):
    """Bisection failed to meet its residual tolerance within ``max_iters``."""


@dataclass(frozen=True)
class BisectionParams:
    tolerance: float = 1e-10
    max_iters: int = 100

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


DEFAULT_PARAMS = BisectionParams()


@dataclass(frozen=True)
class C1:
    k: float


@dataclass(frozen=True)
class C2:
    pass


def _as_point(point):
    p = np.asarray(point, dtype=np.float64).ravel()
    if not np.all(np.isfinite(p)):
        raise ValueError("projection input has non-finite entries")
    return p


def clipped_sum(point, shift):
    """``sum(clip(point - shift, 0, 1))``; the bisection residual plus target."""
    return float(np.clip(np.asarray(point, dtype=np.float64) - shift, 0.0, 1.0).sum())


def project_c1(point, k, params: BisectionParams = DEFAULT_PARAMS) -> np.ndarray:
    p = _as_point(point)
    if k < 1:
        raise ValueError(f"budget k must be >= 1, got {k}")
    if p.size == 0:
        return p.copy()
    out, status = kernels.project_c1(p, float(k), params.tolerance, params.max_iters)
    if status:
        raise BisectionError(
            f"C1 bisection did not reach tolerance {params.tolerance} in {params.max_iters} iterations"
        )
    return out


def project_c2(point, params: BisectionParams = DEFAULT_PARAMS) -> np.ndarray:
    p = _as_point(point)
    if p.size == 0:
        raise ValueError("cannot project an empty vector onto the simplex")
    out, status = kernels.project_c2(p, params.tolerance, params.max_iters)
    if status:
        raise BisectionError(
            f"C2 bisection did not reach tolerance {params.tolerance} in {params.max_iters} iterations"
        )
    return out


def project_c2_rows(rows, counts, params: BisectionParams = DEFAULT_PARAMS) -> np.ndarray:
    """Row-wise simplex projection of a padded ``(L, M)`` matrix."""
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(rows)):
        raise ValueError("projection input has non-finite entries")
    out, status = kernels.project_c2_rows(rows, np.asarray(counts, dtype=np.int_),
                                          params.tolerance, params.max_iters)
    if status:
        raise BisectionError("row-wise C2 bisection did not converge")
    return out


_PATTERNS = {}
ORACLE_MAX_DIM = 12


def _patterns(n):
    # 0 = at lower bound, 1 = at upper bound, 2 = interior
    if n not in _PATTERNS:
        _PATTERNS[n] = np.array(list(itertools.product((0, 1, 2), repeat=n)), dtype=np.int8)
    return _PATTERNS[n]


def project_oracle(point, constraint) -> np.ndarray:
    """Exact projection by enumerating every bound/interior pattern of the KKT system.

    For a pattern, interior coordinates share one multiplier ``nu``
    (``x_i = a_i - nu``) and the rest sit at 0 or 1, so each pattern is a
    one-unknown linear solve. The feasible candidate closest to the point wins.
    Cost is ``3**n`` per point.
    """
    return project_oracle_batch(_as_point(point)[None, :], constraint)[0]


def project_oracle_batch(points, constraint, chunk=256) -> np.ndarray:
    """``project_oracle`` applied to every row of ``points``."""
    a_all = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = a_all.shape[1]
    if n > ORACLE_MAX_DIM:
        raise ValueError(f"oracle supports dimension <= {ORACLE_MAX_DIM}, got {n}")
    if n == 0:
        raise ValueError("empty point")
    if not np.all(np.isfinite(a_all)):
        raise ValueError("projection input has non-finite entries")
    if isinstance(constraint, C1):
        target = float(constraint.k)
    elif isinstance(constraint, C2):
        target = 1.0
    else:
        raise TypeError(f"unknown constraint {constraint!r}")
    pats = _patterns(n)
    interior = (pats == 2).astype(np.float64)
    upper = (pats == 1).astype(np.float64)
    lower = (pats == 0).astype(np.float64)
    n_int = interior.sum(axis=1)
    n_up = upper.sum(axis=1)

    out = np.empty_like(a_all)
    for lo in range(0, a_all.shape[0], chunk):
        a = a_all[lo:lo + chunk]
        # every pattern with the sum constraint tight
        nu = np.where(n_int > 0, (a @ interior.T + n_up - target) / np.maximum(n_int, 1), 0.0)
        dist = n_int * nu**2 + (a**2) @ lower.T + ((1.0 - a) ** 2) @ upper.T
        # interior entries are a_i - nu and must land in [0, 1]
        ok = np.ones(nu.shape, dtype=bool)
        for i in range(n):
            inside = pats[:, i] == 2
            ai = a[:, i:i + 1]
            ok &= ~(inside & ((ai - nu < -1e-12) | (ai - nu > 1 + 1e-12)))
        # patterns without interior entries must hit the target exactly
        ok &= (n_int > 0) | (np.abs(n_up - target) <= 1e-9)
        if isinstance(constraint, C1):
            ok &= nu >= -1e-12
        dist[~ok] = np.inf
        best = np.argmin(dist, axis=1)
        rows = np.arange(len(a))
        x = np.where(pats[best] == 2, a - nu[rows, best][:, None], (pats[best] == 1).astype(float))
        best_dist = dist[rows, best]
        if isinstance(constraint, C1):
            box = np.clip(a, 0.0, 1.0)
            box_ok = box.sum(axis=1) <= target + 1e-9
            box_dist = ((box - a) ** 2).sum(axis=1)
            use_box = box_ok & (box_dist <= best_dist)
            x = np.where(use_box[:, None], box, x)
            best_dist = np.where(use_box, box_dist, best_dist)
        if not np.all(np.isfinite(best_dist)):
            raise ArithmeticError("no feasible KKT pattern found")
        out[lo:lo + chunk] = x
    return np.clip(out, 0.0, 1.0)
