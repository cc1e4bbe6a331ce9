import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tokenpgd import kernels
from tokenpgd.projection import (C1, C2, BisectionError, BisectionParams, clipped_sum,
                                 project_c1, project_c2, project_c2_rows, project_oracle,
                                 project_oracle_batch)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_c1_feasible_point_unchanged():
    assert np.array_equal(project_c1([0.2, 0.3], 2), [0.2, 0.3])


def test_c1_pure_clipping():
    assert np.array_equal(project_c1([1.5, -0.2], 2), [1.0, 0.0])


def test_c1_symmetric_hand_case():
    out = project_c1([0.9, 0.9, 0.9], 1)
    assert np.allclose(out, 1 / 3, atol=1e-10)
    assert np.allclose(project_oracle([0.9, 0.9, 0.9], C1(1)), 1 / 3, atol=1e-12)


def test_c1_tie_takes_clip_branch():
    # clipped sum is exactly k: the clip-only branch returns the clipped point
    assert np.array_equal(project_c1([1.0, 1.0, -3.0], 2), [1.0, 1.0, 0.0])


def test_c1_large_budget_is_box_clip():
    p = np.array([0.7, 1.3, -0.1, 0.5])
    assert np.array_equal(project_c1(p, 10), np.clip(p, 0, 1))


def test_c1_rejects_small_budget():
    with pytest.raises(ValueError):
        project_c1([0.5], 0)


def test_c2_vertex_unchanged():
    assert np.array_equal(project_c2([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])


def test_c2_symmetric_hand_case():
    assert np.allclose(project_c2([0.9, 0.9, 0.9]), 1 / 3, atol=1e-10)
    assert np.allclose(project_oracle([0.9, 0.9, 0.9], C2()), 1 / 3, atol=1e-12)


def test_c2_clip_case():
    out = project_c2([2.0, 0.0])
    assert np.allclose(out, [1.0, 0.0], atol=1e-10)
    assert abs(out.sum() - 1) <= 1e-10
    assert np.allclose(project_oracle([2.0, 0.0], C2()), [1.0, 0.0], atol=1e-12)


def test_c2_single_entry():
    assert np.array_equal(project_c2([-7.0]), [1.0])


def test_c2_empty_rejected():
    with pytest.raises(ValueError):
        project_c2([])


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        project_c1([np.nan, 0.0], 1)
    with pytest.raises(ValueError):
        project_c2([np.inf, 0.0])


def test_bisection_failure_reported():
    with pytest.raises(BisectionError):
        project_c2([0.3, 0.1, 0.9], BisectionParams(tolerance=1e-300, max_iters=3))
    with pytest.raises(BisectionError):
        project_c1([0.9, 0.9, 0.9], 1, BisectionParams(tolerance=1e-300, max_iters=3))


def test_bisection_params_validated():
    with pytest.raises(ValueError):
        BisectionParams(tolerance=0.0)
    with pytest.raises(ValueError):
        BisectionParams(max_iters=0)


def test_oracle_feasible_point_is_fixed():
    p = np.array([0.1, 0.2, 0.3])
    assert np.allclose(project_oracle(p, C1(1)), p, atol=1e-15)
    q = np.array([0.2, 0.5, 0.3])
    assert np.allclose(project_oracle(q, C2()), q, atol=1e-15)


def test_oracle_dimension_guard():
    with pytest.raises(ValueError):
        project_oracle(np.zeros(13), C2())


def test_rows_projection_matches_single_and_zeros_padding(rng):
    rows = rng.normal(size=(5, 4))
    counts = np.array([4, 0, 2, 1, 3])
    out = project_c2_rows(rows, counts)
    for i, m in enumerate(counts):
        if m:
            assert np.array_equal(out[i, :m], project_c2(rows[i, :m]))
        assert np.all(out[i, m:] == 0)


def test_residual_monotone_in_shift(rng):
    for _ in range(50):
        p = rng.normal(size=6) * 2
        grid = np.linspace(p.min() - 1.5, p.max() + 0.5, 200)
        vals = [clipped_sum(p, mu) for mu in grid]
        assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_oracle_agreement_small_sample(rng):
    for n in (2, 3, 5):
        pts = rng.normal(size=(200, n)) * 1.5 + 0.4
        for k in range(1, n + 1):
            ref = project_oracle_batch(pts, C1(k))
            got = np.array([project_c1(p, k) for p in pts])
            assert np.max(np.abs(ref - got)) <= 1e-6
        ref = project_oracle_batch(pts, C2())
        got = np.array([project_c2(p) for p in pts])
        assert np.max(np.abs(ref - got)) <= 1e-6


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.integers(1, 8))
def test_c1_feasible_and_idempotent(p, k):
    out = project_c1(p, k)
    assert np.all(out >= 0) and np.all(out <= 1)
    assert out.sum() <= k + 1e-10
    assert np.max(np.abs(project_c1(out, k) - out)) <= 2e-10


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_c2_feasible_and_idempotent(p):
    out = project_c2(p)
    assert np.all(out >= 0) and np.all(out <= 1)
    assert abs(out.sum() - 1) <= 1e-10
    assert np.max(np.abs(project_c2(out) - out)) <= 2e-10


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite))),
    st.integers(1, 6))
def test_non_expansive(pair, k):
    a, b = pair
    d = np.linalg.norm(a - b)
    assert np.linalg.norm(project_c1(a, k) - project_c1(b, k)) <= d + 1e-9
    assert np.linalg.norm(project_c2(a) - project_c2(b)) <= d + 1e-9


@settings(max_examples=150, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite), st.integers(1, 6))
def test_matches_oracle_property(p, k):
    assert np.max(np.abs(project_c1(p, k) - project_oracle(p, C1(k)))) <= 1e-6
    assert np.max(np.abs(project_c2(p) - project_oracle(p, C2()))) <= 1e-6


@pytest.mark.skipif(not kernels.compiled_available(), reason="compiled kernels not built")
def test_backends_bit_identical(rng):
    from tokenpgd import _kernels, _kernels_py
    for _ in range(300):
        n = int(rng.integers(1, 9))
        p = rng.normal(size=n) * 2
        k = float(rng.integers(1, n + 1))
        a, sa = _kernels.project_c1(p, k, 1e-10, 100)
        b, sb = _kernels_py.project_c1(p, k, 1e-10, 100)
        assert sa == sb and np.array_equal(a, b)
        a, sa = _kernels.project_c2(p, 1e-10, 100)
        b, sb = _kernels_py.project_c2(p, 1e-10, 100)
        assert sa == sb and np.array_equal(a, b)
    rows, counts = rng.normal(size=(6, 3)), np.array([3, 1, 0, 2, 3, 3])
    a, _ = _kernels.project_c2_rows(rows, counts, 1e-10, 100)
    b, _ = _kernels_py.project_c2_rows(rows, counts, 1e-10, 100)
    assert np.array_equal(a, b)
