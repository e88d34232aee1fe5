import numpy as np

from panelcf import kernels


def random_obs(rng, n=8, t=6, p=0.7):
    mask = rng.uniform(size=(n, t)) < p
    mask[0] = True
    mask[:, 0] = True
    rows, cols = np.nonzero(mask)
    v = rng.normal(size=rows.size)
    return v, rows.astype(np.int64), cols.astype(np.int64), n, t


def test_compiled_extension_is_used_by_default():
    # the build ships the compiled core; the fallback stays importable
    assert kernels.HAVE_COMPILED
    assert kernels.alternating_demean is not kernels.fallback_alternating_demean


def test_compiled_matches_fallback():
    rng = np.random.default_rng(7)
    for _ in range(25):
        v, rows, cols, n, t = random_obs(rng)
        a1, x1, i1, c1 = kernels.alternating_demean(v, rows, cols, n, t, 1e-12, 50000)
        a2, x2, i2, c2 = kernels.fallback_alternating_demean(v, rows, cols, n, t, 1e-12, 50000)
        assert c1 and c2
        np.testing.assert_allclose(a1, a2, atol=1e-12)
        np.testing.assert_allclose(x1, x2, atol=1e-12)


def test_balanced_panel_matches_closed_form():
    rng = np.random.default_rng(3)
    n, t = 5, 4
    v2 = rng.normal(size=(n, t))
    rows, cols = np.nonzero(np.ones((n, t), bool))
    a, x, _, conv = kernels.alternating_demean(
        v2.ravel(), rows.astype(np.int64), cols.astype(np.int64), n, t, 1e-13, 1000)
    assert conv
    fitted = a[:, None] + x[None, :]
    expect = v2.mean(axis=1, keepdims=True) + v2.mean(axis=0, keepdims=True) - v2.mean()
    np.testing.assert_allclose(fitted, expect, atol=1e-12)


def test_residual_orthogonal_to_both_margins():
    rng = np.random.default_rng(11)
    v, rows, cols, n, t = random_obs(rng, n=10, t=7, p=0.6)
    a, x, _, conv = kernels.alternating_demean(v, rows, cols, n, t, 1e-13, 50000)
    assert conv
    resid = v - a[rows] - x[cols]
    row_sums = np.bincount(rows, weights=resid, minlength=n)
    col_sums = np.bincount(cols, weights=resid, minlength=t)
    np.testing.assert_allclose(row_sums, 0, atol=1e-9)
    np.testing.assert_allclose(col_sums, 0, atol=1e-9)


def test_warm_start_converges_immediately():
    rng = np.random.default_rng(5)
    v, rows, cols, n, t = random_obs(rng)
    a, x, _, _ = kernels.alternating_demean(v, rows, cols, n, t, 1e-13, 50000)
    _, _, iters, conv = kernels.alternating_demean(
        v, rows, cols, n, t, 1e-10, 50000, a.copy(), x.copy())
    assert conv and iters <= 2


def test_empty_rows_keep_start_value():
    v = np.array([1.0, 2.0])
    rows = np.array([0, 0], dtype=np.int64)
    cols = np.array([0, 1], dtype=np.int64)
    a, x, _, conv = kernels.alternating_demean(v, rows, cols, 3, 2, 1e-12, 100)
    assert conv
    assert a[1] == 0.0 and a[2] == 0.0
