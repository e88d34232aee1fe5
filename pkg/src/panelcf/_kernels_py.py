"""Pure-NumPy implementation of the hot kernels.

Used automatically when the compiled extension is unavailable; also the
reference the compiled kernel is tested against.
"""

import numpy as np

HAVE_COMPILED = False


def alternating_demean(values, rows, cols, n_rows, n_cols, tol, max_iter,
                       a=None, x=None):
    """Additive two-way fit on an unbalanced observation list.

    Gauss-Seidel sweeps: row effects are refreshed first, column effects
    are refreshed against the new row effects.  Rows or columns with no
    observation keep their starting value (zero unless warm-started).

    Parameters
    ----------
    values : (n_obs,) float array
        Observed values v_j.
    rows, cols : (n_obs,) int64 arrays
        Row / column index of each observation.
    n_rows, n_cols : int
        Full panel dimensions.
    tol : float
        Stop when the largest absolute parameter change in a sweep falls
        below this.
    max_iter : int
        Sweep cap.
    a, x : optional warm starts, modified in place when given.

    Returns
    -------
    (a, x, iterations, converged)
    """
    if a is None:
        a = np.zeros(n_rows)
    if x is None:
        x = np.zeros(n_cols)
    cnt_r = np.bincount(rows, minlength=n_rows).astype(float)
    cnt_c = np.bincount(cols, minlength=n_cols).astype(float)
    has_r = cnt_r > 0
    has_c = cnt_c > 0
    cnt_r[~has_r] = 1.0
    cnt_c[~has_c] = 1.0

    it = 0
    delta = np.inf
    while it < max_iter:
        it += 1
        a_new = np.bincount(rows, weights=values - x[cols], minlength=n_rows) / cnt_r
        a_new[~has_r] = a[~has_r]
        x_new = np.bincount(cols, weights=values - a_new[rows], minlength=n_cols) / cnt_c
        x_new[~has_c] = x[~has_c]
        delta = max(np.max(np.abs(a_new - a), initial=0.0),
                    np.max(np.abs(x_new - x), initial=0.0))
        a, x = a_new, x_new
        if delta < tol:
            break
    return a, x, it, delta < tol
