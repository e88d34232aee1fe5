"""Counterfactual estimators for panel data.

Three response-surface models share one pipeline: fit on untreated cells,
impute Y(0) for treated cells, average the per-cell gaps.

* ``fect``  -- additive two-way fixed effects (plus covariates)
* ``ifect`` -- adds r interactive factors, estimated by an EM loop
* ``mc``    -- adds a low-rank matrix completed by singular-value
  soft-thresholding with penalty ``shrink_param``

With ``num_factors=0`` the ifect fit and, with ``shrink_param`` at or above
the top singular value of the untreated residual matrix, the mc fit both
collapse to the fect fit.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import kernels
from .exceptions import EstimationError, InputError
from .panel import PanelDataset, RelativeTimeIndex, TreatmentGroupInfo

logger = logging.getLogger(__name__)

METHODS = ("fect", "ifect", "mc")

DEMEAN_TOL = 1e-12
DEMEAN_MAX_ITER = 100000


@dataclass(frozen=True)
class EstimatorConfig:
    """Estimator choice and numeric knobs.

    num_factors applies to ifect (must stay below min(N, T));
    shrink_param applies to mc.  tol bounds the maximum absolute change
    in fitted values on untreated cells between iterations.
    """

    method: str = "fect"
    num_factors: int = 0
    shrink_param: float = 0.0
    max_iter: int = 2000
    tol: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.num_factors < 0:
            raise InputError("num_factors must be >= 0")
        if not np.isfinite(self.shrink_param) or self.shrink_param < 0:
            raise InputError("shrink_param must be finite and >= 0")

    def replace(self, **kw) -> "EstimatorConfig":
        from dataclasses import replace
        return replace(self, **kw)


@dataclass
class FitResult:
    """Fitted parameters and imputed counterfactuals.

    alpha / xi are NaN for units / periods with no cell in the fitting set
    (their treated cells are excluded from imputation and counted in
    n_unidentified_cells).  prediction_error is Y - Yhat(0) wherever both
    are defined; delta_hat is the same restricted to treated cells.
    """

    method: str
    beta: np.ndarray
    mu: float
    alpha: np.ndarray
    xi: np.ndarray
    loadings: Optional[np.ndarray]
    factors: Optional[np.ndarray]
    low_rank: Optional[np.ndarray]
    y0_hat: np.ndarray
    delta_hat: np.ndarray
    prediction_error: np.ndarray
    treated_cells: np.ndarray
    aitc_cells: np.ndarray
    converged: bool
    iterations: int
    n_unidentified_cells: int
    unit_ids: tuple
    period_ids: tuple
    objective_trace: list = field(default_factory=list)

    def to_dict(self, include_matrices: bool = False) -> dict:
        def arr(a):
            if a is None:
                return None
            return [None if not np.isfinite(v) else float(v) for v in np.ravel(a)]

        delta_cells = [
            [self.unit_ids[i], self.period_ids[j], float(self.delta_hat[i, j])]
            for i, j in zip(*np.where(np.isfinite(self.delta_hat)))
        ]
        out = {
            "method": self.method,
            "beta": arr(self.beta),
            "mu": float(self.mu),
            "alpha": arr(self.alpha),
            "xi": arr(self.xi),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "n_unidentified_cells": int(self.n_unidentified_cells),
            "unit_ids": list(self.unit_ids),
            "period_ids": list(self.period_ids),
            "delta_hat": delta_cells,
        }
        if self.loadings is not None:
            out["loadings"] = [arr(row) for row in self.loadings]
            out["factors"] = [arr(row) for row in self.factors]
        if include_matrices and self.low_rank is not None:
            out["low_rank"] = [arr(row) for row in self.low_rank]
        return out


@dataclass
class EffectSeries:
    """ATT aggregates: overall, by relative period, and at switches."""

    att: float
    att_by_s: dict
    aitc: Optional[float] = None

    def counts(self):
        return {s: c for s, (_, c) in self.att_by_s.items()}

    def to_dict(self) -> dict:
        return {
            "att": None if not np.isfinite(self.att) else float(self.att),
            "att_by_s": {str(s): [float(e), int(c)] for s, (e, c) in sorted(self.att_by_s.items())},
            "aitc": None if self.aitc is None or not np.isfinite(self.aitc) else float(self.aitc),
        }


def _obs_lists(cells):
    rows, cols = np.nonzero(cells)
    return rows.astype(np.int64), cols.astype(np.int64)


def _demean_column(values, rows, cols, n, t):
    a, x, _, conv = kernels.alternating_demean(
        values, rows, cols, n, t, DEMEAN_TOL, DEMEAN_MAX_ITER)
    return values - a[rows] - x[cols], conv


def _solve_beta(data, cells, rows, cols):
    """Frisch-Waugh: demean outcome and covariates over the fitting cells,
    then regress.  Returns (beta, y_resid_for_fe) where the second term is
    Y - X beta restricted to the cell list."""
    n, t, k = data.n_units, data.n_periods, data.n_covariates
    y = data.outcome[rows, cols]
    if k == 0:
        return np.zeros(0), y
    y_t, _ = _demean_column(y, rows, cols, n, t)
    xmat = np.empty((rows.size, k))
    for m in range(k):
        xm = data.covariates[rows, cols, m]
        xmat[:, m], _ = _demean_column(xm, rows, cols, n, t)

    q, r, piv = scipy.linalg.qr(xmat, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    ref = diag[0] if diag.size and diag[0] > 0 else 1.0
    rank = int(np.sum(diag > max(n, t) * np.finfo(float).eps * ref))
    if rank < k:
        bad = [data.covariate_names[j] for j in piv[rank:]]
        raise EstimationError(
            "rank-deficient covariate block after demeaning; "
            f"collinear column(s): {', '.join(bad)}")
    beta = np.linalg.solve(xmat.T @ xmat, xmat.T @ y_t)
    return beta, y - data.covariates[rows, cols] @ beta


def _additive_fit(values, rows, cols, n, t, a0=None, x0=None):
    """Two-way additive fit with the normalization that the untreated-cell
    sums of alpha and of xi are both zero."""
    a, x, iters, conv = kernels.alternating_demean(
        values, rows, cols, n, t, DEMEAN_TOL, DEMEAN_MAX_ITER, a0, x0)
    cnt_r = np.bincount(rows, minlength=n)
    cnt_c = np.bincount(cols, minlength=t)
    n_obs = rows.size
    abar = float(np.dot(cnt_r, a)) / n_obs
    xbar = float(np.dot(cnt_c, x)) / n_obs
    mu = abar + xbar
    alpha = np.where(cnt_r > 0, a - abar, np.nan)
    xi = np.where(cnt_c > 0, x - xbar, np.nan)
    return mu, alpha, xi, iters, conv


def _partial_out(data, cells):
    """Least squares of Y on covariates and two-way effects over ``cells``."""
    rows, cols = _obs_lists(cells)
    if rows.size == 0:
        raise EstimationError("empty fitting set")
    beta, y_fe = _solve_beta(data, cells, rows, cols)
    mu, alpha, xi, iters, conv = _additive_fit(y_fe, rows, cols,
                                               data.n_units, data.n_periods)
    return beta, mu, alpha, xi, iters, conv


def _structural_surface(data, beta, mu, alpha, xi, extra=None):
    y0 = mu + alpha[:, None] + xi[None, :]
    if data.n_covariates:
        y0 = y0 + data.covariates @ beta
    if extra is not None:
        y0 = y0 + extra
    return y0


def _switch_cells(data):
    obs, d = data.observed_mask, data.treatment
    t1 = obs & (d == 1)
    t0 = obs & (d == 0)
    onset = t1.copy()
    onset[:, 0] = False
    onset[:, 1:] &= t0[:, :-1]
    exit_adj = t1.copy()
    exit_adj[:, -1] = False
    exit_adj[:, :-1] &= t0[:, 1:]
    return onset | exit_adj


def _assemble(data, method, beta, mu, alpha, xi, loadings, factors, low_rank,
              extra, converged, iterations, objective_trace=None):
    y0 = _structural_surface(data, beta, mu, alpha, xi, extra)
    treated = data.treated_mask
    pred_err = np.where(data.observed_mask & np.isfinite(y0),
                        data.outcome - y0, np.nan)
    delta = np.where(treated, pred_err, np.nan)
    n_unident = int(np.sum(treated & ~np.isfinite(y0)))
    if n_unident:
        logger.info("%s: %d treated cell(s) skipped (unidentified unit or period)",
                    method, n_unident)
    if not np.isfinite(delta).any():
        raise EstimationError("no identified treated cells to impute")
    return FitResult(
        method=method, beta=beta, mu=mu, alpha=alpha, xi=xi,
        loadings=loadings, factors=factors, low_rank=low_rank,
        y0_hat=y0, delta_hat=delta, prediction_error=pred_err,
        treated_cells=treated, aitc_cells=_switch_cells(data),
        converged=converged, iterations=iterations,
        n_unidentified_cells=n_unident,
        unit_ids=data.unit_ids, period_ids=data.period_ids,
        objective_trace=objective_trace or [],
    )


def fit_fect(data: PanelDataset, config: Optional[EstimatorConfig] = None,
             holdout: Optional[np.ndarray] = None) -> FitResult:
    """Two-way fixed effects counterfactual fit.

    Parameters are estimated by least squares on the fitting cells only
    (observed, untreated, not excluded, not held out), via alternating
    unit/period demeaning on the unbalanced cell list.
    """
    cells = data.fitting_mask(holdout)
    if not cells.any():
        raise EstimationError("no untreated cells available for fitting")
    beta, mu, alpha, xi, iters, conv = _partial_out(data, cells)
    return _assemble(data, "fect", beta, mu, alpha, xi, None, None, None,
                     None, conv, iters)


def _top_factors(w_tilde, r):
    """Top-r singular directions of the doubly centered matrix, returned as
    loadings (N, r) and factors (T, r) with F'F/T = I and diagonal Lam'Lam."""
    n, t = w_tilde.shape
    if t <= n:
        gram = w_tilde.T @ w_tilde
        evals, vecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1][:r]
        v = vecs[:, order]
        s = np.sqrt(np.clip(evals[order], 0, None))
        u = w_tilde @ v
        nz = s > (s[0] * 1e-13 if s.size and s[0] > 0 else np.inf)
        u[:, nz] /= s[nz]
        u[:, ~nz] = 0.0
    else:
        uu, s_all, vt = np.linalg.svd(w_tilde, full_matrices=False)
        u, s, v = uu[:, :r], s_all[:r], vt[:r].T
    factors = np.sqrt(t) * v
    loadings = u * (s / np.sqrt(t))
    # sign convention: largest-magnitude factor entry positive
    for j in range(factors.shape[1]):
        col = factors[:, j]
        if col.size and col[np.argmax(np.abs(col))] < 0:
            factors[:, j] = -col
            loadings[:, j] = -loadings[:, j]
    return loadings, factors


def fit_ifect(data: PanelDataset, config: EstimatorConfig,
              holdout: Optional[np.ndarray] = None,
              init: Optional[dict] = None) -> FitResult:
    """Interactive fixed effects counterfactual fit.

    EM loop: refresh beta on the fitting cells with the precomputed Gram
    inverse; fill a complete working matrix (residualized outcome on
    fitting cells, current fitted surface elsewhere); demean it; take the
    top-r singular directions as factors; refresh the grand mean and
    two-way effects from the working-matrix means.  Stops when the largest
    change in fitted values on fitting cells drops below config.tol.

    ``init`` may carry arrays (beta, mu, alpha, xi, loadings, factors)
    from an earlier fit on the same panel to warm-start the loop.
    """
    n, t, k = data.n_units, data.n_periods, data.n_covariates
    r = config.num_factors
    if r >= min(n, t):
        raise InputError(f"num_factors={r} must be below min(N, T)={min(n, t)}")
    cells = data.fitting_mask(holdout)
    if not cells.any():
        raise EstimationError("no untreated cells available for fitting")
    rows, cols = _obs_lists(cells)
    cnt_r = np.bincount(rows, minlength=n)
    cnt_c = np.bincount(cols, minlength=t)

    if init is not None:
        beta = np.asarray(init["beta"], dtype=float)
        mu = float(init["mu"])
        alpha_f = np.nan_to_num(np.asarray(init["alpha"], dtype=float))
        xi_f = np.nan_to_num(np.asarray(init["xi"], dtype=float))
        lam = np.zeros((n, r)) if init.get("loadings") is None else np.asarray(init["loadings"], dtype=float)[:, :r]
        fac = np.zeros((t, r)) if init.get("factors") is None else np.asarray(init["factors"], dtype=float)[:, :r]
        if lam.shape[1] < r:
            lam = np.pad(lam, ((0, 0), (0, r - lam.shape[1])))
            fac = np.pad(fac, ((0, 0), (0, r - fac.shape[1])))
    else:
        beta, mu, alpha0, xi0, _, _ = _partial_out(data, cells)
        alpha_f = np.nan_to_num(alpha0)
        xi_f = np.nan_to_num(xi0)
        lam = np.zeros((n, r))
        fac = np.zeros((t, r))

    y = data.outcome
    xo = data.covariates[rows, cols] if k else None
    yo = y[rows, cols]
    if k:
        gram = xo.T @ xo
        if np.linalg.matrix_rank(gram) < k:
            raise EstimationError("covariate Gram matrix is singular on the fitting set")
        gram_cho = scipy.linalg.cho_factor(gram)
    lf = lam @ fac.T
    xbeta = data.covariates @ beta if k else 0.0

    def fitted_on_cells():
        surf = mu + alpha_f[rows] + xi_f[cols] + lf[rows, cols]
        if k:
            surf = surf + xo @ beta
        return surf

    prev = fitted_on_cells()
    trace = []
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        if k:
            resid = yo - mu - alpha_f[rows] - xi_f[cols] - lf[rows, cols]
            beta = scipy.linalg.cho_solve(gram_cho, xo.T @ resid)
            xbeta = data.covariates @ beta
        w = np.where(cells, y - xbeta if k else y,
                     mu + alpha_f[:, None] + xi_f[None, :] + lf)
        wr = w.mean(axis=1)
        wc = w.mean(axis=0)
        wg = w.mean()
        if r > 0:
            w_tilde = w - wr[:, None] - wc[None, :] + wg
            lam, fac = _top_factors(w_tilde, r)
            lf = lam @ fac.T
        mu = wg
        alpha_f = wr - wg
        xi_f = wc - wg
        cur = fitted_on_cells()
        trace.append(float(np.sum((yo - cur) ** 2)))
        delta = float(np.max(np.abs(cur - prev)))
        prev = cur
        if delta < config.tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"ifect did not converge in {config.max_iter} iterations "
                      f"(last change {delta:.3g})", stacklevel=2)

    # output normalization: untreated-cell sums of alpha and xi are zero
    shift_a = float(np.dot(cnt_r, alpha_f)) / rows.size
    shift_x = float(np.dot(cnt_c, xi_f)) / rows.size
    mu_out = mu + shift_a + shift_x
    alpha_out = np.where(cnt_r > 0, alpha_f - shift_a, np.nan)
    xi_out = np.where(cnt_c > 0, xi_f - shift_x, np.nan)
    return _assemble(data, "ifect", beta, mu_out, alpha_out, xi_out,
                     lam, fac, None, lf, converged, it, trace)


def shrink_operator(a: np.ndarray, theta: float) -> np.ndarray:
    """Soft-threshold the singular values of a matrix at ``theta``."""
    if theta < 0:
        raise InputError("theta must be nonnegative")
    a = np.asarray(a, dtype=float)
    if theta == 0:
        return a.copy()
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    s = np.maximum(s - theta, 0.0)
    return (u * s) @ vt


def untreated_residual_matrix(data: PanelDataset,
                              holdout: Optional[np.ndarray] = None):
    """Residuals of the two-way model on the fitting cells, zero elsewhere.

    The top singular value of this matrix is the smallest shrink_param at
    which the mc fit collapses to fect; the cross-validation grid for mc
    starts there.
    """
    cells = data.fitting_mask(holdout)
    beta, mu, alpha, xi, _, _ = _partial_out(data, cells)
    surf = _structural_surface(data, beta, mu, alpha, xi)
    resid = np.where(cells, data.outcome - surf, 0.0)
    return resid, cells, (beta, mu, alpha, xi)


def fit_mc(data: PanelDataset, config: EstimatorConfig,
           holdout: Optional[np.ndarray] = None,
           init_low_rank: Optional[np.ndarray] = None) -> FitResult:
    """Matrix completion counterfactual fit.

    Covariates and two-way effects are partialed out on the fitting cells
    first; the residual matrix (treated cells missing) is then completed by
    iterating  L <- shrink(P_obs(R) + P_miss(L))  from L = P_obs(R) until
    the largest entry change falls below config.tol.
    """
    resid, cells, (beta, mu, alpha, xi) = untreated_residual_matrix(data, holdout)
    theta = config.shrink_param
    low = resid.copy() if init_low_rank is None else np.array(init_low_rank, dtype=float)
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        new = shrink_operator(np.where(cells, resid, low), theta)
        delta = float(np.max(np.abs(new - low)))
        low = new
        if delta < config.tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"mc did not converge in {config.max_iter} iterations "
                      f"(last change {delta:.3g})", stacklevel=2)
    return _assemble(data, "mc", beta, mu, alpha, xi, None, None, low,
                     low, converged, it)


def fit(data: PanelDataset, config: EstimatorConfig,
        holdout: Optional[np.ndarray] = None, **kw) -> FitResult:
    """Dispatch on config.method."""
    if config.method == "fect":
        return fit_fect(data, config, holdout)
    if config.method == "ifect":
        return fit_ifect(data, config, holdout, **kw)
    return fit_mc(data, config, holdout, **kw)


def aggregate_effects(fit_result: FitResult, idx: RelativeTimeIndex,
                      info: TreatmentGroupInfo) -> EffectSeries:
    """Average the per-cell gaps into ATT, ATT by relative period, and the
    average instant effect at treatment switches.

    Posttreatment entries (s >= 1) average delta_hat over treated cells;
    pretreatment entries (s <= 0) average prediction errors over untreated
    cells of treatment-group units.  Relative periods with no contributing
    cell are omitted.
    """
    delta = fit_result.delta_hat
    finite_delta = np.isfinite(delta)
    att = float(np.mean(delta[finite_delta])) if finite_delta.any() else np.nan

    s = idx.s
    att_by_s = {}
    group_rows = info.treated_flag[:, None]
    pre_err = np.where(~fit_result.treated_cells & group_rows,
                       fit_result.prediction_error, np.nan)
    defined = np.isfinite(s)
    for sv in np.unique(s[defined]):
        bucket = defined & (s == sv)
        vals = delta[bucket] if sv >= 1 else pre_err[bucket]
        vals = vals[np.isfinite(vals)]
        if vals.size:
            att_by_s[int(sv)] = (float(vals.mean()), int(vals.size))

    aitc_vals = delta[fit_result.aitc_cells & finite_delta]
    aitc = float(aitc_vals.mean()) if aitc_vals.size else None
    return EffectSeries(att=att, att_by_s=att_by_s, aitc=aitc)


def estimate_effects(data: PanelDataset, config: EstimatorConfig,
                     holdout: Optional[np.ndarray] = None, **kw):
    """preprocess -> fit -> index -> aggregate, returning all pieces."""
    from .panel import preprocess, relative_time_index
    data, info = preprocess(data)
    res = fit(data, config, holdout, **kw)
    idx = relative_time_index(data, info)
    effects = aggregate_effects(res, idx, info)
    return effects, res, idx, info


@dataclass
class CellWeights:
    """Weights over the fitting cells that reproduce one imputed Y(0)."""

    weights: np.ndarray
    units: tuple
    periods: tuple
    unit_idx: np.ndarray
    period_idx: np.ndarray


def fect_weights(data: PanelDataset, cell,
                 holdout: Optional[np.ndarray] = None) -> CellWeights:
    """Represent the fect imputation for one treated cell as a weighted sum
    of untreated outcomes (no-covariate panels only).

    The weight vector satisfies: the weights on the cell's own unit sum to
    one, those on the cell's own period sum to one, and the two
    complementary sums are zero.
    """
    if data.n_covariates:
        raise InputError("the weighting representation requires a panel without covariates")
    unit, period = cell
    try:
        i0 = data.unit_ids.index(unit)
        j0 = data.period_ids.index(period)
    except ValueError:
        raise InputError(f"cell ({unit!r}, {period!r}) not found in the panel") from None
    if not data.treated_mask[i0, j0]:
        raise InputError(f"cell ({unit!r}, {period!r}) is not an observed treated cell")

    cells = data.fitting_mask(holdout)
    rows, cols = _obs_lists(cells)
    if not (rows == i0).any() or not (cols == j0).any():
        raise InputError(f"cell ({unit!r}, {period!r}) has an unidentified unit or period")
    n, t = data.n_units, data.n_periods
    p = 1 + n + t
    z = np.zeros((rows.size, p))
    z[:, 0] = 1.0
    z[np.arange(rows.size), 1 + rows] = 1.0
    z[np.arange(rows.size), 1 + n + cols] = 1.0
    z_cell = np.zeros(p)
    z_cell[0] = 1.0
    z_cell[1 + i0] = 1.0
    z_cell[1 + n + j0] = 1.0
    g = np.linalg.pinv(z.T @ z) @ z_cell
    w = z @ g
    return CellWeights(
        weights=w,
        units=tuple(data.unit_ids[i] for i in rows),
        periods=tuple(data.period_ids[j] for j in cols),
        unit_idx=rows,
        period_idx=cols,
    )
