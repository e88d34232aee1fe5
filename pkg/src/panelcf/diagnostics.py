"""Dynamic-effects series and the diagnostic test battery.

All three tests share one recipe: hold a group of untreated cells out of
the fitting set, predict their outcomes out of sample, and judge the mean
prediction error twice -- against the null of no difference (DIM) and
against the null of a non-negligible difference (equivalence).

* placebo test: hold out the S observations right before each onset
* no-pretrend test: leave one pretreatment relative period out at a time
* no-carryover test: hold out the first l observations after each exit

Held-out cells never touch fitting; uncertainty comes from a unit-level
cluster bootstrap of the whole hold-out/refit procedure.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.stats import f as f_dist
from scipy.stats import ncf, norm

from .estimators import (
    EstimatorConfig,
    FitResult,
    _partial_out,
    fit as fit_dispatch,
    fit_fect,
    fit_ifect,
    fit_mc,
)
from .exceptions import InputError, NotApplicableError
from .inference import ResampleSummary, draw_resample
from .panel import PanelDataset, RelativeTimeIndex, TreatmentGroupInfo, preprocess, relative_time_index

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.05
DEFAULT_SIGMA_MULTIPLIER = 0.36
DEFAULT_PLACEBO_PERIODS = 3
DEFAULT_CARRYOVER_PERIODS = 3
DEFAULT_KAPPA = 0.6
DEFAULT_BOOT = 200
DEFAULT_COUNT_PROPORTION = 0.3


@dataclass(frozen=True)
class EquivalenceSpec:
    """Equivalence-range specification.

    In ``sigma_multiple`` mode the bounds are multiplier * sigma of the
    residualized untreated outcome and must be resolved against a fitted
    sigma before use; ``absolute`` mode carries explicit bounds."""

    alpha: float = DEFAULT_ALPHA
    mode: str = "sigma_multiple"
    multiplier: float = DEFAULT_SIGMA_MULTIPLIER
    theta1: Optional[float] = None
    theta2: Optional[float] = None

    def __post_init__(self):
        if self.mode not in ("sigma_multiple", "absolute"):
            raise InputError("mode must be 'sigma_multiple' or 'absolute'")
        if not 0 < self.alpha < 0.5:
            raise InputError("alpha must be in (0, 0.5)")
        if self.mode == "absolute":
            if self.theta1 is None or self.theta2 is None:
                raise InputError("absolute mode needs explicit theta1 and theta2")
            if self.theta1 <= 0 or self.theta2 <= 0:
                raise InputError("equivalence bounds must be positive")

    def resolve(self, sigma: float) -> "EquivalenceSpec":
        """Turn a sigma-multiple spec into an absolute one."""
        if self.mode == "absolute":
            return self
        theta = self.multiplier * sigma
        if theta <= 0:
            raise InputError("resolved equivalence range is empty (sigma <= 0)")
        return EquivalenceSpec(alpha=self.alpha, mode="absolute",
                               theta1=theta, theta2=theta)

    @property
    def bounds(self):
        if self.mode != "absolute":
            raise InputError("equivalence bounds not resolved; call resolve(sigma)")
        return self.theta1, self.theta2


@dataclass
class TestReport:
    """Outcome of one diagnostic test, both DIM and equivalence readings."""

    kind: str
    estimate: Optional[float]
    se: Optional[float]
    dim_p: Optional[float]
    dim_ci: Optional[tuple]
    tost_p: Optional[float]
    tost_ci: Optional[tuple]
    equivalence_range: tuple
    minimum_range: Optional[float]
    per_period: list
    verdict_dim: str
    verdict_equivalence: str
    f_stat: Optional[float] = None
    f_p: Optional[float] = None
    equiv_f_stat: Optional[float] = None
    equiv_f_crit: Optional[float] = None
    equiv_f_reject: Optional[bool] = None
    sigma: Optional[float] = None
    n_test_cells: int = 0
    n_replicates: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        def f(v):
            if v is None:
                return None
            v = float(v)
            return v if np.isfinite(v) else None

        def pair(p):
            return None if p is None else [f(p[0]), f(p[1])]

        def row_clean(row):
            out = {}
            for k, v in row.items():
                if v is None:
                    out[k] = None
                elif k in ("s", "count"):
                    out[k] = int(v)
                elif isinstance(v, (bool, np.bool_)):
                    out[k] = bool(v)
                else:
                    out[k] = f(v)
            return out

        return {
            "kind": self.kind,
            "estimate": f(self.estimate),
            "se": f(self.se),
            "dim_p": f(self.dim_p),
            "dim_ci": pair(self.dim_ci),
            "tost_p": f(self.tost_p),
            "tost_ci": pair(self.tost_ci),
            "equivalence_range": pair(self.equivalence_range),
            "minimum_range": f(self.minimum_range),
            "f_stat": f(self.f_stat),
            "f_p": f(self.f_p),
            "equiv_f_stat": f(self.equiv_f_stat),
            "equiv_f_crit": f(self.equiv_f_crit),
            "equiv_f_reject": self.equiv_f_reject,
            "sigma": f(self.sigma),
            "verdict_dim": self.verdict_dim,
            "verdict_equivalence": self.verdict_equivalence,
            "n_test_cells": int(self.n_test_cells),
            "n_replicates": int(self.n_replicates),
            "seed": int(self.seed),
            "per_period": [row_clean(row) for row in self.per_period],
        }


def residual_sigma(data: PanelDataset) -> float:
    """Standard deviation of the residuals from a two-way fixed effects
    model with covariates, fit on untreated data only."""
    cells = data.fitting_mask()
    rows, cols = np.nonzero(cells)
    n_obs = rows.size
    n_p = int(len(set(rows.tolist())) + len(set(cols.tolist())) - 1 + data.n_covariates)
    if n_obs <= n_p:
        raise InputError(
            f"untreated set has {n_obs} cells for {n_p} parameters; "
            "residual scale is not estimable")
    beta, mu, alpha, xi, _, _ = _partial_out(data, cells)
    fitted = mu + alpha[rows] + xi[cols]
    if data.n_covariates:
        fitted = fitted + data.covariates[rows, cols] @ beta
    resid = data.outcome[rows, cols] - fitted
    return float(np.std(resid))


def tost(estimate: float, se: Optional[float] = None, ci: Optional[tuple] = None,
         spec: Optional[EquivalenceSpec] = None):
    """Two one-sided tests of equivalence to zero.

    Returns (p, reject) where p is the larger of the two one-sided
    p-values and reject means equivalence is declared.  Rejection is
    exactly equivalent to the (1 - 2 alpha) confidence interval lying
    inside the equivalence range.
    """
    if spec is None:
        raise InputError("an EquivalenceSpec with resolved bounds is required")
    theta1, theta2 = spec.bounds
    z_alpha = norm.ppf(1 - spec.alpha)
    if se is None and ci is None:
        raise InputError("provide a standard error or a confidence interval")
    if se is not None:
        se_lo = se_hi = float(se)
    else:
        lo, hi = ci
        se_lo = (estimate - lo) / z_alpha
        se_hi = (hi - estimate) / z_alpha

    def one_sided(dist, s):
        # H0: the effect sits at or beyond the bound, `dist` away from it
        if s > 0:
            return float(norm.sf(dist / s))
        return 0.0 if dist > 0 else (0.5 if dist == 0 else 1.0)

    p_lower = one_sided(estimate + theta2, se_lo)   # H0: estimate <= -theta2
    p_upper = one_sided(theta1 - estimate, se_hi)   # H0: estimate >= theta1
    p = max(p_lower, p_upper)
    return p, bool(p < spec.alpha)


def joint_f_test(pre_period_estimates, covariance, ntr: int,
                 quadratic_form: str = "inverse"):
    """Hotelling-type joint test that all pretreatment averages are zero.

    F = Ntr (Ntr - m - 1) / ((Ntr - 1)(m + 1)) * q  with
    q = d' (Ntr Sigma)^{-1} d, referred to F(m + 1, Ntr - m - 1); Sigma is
    the covariance of the estimate vector (e.g. from bootstrap draws).
    ``quadratic_form='literal'`` uses d' Sigma d instead, for comparison.
    """
    d = np.atleast_1d(np.asarray(pre_period_estimates, dtype=float))
    sig = np.atleast_2d(np.asarray(covariance, dtype=float))
    m = d.size - 1
    if sig.shape != (d.size, d.size):
        raise InputError("covariance shape does not match the estimate vector")
    if ntr <= m + 1:
        raise InputError(f"need more treated units than {m + 1} tested periods")
    if quadratic_form == "literal":
        q = float(d @ sig @ d)
    else:
        scaled = ntr * sig
        try:
            cho = scipy.linalg.cho_factor(scaled)
            q = float(d @ scipy.linalg.cho_solve(cho, d))
        except scipy.linalg.LinAlgError:
            ridge = 1e-8 * np.trace(scaled) / max(m, 1)
            if not np.isfinite(ridge) or ridge <= 0:
                ridge = 1e-12
            warnings.warn("singular covariance in joint F test; "
                          f"ridge-regularized with {ridge:.3g}", stacklevel=2)
            q = float(d @ np.linalg.solve(scaled + ridge * np.eye(d.size), d))
    stat = ntr * (ntr - m - 1) / ((ntr - 1) * (m + 1)) * q
    p = float(f_dist.sf(stat, m + 1, ntr - m - 1))
    return float(stat), p


def noncentral_f_quantile(p: float, dfn: int, dfd: int, ncp: float) -> float:
    """Quantile of the non-central F distribution."""
    return float(ncf.ppf(p, dfn, dfd, ncp))


def equivalence_f_test(pre_period_estimates, covariance, ntr: int,
                       kappa: float = DEFAULT_KAPPA, alpha: float = DEFAULT_ALPHA,
                       quadratic_form: str = "inverse"):
    """Equivalence variant of the joint F test.

    Uses the same statistic with the reversed null; equivalence is
    declared when the statistic falls below the 100*alpha percentile of the
    non-central F(m + 1, Ntr - m - 1, Ntr kappa^2).
    """
    if kappa <= 0:
        raise InputError("kappa must be positive")
    d = np.atleast_1d(np.asarray(pre_period_estimates, dtype=float))
    m = d.size - 1
    stat, _ = joint_f_test(d, covariance, ntr, quadratic_form)
    crit = noncentral_f_quantile(alpha, m + 1, ntr - m - 1, ntr * kappa ** 2)
    return stat, crit, bool(stat < crit)


def dynamic_effects(fit_result: FitResult, idx: RelativeTimeIndex,
                    info: TreatmentGroupInfo,
                    resample: Optional[ResampleSummary] = None,
                    held_out: Optional[np.ndarray] = None) -> list:
    """Tidy series (s, estimate, ci_low, ci_high, count, held_out_flag)
    across all defined relative periods."""
    from .estimators import aggregate_effects

    effects = aggregate_effects(fit_result, idx, info)
    held_s = set()
    if held_out is not None:
        held_s = {int(v) for v in np.unique(idx.s[held_out & idx.defined])}
    rows = []
    for s in sorted(effects.att_by_s):
        est, count = effects.att_by_s[s]
        lo = hi = np.nan
        if resample is not None and s in resample.att_s_ci:
            lo, hi = resample.att_s_ci[s]
        rows.append({"s": int(s), "estimate": est, "ci_low": lo, "ci_high": hi,
                     "count": count, "held_out": s in held_s})
    return rows


def series_to_csv(rows: list, path, header_comment: Optional[str] = None) -> None:
    import pandas as pd
    with open(path, "w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        pd.DataFrame(rows, columns=["s", "estimate", "ci_low", "ci_high",
                                    "count", "held_out"]).to_csv(fh, index=False)


def _refit_holdout(data, config, holdout, warm=None):
    if config.method == "ifect":
        return fit_ifect(data, config, holdout=holdout, init=warm)
    if config.method == "mc":
        return fit_mc(data, config, holdout=holdout,
                      init_low_rank=None if warm is None else warm["low_rank"])
    return fit_fect(data, config, holdout=holdout)


def _warm_from(fit_result, rows=None):
    if fit_result is None:
        return None
    take = (lambda a: a) if rows is None else (lambda a: None if a is None else a[rows])
    return {
        "beta": fit_result.beta,
        "mu": fit_result.mu,
        "alpha": take(fit_result.alpha),
        "xi": fit_result.xi,
        "loadings": None if fit_result.loadings is None else take(fit_result.loadings),
        "factors": fit_result.factors,
        "low_rank": None if fit_result.low_rank is None else take(fit_result.low_rank),
    }


def _holdout_mean(res, mask):
    vals = res.prediction_error[mask]
    vals = vals[np.isfinite(vals)]
    return (float(vals.mean()), vals.size) if vals.size else (np.nan, 0)


REPLICATE_TOL = 1e-5
REPLICATE_MAX_ITER = 500


def _bootstrap_holdout_draws(data, config, masks, B, seed, warm_source):
    """Cluster-bootstrap the hold-out/refit procedure.

    Returns a (B, len(masks)) array of mean prediction errors on each
    held-out group, refitting once per group inside every replicate.
    Replicate refits warm-start from the full-sample fit and run at a
    relaxed tolerance: their output only feeds the spread of the draws.
    """
    streams = np.random.SeedSequence(seed).spawn(B)
    draws = np.full((B, len(masks)), np.nan)
    budget = [10 * B]
    rep_config = config.replace(tol=max(config.tol, REPLICATE_TOL),
                                max_iter=min(config.max_iter, REPLICATE_MAX_ITER))
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*did not converge.*")
        for b in range(B):
            rng = np.random.default_rng(streams[b])
            rows = draw_resample(rng, data, budget)
            d_b = data.subset_units(rows, relabel=True)
            warm = _warm_from(warm_source, rows)
            for g, mask in enumerate(masks):
                m_b = mask[rows]
                if not m_b.any():
                    continue
                try:
                    res_b = _refit_holdout(d_b, rep_config, m_b, warm)
                except Exception as exc:  # noqa: BLE001 - missing draw, not fatal
                    logger.warning("holdout bootstrap replicate %d group %d failed: %s",
                                   b, g, exc)
                    continue
                draws[b, g] = _holdout_mean(res_b, m_b)[0]
    return draws


def _dim_and_tost(estimate, se, spec):
    alpha = spec.alpha
    if se > 0:
        dim_p = float(2 * norm.sf(abs(estimate) / se))
    else:
        dim_p = 1.0 if estimate == 0 else 0.0
    z1 = norm.ppf(1 - alpha / 2)          # (1 - alpha) interval for the DIM view
    z2 = norm.ppf(1 - alpha)              # (1 - 2 alpha) interval for the TOST
    dim_ci = (estimate - z1 * se, estimate + z1 * se)
    tost_ci = (estimate - z2 * se, estimate + z2 * se)
    p, reject = tost(estimate, se=se, spec=spec)
    return dim_p, dim_ci, p, tost_ci, reject


def _resolve_spec(data, spec):
    spec = spec or EquivalenceSpec()
    if spec.mode == "sigma_multiple":
        sigma = residual_sigma(data)
        return spec.resolve(sigma), sigma
    return spec, None


def placebo_test(data: PanelDataset, config: EstimatorConfig,
                 S: int = DEFAULT_PLACEBO_PERIODS,
                 spec: Optional[EquivalenceSpec] = None,
                 B: int = DEFAULT_BOOT, seed: int = 0) -> TestReport:
    """Pretend treatment started S periods early and test the fake effect.

    The S observations right before each onset (relative periods
    1-S, ..., 0) are removed from fitting; the reported estimate is the
    mean out-of-sample prediction error over those cells.
    """
    if S < 1:
        raise InputError("S must be >= 1")
    data, info = preprocess(data)
    idx = relative_time_index(data, info)
    spec, sigma = _resolve_spec(data, spec)

    s = idx.s
    mask = (data.fitting_mask() & info.treated_flag[:, None]
            & idx.defined & (s <= 0) & (s > -S))
    if not mask.any():
        raise InputError("no placebo cells: not enough pre-onset observations")

    res = _refit_holdout(data, config, mask)
    estimate, n_cells = _holdout_mean(res, mask)
    draws = _bootstrap_holdout_draws(data, config, [mask], B, seed, res)[:, 0]
    se = float(np.nanstd(draws, ddof=1))
    dim_p, dim_ci, tost_p, tost_ci, reject = _dim_and_tost(estimate, se, spec)

    per_period = dynamic_effects(res, idx, info, held_out=mask)
    theta1, theta2 = spec.bounds
    return TestReport(
        kind="placebo", estimate=estimate, se=se,
        dim_p=dim_p, dim_ci=dim_ci, tost_p=tost_p, tost_ci=tost_ci,
        equivalence_range=(-theta2, theta1), minimum_range=None,
        per_period=per_period,
        verdict_dim="pass" if dim_p >= spec.alpha else "fail",
        verdict_equivalence="pass" if reject else "fail",
        sigma=sigma, n_test_cells=n_cells, n_replicates=B, seed=seed,
    )


def pretrend_test(data: PanelDataset, config: EstimatorConfig,
                  spec: Optional[EquivalenceSpec] = None,
                  B: int = DEFAULT_BOOT, seed: int = 0,
                  count_proportion: float = DEFAULT_COUNT_PROPORTION) -> TestReport:
    """Leave-one-period-out test for no pretrend.

    Each tested pretreatment relative period is held out of fitting in
    turn and its out-of-sample average prediction error is computed, with
    a (1 - 2 alpha) interval from the cluster bootstrap.  Equivalence
    passes only if every period's TOST rejects; the minimum range is the
    smallest symmetric band that would make them all reject.  A joint F
    statistic and its equivalence variant are reported alongside.

    Relative periods with fewer treated-group observations than
    ``count_proportion`` times the best-populated period are not tested
    (their intervals would be uninformative).
    """
    data, info = preprocess(data)
    idx = relative_time_index(data, info)
    spec, sigma = _resolve_spec(data, spec)
    s = idx.s
    group_cells = data.fitting_mask() & info.treated_flag[:, None] & idx.defined & (s <= 0)
    if not group_cells.any():
        raise InputError("no pretreatment observations to test")
    svals, counts = np.unique(s[group_cells], return_counts=True)
    keep = counts >= max(1, count_proportion * counts.max())
    periods = [int(v) for v in svals[keep]]
    if len(periods) < 2:
        raise InputError("need at least 2 testable pretreatment relative periods")

    tested, masks, estimates, counts_used, warm_fit = [], [], [], [], None
    for j in periods:
        mask = group_cells & (s == j)
        try:
            res_j = _refit_holdout(data, config, mask)
        except Exception as exc:  # noqa: BLE001
            warnings.warn(f"pretrend: period {j} skipped "
                          f"(hold-out made the model unidentifiable: {exc})", stacklevel=2)
            continue
        est, cnt = _holdout_mean(res_j, mask)
        if not np.isfinite(est):
            warnings.warn(f"pretrend: period {j} skipped (no identified held-out cell)",
                          stacklevel=2)
            continue
        tested.append(j)
        masks.append(mask)
        estimates.append(est)
        counts_used.append(cnt)
        warm_fit = warm_fit or res_j
    if len(masks) < 2:
        raise InputError("fewer than 2 pretreatment periods survived hold-out fitting")
    estimates = np.asarray(estimates)

    draws = _bootstrap_holdout_draws(data, config, masks, B, seed, warm_fit)
    ses = np.nanstd(draws, axis=0, ddof=1)

    alpha = spec.alpha
    z2 = norm.ppf(1 - alpha)
    theta1, theta2 = spec.bounds
    per_period, all_reject, min_range = [], True, 0.0
    for g, j in enumerate(tested):
        lo = estimates[g] - z2 * ses[g]
        hi = estimates[g] + z2 * ses[g]
        p_g, rej_g = tost(estimates[g], se=ses[g], spec=spec)
        all_reject &= rej_g
        min_range = max(min_range, abs(lo), abs(hi))
        per_period.append({"s": j, "estimate": float(estimates[g]),
                           "ci_low": float(lo), "ci_high": float(hi),
                           "count": int(counts_used[g]),
                           "tost_p": float(p_g), "reject": rej_g,
                           "held_out": True})

    complete = np.isfinite(draws).all(axis=1)
    ntr = info.n_treated_units
    f_stat = f_p = eq_stat = eq_crit = None
    eq_reject = None
    if complete.sum() >= len(tested) + 2 and ntr > len(tested):
        cov = np.cov(draws[complete].T)
        f_stat, f_p = joint_f_test(estimates, cov, ntr)
        eq_stat, eq_crit, eq_reject = equivalence_f_test(
            estimates, cov, ntr, alpha=alpha)
    else:
        warnings.warn("pretrend: joint F statistics skipped (too few complete "
                      "bootstrap replicates or treated units)", stacklevel=2)

    tost_p = float(max(row["tost_p"] for row in per_period))
    return TestReport(
        kind="pretrend", estimate=None, se=None,
        dim_p=f_p, dim_ci=None, tost_p=tost_p, tost_ci=None,
        equivalence_range=(-theta2, theta1), minimum_range=float(min_range),
        per_period=per_period,
        verdict_dim="pass" if (f_p is None or f_p >= alpha) else "fail",
        verdict_equivalence="pass" if all_reject else "fail",
        f_stat=f_stat, f_p=f_p, equiv_f_stat=eq_stat, equiv_f_crit=eq_crit,
        equiv_f_reject=eq_reject, sigma=sigma,
        n_test_cells=int(sum(counts_used)), n_replicates=B, seed=seed,
    )


def exit_relative_index(data: PanelDataset) -> np.ndarray:
    """Periods since the most recent observed treatment exit (1 = first
    untreated period after a treated one); NaN elsewhere."""
    n, t = data.n_units, data.n_periods
    obs, d = data.observed_mask, data.treatment
    e = np.full((n, t), np.nan)
    for i in range(n):
        known0 = obs[i] & (d[i] == 0)
        known1 = obs[i] & (d[i] == 1)
        for t0 in range(1, t):
            if known0[t0] and known1[t0 - 1]:
                j, k = t0, 1
                while j < t and known0[j]:
                    e[i, j] = k
                    j += 1
                    k += 1
    return e


def carryover_test(data: PanelDataset, config: EstimatorConfig,
                   l: int = DEFAULT_CARRYOVER_PERIODS,
                   spec: Optional[EquivalenceSpec] = None,
                   B: int = DEFAULT_BOOT, seed: int = 0) -> TestReport:
    """Hold out the first l observations after each treatment exit and test
    whether their average prediction error is zero / negligible.

    Not applicable under staggered adoption (no exits to test)."""
    if l < 1:
        raise InputError("l must be >= 1")
    data, info = preprocess(data)
    e = exit_relative_index(data)
    if not np.isfinite(e).any():
        raise NotApplicableError(
            "carryover test not applicable: the treatment never switches off")
    spec, sigma = _resolve_spec(data, spec)
    mask = data.fitting_mask() & np.isfinite(e) & (e <= l)
    if not mask.any():
        raise NotApplicableError("no post-exit observations available to test")

    res = _refit_holdout(data, config, mask)
    estimate, n_cells = _holdout_mean(res, mask)
    draws = _bootstrap_holdout_draws(data, config, [mask], B, seed, res)[:, 0]
    se = float(np.nanstd(draws, ddof=1))
    dim_p, dim_ci, tost_p, tost_ci, reject = _dim_and_tost(estimate, se, spec)

    # x-axis realigned to periods since exit
    per_period = []
    for ev in np.unique(e[np.isfinite(e)]):
        cells = np.isfinite(e) & (e == ev)
        vals = res.prediction_error[cells]
        vals = vals[np.isfinite(vals)]
        if vals.size:
            per_period.append({"s": int(ev), "estimate": float(vals.mean()),
                               "ci_low": np.nan, "ci_high": np.nan,
                               "count": int(vals.size), "held_out": ev <= l})
    theta1, theta2 = spec.bounds
    return TestReport(
        kind="carryover", estimate=estimate, se=se,
        dim_p=dim_p, dim_ci=dim_ci, tost_p=tost_p, tost_ci=tost_ci,
        equivalence_range=(-theta2, theta1), minimum_range=None,
        per_period=per_period,
        verdict_dim="pass" if dim_p >= spec.alpha else "fail",
        verdict_equivalence="pass" if reject else "fail",
        sigma=sigma, n_test_cells=n_cells, n_replicates=B, seed=seed,
    )


def recode_carryover(data: PanelDataset, l: int, mode: str = "remove") -> PanelDataset:
    """Allow limited carryover by recoding the first l post-exit periods.

    ``remove`` masks them out of the fitting set (they stay available for
    effect evaluation); ``relabel`` marks them as treated.  l = 0 returns
    the dataset unchanged.
    """
    if l < 0:
        raise InputError("l must be >= 0")
    if mode not in ("remove", "relabel"):
        raise InputError("mode must be 'remove' or 'relabel'")
    if l == 0:
        return data
    e = exit_relative_index(data)
    cells = np.isfinite(e) & (e <= l) & data.untreated_mask
    if mode == "remove":
        return data.with_fit_exclude(data.fit_exclude | cells)
    treatment = data.treatment.copy()
    treatment[cells] = 1.0
    return data.with_treatment(treatment)
