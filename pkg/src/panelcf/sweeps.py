"""Monte Carlo study drivers behind ``panelcf simulate --sweep`` and the
acceptance suite.  Sims parallelize across seeds; every worker reseeds from
an explicit spawn so results do not depend on scheduling."""

import logging

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .diagnostics import EquivalenceSpec, pretrend_test
from .estimators import EstimatorConfig, estimate_effects, fit_ifect, fit_mc
from .inference import block_bootstrap, default_effect_fn, jackknife
from .panel import preprocess
from .simulation import DgpConfig, simulate, twfe_att
from .tuning import build_cv_folds, select_mc_lambda, select_num_factors

logger = logging.getLogger(__name__)

CV_CONFIG_IFECT = EstimatorConfig(method="ifect", tol=1e-5, max_iter=600)
CV_CONFIG_MC = EstimatorConfig(method="mc", tol=1e-5, max_iter=600)
FIT_TOL = 1e-6
FIT_MAX_ITER = 1500


def _mspe_treated(record, result):
    cells = record.data.treated_mask
    err = record.y0_true[cells] - result.y0_hat[cells]
    return float(np.nanmean(err ** 2))


def _crossover_one(r, seed):
    import warnings
    record = simulate(DgpConfig(family="factor_scaling", n_units=200,
                                n_periods=30, num_factors=r, seed=seed))
    data, info = preprocess(record.data)
    plan = build_cv_folds(data, info, k=5, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res_true = fit_ifect(data, EstimatorConfig(
            method="ifect", num_factors=r, tol=FIT_TOL, max_iter=FIT_MAX_ITER))
        cv_r = select_num_factors(data, plan, range(0, 6), config=CV_CONFIG_IFECT)
        res_cv = fit_ifect(data, EstimatorConfig(
            method="ifect", num_factors=int(cv_r.selected),
            tol=FIT_TOL, max_iter=FIT_MAX_ITER))
        cv_lam = select_mc_lambda(data, plan, 10, config=CV_CONFIG_MC)
        res_mc = fit_mc(data, EstimatorConfig(
            method="mc", shrink_param=float(cv_lam.selected),
            tol=FIT_TOL, max_iter=FIT_MAX_ITER))
    return {
        "r": r, "seed": seed,
        "mspe_ifect_true_r": _mspe_treated(record, res_true),
        "mspe_ifect_cv": _mspe_treated(record, res_cv),
        "mspe_mc_cv": _mspe_treated(record, res_mc),
        "selected_r": int(cv_r.selected),
        "selected_lambda": float(cv_lam.selected),
    }


def factor_crossover_sweep(n_sims: int = 100, r_values=range(1, 10),
                           seed: int = 0, threads: int = 1) -> pd.DataFrame:
    """MSPE of treated counterfactuals for ifect (true r and CV r) and mc
    (CV shrinkage) as the number of equal-variance factors grows."""
    tasks = [(r, seed * 100003 + 1000 * r + s)
             for r in r_values for s in range(n_sims)]
    rows = Parallel(n_jobs=threads)(
        delayed(_crossover_one)(r, s) for r, s in tasks)
    return pd.DataFrame(rows)


def _coverage_one(n_units, B, seed, level):
    record = simulate(DgpConfig(family="staggered_inference", n_units=n_units,
                                n_periods=20, seed=seed))
    config = EstimatorConfig(method="fect")
    summary = block_bootstrap(record.data, config, B=B, seed=seed, level=level)
    lo, hi = summary.att_ci
    return {
        "seed": seed, "att_true": record.att_true, "att": summary.att_point,
        "ci_low": lo, "ci_high": hi,
        "covered": bool(lo <= record.att_true <= hi),
        "se": summary.att_se,
    }


def bootstrap_coverage_study(n_sims: int = 200, n_units: int = 100,
                             B: int = 500, seed: int = 0, level: float = 0.95,
                             threads: int = 1) -> pd.DataFrame:
    """Percentile-CI coverage of the true ATT on the staggered DGP."""
    rows = Parallel(n_jobs=threads)(
        delayed(_coverage_one)(n_units, B, seed * 7919 + s, level)
        for s in range(n_sims))
    return pd.DataFrame(rows)


def _jackknife_one(n_units, seed, with_twfe, B_twfe):
    record = simulate(DgpConfig(family="staggered_inference", n_units=n_units,
                                n_periods=20, seed=seed))
    config = EstimatorConfig(method="fect")
    summary = jackknife(record.data, config)
    row = {
        "seed": seed, "att_true": record.att_true,
        "att": summary.att_point, "var": summary.att_se ** 2,
    }
    if with_twfe:
        from .estimators import EffectSeries

        def twfe_effect(d):
            return EffectSeries(att=twfe_att(d), att_by_s={})

        boot = block_bootstrap(record.data, config, effect_fn=twfe_effect,
                               B=B_twfe, seed=seed)
        row["twfe_att"] = boot.att_point
        row["twfe_var"] = boot.att_se ** 2
    return row


def jackknife_qq_study(n_sims: int = 1000, n_units: int = 100, seed: int = 0,
                       threads: int = 1, with_twfe: bool = False,
                       B_twfe: int = 200) -> pd.DataFrame:
    """Per-sim ATT estimates with jackknife variances on the staggered DGP,
    optionally alongside a pooled two-way regression with bootstrap
    variances for comparison."""
    rows = Parallel(n_jobs=threads)(
        delayed(_jackknife_one)(n_units, seed * 104729 + s, with_twfe, B_twfe)
        for s in range(n_sims))
    return pd.DataFrame(rows)


def _power_one(k, n_units, B, seed):
    import warnings
    record = simulate(DgpConfig(family="confounder_scale", n_units=n_units,
                                n_periods=40, factor_scale=k, seed=seed))
    config = EstimatorConfig(method="fect")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = pretrend_test(record.data, config, B=B, seed=seed)
    return {
        "k": k, "seed": seed,
        "tost_pass": report.verdict_equivalence == "pass",
        "f_reject": report.f_p is not None and report.f_p < DEFAULT_TEST_ALPHA,
        "minimum_range": report.minimum_range,
        "equivalence_bound": report.equivalence_range[1],
    }


DEFAULT_TEST_ALPHA = 0.05
DEFAULT_POWER_KS = (0.0, 0.25, 0.5, 0.75, 1.0)


def power_sweep(n_sims: int = 200, k_values=DEFAULT_POWER_KS,
                n_units: int = 100, B: int = 100, seed: int = 0,
                threads: int = 1) -> pd.DataFrame:
    """Equivalence-declaration and F-rejection rates of the no-pretrend
    test as the confounder loading k grows."""
    tasks = [(k, seed * 15485863 + 1000 * ki + s)
             for ki, k in enumerate(k_values) for s in range(n_sims)]
    rows = Parallel(n_jobs=threads)(
        delayed(_power_one)(k, n_units, B, s) for k, s in tasks)
    return pd.DataFrame(rows)


def _factor_recovery_one(seed, r_grid):
    import warnings
    record = simulate(DgpConfig(family="main", seed=seed))
    data, info = preprocess(record.data)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        plan = build_cv_folds(data, info, k=5, seed=seed)
        cv = select_num_factors(data, plan, r_grid, config=CV_CONFIG_IFECT)
        eff_i, *_ = estimate_effects(data, EstimatorConfig(
            method="ifect", num_factors=int(cv.selected),
            tol=FIT_TOL, max_iter=FIT_MAX_ITER))
        eff_f, *_ = estimate_effects(data, EstimatorConfig(method="fect"))
    return {
        "seed": seed, "att_true": record.att_true,
        "selected_r": int(cv.selected),
        "att_ifect": eff_i.att, "att_fect": eff_f.att,
        "err_ifect": abs(eff_i.att - record.att_true),
        "err_fect": abs(eff_f.att - record.att_true),
    }


def factor_recovery_study(n_sims: int = 200, seed: int = 0,
                          r_grid=range(0, 6), threads: int = 1) -> pd.DataFrame:
    """CV factor selection and ATT error of ifect vs fect on the main DGP."""
    rows = Parallel(n_jobs=threads)(
        delayed(_factor_recovery_one)(seed * 32452843 + s, list(r_grid))
        for s in range(n_sims))
    return pd.DataFrame(rows)
