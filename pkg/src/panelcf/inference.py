"""Cluster-resampling inference: block bootstrap, jackknife, QQ calibration.

Both resamplers work on whole units: when a unit is drawn, its entire time
series (outcome, treatment, covariates, mask) is cloned.  Replicate RNG
streams are spawned from one master seed so results do not depend on
execution order.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import norm

from .estimators import EffectSeries, EstimatorConfig, estimate_effects
from .exceptions import InputError
from .panel import PanelDataset, preprocess

logger = logging.getLogger(__name__)

DEFAULT_B = 1000
DEFAULT_LEVEL = 0.95
MAX_REDRAW_FACTOR = 10
SMALL_TREATED_GROUP = 40


@dataclass
class ResampleSummary:
    """Replicate draws and the uncertainty estimates built from them.

    Bootstrap confidence intervals are percentile (order statistics of the
    draws); jackknife intervals are normal-approximation around the
    full-sample point estimate.
    """

    method: str
    att_point: float
    att_draws: np.ndarray
    att_se: float
    att_ci: tuple
    att_s_point: dict
    att_s_draws: dict
    att_s_se: dict
    att_s_ci: dict
    level: float
    n_replicates: int
    seed: int
    n_failures: int = 0
    n_redraws: int = 0
    replicate_units: Optional[list] = field(default=None, repr=False)

    @property
    def att_p_value(self) -> float:
        """Two-sided normal p-value of the ATT against zero."""
        if not np.isfinite(self.att_se) or self.att_se == 0:
            return 0.0 if self.att_point != 0 else 1.0
        return float(2 * norm.sf(abs(self.att_point) / self.att_se))

    def to_dict(self) -> dict:
        def f(v):
            return None if v is None or not np.isfinite(v) else float(v)
        return {
            "method": self.method,
            "att": f(self.att_point),
            "att_se": f(self.att_se),
            "att_ci": [f(self.att_ci[0]), f(self.att_ci[1])],
            "att_p_value": f(self.att_p_value),
            "att_by_s": {
                str(s): {
                    "estimate": f(self.att_s_point[s][0]),
                    "count": int(self.att_s_point[s][1]),
                    "se": f(self.att_s_se.get(s)),
                    "ci": [f(self.att_s_ci[s][0]), f(self.att_s_ci[s][1])]
                    if s in self.att_s_ci else None,
                }
                for s in sorted(self.att_s_point)
            },
            "level": self.level,
            "n_replicates": int(self.n_replicates),
            "seed": int(self.seed),
            "n_failures": int(self.n_failures),
            "n_redraws": int(self.n_redraws),
        }


def percentile_ci(draws: np.ndarray, level: float) -> tuple:
    """Percentile interval whose endpoints are order statistics of the draws."""
    d = np.sort(draws[np.isfinite(draws)])
    if d.size == 0:
        return (np.nan, np.nan)
    alpha = (1.0 - level) / 2.0
    lo = d[max(int(np.ceil(alpha * d.size)) - 1, 0)]
    hi = d[min(int(np.ceil((1.0 - alpha) * d.size)) - 1, d.size - 1)]
    return (float(lo), float(hi))


def default_effect_fn(config: EstimatorConfig) -> Callable[[PanelDataset], EffectSeries]:
    """Refit the configured estimator (tuning fixed) and aggregate effects."""
    def effect_fn(data: PanelDataset) -> EffectSeries:
        return estimate_effects(data, config)[0]
    return effect_fn


def _resample_rows(rng, data: PanelDataset):
    """One cluster resample; None when it has no treated or no untreated cell."""
    n = data.n_units
    idx = rng.integers(0, n, size=n)
    treated_rows = data.treated_mask.any(axis=1)
    untreated_rows = data.untreated_mask.any(axis=1)
    if not treated_rows[idx].any() or not untreated_rows[idx].any():
        return None
    return idx


def draw_resample(rng, data: PanelDataset, redraw_budget: list):
    """Resample until estimable, spending from the shared redraw budget."""
    while True:
        idx = _resample_rows(rng, data)
        if idx is not None:
            return idx
        redraw_budget[0] -= 1
        if redraw_budget[0] < 0:
            raise InputError("resampling produced degenerate panels too often")


def _collect_s_draws(series_list, point_series):
    keys = sorted(point_series.att_by_s)
    draws = {s: np.full(len(series_list), np.nan) for s in keys}
    for b, es in enumerate(series_list):
        if es is None:
            continue
        for s in keys:
            if s in es.att_by_s:
                draws[s][b] = es.att_by_s[s][0]
    return draws


def block_bootstrap(data: PanelDataset, config: EstimatorConfig,
                    effect_fn: Optional[Callable] = None, B: int = DEFAULT_B,
                    seed: int = 0, level: float = DEFAULT_LEVEL,
                    keep_replicate_units: bool = False) -> ResampleSummary:
    """Unit-level block bootstrap of the treatment-effect estimates.

    Each replicate resamples N units with replacement (whole series
    cloned) and re-runs ``effect_fn``; degenerate resamples (no treated or
    no untreated cell) are redrawn, up to 10 B redraws in total.
    """
    if B < 2:
        raise InputError("B must be >= 2")
    data, info = preprocess(data)
    n_treated_rows = int(data.treated_mask.any(axis=1).sum())
    n_control_rows = int(data.untreated_mask.any(axis=1).sum())
    if n_treated_rows < 2 or n_control_rows < 2:
        raise InputError("need at least 2 treated and 2 control units to bootstrap")
    if info.n_treated_units < SMALL_TREATED_GROUP:
        logger.info("only %d treated units; consider jackknife inference",
                    info.n_treated_units)
    if effect_fn is None:
        effect_fn = default_effect_fn(config)

    point = effect_fn(data)
    streams = np.random.SeedSequence(seed).spawn(B)
    budget = [MAX_REDRAW_FACTOR * B]
    att_draws = np.full(B, np.nan)
    series_list = [None] * B
    unit_draws = [] if keep_replicate_units else None
    n_failures = 0
    for b in range(B):
        rng = np.random.default_rng(streams[b])
        idx = draw_resample(rng, data, budget)
        if keep_replicate_units:
            unit_draws.append(idx)
        try:
            es = effect_fn(data.subset_units(idx, relabel=True))
        except Exception as exc:  # noqa: BLE001 - counted, bounded below
            n_failures += 1
            logger.warning("bootstrap replicate %d failed: %s", b, exc)
            continue
        att_draws[b] = es.att
        series_list[b] = es
    if n_failures > 0.1 * B:
        raise InputError(
            f"effect function failed on {n_failures}/{B} bootstrap replicates")

    valid = att_draws[np.isfinite(att_draws)]
    att_se = float(np.std(valid, ddof=1)) if valid.size > 1 else np.nan
    s_draws = _collect_s_draws(series_list, point)
    s_se, s_ci = {}, {}
    for s, d in s_draws.items():
        dv = d[np.isfinite(d)]
        if dv.size > 1:
            s_se[s] = float(np.std(dv, ddof=1))
            s_ci[s] = percentile_ci(dv, level)
    return ResampleSummary(
        method="bootstrap", att_point=point.att, att_draws=att_draws,
        att_se=att_se, att_ci=percentile_ci(valid, level),
        att_s_point=dict(point.att_by_s), att_s_draws=s_draws,
        att_s_se=s_se, att_s_ci=s_ci, level=level, n_replicates=B, seed=seed,
        n_failures=n_failures,
        n_redraws=MAX_REDRAW_FACTOR * B - budget[0],
        replicate_units=unit_draws,
    )


def jackknife(data: PanelDataset, config: EstimatorConfig,
              effect_fn: Optional[Callable] = None,
              level: float = DEFAULT_LEVEL) -> ResampleSummary:
    """Leave-one-unit-out variance estimate.

    Var = (N-1)/N * sum_i (ATT_{-i} - mean)^2 over the N valid replicates;
    intervals and p-values use the standard normal.
    """
    data, info = preprocess(data)
    if data.n_units < 3:
        raise InputError("jackknife needs at least 3 units")
    if effect_fn is None:
        effect_fn = default_effect_fn(config)
    point = effect_fn(data)

    n = data.n_units
    att_draws = np.full(n, np.nan)
    series_list = [None] * n
    for i in range(n):
        keep = np.r_[np.arange(i), np.arange(i + 1, n)]
        sub = data.subset_units(keep)
        if not sub.treated_mask.any() or not sub.untreated_mask.any():
            logger.warning("jackknife: dropping unit %r leaves nothing to estimate; skipped",
                           data.unit_ids[i])
            continue
        try:
            es = effect_fn(sub)
        except Exception as exc:  # noqa: BLE001
            logger.warning("jackknife replicate without unit %r failed: %s",
                           data.unit_ids[i], exc)
            continue
        att_draws[i] = es.att
        series_list[i] = es

    def jk_var(d):
        v = d[np.isfinite(d)]
        if v.size < 2:
            return np.nan
        return float((v.size - 1) / v.size * np.sum((v - v.mean()) ** 2))

    att_se = float(np.sqrt(jk_var(att_draws)))
    z = norm.ppf(0.5 + level / 2.0)
    s_draws = _collect_s_draws(series_list, point)
    s_se, s_ci = {}, {}
    for s, d in s_draws.items():
        se = float(np.sqrt(jk_var(d)))
        if np.isfinite(se):
            est = point.att_by_s[s][0]
            s_se[s] = se
            s_ci[s] = (est - z * se, est + z * se)
    return ResampleSummary(
        method="jackknife", att_point=point.att, att_draws=att_draws,
        att_se=att_se,
        att_ci=(point.att - z * att_se, point.att + z * att_se),
        att_s_point=dict(point.att_by_s), att_s_draws=s_draws,
        att_s_se=s_se, att_s_ci=s_ci, level=level,
        n_replicates=int(np.isfinite(att_draws).sum()), seed=0,
        n_failures=int((~np.isfinite(att_draws)).sum()),
    )


@dataclass
class QQData:
    """Paired quantiles of standardized errors against the standard normal."""

    theoretical: np.ndarray
    empirical: np.ndarray
    n_excluded: int
    degenerate: bool

    def to_csv(self, path) -> None:
        import pandas as pd
        pd.DataFrame({"theoretical": self.theoretical,
                      "empirical": self.empirical}).to_csv(path, index=False)


def standardized_error_qq(estimates, truths, variances) -> QQData:
    """Standardize (estimate - truth) by sqrt(variance) and pair the sorted
    values with standard-normal quantiles.

    Draws with a non-positive or non-finite variance estimate are excluded
    (their count is reported).  A run of identical standardized errors is
    flagged as degenerate.
    """
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    var = np.asarray(variances, dtype=float)
    if not (est.shape == tru.shape == var.shape):
        raise InputError("estimates, truths, and variances must align")
    ok = np.isfinite(est) & np.isfinite(tru) & np.isfinite(var) & (var > 0)
    n_excluded = int(est.size - ok.sum())
    if n_excluded:
        logger.info("standardized_error_qq: excluded %d draw(s) with zero or "
                    "invalid variance", n_excluded)
    z = np.sort((est[ok] - tru[ok]) / np.sqrt(var[ok]))
    n = z.size
    theo = norm.ppf((np.arange(1, n + 1) - 0.5) / n) if n else np.empty(0)
    degenerate = bool(n > 0 and np.ptp(z) == 0)
    return QQData(theoretical=theo, empirical=z, n_excluded=n_excluded,
                  degenerate=degenerate)
