"""Data-generating processes with recorded ground truth.

Four families power the validation suites:

* ``main`` -- two latent factors, time-varying covariates, treatment
  switching on and off with probability tied to the factors (so the
  additive model is confounded but the factor model is not); effects grow
  with time under treatment.
* ``factor_scaling`` -- r equal-strength factors scaled by 1/sqrt(r) so
  their total variance stays constant; block adoption at a fixed period.
* ``confounder_scale`` -- a single factor whose outcome loading k dials
  the confounding strength from zero upward.
* ``staggered_inference`` -- staggered adoption with heterogeneous,
  growing effects and no time-varying confounders; used for calibration
  studies of the resampling variance estimators.

Every record stores the realized per-cell effects; the recorded true ATT
is exactly the mean effect over realized treated cells of units whose
status changes.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .exceptions import InputError
from .panel import PanelDataset, write_long_csv

FAMILIES = ("main", "factor_scaling", "confounder_scale", "staggered_inference")

BASELINE_LEVEL = 5.0
COVARIATE_COEFS = (1.0, 3.0)
FACTOR1_LOADING_SCALE = 1.5
ASSIGN_INTERCEPT = -1.0
ASSIGN_PERSISTENCE = 0.5
ASSIGN_FACTOR_COEF = 0.5
ASSIGN_FE_COEF = 0.2
ASSIGN_NOISE_SD = 0.1
EFFECT_SLOPE = 0.4
EFFECT_NOISE_SD = 0.2


@dataclass(frozen=True)
class DgpConfig:
    """Simulation family and its knobs.

    noise_variance follows the variance reading of the error scale
    (set noise_as_sd to treat it as a standard deviation instead).
    factor_scale is the confounder loading k in the confounder_scale
    family.  carryover_periods > 0 injects decaying post-exit effects, a
    deliberate violation recorded on the output.
    """

    family: str = "main"
    n_units: int = 200
    n_periods: int = 35
    num_factors: int = 2
    factor_scale: float = 1.0
    effect_slope: float = EFFECT_SLOPE
    effect_noise_sd: float = EFFECT_NOISE_SD
    noise_variance: float = 2.0
    noise_as_sd: bool = False
    carryover_periods: int = 0
    carryover_decay: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.n_units < 2 or self.n_periods < 2:
            raise InputError("need at least 2 units and 2 periods")
        if self.num_factors < 0:
            raise InputError("num_factors must be >= 0")

    @property
    def noise_sd(self) -> float:
        return self.noise_variance if self.noise_as_sd else float(np.sqrt(self.noise_variance))

    def replace(self, **kw) -> "DgpConfig":
        from dataclasses import replace
        return replace(self, **kw)


@dataclass
class DgpRecord:
    """A simulated panel plus everything needed to score an estimator."""

    data: PanelDataset
    delta_true: np.ndarray
    att_true: float
    att_s_true: dict
    y0_true: np.ndarray
    factors_true: Optional[np.ndarray]
    loadings_true: Optional[np.ndarray]
    assign_prob: Optional[np.ndarray]
    violations: tuple
    config: DgpConfig

    def truth_to_dict(self) -> dict:
        return {
            "family": self.config.family,
            "seed": self.config.seed,
            "att_true": float(self.att_true),
            "att_s_true": {str(s): float(v) for s, v in sorted(self.att_s_true.items())},
            "violations": list(self.violations),
            "n_units": self.data.n_units,
            "n_periods": self.data.n_periods,
        }

    def export(self, csv_path, truth_path=None) -> None:
        """Long CSV plus a truth sidecar JSON."""
        write_long_csv(self.data, csv_path)
        if truth_path is not None:
            with open(truth_path, "w") as fh:
                json.dump(self.truth_to_dict(), fh, indent=2)


def _standardize(v):
    return (v - v.mean()) / v.std()


def _periods_since_onset(d):
    """Run position within each treated spell (the chain starts untreated)."""
    n, t = d.shape
    s = np.zeros((n, t))
    run = np.zeros(n)
    for j in range(t):
        run = np.where(d[:, j] == 1, run + 1, 0)
        s[:, j] = run
    return s


def _effects(d, s, cfg, rng):
    e = rng.normal(0.0, cfg.effect_noise_sd, size=d.shape)
    return np.where(d == 1, cfg.effect_slope * s + e, 0.0)


def _truth(d, delta, changed):
    cells = (d == 1) & changed[:, None]
    att = float(delta[cells].mean())
    att_s = {}
    s = _periods_since_onset(d)
    for sv in np.unique(s[cells]):
        if sv >= 1:
            att_s[int(sv)] = float(delta[cells & (s == sv)].mean())
    return att, att_s


def _build_panel(y, d, x=None):
    n, t = y.shape
    cov = np.zeros((n, t, 0)) if x is None else x
    return PanelDataset(
        unit_ids=tuple(f"u{i:04d}" for i in range(n)),
        period_ids=tuple(range(1, t + 1)),
        outcome=y, treatment=d, covariates=cov,
        observed_mask=np.ones((n, t), dtype=bool),
    )


def _assignment_chain(rng, factor_term, alpha, xi):
    """Sequential logit draws with persistence; returns (D, probabilities)."""
    n, t = factor_term.shape
    d = np.zeros((n, t))
    prob = np.zeros((n, t))
    prev = np.zeros(n)
    for j in range(t):
        lin = (ASSIGN_INTERCEPT + ASSIGN_PERSISTENCE * prev
               + ASSIGN_FACTOR_COEF * factor_term[:, j]
               + ASSIGN_FE_COEF * alpha + ASSIGN_FE_COEF * xi[j]
               + rng.normal(0.0, ASSIGN_NOISE_SD, size=n))
        prob[:, j] = 1.0 / (1.0 + np.exp(-lin))
        d[:, j] = (rng.uniform(size=n) < prob[:, j]).astype(float)
        prev = d[:, j]
    return d, prob


def _inject_carryover(y, d, delta, cfg):
    """Add decaying post-exit effects: delta at exit times decay^e for the
    first carryover_periods untreated cells after each exit."""
    n, t = y.shape
    carry = np.zeros((n, t))
    for i in range(n):
        for j in range(1, t):
            if d[i, j] == 0 and d[i, j - 1] == 1:
                for e in range(1, cfg.carryover_periods + 1):
                    jj = j + e - 1
                    if jj >= t or d[i, jj] == 1:
                        break
                    carry[i, jj] = delta[i, j - 1] * cfg.carryover_decay ** e
    return y + carry, carry


def simulate_main(config: DgpConfig) -> DgpRecord:
    """Two-factor outcome model with feedback-free but factor-correlated
    treatment assignment and effects growing 0.4 per period under
    treatment."""
    if config.family != "main":
        raise InputError("config.family must be 'main'")
    cfg = config
    n, t = cfg.n_units, cfg.n_periods
    rng = np.random.default_rng(cfg.seed)

    f1 = _standardize(np.arange(1.0, t + 1.0) + rng.standard_normal(t))
    f2 = rng.standard_normal(t)
    lam = rng.standard_normal((n, 2))
    x = rng.standard_normal((n, t, 2))
    alpha = rng.standard_normal(n)
    xi = _standardize(np.cumsum(rng.standard_normal(t)))
    eps = rng.normal(0.0, cfg.noise_sd, size=(n, t))

    factor_term = lam[:, [0]] * f1[None, :] + lam[:, [1]] * f2[None, :]
    d, prob = _assignment_chain(rng, factor_term, alpha, xi)
    s = _periods_since_onset(d)
    delta = _effects(d, s, cfg, rng)

    y0 = (BASELINE_LEVEL
          + COVARIATE_COEFS[0] * x[:, :, 0] + COVARIATE_COEFS[1] * x[:, :, 1]
          + FACTOR1_LOADING_SCALE * lam[:, [0]] * f1[None, :]
          + lam[:, [1]] * f2[None, :]
          + alpha[:, None] + xi[None, :] + eps)
    y = y0 + delta * d
    violations = ()
    if cfg.carryover_periods > 0:
        y, _ = _inject_carryover(y, d, delta, cfg)
        violations = ("carryover",)

    changed = (d == 1).any(axis=1) & (d == 0).any(axis=1)
    att, att_s = _truth(d, delta, changed)
    return DgpRecord(
        data=_build_panel(y, d, x), delta_true=delta, att_true=att,
        att_s_true=att_s, y0_true=y0,
        factors_true=np.column_stack([f1, f2]), loadings_true=lam,
        assign_prob=prob, violations=violations, config=cfg,
    )


def simulate_factor_scaling(config: DgpConfig) -> DgpRecord:
    """r factors scaled by 1/sqrt(r); half the units adopt together with
    ten treated periods at the panel's end."""
    if config.family != "factor_scaling":
        raise InputError("config.family must be 'factor_scaling'")
    cfg = config.replace(n_periods=max(config.n_periods, 12))
    r = cfg.num_factors
    if r < 1:
        raise InputError("factor_scaling needs num_factors >= 1")
    n, t = cfg.n_units, cfg.n_periods
    t0 = t - 10
    rng = np.random.default_rng(cfg.seed)

    fac = rng.standard_normal((t, r))
    lam = rng.standard_normal((n, r))
    alpha = rng.standard_normal(n)
    xi = _standardize(np.cumsum(rng.standard_normal(t)))
    eps = rng.normal(0.0, cfg.noise_sd, size=(n, t))

    treated_units = np.zeros(n, dtype=bool)
    treated_units[rng.permutation(n)[: n // 2]] = True
    d = np.zeros((n, t))
    d[treated_units, t0:] = 1.0
    s = _periods_since_onset(d)
    delta = _effects(d, s, cfg, rng)

    y0 = (BASELINE_LEVEL + (lam @ fac.T) / np.sqrt(r)
          + alpha[:, None] + xi[None, :] + eps)
    y = y0 + delta * d

    att, att_s = _truth(d, delta, treated_units)
    return DgpRecord(
        data=_build_panel(y, d), delta_true=delta, att_true=att,
        att_s_true=att_s, y0_true=y0, factors_true=fac, loadings_true=lam,
        assign_prob=None, violations=(), config=cfg,
    )


def simulate_confounder_scale(config: DgpConfig) -> DgpRecord:
    """One trending factor with outcome loading k; half the units are
    exposed to the switching assignment chain, the rest stay control."""
    if config.family != "confounder_scale":
        raise InputError("config.family must be 'confounder_scale'")
    cfg = config
    n, t = cfg.n_units, cfg.n_periods
    k = cfg.factor_scale
    rng = np.random.default_rng(cfg.seed)

    f = _standardize(np.arange(1.0, t + 1.0) + rng.standard_normal(t))
    lam = rng.standard_normal(n)
    alpha = rng.standard_normal(n)
    xi = _standardize(np.cumsum(rng.standard_normal(t)))
    eps = rng.normal(0.0, cfg.noise_sd, size=(n, t))

    eligible = np.zeros(n, dtype=bool)
    eligible[rng.permutation(n)[: n // 2]] = True
    factor_term = lam[:, None] * f[None, :]
    d, prob = _assignment_chain(rng, factor_term, alpha, xi)
    d[~eligible] = 0.0
    prob[~eligible] = 0.0
    s = _periods_since_onset(d)
    delta = _effects(d, s, cfg, rng)

    y0 = (BASELINE_LEVEL + k * factor_term
          + alpha[:, None] + xi[None, :] + eps)
    y = y0 + delta * d

    changed = (d == 1).any(axis=1) & (d == 0).any(axis=1)
    att, att_s = _truth(d, delta, changed)
    violations = ("time_varying_confounder",) if k != 0 else ()
    return DgpRecord(
        data=_build_panel(y, d), delta_true=delta, att_true=att,
        att_s_true=att_s, y0_true=y0, factors_true=f[:, None],
        loadings_true=lam[:, None], assign_prob=prob,
        violations=violations, config=cfg,
    )


def simulate_staggered_inference(config: DgpConfig) -> DgpRecord:
    """Staggered adoption at random times, heterogeneous growing effects,
    no time-varying confounders; the additive counterfactual model is
    correctly specified while a pooled two-way regression is not."""
    if config.family != "staggered_inference":
        raise InputError("config.family must be 'staggered_inference'")
    cfg = config
    n, t = cfg.n_units, cfg.n_periods
    rng = np.random.default_rng(cfg.seed)

    alpha = rng.standard_normal(n)
    xi = _standardize(np.cumsum(rng.standard_normal(t)))
    eps = rng.normal(0.0, cfg.noise_sd, size=(n, t))

    treated_units = np.zeros(n, dtype=bool)
    treated_units[rng.permutation(n)[: n // 2]] = True
    # adoption spread over the middle of the window: 3 to T/2 treated periods
    adopt = rng.integers(t // 2, t - 2, size=n)
    d = np.zeros((n, t))
    for i in range(n):
        if treated_units[i]:
            d[i, adopt[i]:] = 1.0
    s = _periods_since_onset(d)
    delta = _effects(d, s, cfg, rng)

    y0 = BASELINE_LEVEL + alpha[:, None] + xi[None, :] + eps
    y = y0 + delta * d

    att, att_s = _truth(d, delta, treated_units)
    return DgpRecord(
        data=_build_panel(y, d), delta_true=delta, att_true=att,
        att_s_true=att_s, y0_true=y0, factors_true=None, loadings_true=None,
        assign_prob=None, violations=(), config=cfg,
    )


def simulate(config: DgpConfig) -> DgpRecord:
    """Dispatch on config.family."""
    return {
        "main": simulate_main,
        "factor_scaling": simulate_factor_scaling,
        "confounder_scale": simulate_confounder_scale,
        "staggered_inference": simulate_staggered_inference,
    }[config.family](config)


def twfe_att(data: PanelDataset) -> float:
    """Pooled two-way within regression of the outcome on the treatment
    dummy over all observed cells.  Reference estimator for calibration
    comparisons only; it inherits the usual weighting bias under
    heterogeneous effects."""
    from .estimators import DEMEAN_MAX_ITER, DEMEAN_TOL

    rows, cols = np.nonzero(data.observed_mask)
    rows = rows.astype(np.int64)
    cols = cols.astype(np.int64)
    n, t = data.n_units, data.n_periods

    def within(v):
        a, x, _, _ = kernels.alternating_demean(
            v, rows, cols, n, t, DEMEAN_TOL, DEMEAN_MAX_ITER)
        return v - a[rows] - x[cols]

    y_t = within(data.outcome[rows, cols])
    d_t = within(data.treatment[rows, cols])
    denom = float(d_t @ d_t)
    if denom == 0:
        raise InputError("treatment has no within variation")
    return float(d_t @ y_t) / denom
