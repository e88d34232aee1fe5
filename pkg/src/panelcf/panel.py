"""Panel data model, CSV ingestion, preprocessing, and relative-time indexing.

The dataset is rectangular (N units x T periods) with an observation mask,
so unbalanced panels keep a matrix layout that every estimator can share.
Arrays are frozen after construction; datasets are safe to share across
worker processes.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .exceptions import InputError

logger = logging.getLogger(__name__)

MISSING_TOKENS = ("", "NA")


def _frozen(arr):
    arr = np.asarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PanelDataset:
    """Rectangular N x T panel with an observation mask.

    Fields
    ------
    unit_ids : tuple of unit labels (length N, unique)
    period_ids : tuple of period labels (length T, strictly increasing ints)
    outcome : (N, T) float array, NaN where missing
    treatment : (N, T) float array of 0/1, NaN where missing
    covariates : (N, T, k) float array, k >= 0
    observed_mask : (N, T) bool, True where outcome, treatment, and all
        covariates are present
    fit_exclude : (N, T) bool, cells kept out of the fitting set but still
        available for effect evaluation (used by carryover recoding)
    covariate_names : tuple of k column names
    """

    unit_ids: tuple
    period_ids: tuple
    outcome: np.ndarray
    treatment: np.ndarray
    covariates: np.ndarray
    observed_mask: np.ndarray
    fit_exclude: np.ndarray = None
    covariate_names: tuple = None

    def __post_init__(self):
        n, t = np.asarray(self.outcome).shape
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "period_ids", tuple(self.period_ids))
        if len(self.unit_ids) != n or len(self.period_ids) != t:
            raise InputError("unit/period label lengths do not match array shape")
        if len(set(self.unit_ids)) != n:
            raise InputError("unit_ids must be unique")
        periods = np.asarray(self.period_ids)
        if t > 1 and not np.all(np.diff(periods) > 0):
            raise InputError("period_ids must be strictly increasing")

        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 2:
            cov = cov.reshape(n, t, 0)
        if cov.shape[:2] != (n, t):
            raise InputError("covariates must be N x T x k")
        mask = np.asarray(self.observed_mask, dtype=bool)
        excl = self.fit_exclude
        excl = np.zeros((n, t), dtype=bool) if excl is None else np.asarray(excl, dtype=bool)
        names = self.covariate_names
        if names is None:
            names = tuple(f"x{j + 1}" for j in range(cov.shape[2]))
        names = tuple(names)
        if len(names) != cov.shape[2]:
            raise InputError("covariate_names length does not match k")

        outcome = np.asarray(self.outcome, dtype=float)
        treatment = np.asarray(self.treatment, dtype=float)
        d_obs = treatment[mask]
        if d_obs.size and not np.all((d_obs == 0) | (d_obs == 1)):
            bad = d_obs[~((d_obs == 0) | (d_obs == 1))][0]
            raise InputError(f"treatment must be 0/1 on observed cells, found {bad!r}")
        if np.any(~np.isfinite(outcome[mask])):
            raise InputError("outcome contains missing values inside the observed mask")
        if cov.shape[2] and np.any(~np.isfinite(cov[mask])):
            raise InputError("covariates contain missing values inside the observed mask")

        object.__setattr__(self, "outcome", _frozen(outcome))
        object.__setattr__(self, "treatment", _frozen(treatment))
        object.__setattr__(self, "covariates", _frozen(cov))
        object.__setattr__(self, "observed_mask", _frozen(mask))
        object.__setattr__(self, "fit_exclude", _frozen(excl))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n_units(self):
        return len(self.unit_ids)

    @property
    def n_periods(self):
        return len(self.period_ids)

    @property
    def n_covariates(self):
        return self.covariates.shape[2]

    @property
    def treated_mask(self):
        return self.observed_mask & (self.treatment == 1)

    @property
    def untreated_mask(self):
        return self.observed_mask & (self.treatment == 0)

    def fitting_mask(self, holdout: Optional[np.ndarray] = None) -> np.ndarray:
        """Cells the response-surface model may be fit on."""
        cells = self.untreated_mask & ~self.fit_exclude
        if holdout is not None:
            cells = cells & ~np.asarray(holdout, dtype=bool)
        return cells

    def subset_units(self, indices, relabel: bool = False) -> "PanelDataset":
        """New dataset with the given unit rows (duplicates allowed if relabeled)."""
        indices = np.asarray(indices, dtype=int)
        if relabel:
            labels = tuple(f"{self.unit_ids[i]}#{pos}" for pos, i in enumerate(indices))
        else:
            labels = tuple(self.unit_ids[i] for i in indices)
        return PanelDataset(
            unit_ids=labels,
            period_ids=self.period_ids,
            outcome=self.outcome[indices],
            treatment=self.treatment[indices],
            covariates=self.covariates[indices],
            observed_mask=self.observed_mask[indices],
            fit_exclude=self.fit_exclude[indices],
            covariate_names=self.covariate_names,
        )

    def with_fit_exclude(self, exclude: np.ndarray) -> "PanelDataset":
        return PanelDataset(
            unit_ids=self.unit_ids,
            period_ids=self.period_ids,
            outcome=self.outcome,
            treatment=self.treatment,
            covariates=self.covariates,
            observed_mask=self.observed_mask,
            fit_exclude=np.asarray(exclude, dtype=bool),
            covariate_names=self.covariate_names,
        )

    def with_treatment(self, treatment: np.ndarray) -> "PanelDataset":
        return PanelDataset(
            unit_ids=self.unit_ids,
            period_ids=self.period_ids,
            outcome=self.outcome,
            treatment=treatment,
            covariates=self.covariates,
            observed_mask=self.observed_mask,
            fit_exclude=self.fit_exclude,
            covariate_names=self.covariate_names,
        )


@dataclass(frozen=True)
class TreatmentGroupInfo:
    """Per-unit treatment-history flags.

    treated_flag is C_i: True iff the unit's observed status changed at
    least once (it has both a treated and an untreated observation).
    """

    treated_flag: np.ndarray
    always_treated: np.ndarray
    never_treated: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "treated_flag", _frozen(np.asarray(self.treated_flag, bool)))
        object.__setattr__(self, "always_treated", _frozen(np.asarray(self.always_treated, bool)))
        object.__setattr__(self, "never_treated", _frozen(np.asarray(self.never_treated, bool)))

    @property
    def n_treated_units(self):
        return int(self.treated_flag.sum())

    @property
    def n_control_units(self):
        return int(self.never_treated.sum())


@dataclass(frozen=True)
class RelativeTimeIndex:
    """Time relative to treatment onset per cell.

    s = 1 is the first treated period of a spell; s <= 0 count backward
    from the next onset.  NaN where censoring makes the position
    ambiguous or the unit never changes status.
    """

    s: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s", _frozen(np.asarray(self.s, dtype=float)))

    @property
    def defined(self):
        return np.isfinite(self.s)


def _group_flags(data: PanelDataset):
    obs = data.observed_mask
    treated = data.treated_mask.any(axis=1)
    untreated = data.untreated_mask.any(axis=1)
    has_obs = obs.any(axis=1)
    c = treated & untreated
    always = treated & ~untreated & has_obs
    never = ~treated & has_obs
    return TreatmentGroupInfo(c, always, never), has_obs


def preprocess(data: PanelDataset):
    """Drop always-treated units and compute per-unit treatment flags.

    Returns the (possibly reduced) dataset and a TreatmentGroupInfo aligned
    with it.  Idempotent.
    """
    info, has_obs = _group_flags(data)
    drop = info.always_treated | ~has_obs
    if drop.any():
        keep = np.flatnonzero(~drop)
        n_always = int(info.always_treated.sum())
        n_empty = int((~has_obs).sum())
        logger.info("preprocess: dropping %d always-treated and %d empty units",
                    n_always, n_empty)
        data = data.subset_units(keep)
        info, _ = _group_flags(data)

    if not data.treated_mask.any():
        raise InputError("nothing to estimate: no treated observations remain")
    if not data.untreated_mask.any():
        raise InputError("no untreated observations remain")
    logger.info("preprocess: %d treatment-group units, %d never-treated units",
                info.n_treated_units, info.n_control_units)
    return data, info


def relative_time_index(data: PanelDataset, info: TreatmentGroupInfo) -> RelativeTimeIndex:
    """Assign each observed cell of a treatment-group unit its time
    relative to treatment onset.

    Treated cells count 1, 2, ... forward from the start of their spell;
    untreated cells count ..., -1, 0 backward from the next onset.  A cell
    is left undefined when censoring (panel edges, unobserved neighbours)
    makes its position ambiguous: spells already running at the first
    observed period have no known onset, and untreated cells after the
    last observed exit have no next onset.
    """
    n, t = data.n_units, data.n_periods
    s = np.full((n, t), np.nan)
    obs = data.observed_mask
    d = data.treatment

    for i in range(n):
        if not info.treated_flag[i]:
            continue
        known0 = obs[i] & (d[i] == 0)
        known1 = obs[i] & (d[i] == 1)
        # onsets: observed 0 -> 1 transitions in adjacent dense periods
        onsets = [t0 for t0 in range(1, t) if known1[t0] and known0[t0 - 1]]
        for onset in onsets:
            j = onset
            k = 1
            while j < t and known1[j]:
                s[i, j] = k
                j += 1
                k += 1
            j = onset - 1
            k = 0
            while j >= 0 and known0[j]:
                s[i, j] = k
                j -= 1
                k -= 1
    return RelativeTimeIndex(s)


def load_long_csv(path, column_map: dict) -> PanelDataset:
    """Read a long-format CSV into a PanelDataset.

    column_map keys: ``unit``, ``time``, ``outcome``, ``treatment`` and
    optionally ``covariates`` (a list of column names).  Missing values are
    encoded as an empty field or ``NA``; absent (unit, period) rows yield
    mask-false cells.
    """
    cov_cols = list(column_map.get("covariates") or [])
    needed = [column_map["unit"], column_map["time"], column_map["outcome"],
              column_map["treatment"]] + cov_cols
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing_cols = [c for c in needed if c not in df.columns]
    if missing_cols:
        raise InputError(f"missing column(s) in {path}: {', '.join(missing_cols)}")

    units_raw = df[column_map["unit"]].to_numpy()
    times_raw = df[column_map["time"]].to_numpy()

    def parse_period(v, row):
        try:
            return int(v)
        except ValueError:
            raise InputError(f"row {row}: unparseable period value {v!r}") from None

    periods_parsed = np.array([parse_period(v, r + 2) for r, v in enumerate(times_raw)])
    period_ids = tuple(sorted(set(periods_parsed.tolist())))
    unit_ids = tuple(sorted(set(units_raw.tolist())))
    uidx = {u: i for i, u in enumerate(unit_ids)}
    tidx = {p: j for j, p in enumerate(period_ids)}

    n, t, k = len(unit_ids), len(period_ids), len(cov_cols)
    outcome = np.full((n, t), np.nan)
    treatment = np.full((n, t), np.nan)
    covariates = np.full((n, t, k), np.nan)
    seen = np.zeros((n, t), dtype=bool)

    def parse_value(v, row, col):
        if v.strip() in MISSING_TOKENS:
            return np.nan
        try:
            return float(v)
        except ValueError:
            raise InputError(f"row {row}: unparseable numeric {v!r} in column {col!r}") from None

    y_raw = df[column_map["outcome"]].to_numpy()
    d_raw = df[column_map["treatment"]].to_numpy()
    x_raw = [df[c].to_numpy() for c in cov_cols]

    for r in range(len(df)):
        i, j = uidx[units_raw[r]], tidx[periods_parsed[r]]
        if seen[i, j]:
            raise InputError(
                f"duplicate row for unit {units_raw[r]!r}, period {periods_parsed[r]!r}")
        seen[i, j] = True
        row_no = r + 2  # header is line 1
        outcome[i, j] = parse_value(y_raw[r], row_no, column_map["outcome"])
        dv = parse_value(d_raw[r], row_no, column_map["treatment"])
        if np.isfinite(dv) and dv not in (0.0, 1.0):
            raise InputError(f"row {row_no}: non-binary treatment value {d_raw[r]!r}")
        treatment[i, j] = dv
        for m in range(k):
            covariates[i, j, m] = parse_value(x_raw[m][r], row_no, cov_cols[m])

    mask = np.isfinite(outcome) & np.isfinite(treatment)
    if k:
        mask &= np.isfinite(covariates).all(axis=2)
    return PanelDataset(
        unit_ids=unit_ids,
        period_ids=period_ids,
        outcome=outcome,
        treatment=treatment,
        covariates=covariates,
        observed_mask=mask,
        covariate_names=tuple(cov_cols),
    )


def write_long_csv(data: PanelDataset, path, column_map: Optional[dict] = None) -> None:
    """Write the observed cells of a PanelDataset in long format."""
    cm = column_map or {}
    unit_col = cm.get("unit", "unit")
    time_col = cm.get("time", "time")
    y_col = cm.get("outcome", "outcome")
    d_col = cm.get("treatment", "treatment")
    cov_cols = list(cm.get("covariates") or data.covariate_names)

    rows = []
    for i, u in enumerate(data.unit_ids):
        for j, p in enumerate(data.period_ids):
            if not data.observed_mask[i, j]:
                continue
            row = {unit_col: u, time_col: p,
                   y_col: data.outcome[i, j],
                   d_col: int(data.treatment[i, j])}
            for m, c in enumerate(cov_cols):
                row[c] = data.covariates[i, j, m]
            rows.append(row)
    pd.DataFrame(rows).to_csv(path, index=False)
