"""Cross-validation for the ifect factor count and the mc shrinkage level.

The test set is built from triplets: three consecutive untreated
observations of a treatment-group unit.  Each maximal untreated run of
length >= 3 is cut into non-overlapping triplets from its start (leftover
cells unused), the triplets are shuffled by seed and dealt into k folds.
Held-out triplet cells are masked out of the fitting set as if treated and
scored by mean squared prediction error.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .estimators import (
    EstimatorConfig,
    fit_ifect,
    fit_mc,
    untreated_residual_matrix,
)
from .exceptions import InputError
from .panel import PanelDataset, TreatmentGroupInfo

logger = logging.getLogger(__name__)

DEFAULT_FOLDS = 5
DEFAULT_R_GRID = (0, 1, 2, 3, 4, 5)
DEFAULT_GRID_SIZE = 10
LAMBDA_FLOOR_RATIO = 1e-3


@dataclass(frozen=True)
class CvPlan:
    """k-fold plan over untreated triplets of treatment-group units."""

    k: int
    triplets: tuple           # ((unit_idx, t0), ...) covering t0, t0+1, t0+2
    fold_of: tuple            # fold index per triplet
    seed: int

    def fold_mask(self, fold: int, shape) -> np.ndarray:
        held = np.zeros(shape, dtype=bool)
        for (i, t0), f in zip(self.triplets, self.fold_of):
            if f == fold:
                held[i, t0:t0 + 3] = True
        return held


@dataclass
class CvResult:
    """Grid, per-fold scores, and the selected candidate."""

    parameter: str            # "num_factors" or "shrink_param"
    grid: list
    mspe: np.ndarray          # (n_candidates, k), NaN marks an invalid fold
    mean_mspe: list
    selected: object

    def to_dict(self) -> dict:
        def f(v):
            return None if v is None or not np.isfinite(v) else float(v)
        return {
            "parameter": self.parameter,
            "grid": [float(g) for g in self.grid],
            "mspe": [[f(v) for v in row] for row in self.mspe],
            "mean_mspe": [f(v) for v in self.mean_mspe],
            "selected": float(self.selected),
        }


def build_cv_folds(data: PanelDataset, info: TreatmentGroupInfo, k: int = DEFAULT_FOLDS,
                   seed: int = 0) -> CvPlan:
    """Decompose untreated runs of treatment-group units into triplets and
    deal them into k folds."""
    if k < 2:
        raise InputError("k must be >= 2")
    fit_cells = data.fitting_mask()
    triplets = []
    for i in range(data.n_units):
        if not info.treated_flag[i]:
            continue
        run = 0
        for t in range(data.n_periods):
            if fit_cells[i, t]:
                run += 1
            else:
                run = 0
            if run == 3:
                triplets.append((i, t - 2))
                run = 0
    if len(triplets) < k:
        raise InputError(
            f"only {len(triplets)} triplet(s) available; reduce k below {k}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(triplets))
    fold_of = [0] * len(triplets)
    for pos, idx in enumerate(order):
        fold_of[idx] = pos % k
    return CvPlan(k=k, triplets=tuple(triplets), fold_of=tuple(fold_of), seed=seed)


def _evaluate_grid(data, plan, candidates, fit_one):
    """Run fit_one(candidate, fold_mask) per (candidate, fold) and score the
    held-out cells; a failed fit or NaN prediction marks the fold invalid."""
    shape = (data.n_units, data.n_periods)
    mspe = np.full((len(candidates), plan.k), np.nan)
    for f in range(plan.k):
        held = plan.fold_mask(f, shape)
        y_held = data.outcome[held]
        for ci, cand in enumerate(candidates):
            try:
                y0 = fit_one(cand, held, f)
            except Exception as exc:  # noqa: BLE001 - invalid fold, not fatal
                logger.warning("cv: candidate %s fold %d failed: %s", cand, f, exc)
                continue
            pred = y0[held]
            if not np.isfinite(pred).all():
                continue
            mspe[ci, f] = float(np.mean((y_held - pred) ** 2))
    return mspe


def _select(parameter, candidates, mspe):
    mean = [float(np.mean(row)) if np.isfinite(row).all() else np.nan
            for row in mspe]
    valid = [i for i, v in enumerate(mean) if np.isfinite(v)]
    if not valid:
        raise InputError("cross-validation failed on every candidate")
    best = min(valid, key=lambda i: mean[i])  # ties keep the earlier candidate
    return CvResult(parameter=parameter, grid=list(candidates), mspe=mspe,
                    mean_mspe=mean, selected=candidates[best])


def select_num_factors(data: PanelDataset, plan: CvPlan,
                       r_grid=DEFAULT_R_GRID,
                       config: Optional[EstimatorConfig] = None) -> CvResult:
    """Pick the ifect factor count by fold-held-out prediction error.

    Ties break toward the smaller factor count.
    """
    r_grid = list(r_grid)
    if not r_grid:
        raise InputError("empty factor grid")
    nmin = min(data.n_units, data.n_periods)
    if any(r >= nmin for r in r_grid):
        raise InputError(f"every candidate factor count must be below {nmin}")
    base = config or EstimatorConfig(method="ifect")

    def fit_one(r, held, _f):
        res = fit_ifect(data, base.replace(method="ifect", num_factors=r), holdout=held)
        return res.y0_hat

    mspe = _evaluate_grid(data, plan, r_grid, fit_one)
    return _select("num_factors", r_grid, mspe)


def mc_lambda_grid(data: PanelDataset, grid_size: int = DEFAULT_GRID_SIZE):
    """Geometric grid from the top singular value of the untreated residual
    matrix down to its 1e-3 multiple."""
    if grid_size < 2:
        raise InputError("grid_size must be >= 2")
    resid, _, _ = untreated_residual_matrix(data)
    lam_max = float(np.linalg.svd(resid, compute_uv=False)[0])
    return list(lam_max * np.geomspace(1.0, LAMBDA_FLOOR_RATIO, grid_size))


def select_mc_lambda(data: PanelDataset, plan: CvPlan,
                     grid_size: int = DEFAULT_GRID_SIZE,
                     config: Optional[EstimatorConfig] = None) -> CvResult:
    """Pick the mc shrinkage level by fold-held-out prediction error.

    The grid runs from maximum regularization (mc collapses to fect)
    downward; ties break toward the larger shrinkage.  Within a fold the
    completed matrix warm-starts the next, smaller candidate.
    """
    grid = mc_lambda_grid(data, grid_size)
    base = config or EstimatorConfig(method="mc")
    warm = {}

    def fit_one(lam, held, f):
        res = fit_mc(data, base.replace(method="mc", shrink_param=lam),
                     holdout=held, init_low_rank=warm.get(f))
        warm[f] = res.low_rank
        return res.y0_hat

    mspe = _evaluate_grid(data, plan, grid, fit_one)
    return _select("shrink_param", grid, mspe)
