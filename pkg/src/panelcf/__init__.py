"""Counterfactual estimation, diagnostics, and inference for TSCS data."""

from .estimators import (
    EffectSeries,
    EstimatorConfig,
    FitResult,
    aggregate_effects,
    estimate_effects,
    fect_weights,
    fit,
    fit_fect,
    fit_ifect,
    fit_mc,
    shrink_operator,
)
from .exceptions import EstimationError, InputError, NotApplicableError, PanelcfError
from .panel import (
    PanelDataset,
    RelativeTimeIndex,
    TreatmentGroupInfo,
    load_long_csv,
    preprocess,
    relative_time_index,
    write_long_csv,
)

__version__ = "0.1.0"

__all__ = [
    "EffectSeries",
    "EstimatorConfig",
    "EstimationError",
    "FitResult",
    "InputError",
    "NotApplicableError",
    "PanelDataset",
    "PanelcfError",
    "RelativeTimeIndex",
    "TreatmentGroupInfo",
    "aggregate_effects",
    "estimate_effects",
    "fect_weights",
    "fit",
    "fit_fect",
    "fit_ifect",
    "fit_mc",
    "load_long_csv",
    "preprocess",
    "relative_time_index",
    "shrink_operator",
    "write_long_csv",
]
