import numpy as np
import pytest

from panelcf import PanelDataset


def make_panel(y, d, x=None, mask=None, unit_ids=None, period_ids=None):
    y = np.asarray(y, dtype=float)
    n, t = y.shape
    return PanelDataset(
        unit_ids=unit_ids or [f"u{i}" for i in range(n)],
        period_ids=period_ids or list(range(1, t + 1)),
        outcome=y,
        treatment=np.asarray(d, dtype=float),
        covariates=np.zeros((n, t, 0)) if x is None else np.asarray(x, dtype=float),
        observed_mask=np.ones((n, t), dtype=bool) if mask is None else np.asarray(mask, bool),
    )


def random_panel(rng, n=6, t=5, k=0, p_treat=0.3, p_missing=0.0, scale=1.0):
    """Random panel guaranteed estimable: unit 0 stays control and every
    period keeps at least one untreated observed cell."""
    while True:
        y = scale * rng.normal(size=(n, t))
        d = (rng.uniform(size=(n, t)) < p_treat).astype(float)
        d[0] = 0.0
        mask = rng.uniform(size=(n, t)) >= p_missing
        mask[0] = True
        x = rng.normal(size=(n, t, k))
        untreated = mask & (d == 0)
        if not (mask & (d == 1)).any():
            continue
        if untreated.any(axis=0).all() and untreated.any(axis=1).all():
            return make_panel(y, d, x=x, mask=mask)


def table_a1_panel(rng=None, y=None):
    """3 units x 4 periods with the treatment pattern: unit 1 never treated,
    unit 2 treated only in period 4, unit 3 treated in periods 2-4."""
    d = np.array([[0, 0, 0, 0],
                  [0, 0, 0, 1],
                  [0, 1, 1, 1]], dtype=float)
    if y is None:
        rng = rng or np.random.default_rng(0)
        y = rng.normal(size=(3, 4))
    return make_panel(y, d, unit_ids=["1", "2", "3"], period_ids=[1, 2, 3, 4])


def staggered_panel(rng, n=8, t=10, never_frac=0.5):
    y = rng.normal(size=(n, t))
    d = np.zeros((n, t))
    n_treat = max(1, int(n * (1 - never_frac)))
    for i in range(n_treat):
        onset = rng.integers(2, t - 1)
        d[i, onset:] = 1.0
    return make_panel(y, d)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
