import numpy as np
import pytest

from panelcf import (
    EstimationError,
    EstimatorConfig,
    InputError,
    aggregate_effects,
    fect_weights,
    fit_fect,
    fit_ifect,
    fit_mc,
    preprocess,
    relative_time_index,
    shrink_operator,
)
from panelcf.estimators import untreated_residual_matrix

from conftest import make_panel, random_panel, table_a1_panel


def dense_dummy_ls(data):
    """Oracle: explicit design-matrix least squares of the outcome on a
    constant, unit dummies, period dummies, and covariates over the
    untreated observed cells.  Fitted values are normalization-free."""
    n, t, k = data.n_units, data.n_periods, data.n_covariates
    rows, cols = np.nonzero(data.fitting_mask())
    z = np.zeros((rows.size, 1 + n + t + k))
    z[:, 0] = 1.0
    z[np.arange(rows.size), 1 + rows] = 1.0
    z[np.arange(rows.size), 1 + n + cols] = 1.0
    if k:
        z[:, 1 + n + t:] = data.covariates[rows, cols]
    coef, *_ = np.linalg.lstsq(z, data.outcome[rows, cols], rcond=None)

    def predict(i, j):
        zz = np.zeros(1 + n + t + k)
        zz[0] = 1.0
        zz[1 + i] = 1.0
        zz[1 + n + j] = 1.0
        if k:
            zz[1 + n + t:] = data.covariates[i, j]
        return float(zz @ coef)

    beta = coef[1 + n + t:]
    return predict, beta


class TestFectOracle:
    def test_did_identity_2x2(self, rng):
        for _ in range(50):
            y = rng.normal(size=(2, 2)) * rng.uniform(0.5, 4)
            data = make_panel(y, [[0, 0], [0, 1]])
            res = fit_fect(data)
            did = (y[1, 1] - y[1, 0]) - (y[0, 1] - y[0, 0])
            assert abs(res.delta_hat[1, 1] - did) < 1e-10

    def test_matches_dense_dummy_regression(self, rng):
        # random 6x5 panel with 2 covariates, and assorted shapes
        for rep in range(25):
            n = int(rng.integers(4, 11))
            t = int(rng.integers(3, 9))
            k = int(rng.integers(0, 4))
            data = random_panel(rng, n=n, t=t, k=k, p_missing=0.1)
            res = fit_fect(data)
            predict, beta = dense_dummy_ls(data)
            np.testing.assert_allclose(res.beta, beta, atol=1e-8)
            ti, tj = np.nonzero(data.treated_mask)
            for i, j in zip(ti, tj):
                if np.isfinite(res.y0_hat[i, j]):
                    assert abs(res.y0_hat[i, j] - predict(i, j)) < 1e-8

    def test_parameter_normalization(self, rng):
        data = random_panel(rng, n=7, t=6, k=1, p_missing=0.15)
        res = fit_fect(data)
        rows, cols = np.nonzero(data.fitting_mask())
        assert abs(np.sum(res.alpha[rows])) < 1e-8
        assert abs(np.sum(res.xi[cols])) < 1e-8

    def test_collinear_covariates_rejected(self, rng):
        data = random_panel(rng, n=6, t=5, k=2)
        x = data.covariates.copy()
        x[:, :, 1] = 2.0 * x[:, :, 0]
        bad = make_panel(data.outcome, data.treatment, x=x)
        with pytest.raises(EstimationError, match="x2"):
            fit_fect(bad)

    def test_unidentified_unit_skipped_not_fatal(self, rng):
        # one unit treated everywhere except an unobserved cell
        data = random_panel(rng, n=5, t=4)
        d = data.treatment.copy()
        d[2] = 1.0
        mask = data.observed_mask.copy()
        mask[2, 0] = False
        res = fit_fect(make_panel(data.outcome, d, mask=mask))
        assert np.isnan(res.alpha[2])
        assert res.n_unidentified_cells == 3
        assert np.isfinite(res.delta_hat).any()

    def test_delta_defined_exactly_on_observed_treated(self, rng):
        data = random_panel(rng, n=6, t=5, p_missing=0.1)
        res = fit_fect(data)
        expect = data.treated_mask & np.isfinite(res.y0_hat)
        np.testing.assert_array_equal(np.isfinite(res.delta_hat), expect)


class TestIfect:
    def test_r0_identical_to_fect(self, rng):
        for _ in range(5):
            data = random_panel(rng, n=7, t=6, k=2, p_missing=0.1)
            ref = fit_fect(data)
            res = fit_ifect(data, EstimatorConfig(method="ifect", num_factors=0))
            np.testing.assert_allclose(res.beta, ref.beta, atol=1e-10)
            assert abs(res.mu - ref.mu) < 1e-10
            np.testing.assert_allclose(res.alpha, ref.alpha, atol=1e-10)
            np.testing.assert_allclose(res.xi, ref.xi, atol=1e-10)
            m = np.isfinite(ref.y0_hat)
            np.testing.assert_allclose(res.y0_hat[m], ref.y0_hat[m], atol=1e-10)

    def test_noiseless_rank1_recovery(self, rng):
        n, t = 20, 12
        lam = rng.normal(size=n)
        f = rng.normal(size=t)
        y = np.outer(lam, f)
        d = (rng.uniform(size=(n, t)) < 0.3).astype(float)
        d[0] = 0.0
        data = make_panel(y, d)
        cfg = EstimatorConfig(method="ifect", num_factors=1, tol=1e-10, max_iter=5000)
        res = fit_ifect(data, cfg)
        cells = data.treated_mask & np.isfinite(res.y0_hat)
        np.testing.assert_allclose(res.y0_hat[cells], y[cells], atol=1e-6)

    def test_factor_constraints(self, rng):
        data = random_panel(rng, n=10, t=8, p_treat=0.25)
        res = fit_ifect(data, EstimatorConfig(method="ifect", num_factors=2))
        t = data.n_periods
        np.testing.assert_allclose(res.factors.T @ res.factors / t, np.eye(2), atol=1e-8)
        ltl = res.loadings.T @ res.loadings
        np.testing.assert_allclose(ltl, np.diag(np.diag(ltl)), atol=1e-8)

    def test_objective_non_increasing(self, rng):
        for _ in range(5):
            data = random_panel(rng, n=10, t=8, p_treat=0.3)
            res = fit_ifect(data, EstimatorConfig(method="ifect", num_factors=2))
            trace = np.asarray(res.objective_trace)
            assert np.all(np.diff(trace) <= 1e-9 * max(1.0, trace[0]))

    def test_r_too_large_rejected(self, rng):
        data = random_panel(rng, n=4, t=3)
        with pytest.raises(InputError, match="below"):
            fit_ifect(data, EstimatorConfig(method="ifect", num_factors=3))

    def test_nonconvergence_warns_and_flags(self, rng):
        data = random_panel(rng, n=12, t=9, p_treat=0.3)
        cfg = EstimatorConfig(method="ifect", num_factors=2, max_iter=2, tol=1e-14)
        with pytest.warns(UserWarning, match="did not converge"):
            res = fit_ifect(data, cfg)
        assert not res.converged


class TestShrinkOperator:
    def test_theta_zero_identity(self, rng):
        a = rng.normal(size=(6, 4))
        np.testing.assert_allclose(shrink_operator(a, 0.0), a, atol=1e-12)

    def test_full_shrinkage_gives_zero(self, rng):
        a = rng.normal(size=(5, 5))
        s1 = np.linalg.svd(a, compute_uv=False)[0]
        np.testing.assert_allclose(shrink_operator(a, s1 * 1.0001), 0, atol=1e-12)

    def test_diagonal_closed_form(self):
        a = np.diag([3.0, 1.0])
        np.testing.assert_allclose(shrink_operator(a, 1.0), np.diag([2.0, 0.0]), atol=1e-12)

    def test_singular_values_soft_thresholded(self, rng):
        a = rng.normal(size=(7, 5))
        s = np.linalg.svd(a, compute_uv=False)
        out = shrink_operator(a, 0.7)
        s_out = np.linalg.svd(out, compute_uv=False)
        np.testing.assert_allclose(s_out, np.maximum(s - 0.7, 0), atol=1e-10)


class TestMc:
    def test_large_lambda_reduces_to_fect(self, rng):
        for _ in range(5):
            data = random_panel(rng, n=8, t=6, k=1, p_missing=0.1)
            resid, _, _ = untreated_residual_matrix(data)
            s1 = np.linalg.svd(resid, compute_uv=False)[0]
            ref = fit_fect(data)
            res = fit_mc(data, EstimatorConfig(method="mc", shrink_param=s1 * 1.001))
            m = np.isfinite(ref.y0_hat)
            np.testing.assert_allclose(res.y0_hat[m], ref.y0_hat[m], atol=1e-8)

    def test_lambda_zero_fully_observed_keeps_residuals(self, rng):
        data = random_panel(rng, n=6, t=5, p_treat=0.0001)
        # force one treated cell so the fit is legal, everything observed
        d = data.treatment.copy()
        d[1, 2] = 1.0
        data = make_panel(data.outcome, d)
        resid, cells, _ = untreated_residual_matrix(data)
        res = fit_mc(data, EstimatorConfig(method="mc", shrink_param=0.0))
        np.testing.assert_allclose(res.low_rank[cells], resid[cells], atol=1e-10)

    def test_rank1_low_noise_completion(self, rng):
        n, t = 30, 15
        lam = rng.normal(size=n) + 2.0
        f = rng.normal(size=t) + 2.0
        y = np.outer(lam, f) + rng.normal(size=(n, t)) * 0.01
        d = (rng.uniform(size=(n, t)) < 0.2).astype(float)
        d[0] = 0.0
        data = make_panel(y, d)
        truth = np.outer(lam, f)
        cfg = EstimatorConfig(method="mc", shrink_param=0.5, max_iter=5000)
        res = fit_mc(data, cfg)
        cells = data.treated_mask
        rel = np.abs(res.y0_hat[cells] - truth[cells]) / np.abs(truth[cells])
        assert np.median(rel) < 0.05


class TestRegularizationBridge:
    def test_three_way_bridge(self, rng):
        for _ in range(10):
            data = random_panel(rng, n=8, t=6, k=int(rng.integers(0, 3)), p_missing=0.1)
            ref = fit_fect(data)
            r0 = fit_ifect(data, EstimatorConfig(method="ifect", num_factors=0))
            resid, _, _ = untreated_residual_matrix(data)
            s1 = np.linalg.svd(resid, compute_uv=False)[0]
            mc = fit_mc(data, EstimatorConfig(method="mc", shrink_param=s1 * 1.001))
            m = np.isfinite(ref.y0_hat)
            np.testing.assert_allclose(r0.y0_hat[m], ref.y0_hat[m], atol=1e-8)
            np.testing.assert_allclose(mc.y0_hat[m], ref.y0_hat[m], atol=1e-8)


class TestAggregateEffects:
    def test_constant_effects(self, rng):
        data = random_panel(rng, n=6, t=5, p_treat=0.3)
        y = data.outcome + 2.5 * data.treatment
        data = make_panel(y, data.treatment)
        data, info = preprocess(data)
        res = fit_fect(data)
        # overwrite with exact constant gaps to isolate the aggregation
        res.delta_hat[np.isfinite(res.delta_hat)] = 2.5
        idx = relative_time_index(data, info)
        eff = aggregate_effects(res, idx, info)
        assert eff.att == pytest.approx(2.5)
        for s, (est, _) in eff.att_by_s.items():
            if s >= 1:
                assert est == pytest.approx(2.5)

    def test_table_a1_uniform_quarter_weights(self, rng):
        data, info = preprocess(table_a1_panel(rng))
        res = fit_fect(data)
        idx = relative_time_index(data, info)
        eff = aggregate_effects(res, idx, info)
        hand = np.nanmean([res.delta_hat[1, 3], res.delta_hat[2, 1],
                           res.delta_hat[2, 2], res.delta_hat[2, 3]])
        assert eff.att == pytest.approx(hand, abs=1e-12)

    def test_att_is_count_weighted_mean_of_att_s(self, rng):
        # staggered data: every treated cell has a defined s
        d = np.zeros((6, 8))
        for i in range(4):
            d[i, 3 + i:] = 1.0
        y = rng.normal(size=(6, 8))
        data, info = preprocess(make_panel(y, d))
        res = fit_fect(data)
        idx = relative_time_index(data, info)
        eff = aggregate_effects(res, idx, info)
        post = [(est, c) for s, (est, c) in eff.att_by_s.items() if s >= 1]
        num = sum(est * c for est, c in post)
        den = sum(c for _, c in post)
        assert eff.att == pytest.approx(num / den)

    def test_empty_bucket_omitted(self, rng):
        data, info = preprocess(table_a1_panel(rng))
        res = fit_fect(data)
        idx = relative_time_index(data, info)
        eff = aggregate_effects(res, idx, info)
        assert 5 not in eff.att_by_s

    def test_aitc_onset_and_exit_cells(self, rng):
        d = np.array([[0, 1, 1, 0, 0],
                      [0, 0, 1, 1, 1],
                      [0, 0, 0, 0, 0]], float)
        y = rng.normal(size=(3, 5))
        data, info = preprocess(make_panel(y, d))
        res = fit_fect(data)
        idx = relative_time_index(data, info)
        eff = aggregate_effects(res, idx, info)
        # onset cells (0,1), (1,2); exit-adjacent (0,2); deduplicated
        cells = [(0, 1), (1, 2), (0, 2)]
        hand = np.mean([res.delta_hat[i, j] for i, j in cells])
        assert eff.aitc == pytest.approx(hand)

    def test_permuting_delta_labels_leaves_att_unchanged(self, rng):
        data, info = preprocess(random_panel(rng, n=7, t=6, p_treat=0.35))
        res = fit_fect(data)
        idx = relative_time_index(data, info)
        att1 = aggregate_effects(res, idx, info).att
        cells = np.isfinite(res.delta_hat)
        vals = res.delta_hat[cells]
        res.delta_hat[cells] = rng.permutation(vals)
        att2 = aggregate_effects(res, idx, info).att
        assert att1 == pytest.approx(att2)

    def test_scale_covariance(self, rng):
        data = random_panel(rng, n=7, t=6, k=1, p_treat=0.3)
        data_pp, info = preprocess(data)
        idx = relative_time_index(data_pp, info)
        c = 3.7
        scaled = make_panel(data_pp.outcome * c, data_pp.treatment, x=data_pp.covariates)
        for cfg in (EstimatorConfig(method="fect"),
                    EstimatorConfig(method="ifect", num_factors=1, tol=1e-10)):
            r1 = fit_ifect(data_pp, cfg) if cfg.method == "ifect" else fit_fect(data_pp)
            r2 = fit_ifect(scaled, cfg) if cfg.method == "ifect" else fit_fect(scaled)
            e1 = aggregate_effects(r1, idx, info)
            e2 = aggregate_effects(r2, idx, info)
            assert e2.att == pytest.approx(c * e1.att, rel=1e-6)
        # mc is scale covariant once the penalty scales with the outcome
        resid, _, _ = untreated_residual_matrix(data_pp)
        lam = 0.5 * np.linalg.svd(resid, compute_uv=False)[0]
        m1 = fit_mc(data_pp, EstimatorConfig(method="mc", shrink_param=lam, tol=1e-10))
        m2 = fit_mc(scaled, EstimatorConfig(method="mc", shrink_param=lam * c, tol=1e-10))
        a1 = aggregate_effects(m1, idx, info).att
        a2 = aggregate_effects(m2, idx, info).att
        assert a2 == pytest.approx(c * a1, rel=1e-6)


def fe_reference_weights(d):
    """Pooled two-way regression weights on treated-cell effects:
    eps_it / sum(eps over treated) with eps the doubly demeaned treatment."""
    d = np.asarray(d, dtype=float)
    eps = d - d.mean(axis=1, keepdims=True) - d.mean(axis=0, keepdims=True) + d.mean()
    treated = d == 1
    return eps[treated] / eps[treated].sum()


class TestFectWeights:
    def test_table_a1_quarter_weights_vs_fe_reference(self, rng):
        data, info = preprocess(table_a1_panel(rng))
        res = fit_fect(data)
        # counterfactual estimator: uniform 1/4 on each treated cell
        idx = relative_time_index(data, info)
        att = aggregate_effects(res, idx, info).att
        deltas = [res.delta_hat[1, 3], res.delta_hat[2, 1],
                  res.delta_hat[2, 2], res.delta_hat[2, 3]]
        assert att == pytest.approx(sum(deltas) / 4, abs=1e-12)
        # pooled regression reference: (1/2, 3/10, 3/10, -1/10), one negative
        ref = fe_reference_weights(data.treatment)
        np.testing.assert_allclose(ref, [0.5, 0.3, 0.3, -0.1], atol=1e-12)

    def test_proposition_constraints_on_random_panels(self, rng):
        for _ in range(30):
            data = random_panel(rng, n=int(rng.integers(4, 9)),
                                t=int(rng.integers(3, 7)), p_missing=0.1)
            res = fit_fect(data)
            ti, tj = np.nonzero(data.treated_mask & np.isfinite(res.y0_hat))
            pick = rng.integers(0, ti.size)
            i0, j0 = int(ti[pick]), int(tj[pick])
            w = fect_weights(data, (data.unit_ids[i0], data.period_ids[j0]))
            own_row = w.weights[w.unit_idx == i0].sum()
            own_col = w.weights[w.period_idx == j0].sum()
            off_col = w.weights[w.period_idx != j0].sum()
            off_row = w.weights[w.unit_idx != i0].sum()
            assert abs(own_row - 1) < 1e-8 and abs(own_col - 1) < 1e-8
            assert abs(off_col) < 1e-8 and abs(off_row) < 1e-8
            y_o = data.outcome[w.unit_idx, w.period_idx]
            assert abs(w.weights @ y_o - res.y0_hat[i0, j0]) < 1e-8

    def test_single_untreated_period_gets_unit_weight(self):
        d = np.array([[0, 0, 0], [1, 1, 0], [0, 1, 1]], float)
        rng = np.random.default_rng(2)
        data = make_panel(rng.normal(size=(3, 3)), d)
        w = fect_weights(data, ("u1", 3))
        own = (w.unit_idx == 1)
        assert own.sum() == 1
        assert w.weights[own][0] == pytest.approx(1.0)

    def test_covariates_rejected(self, rng):
        data = random_panel(rng, n=5, t=4, k=1)
        ti, tj = np.nonzero(data.treated_mask)
        cell = (data.unit_ids[ti[0]], data.period_ids[tj[0]])
        with pytest.raises(InputError, match="covariate"):
            fect_weights(data, cell)
