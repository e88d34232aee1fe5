import numpy as np
import pytest

from panelcf import (
    InputError,
    PanelDataset,
    load_long_csv,
    preprocess,
    relative_time_index,
    write_long_csv,
)

from conftest import make_panel, random_panel, staggered_panel, table_a1_panel

COLMAP = {"unit": "unit", "time": "time", "outcome": "y", "treatment": "d"}


def write_rows(path, rows, header="unit,time,y,d"):
    path.write_text("\n".join([header] + rows) + "\n")


class TestLoadLongCsv:
    def test_table_a1_pattern(self, tmp_path):
        rows = []
        d_by_unit = {"1": [0, 0, 0, 0], "2": [0, 0, 0, 1], "3": [0, 1, 1, 1]}
        for u, ds in d_by_unit.items():
            for t, d in enumerate(ds, start=1):
                rows.append(f"{u},{t},{float(u) + t / 10},{d}")
        write_rows(tmp_path / "a1.csv", rows)
        data = load_long_csv(tmp_path / "a1.csv", COLMAP)
        expected = np.array([[0, 0, 0, 0], [0, 0, 0, 1], [0, 1, 1, 1]], float)
        assert data.unit_ids == ("1", "2", "3")
        assert data.period_ids == (1, 2, 3, 4)
        np.testing.assert_array_equal(data.treatment, expected)
        assert data.n_covariates == 0

    def test_empty_covariate_map_gives_k0(self, tmp_path):
        write_rows(tmp_path / "f.csv", ["a,1,1.0,0", "a,2,2.0,1"])
        data = load_long_csv(tmp_path / "f.csv", dict(COLMAP, covariates=[]))
        assert data.n_covariates == 0

    def test_gap_preserves_shape_with_mask(self, tmp_path):
        rows = ["A,1,1.0,0", "A,2,1.5,0", "A,4,2.0,1",
                "B,1,0.5,0", "B,2,0.6,0", "B,3,0.7,0", "B,4,0.8,0"]
        write_rows(tmp_path / "g.csv", rows)
        data = load_long_csv(tmp_path / "g.csv", COLMAP)
        assert data.outcome.shape == (2, 4)
        i, j = data.unit_ids.index("A"), data.period_ids.index(3)
        assert not data.observed_mask[i, j]
        assert data.observed_mask.sum() == 7

    def test_duplicate_row_rejected_naming_pair(self, tmp_path):
        write_rows(tmp_path / "dup.csv", ["a,1,1.0,0", "a,1,2.0,0", "b,1,1.0,1"])
        with pytest.raises(InputError, match="'a'.*1"):
            load_long_csv(tmp_path / "dup.csv", COLMAP)

    def test_non_binary_treatment_rejected(self, tmp_path):
        write_rows(tmp_path / "nb.csv", ["a,1,1.0,2", "b,1,1.0,0"])
        with pytest.raises(InputError, match="non-binary"):
            load_long_csv(tmp_path / "nb.csv", COLMAP)

    def test_unparseable_numeric_reports_row(self, tmp_path):
        write_rows(tmp_path / "bad.csv", ["a,1,1.0,0", "a,2,oops,0"])
        with pytest.raises(InputError, match="row 3"):
            load_long_csv(tmp_path / "bad.csv", COLMAP)

    def test_missing_column_rejected(self, tmp_path):
        write_rows(tmp_path / "m.csv", ["a,1,1.0,0"], header="unit,time,y,other")
        with pytest.raises(InputError, match="d"):
            load_long_csv(tmp_path / "m.csv", COLMAP)

    def test_na_tokens_mask_cells(self, tmp_path):
        write_rows(tmp_path / "na.csv", ["a,1,NA,0", "a,2,1.0,", "b,1,1.0,0", "b,2,2.0,1"])
        data = load_long_csv(tmp_path / "na.csv", COLMAP)
        assert data.observed_mask.sum() == 2

    def test_round_trip(self, tmp_path, rng):
        data = random_panel(rng, n=5, t=4, k=2, p_missing=0.2)
        write_long_csv(data, tmp_path / "rt.csv")
        back = load_long_csv(tmp_path / "rt.csv", {
            "unit": "unit", "time": "time", "outcome": "outcome",
            "treatment": "treatment", "covariates": ["x1", "x2"]})
        assert back.unit_ids == data.unit_ids
        np.testing.assert_array_equal(back.observed_mask, data.observed_mask)
        m = data.observed_mask
        np.testing.assert_allclose(back.outcome[m], data.outcome[m])
        np.testing.assert_array_equal(back.treatment[m], data.treatment[m])
        np.testing.assert_allclose(back.covariates[m], data.covariates[m])


class TestPanelDataset:
    def test_duplicate_units_rejected(self):
        with pytest.raises(InputError, match="unique"):
            make_panel(np.zeros((2, 2)), np.zeros((2, 2)), unit_ids=["a", "a"])

    def test_non_increasing_periods_rejected(self):
        with pytest.raises(InputError, match="increasing"):
            make_panel(np.zeros((2, 2)), np.zeros((2, 2)), period_ids=[2, 1])

    def test_non_binary_treatment_rejected(self):
        with pytest.raises(InputError, match="0/1"):
            make_panel(np.zeros((2, 2)), np.full((2, 2), 0.5))

    def test_arrays_frozen(self, rng):
        data = random_panel(rng)
        with pytest.raises(ValueError):
            data.outcome[0, 0] = 1.0


class TestPreprocess:
    def test_table_a1_drops_nothing(self):
        data, info = preprocess(table_a1_panel())
        assert data.n_units == 3
        np.testing.assert_array_equal(info.treated_flag, [False, True, True])

    def test_always_treated_dropped(self, rng):
        base = random_panel(rng, n=5, t=4)
        d = base.treatment.copy()
        d[3] = 1.0
        data, info = preprocess(make_panel(base.outcome, d))
        assert data.n_units == 4
        assert "u3" not in data.unit_ids

    def test_all_control_rejected(self, rng):
        y = rng.normal(size=(4, 3))
        with pytest.raises(InputError, match="nothing to estimate"):
            preprocess(make_panel(y, np.zeros((4, 3))))

    def test_idempotent(self, rng):
        base = random_panel(rng, n=6, t=5)
        d = base.treatment.copy()
        d[2] = 1.0
        once, info1 = preprocess(make_panel(base.outcome, d))
        twice, info2 = preprocess(once)
        assert once.unit_ids == twice.unit_ids
        np.testing.assert_array_equal(info1.treated_flag, info2.treated_flag)


class TestRelativeTimeIndex:
    def test_single_onset_staggered(self):
        d = np.zeros((2, 8))
        d[1, 4:] = 1.0
        data = make_panel(np.zeros((2, 8)), d)
        data, info = preprocess(data)
        idx = relative_time_index(data, info)
        np.testing.assert_array_equal(idx.s[1], [-3, -2, -1, 0, 1, 2, 3, 4])

    def test_table_a1_indices(self):
        data, info = preprocess(table_a1_panel())
        idx = relative_time_index(data, info)
        np.testing.assert_array_equal(idx.s[1], [-2, -1, 0, 1])
        np.testing.assert_array_equal(idx.s[2], [0, 1, 2, 3])

    def test_never_treated_undefined(self):
        data, info = preprocess(table_a1_panel())
        idx = relative_time_index(data, info)
        assert np.all(~np.isfinite(idx.s[0]))

    def test_left_censored_run_undefined(self):
        # treated from the first observed period: onset unknown
        d = np.array([[1, 1, 0, 0, 1, 1]], float)
        d = np.vstack([d, np.zeros(6)])
        data = make_panel(np.zeros((2, 6)), d)
        data, info = preprocess(data)
        s = relative_time_index(data, info).s
        assert np.all(~np.isfinite(s[0, :2]))
        np.testing.assert_array_equal(s[0, 2:], [-1, 0, 1, 2])

    def test_post_exit_without_next_onset_undefined(self):
        d = np.array([[0, 1, 1, 0, 0, 0]], float)
        d = np.vstack([d, np.zeros(6)])
        data = make_panel(np.zeros((2, 6)), d)
        data, info = preprocess(data)
        s = relative_time_index(data, info).s
        np.testing.assert_array_equal(s[0, :3], [0, 1, 2])
        assert np.all(~np.isfinite(s[0, 3:]))

    def test_between_spells_cells_index_to_next_onset(self):
        d = np.array([[0, 1, 0, 0, 1, 1]], float)
        d = np.vstack([d, np.zeros(6)])
        data = make_panel(np.zeros((2, 6)), d)
        data, info = preprocess(data)
        s = relative_time_index(data, info).s
        np.testing.assert_array_equal(s[0], [0, 1, -1, 0, 1, 2])

    def test_staggered_leaves_no_treated_group_cell_undefined(self, rng):
        for _ in range(20):
            data = staggered_panel(rng, n=7, t=9)
            data, info = preprocess(data)
            idx = relative_time_index(data, info)
            group = info.treated_flag[:, None] & data.observed_mask
            assert np.isfinite(idx.s[group]).all()

    def test_s_strictly_increasing_between_onsets(self, rng):
        for _ in range(20):
            data = random_panel(rng, n=6, t=8, p_treat=0.4)
            data, info = preprocess(data)
            s = relative_time_index(data, info).s
            for i in range(data.n_units):
                row = s[i]
                finite = np.isfinite(row)
                # within any run of consecutive defined cells, s increases by 1
                for t in range(1, data.n_periods):
                    if finite[t] and finite[t - 1] and row[t] != 1:
                        assert row[t] == row[t - 1] + 1

    def test_unobserved_cell_before_onset_censors(self):
        d = np.array([[0, 0, 0, 1, 1]], float)
        d = np.vstack([d, np.zeros(5)])
        mask = np.ones((2, 5), bool)
        mask[0, 2] = False  # cell right before the onset unobserved
        data = make_panel(np.zeros((2, 5)), d, mask=mask)
        data, info = preprocess(data)
        s = relative_time_index(data, info).s
        assert np.all(~np.isfinite(s[0]))
