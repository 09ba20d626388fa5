import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cftraj.dataio import (
    Dataset, DatasetSchema, HistoryWindow, NormStats, SchemaError,
    TrajectoryRecord, impute_locf_nocb, load_dataset, positivity_check,
    rolling_origin_windows, save_dataset, split_patients, zscore_apply,
    zscore_fit,
)
from cftraj.numkit import RngStream


def make_schema(d_x=2, d_a=2, d_y=1, d_v=0):
    return DatasetSchema(
        x_names=[f"c{i}" for i in range(d_x)],
        a_names=[f"t{i}" for i in range(d_a)],
        y_names=[f"o{i}" for i in range(d_y)],
        v_names=[f"s{i}" for i in range(d_v)],
    )


def make_record(pid="p0", T=6, d_x=2, d_a=2, d_y=1, d_v=0, seed=0):
    g = np.random.default_rng(seed)
    return TrajectoryRecord(
        patient_id=pid,
        V=g.normal(size=d_v),
        X=g.normal(size=(T, d_x)),
        A=g.integers(0, 2, size=(T, d_a)).astype(float),
        Y=g.normal(size=(T, d_y)),
        mask=np.ones((T, d_x), dtype=bool),
    )


class TestRecordValidation:
    def test_ragged_lengths_rejected(self):
        with pytest.raises(SchemaError, match="ragged"):
            TrajectoryRecord("p", np.zeros(0), np.zeros((3, 2)),
                             np.zeros((4, 2)), np.zeros((3, 1)),
                             np.ones((3, 2), dtype=bool))

    def test_non_binary_treatment_rejected(self):
        A = np.zeros((3, 2))
        A[1, 0] = 2.0
        with pytest.raises(SchemaError, match="0/1"):
            TrajectoryRecord("p", np.zeros(0), np.zeros((3, 2)), A,
                             np.zeros((3, 1)), np.ones((3, 2), dtype=bool))


class TestFileRoundTrip:
    def test_save_load_structural_equality(self, tmp_path):
        ds = Dataset([make_record(f"p{i}", seed=i) for i in range(4)], make_schema())
        save_dataset(ds, str(tmp_path / "d"))
        loaded = load_dataset(str(tmp_path / "d"))
        assert loaded.patient_ids() == ds.patient_ids()
        for a, b in zip(ds.records, loaded.records):
            np.testing.assert_array_equal(a.X, b.X)
            np.testing.assert_array_equal(a.A, b.A)
            np.testing.assert_array_equal(a.Y, b.Y)
            np.testing.assert_array_equal(a.mask, b.mask)

    def test_missing_cells_round_trip(self, tmp_path):
        rec = make_record(T=4)
        rec.mask[2, 1] = False
        rec.X[2, 1] = np.nan
        ds = Dataset([rec], make_schema())
        save_dataset(ds, str(tmp_path / "d"))
        loaded = load_dataset(str(tmp_path / "d"))
        assert not loaded.records[0].mask[2, 1]
        np.testing.assert_array_equal(loaded.records[0].mask[:2], True)
        np.testing.assert_array_equal(loaded.records[0].X[3], rec.X[3])

    def test_bad_treatment_value_locates_row(self, tmp_path):
        ds = Dataset([make_record(T=3)], make_schema())
        save_dataset(ds, str(tmp_path / "d"))
        csv_path = tmp_path / "d.csv"
        lines = csv_path.read_text().splitlines()
        cols = lines[0].split(",")
        j = cols.index("a_t0")
        row = lines[2].split(",")
        row[j] = "2"
        lines[2] = ",".join(row)
        csv_path.write_text("\n".join(lines) + "\n")
        with pytest.raises(SchemaError):
            load_dataset(str(tmp_path / "d"))

    def test_empty_dataset_valid(self, tmp_path):
        ds = Dataset([], make_schema())
        save_dataset(ds, str(tmp_path / "d"))
        loaded = load_dataset(str(tmp_path / "d"))
        assert loaded.records == []
        assert loaded.schema == ds.schema


class TestImputation:
    def _record_with_x(self, col):
        T = len(col)
        X = np.array(col, dtype=float).reshape(T, 1)
        mask = ~np.isnan(X)
        return TrajectoryRecord("p", np.zeros(0), X, np.zeros((T, 1)),
                                np.zeros((T, 1)), mask)

    def test_fully_observed_unchanged(self):
        rec = self._record_with_x([1.0, 2.0, 3.0])
        out = impute_locf_nocb(rec)
        np.testing.assert_array_equal(out.X, rec.X)
        assert out.mask.all()

    def test_leading_gap_filled_backward(self):
        out = impute_locf_nocb(self._record_with_x([np.nan, 5.0, np.nan, 7.0]))
        np.testing.assert_array_equal(out.X.ravel(), [5.0, 5.0, 5.0, 7.0])

    def test_interior_gap_filled_forward(self):
        out = impute_locf_nocb(self._record_with_x([1.0, np.nan, np.nan, 4.0]))
        np.testing.assert_array_equal(out.X.ravel(), [1.0, 1.0, 1.0, 4.0])

    def test_original_mask_retained_for_audit(self):
        rec = self._record_with_x([np.nan, 5.0])
        out = impute_locf_nocb(rec)
        assert not out.mask[0, 0] and out.mask[1, 0]

    def test_fully_missing_feature_names_it(self):
        with pytest.raises(ValueError, match="column 0"):
            impute_locf_nocb(self._record_with_x([np.nan, np.nan]))


class TestZScore:
    def _dataset(self, values):
        recs = []
        for i, v in enumerate(values):
            T = len(v)
            recs.append(TrajectoryRecord(
                f"p{i}", np.zeros(0), np.array(v, float).reshape(T, 1),
                np.zeros((T, 1)), np.ones((T, 1)), np.ones((T, 1), dtype=bool)))
        return Dataset(recs, make_schema(d_x=1, d_a=1, d_y=1))

    def test_two_point_feature(self):
        ds = self._dataset([[1.0, 3.0]])
        stats = zscore_fit(ds)
        assert stats.mean["x_c0"] == pytest.approx(2.0)
        assert stats.std["x_c0"] == pytest.approx(1.0)  # population sigma
        out = zscore_apply(ds, stats)
        np.testing.assert_allclose(out.records[0].X.ravel(), [-1.0, 1.0])

    def test_constant_feature_inert(self):
        ds = self._dataset([[4.0, 4.0, 4.0]])
        stats = zscore_fit(ds)
        assert stats.std["x_c0"] == 1.0
        out = zscore_apply(ds, stats)
        np.testing.assert_array_equal(out.records[0].X, np.zeros((3, 1)))

    def test_apply_invert_round_trip(self):
        ds = self._dataset([[1.0, 5.0, -2.0], [0.5, 2.5]])
        stats = zscore_fit(ds)
        back = zscore_apply(zscore_apply(ds, stats), stats, invert=True)
        for a, b in zip(ds.records, back.records):
            np.testing.assert_allclose(a.X, b.X, atol=1e-12)

    def test_train_split_standardized(self, splits):
        train_ds, _, _ = splits
        pooled = np.concatenate([r.Y[:, 0] for r in train_ds.records])
        assert abs(pooled.mean()) < 1e-9
        assert abs(pooled.std() - 1.0) < 1e-9

    def test_unknown_feature_in_stats_rejected(self):
        ds = self._dataset([[1.0, 3.0]])
        stats = NormStats(mean={"x_other": 0.0}, std={"x_other": 1.0})
        with pytest.raises(SchemaError, match="x_other"):
            zscore_apply(ds, stats)


class TestWindows:
    def test_counts_for_t10_tau3(self):
        rec = make_record(T=10)
        wins = rolling_origin_windows(rec, tau_max=3, t_min=1)
        assert len(wins) == 7

    def test_too_short_gives_empty(self):
        assert rolling_origin_windows(make_record(T=4), tau_max=6) == []

    def test_tau1_gives_t_minus_one(self):
        assert len(rolling_origin_windows(make_record(T=9), tau_max=1)) == 8

    def test_no_future_leakage(self):
        rec = make_record(T=10, seed=1)
        w = HistoryWindow(rec, origin=4, tau_max=3)
        X0, A0, Y0, _ = [a.copy() for a in w.history()]
        rec.X[5:] += 100.0
        rec.Y[5:] -= 50.0
        rec.A[5:] = 0.0
        X1, A1, Y1, _ = w.history()
        np.testing.assert_array_equal(X0, X1)
        np.testing.assert_array_equal(A0, A1)
        np.testing.assert_array_equal(Y0, Y1)

    def test_treatments_shifted_by_one(self):
        rec = make_record(T=6, seed=2)
        w = HistoryWindow(rec, origin=3, tau_max=2)
        _, A_prev, _, _ = w.history()
        np.testing.assert_array_equal(A_prev[0], np.zeros(rec.A.shape[1]))
        np.testing.assert_array_equal(A_prev[1:], rec.A[:3])

    def test_window_bounds_validated(self):
        with pytest.raises(ValueError):
            HistoryWindow(make_record(T=5), origin=3, tau_max=3)


class TestSplits:
    def _dataset(self, n):
        return Dataset([make_record(f"p{i}", seed=i) for i in range(n)], make_schema())

    def test_exact_70_15_15(self):
        tr, va, te = split_patients(self._dataset(100), (0.7, 0.15, 0.15), RngStream(0, 0))
        assert (len(tr.records), len(va.records), len(te.records)) == (70, 15, 15)

    def test_deterministic_under_seed(self):
        ds = self._dataset(30)
        a = split_patients(ds, (0.7, 0.15, 0.15), RngStream(4, 0))
        b = split_patients(ds, (0.7, 0.15, 0.15), RngStream(4, 0))
        assert a[0].patient_ids() == b[0].patient_ids()

    @given(n=st.integers(3, 60), seed=st.integers(0, 1000))
    @settings(max_examples=20, deadline=None)
    def test_partition_property(self, n, seed):
        ds = self._dataset(n)
        tr, va, te = split_patients(ds, (0.7, 0.15, 0.15), RngStream(seed, 0))
        ids = [set(s.patient_ids()) for s in (tr, va, te)]
        assert ids[0] | ids[1] | ids[2] == set(ds.patient_ids())
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])

    def test_bad_ratios_rejected(self):
        with pytest.raises(ValueError):
            split_patients(self._dataset(10), (0.5, 0.2, 0.2), RngStream(0, 0))


class TestPositivity:
    def test_zero_support_arm_flagged(self):
        recs = []
        for i in range(3):
            r = make_record(f"p{i}", seed=i)
            r.A[:, 1] = 0.0   # nobody ever receives the second treatment
            recs.append(r)
        report = positivity_check(Dataset(recs, make_schema()))
        assert (0, 1) in report.zero_support and (1, 1) in report.zero_support
        assert not report.ok

    def test_unconfounded_cohort_near_uniform_arms(self, sim_dataset):
        # gamma=1 cohort is mildly confounded; use a gamma=0 cohort instead
        from cftraj.tumorsim import SimCohortConfig, cohort_to_dataset, simulate_cohort
        ds = cohort_to_dataset(simulate_cohort(SimCohortConfig(n_patients=300, gamma=0.0, seed=2)))
        report = positivity_check(ds)
        for arm, count in report.arm_counts.items():
            assert abs(count / report.total_steps - 0.25) < 0.03

    def test_empty_dataset(self):
        report = positivity_check(Dataset([], make_schema()))
        assert report.total_steps == 0
        assert report.zero_support == [] and report.low_support == []
