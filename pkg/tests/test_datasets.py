import math

import numpy as np
import pytest

from varnet.datasets import (
    DataError,
    Dataset,
    build_calibration_dataset,
    fit_standardizer,
    gen_seasonal_temperature,
    gen_toy_sine,
    gen_two_moons,
    load_calibration_csv,
    load_csv,
    map_two_moons_4d,
    seasonal_std,
    split_dataset,
    split_indices,
    toy_sine_targets,
    two_moon_point,
    write_csv,
)


class TestLoadCsv:
    def test_three_rows_with_header(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b,y\n1,2,3\n4,5,6\n7,8,9\n")
        ds = load_csv(p, "y")
        assert ds.D == 2 and len(ds) == 3
        assert ds.X.tolist() == [[1, 2], [4, 5], [7, 8]] and ds.y.tolist() == [3, 6, 9]

    def test_target_in_middle_keeps_feature_order(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,y,b\n1,2,3\n")
        ds = load_csv(p, "y")
        assert ds.X.tolist() == [[1, 3]] and ds.y.tolist() == [2]

    def test_no_header_positional_target(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,2\n3,4\n")
        ds = load_csv(p, -1, has_header=False)
        assert ds.y.tolist() == [2, 4]

    def test_non_numeric_cell_names_row(self, tmp_path):
        p = tmp_path / "d.csv"
        rows = ["a,y"] + [f"{i},{i}" for i in range(6)] + ["oops,7"] + ["8,8"]
        p.write_text("\n".join(rows) + "\n")
        with pytest.raises(DataError, match="row 7") as exc:
            load_csv(p, "y")
        assert "'a'" in str(exc.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="no such file"):
            load_csv(tmp_path / "nope.csv", "y")

    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("")
        with pytest.raises(DataError, match="empty"):
            load_csv(p, "y")

    def test_missing_target(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(DataError, match="target column"):
            load_csv(p, "y")

    def test_round_trip_bit_equal(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = Dataset(rng.normal(size=(40, 5)) * 10 ** rng.uniform(-8, 8, size=(40, 5)), rng.normal(size=40))
        p = tmp_path / "rt.csv"
        write_csv(ds, p)
        back = load_csv(p, "y")
        assert back.X.tobytes() == ds.X.tobytes() and back.y.tobytes() == ds.y.tobytes()

    def test_boston_fixture(self, boston_path):
        ds = load_csv(boston_path, "MEDV")
        assert ds.X.shape == (506, 13)


class TestStandardizer:
    def test_constant_column(self):
        ds = Dataset(np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]), np.array([1.0, 2.0, 4.0]))
        sc = fit_standardizer(ds)
        assert sc.x_std[1] == 1.0
        assert np.all(sc.apply(ds).X[:, 1] == 0.0)

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        ds = Dataset(rng.normal(3, 7, size=(100, 4)), rng.normal(-2, 0.1, size=100), rng.uniform(size=100))
        sc = fit_standardizer(ds)
        back = sc.invert(sc.apply(ds))
        assert np.max(np.abs(back.X - ds.X)) < 1e-12
        assert np.max(np.abs(back.y - ds.y)) < 1e-12
        assert np.max(np.abs(back.true_variance - ds.true_variance)) < 1e-12

    def test_standardized_moments(self):
        rng = np.random.default_rng(2)
        ds = Dataset(rng.normal(3, 7, size=(200, 3)), rng.normal(5, 2, size=200))
        s = fit_standardizer(ds).apply(ds)
        np.testing.assert_allclose(s.X.mean(0), 0, atol=1e-12)
        np.testing.assert_allclose(s.X.std(0, ddof=1), 1, atol=1e-12)
        np.testing.assert_allclose(s.y.std(ddof=1), 1, atol=1e-12)

    def test_two_point_targets_sample_std(self):
        ds = Dataset(np.array([[0.0], [1.0]]), np.array([0.0, 2.0]))
        s = fit_standardizer(ds).apply(ds)
        # sample std of [0, 2] is sqrt(2)
        np.testing.assert_allclose(s.y, [-1 / math.sqrt(2), 1 / math.sqrt(2)], atol=1e-15)

    def test_needs_two_rows(self):
        with pytest.raises(DataError):
            fit_standardizer(Dataset(np.zeros((1, 1)), np.zeros(1)))


class TestToySine:
    def test_noise_free_point(self):
        assert abs(toy_sine_targets(math.pi, 0.0, 0.0)) < 1e-15

    def test_noise_disabled_reproduces_curve(self):
        ds = gen_toy_sine(100, np.random.default_rng(0), noise=False)
        x = ds.X[:, 0]
        assert np.array_equal(ds.y, x * np.sin(x))

    def test_support(self):
        ds = gen_toy_sine(10_000, np.random.default_rng(1))
        assert ds.X.min() >= 0 and ds.X.max() <= 10 and ds.D == 1

    def test_heteroscedastic(self):
        ds = gen_toy_sine(100_000, np.random.default_rng(2))
        x = ds.X[:, 0]
        resid = ds.y - x * np.sin(x)
        assert resid[x >= 9].var() > resid[x <= 1].var()
        assert ds.y[x >= 9].var() > ds.y[x <= 1].var()

    def test_deterministic(self):
        a = gen_toy_sine(50, np.random.default_rng(7))
        b = gen_toy_sine(50, np.random.default_rng(7))
        assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()


class TestTwoMoons:
    def test_pinned_upper(self):
        np.testing.assert_allclose(two_moon_point(1, 0.0, 1.234, 0.0), [1.5, 0.0])

    def test_pinned_lower(self):
        np.testing.assert_allclose(two_moon_point(0, math.pi, 0.3, 0.0), [-1.5, 0.0], atol=1e-15)

    def test_within_jitter_of_unit_circle(self):
        Z = gen_two_moons(100_000, np.random.default_rng(0))
        d_up = np.abs(np.linalg.norm(Z - [0.5, 0.0], axis=1) - 1.0)
        d_lo = np.abs(np.linalg.norm(Z - [-0.5, 0.0], axis=1) - 1.0)
        assert np.all(np.minimum(d_up, d_lo) <= 0.25 + 1e-12)

    def test_both_branches_present(self):
        Z = gen_two_moons(2000, np.random.default_rng(1))
        frac_upper = np.mean(Z[:, 1] > 0.25)
        assert 0.4 < frac_upper < 0.6

    def test_map_noise_free(self):
        v = map_two_moons_4d(np.array([[1.0, 2.0], [0.0, 0.0]]), eps=np.zeros((2, 4)))
        assert v.tolist() == [[-1.0, 2.0, 1.0, 3.0], [0.0, 0.0, 0.0, 0.0]]

    def test_map_rejects_wrong_shape(self):
        with pytest.raises(DataError):
            map_two_moons_4d(np.zeros((3, 3)), eps=np.zeros((3, 4)))

    def test_map_noise_std(self):
        n = 100_000
        Z = np.tile([1.0, 0.0], (n, 1))
        V = map_two_moons_4d(Z, np.random.default_rng(3))
        r = 1.0
        expected = np.sqrt([0.03 + 0.05 * 4, 0.03 + 0.03 * r, 0.03 + 0.05 * r, 0.03 + 0.03 / (0.2 + r)])
        sd = V.std(0, ddof=1)
        # standard error of a sample std is about sd / sqrt(2(n-1))
        se = expected / math.sqrt(2 * (n - 1))
        assert np.all(np.abs(sd - expected) < 3 * se)
        assert abs(sd[0] - math.sqrt(0.23)) < 3 * se[0]


class TestCalibration:
    def test_two_replicates(self):
        ds = build_calibration_dataset([(1.0, [1.0, 3.0])])
        assert ds.true_variance.tolist() == [2.0] and ds.y.tolist() == [2.0]

    def test_identical_replicates(self):
        ds = build_calibration_dataset([(1.0, [4.0, 4.0, 4.0])])
        assert ds.true_variance.tolist() == [0.0]

    def test_single_replicate_rejected(self):
        with pytest.raises(DataError):
            build_calibration_dataset([(1.0, [1.0, 3.0]), (2.0, [5.0])])

    def test_per_replicate_rows(self):
        ds = build_calibration_dataset([(1.0, [1.0, 3.0]), (2.0, [0.0, 0.0, 3.0])], per_replicate=True)
        assert len(ds) == 5 and ds.true_variance.tolist() == [2.0, 2.0, 3.0, 3.0, 3.0]

    def test_synthetic_seasonal_recovers_variance(self):
        n_years = 400
        recs = gen_seasonal_temperature(np.random.default_rng(0), n_years=n_years, day_step=5)
        ds = build_calibration_dataset(recs)
        true = seasonal_std(ds.X[:, 0]) ** 2
        # the sample variance of n Gaussian draws has standard error sigma^2 sqrt(2/(n-1))
        se = true * math.sqrt(2 / (n_years - 1))
        z = (ds.true_variance - true) / se
        assert np.all(np.abs(z) < 4.5)
        assert abs(z.mean()) < 3 / math.sqrt(len(z))

    def test_csv_loader(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("key,value\n1,10\n2,5\n1,12\n2,7\n1,11\n")
        recs = load_calibration_csv(p)
        assert recs == [(1.0, [10.0, 12.0, 11.0]), (2.0, [5.0, 7.0])]
        ds = build_calibration_dataset(recs)
        assert ds.true_variance.tolist() == [1.0, 2.0]


class TestSplit:
    def test_sizes(self):
        parts = split_indices(10, (0.2, 0.6, 0.2), np.random.default_rng(0))
        assert [len(p) for p in parts] == [2, 6, 2]

    def test_partition(self):
        parts = split_indices(101, (0.2, 0.6, 0.2), np.random.default_rng(0))
        allidx = np.concatenate(parts)
        assert sorted(allidx.tolist()) == list(range(101))

    def test_deterministic(self):
        a = split_indices(50, (0.9, 0.1), np.random.default_rng(3))
        b = split_indices(50, (0.9, 0.1), np.random.default_rng(3))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_empty_part_rejected(self):
        with pytest.raises(DataError):
            split_indices(3, (0.9, 0.1), np.random.default_rng(0))

    def test_bad_fractions(self):
        with pytest.raises(DataError):
            split_indices(10, (0.7, 0.7), np.random.default_rng(0))
        with pytest.raises(DataError):
            split_indices(10, (0.5, -0.1), np.random.default_rng(0))

    def test_split_dataset_carries_rows(self):
        ds = Dataset(np.arange(20.0)[:, None], np.arange(20.0) * 2)
        tr, te = split_dataset(ds, (0.75, 0.25), np.random.default_rng(1))
        assert len(tr) == 15 and len(te) == 5
        assert np.array_equal(tr.y, tr.X[:, 0] * 2)
