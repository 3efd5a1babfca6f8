import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import varnet.evaluation as evaluation
from varnet.datasets import Dataset, fit_standardizer, gen_toy_sine, split_dataset
from varnet.evaluation import (
    ActiveLearningConfig,
    ActiveLearningResult,
    GradStudyResult,
    MetricReport,
    acquire_top_variance,
    calibration_error,
    evaluate_splits,
    gradient_sparsity_study,
    mean_and_se,
    point_log_likelihoods,
    rmse,
    run_active_learning,
    sparsity_index,
    test_log_likelihood as mean_test_ll,
    top_n,
)
from varnet.likelihood import marginal_density_oracle
from varnet.model import GaussianHeadModel, predict
from varnet.training import FittedRegressor, TrainConfig, TrainReport, fit_regressor


class VarianceStub:
    """Stands in for a fitted model whose predictive variance is a fixed function of the row."""

    def __init__(self, var):
        self.var = np.asarray(var, dtype=float)

    def predict_mean_var(self, X):
        return np.zeros(len(X)), self.var[np.asarray(X[:, 0], dtype=int)]


def pool_of(n):
    return Dataset(np.arange(n, dtype=float)[:, None], np.zeros(n))


def unit_variance_regressor(ds: Dataset, seed=0) -> FittedRegressor:
    m = GaussianHeadModel.init(ds.D, np.random.default_rng(seed), hidden=6)
    for p in m.var_net.params:
        p.data = np.zeros_like(p.data)
    m.var_net.params[-1].data[:] = math.log(math.expm1(1.0 - 1e-6))
    return FittedRegressor(m, fit_standardizer(ds), TrainReport())


class TestLogLikelihood:
    def test_closed_form_exact_mean_unit_variance(self):
        ds = gen_toy_sine(40, np.random.default_rng(0))
        reg = unit_variance_regressor(ds)
        mu, _ = reg.predict_mean_var(ds.X)
        exact = Dataset(ds.X, mu)
        expected = -0.5 * math.log(2 * math.pi) - math.log(reg.scaler.y_std)
        assert mean_test_ll(reg, exact) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("shift", [0.1, -0.5, 3.0])
    def test_shifting_predictions_lowers_ll(self, shift):
        ds = gen_toy_sine(40, np.random.default_rng(0))
        reg = unit_variance_regressor(ds)
        mu, _ = reg.predict_mean_var(ds.X)
        assert mean_test_ll(reg, Dataset(ds.X, mu + shift)) < mean_test_ll(reg, Dataset(ds.X, mu))

    def test_combined_matches_quadrature_oracle(self):
        ds = gen_toy_sine(120, np.random.default_rng(1))
        train, test = split_dataset(ds, [0.8, 0.2], np.random.default_rng(2))
        reg = fit_regressor(train, "combined", TrainConfig(total_iters=300, lr=0.01), np.random.default_rng(3))
        p = reg.predict_standardized(test.X)
        ys = reg.scaler.transform_y(test.y)
        oracle = [marginal_density_oracle(y, m, a, b, log=True) for y, m, a, b in zip(ys, p.mu, p.alpha, p.beta)]
        oracle_ll = np.mean(oracle) - math.log(reg.scaler.y_std)
        assert abs(mean_test_ll(reg, test) - oracle_ll) < 1e-6

    def test_pure_and_repeatable(self):
        ds = gen_toy_sine(30, np.random.default_rng(0))
        reg = fit_regressor(ds, "nn", TrainConfig(total_iters=20, lr=0.01))
        assert point_log_likelihoods(reg, ds).tobytes() == point_log_likelihoods(reg, ds).tobytes()
        assert rmse(reg, ds) == rmse(reg, ds)

    def test_empty_test_set(self):
        ds = gen_toy_sine(30, np.random.default_rng(0))
        reg = unit_variance_regressor(ds)
        with pytest.raises(ValueError):
            mean_test_ll(reg, Dataset(np.zeros((0, 1)), np.zeros(0)))


class TestRmse:
    def test_perfect(self):
        ds = gen_toy_sine(30, np.random.default_rng(0))
        reg = unit_variance_regressor(ds)
        mu, _ = reg.predict_mean_var(ds.X)
        assert rmse(reg, Dataset(ds.X, mu)) == 0.0

    def test_constant_predictor_is_population_std(self):
        ds = gen_toy_sine(30, np.random.default_rng(0))
        reg = unit_variance_regressor(ds)
        for p in reg.model.mean_net.params:
            p.data = np.zeros_like(p.data)
        assert rmse(reg, ds) == pytest.approx(np.std(ds.y, ddof=0), rel=1e-12)

    def test_independent_recompute(self):
        ds = gen_toy_sine(50, np.random.default_rng(4))
        reg = unit_variance_regressor(ds, seed=5)
        p = predict(reg.model, reg.scaler.transform_X(ds.X))
        mu = p.mu * reg.scaler.y_std + reg.scaler.y_mean
        assert rmse(reg, ds) == pytest.approx(math.sqrt(sum((a - b) ** 2 for a, b in zip(ds.y, mu)) / len(ds)), rel=1e-12)


class TestCalibrationError:
    def test_identical(self):
        assert calibration_error([1.0, 2.0], [1.0, 2.0]) == 0.0

    @given(st.lists(st.floats(0, 100), min_size=1, max_size=20), st.floats(-5, 5))
    def test_constant_offset(self, v, c):
        assert calibration_error(v, np.asarray(v) + c) == pytest.approx(abs(c), abs=1e-9)

    def test_recompute(self):
        a, b = np.random.default_rng(0).uniform(0, 3, size=(2, 100))
        assert calibration_error(a, b) == pytest.approx(sum(abs(x - y) for x, y in zip(a, b)) / 100, rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            calibration_error([1.0], [1.0, 2.0])


class TestSparsityIndex:
    def test_zero(self):
        assert sparsity_index(np.zeros(10)) == 1.0

    def test_ones(self):
        assert sparsity_index(np.ones(10)) == 0.0

    def test_direct_count(self):
        assert sparsity_index(np.array([0.0005, 0.5, 0.0, 2.0]), tau=1e-3) == 0.5

    def test_list_of_blocks(self):
        assert sparsity_index([np.zeros((2, 2)), np.ones(4)]) == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            sparsity_index(np.zeros(0))


class TestMeanAndSe:
    def test_values(self):
        m, se = mean_and_se([1.0, 2.0, 3.0, 4.0])
        assert m == 2.5 and se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            mean_and_se([1.0])


class TestAcquisition:
    def test_whole_pool(self):
        got = acquire_top_variance(VarianceStub([3, 1, 2, 5]), pool_of(4), 4)
        assert sorted(got.tolist()) == [0, 1, 2, 3]

    def test_single_max(self):
        assert acquire_top_variance(VarianceStub([1, 5, 3]), pool_of(3), 1).tolist() == [1]

    def test_ties_go_to_lower_index(self):
        assert top_n([2.0, 7.0, 7.0, 1.0], 1).tolist() == [1]

    @given(st.lists(st.floats(0.01, 100), min_size=2, max_size=30, unique=True), st.integers(1, 5))
    def test_invariant_under_increasing_transform(self, v, n):
        n = min(n, len(v))
        v = np.asarray(v)
        base = set(top_n(v, n).tolist())
        assert set(top_n(np.log(v), n).tolist()) == base
        assert set(top_n(v**3 + 7, n).tolist()) == base

    def test_rejects_oversized(self):
        with pytest.raises(ValueError):
            acquire_top_variance(VarianceStub([1, 2]), pool_of(2), 3)


class TestActiveLearning:
    def test_bookkeeping(self, monkeypatch):
        ds = gen_toy_sine(300, np.random.default_rng(0))
        calls = []

        def fake_fit(train, kind, cfg, rng):
            calls.append(len(train))
            return unit_variance_regressor(train)

        monkeypatch.setattr(evaluation, "fit_regressor", fake_fit)
        alc = ActiveLearningConfig(rounds=4, acquisition_fraction=0.02, repeats=2)
        res = run_active_learning(ds, alc, "nn", np.random.default_rng(1))
        n0, n = 60, round(0.02 * 180)
        assert res.train_sizes == [n0 + r * n for r in range(5)]
        assert res.rmse.shape == (2, 5) and len(res.curves()) == 5
        assert calls == res.train_sizes * 2

    def test_csv(self, tmp_path):
        res = ActiveLearningResult(np.array([[1.0, 0.5], [3.0, 0.7]]), np.zeros((2, 2)), [10, 12])
        res.write_csv(tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "round,mean_rmse,se_rmse,mean_ll,se_ll" and lines[1].startswith("0,2.0,1.0,")

    def test_pool_too_small(self):
        ds = gen_toy_sine(20, np.random.default_rng(0))
        with pytest.raises(ValueError):
            run_active_learning(ds, ActiveLearningConfig(rounds=20, repeats=1), "nn", np.random.default_rng(0))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ActiveLearningConfig(rounds=0)
        with pytest.raises(ValueError):
            ActiveLearningConfig(fractions=(0.5, 0.5))

    def test_noise_free_linear_rmse_non_increasing(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, size=(300, 2))
        ds = Dataset(X, X @ np.array([1.0, -2.0]))
        alc = ActiveLearningConfig(
            rounds=3, acquisition_fraction=0.1, repeats=1, fractions=(0.04, 0.76, 0.2), train=TrainConfig(total_iters=3000, lr=1e-3)
        )
        res = run_active_learning(ds, alc, "combined", np.random.default_rng(1))
        assert np.all(np.diff(res.rmse[0]) <= 0)


class TestHarnesses:
    def test_evaluate_splits(self):
        ds = gen_toy_sine(80, np.random.default_rng(0))
        rep = evaluate_splits(ds, "nn", TrainConfig(total_iters=30, lr=0.01), 3, 0.1, np.random.default_rng(1))
        assert isinstance(rep, MetricReport) and rep.n_splits == 3 and rep.rmse_mean > 0

    def test_gradient_study_shapes(self, tmp_path):
        ds = gen_toy_sine(120, np.random.default_rng(0))
        res = gradient_sparsity_study(ds, TrainConfig(lr=0.01), np.random.default_rng(1), warmup_iters=20, study_iters=15)
        for v in res.averages().values():
            assert 0.0 <= v <= 1.0
        assert len(res.si_var_uniform) == 15
        res.write_csv(tmp_path / "g.csv")
        assert len((tmp_path / "g.csv").read_text().splitlines()) == 16

    def test_grad_study_result_averages(self):
        r = GradStudyResult([1.0, 0.0], [0.5], [0.25, 0.75], [1.0])
        assert r.averages() == {"si_mean_locality": 0.5, "si_mean_uniform": 0.5, "si_var_locality": 0.5, "si_var_uniform": 1.0}
