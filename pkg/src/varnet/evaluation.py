"""Metrics and experiment harnesses.

Metrics take a :class:`FittedRegressor` and report in original target units.
A density scored in standardized units converts back by subtracting
``log(y_std)`` per point.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Dataset, build_calibration_dataset, fit_standardizer, split_dataset
from .likelihood import gaussian_nll, student_t_nll
from .model import GaussianHeadModel, NIGParams
from .sampler import LocalityConfig, LocalitySampler, UniformSampler
from .training import (
    FittedRegressor,
    TrainConfig,
    Optimizers,
    batch_nll,
    build_graphs,
    fit_regressor,
    gradient_step,
    train_mean_warmup,
)

SPARSITY_TAU = 1e-3


# -- metrics -------------------------------------------------------------------


def point_log_likelihoods(reg: FittedRegressor, test: Dataset) -> np.ndarray:
    """Per-point predictive log density of ``test.y`` in original units."""
    p = reg.predict_standardized(test.X)
    ys = reg.scaler.transform_y(test.y)
    if isinstance(p, NIGParams):
        nll = student_t_nll(ys, p.mu, p.alpha, p.beta)
    else:
        nll = gaussian_nll(ys, p.mu, p.var)
    return -np.asarray(nll) - math.log(reg.scaler.y_std)


def test_log_likelihood(reg: FittedRegressor, test: Dataset) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    return float(np.mean(point_log_likelihoods(reg, test)))


def rmse(reg: FittedRegressor, test: Dataset) -> float:
    mu, _ = reg.predict_mean_var(test.X)
    return float(np.sqrt(np.mean((test.y - mu) ** 2)))


def calibration_error(var_true, var_est) -> float:
    """Mean absolute difference between true and estimated variances."""
    a = np.asarray(var_true, dtype=np.float64).ravel()
    b = np.asarray(var_est, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return float(np.mean(np.abs(a - b)))


def sparsity_index(grad, tau: float = SPARSITY_TAU) -> float:
    """Fraction of gradient components with magnitude at most ``tau``."""
    g = np.concatenate([np.ravel(np.asarray(x, dtype=np.float64)) for x in grad]) if isinstance(grad, (list, tuple)) else np.ravel(grad)
    if g.size == 0:
        raise ValueError("empty gradient")
    return float(np.mean(np.abs(g) <= tau))


def mean_and_se(values) -> tuple[float, float]:
    """Mean and standard error (sample std / sqrt(n)); needs at least two values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("a standard error needs at least two values")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class MetricReport:
    ll_mean: float
    ll_se: float
    rmse_mean: float
    rmse_se: float
    n_splits: int

    @classmethod
    def from_runs(cls, lls, rmses) -> "MetricReport":
        return cls(*mean_and_se(lls), *mean_and_se(rmses), len(lls))

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_splits(ds: Dataset, kind: str, cfg: TrainConfig, n_splits: int, test_fraction: float, rng: np.random.Generator) -> MetricReport:
    """Train on repeated random train/test splits and summarise test LL and RMSE."""
    lls, rmses = [], []
    for _ in range(n_splits):
        train, test = split_dataset(ds, [1.0 - test_fraction, test_fraction], rng)
        reg = fit_regressor(train, kind, cfg, rng)
        lls.append(test_log_likelihood(reg, test))
        rmses.append(rmse(reg, test))
    return MetricReport.from_runs(lls, rmses)


# -- active learning -----------------------------------------------------------


def acquire_top_variance(reg: FittedRegressor, pool: Dataset, n: int) -> np.ndarray:
    """Indices of the ``n`` pool points with the largest predictive variance; ties go to the lower index."""
    if not 0 <= n <= len(pool):
        raise ValueError(f"cannot acquire {n} points from a pool of {len(pool)}")
    _, var = reg.predict_mean_var(pool.X)
    return top_n(var, n)


def top_n(values, n: int) -> np.ndarray:
    order = np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")
    return order[:n]


@dataclass
class ActiveLearningConfig:
    rounds: int = 10
    acquisition_fraction: float = 0.01
    repeats: int = 10
    fractions: tuple = (0.2, 0.6, 0.2)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.fractions = tuple(self.fractions)
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if not 0 < self.acquisition_fraction <= 1:
            raise ValueError("acquisition_fraction must lie in (0, 1]")
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        if len(self.fractions) != 3:
            raise ValueError("fractions are (train, pool, test)")

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "acquisition_fraction": self.acquisition_fraction,
            "repeats": self.repeats,
            "fractions": list(self.fractions),
            "train": self.train.to_dict(),
        }


@dataclass
class ActiveLearningResult:
    rmse: np.ndarray
    ll: np.ndarray
    train_sizes: list[int]

    def curves(self) -> list[dict]:
        rows = []
        for r in range(self.rmse.shape[1]):
            row = {"round": r, "train_size": self.train_sizes[r]}
            col_r, col_l = self.rmse[:, r], self.ll[:, r]
            if len(col_r) >= 2:
                row["mean_rmse"], row["se_rmse"] = mean_and_se(col_r)
                row["mean_ll"], row["se_ll"] = mean_and_se(col_l)
            else:
                row.update(mean_rmse=float(col_r[0]), se_rmse=float("nan"), mean_ll=float(col_l[0]), se_ll=float("nan"))
            rows.append(row)
        return rows

    def write_csv(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write("round,mean_rmse,se_rmse,mean_ll,se_ll\n")
            for row in self.curves():
                fh.write(f"{row['round']},{row['mean_rmse']!r},{row['se_rmse']!r},{row['mean_ll']!r},{row['se_ll']!r}\n")

    def summary(self) -> dict:
        return {"train_sizes": self.train_sizes, "curves": self.curves(), "rmse": self.rmse.tolist(), "ll": self.ll.tolist()}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))


def run_active_learning(ds: Dataset, alc: ActiveLearningConfig, kind: str, rng: np.random.Generator) -> ActiveLearningResult:
    """Repeated pool-based active learning with top-variance acquisition.

    Each repeat splits the data into train, pool and test, then for every
    round trains a fresh model, scores it on test, and moves the ``n``
    highest-variance pool points into train. Round 0 is the initial model.
    """
    rmses = np.empty((alc.repeats, alc.rounds + 1))
    lls = np.empty_like(rmses)
    sizes: list[int] = []
    for rep in range(alc.repeats):
        train, pool, test = split_dataset(ds, alc.fractions, rng)
        n = max(1, int(round(alc.acquisition_fraction * len(pool))))
        if n * alc.rounds > len(pool):
            raise ValueError(f"pool of {len(pool)} cannot supply {alc.rounds} rounds of {n}")
        rep_sizes = []
        for r in range(alc.rounds + 1):
            reg = fit_regressor(train, kind, alc.train, rng)
            rmses[rep, r] = rmse(reg, test)
            lls[rep, r] = test_log_likelihood(reg, test)
            rep_sizes.append(len(train))
            if r == alc.rounds:
                break
            pick = acquire_top_variance(reg, pool, n)
            keep = np.setdiff1d(np.arange(len(pool)), pick)
            train = Dataset(np.vstack([train.X, pool.X[pick]]), np.concatenate([train.y, pool.y[pick]]), name=train.name)
            pool = pool.subset(keep)
        sizes = rep_sizes
    return ActiveLearningResult(rmses, lls, sizes)


# -- gradient sparsity study ---------------------------------------------------


@dataclass
class GradStudyResult:
    """Per-iteration sparsity indices of mean- and variance-network gradients for both samplers."""

    si_mean_locality: list[float] = field(default_factory=list)
    si_mean_uniform: list[float] = field(default_factory=list)
    si_var_locality: list[float] = field(default_factory=list)
    si_var_uniform: list[float] = field(default_factory=list)

    def averages(self) -> dict:
        return {k: float(np.mean(v)) for k, v in asdict(self).items()}

    def write_csv(self, path) -> None:
        cols = list(asdict(self))
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write("iter," + ",".join(cols) + "\n")
            for i, vals in enumerate(zip(*(getattr(self, c) for c in cols))):
                fh.write(f"{i}," + ",".join(repr(v) for v in vals) + "\n")


def gradient_sparsity_study(
    ds: Dataset,
    cfg: TrainConfig,
    rng: np.random.Generator,
    warmup_iters: int = 2500,
    study_iters: int = 1000,
    var_locality: LocalityConfig = LocalityConfig(1, 10),
    mean_locality: LocalityConfig = LocalityConfig(3, 40),
) -> GradStudyResult:
    """Compare gradient sparsity under locality and uniform mini-batches.

    A Gaussian-head network is warmed up once; two copies then run
    mean-variance split training, one with locality batches and one with
    uniform batches of the same expected size. Gradients are taken of the
    per-point mean loss (the HT total divided by N).
    """
    scaler = fit_standardizer(ds)
    data = scaler.apply(ds)
    N = len(data)
    base = GaussianHeadModel.init(data.D, rng, cfg.hidden)
    base._optimizers = Optimizers.for_model(base, cfg)
    train_mean_warmup(base, data, cfg, rng, sampler=UniformSampler(N, cfg.batch_size, rng), iters=warmup_iters)

    (mc, mg), (vc, vg) = build_graphs(data.X, [mean_locality, var_locality])
    branches = {
        "locality": (LocalitySampler(mg, mc, rng), LocalitySampler(vg, vc, rng)),
        "uniform": (UniformSampler(N, mc.psu * mc.ssu, rng), UniformSampler(N, vc.psu * vc.ssu, rng)),
    }
    out = GradStudyResult()
    for name, (mean_s, var_s) in branches.items():
        model = copy.deepcopy(base)
        opts = model._optimizers
        for i in range(2 * study_iters):
            if i % 2 == 0:
                b = mean_s()
                _, g = gradient_step(model, lambda: batch_nll(model, b, data), model.mean_params(), [opts.mean])
                getattr(out, f"si_mean_{name}").append(sparsity_index([x / N for x in g]))
            else:
                b = var_s()
                _, g = gradient_step(model, lambda: batch_nll(model, b, data), model.variance_params(), [opts.variance])
                getattr(out, f"si_var_{name}").append(sparsity_index([x / N for x in g]))
    return out


# -- variance calibration ------------------------------------------------------


def calibration_experiment(records, kind: str, cfg: TrainConfig, rng: np.random.Generator) -> float:
    """Fit on every replicate and score the variance at each key against the replicates' sample variance."""
    train = build_calibration_dataset(records, per_replicate=True)
    keys = build_calibration_dataset(records)
    reg = fit_regressor(train, kind, cfg, rng)
    _, var = reg.predict_mean_var(keys.X)
    return calibration_error(keys.true_variance, var)
