"""Loss assembly and training loops.

All losses are Horvitz-Thompson estimates of the full-data negative
log-likelihood, ``sum_j NLL_j / pi_j`` over a mini-batch. Loss traces record
that estimate divided by N, so they read as a mean NLL per point in
standardized units.

Training runs in phases:

* mean warm-up: only the mean network moves, with the variance fixed at 1;
* mean-variance split: alternating blocks that update either the mean side or
  the variance side, never both;
* joint (baseline): both networks together on uniform batches.

Each parameter group keeps one Adam state for the whole run.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Dataset, Scaler, fit_standardizer
from .likelihood import gaussian_nll, student_t_nll
from .model import CombinedModel, GaussianHeadModel, GaussianParams, NIGParams, predict
from .neighbors import NeighborGraph, build_knn
from .numkit import Adam, NonFiniteGradient, Tensor
from .numkit import tensor as T
from .sampler import MEAN_LOCALITY, VARIANCE_LOCALITY, LocalityConfig, LocalitySampler, MiniBatch, UniformSampler

GAUSSIAN = "gaussian"
STUDENT_T = "student_t"


class NonFiniteLoss(FloatingPointError):
    def __init__(self, index: int, value: float):
        super().__init__(f"non-finite NLL {value} at data index {index}")
        self.index = index
        self.value = value


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    total_iters: int = 10_000
    warmup_fraction: float = 0.5
    alternation_block: int = 1
    lr: float = 0.1
    mean_lr: float | None = None
    var_lr: float | None = None
    batch: str = "locality"
    mean_batch: str | None = None
    var_batch: str | None = None
    batch_size: int = 256
    mean_locality: LocalityConfig = MEAN_LOCALITY
    var_locality: LocalityConfig = VARIANCE_LOCALITY
    hidden: int = 50
    gamma_penalty: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.mean_locality, dict):
            self.mean_locality = LocalityConfig(**self.mean_locality)
        if isinstance(self.var_locality, dict):
            self.var_locality = LocalityConfig(**self.var_locality)
        self.validate()

    def validate(self) -> None:
        if self.total_iters < 0:
            raise ValueError("total_iters must be non-negative")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.alternation_block < 1:
            raise ValueError("alternation_block must be at least 1")
        for lr in (self.lr, self.mean_lr, self.var_lr):
            if lr is not None and lr <= 0:
                raise ValueError("learning rates must be positive")
        for b in (self.batch, self.mean_batch, self.var_batch):
            if b is not None and b not in ("locality", "uniform"):
                raise ValueError(f"batch kinds are 'locality' or 'uniform', got {b!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.hidden < 1:
            raise ValueError("hidden must be positive")
        if self.gamma_penalty < 0:
            raise ValueError("gamma_penalty must be non-negative")

    @property
    def warmup_iters(self) -> int:
        return int(round(self.warmup_fraction * self.total_iters))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_locality"] = self.mean_locality.to_dict()
        d["var_locality"] = self.var_locality.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    phases: list[str] = field(default_factory=list)
    wall_clock: float = 0.0
    snapshot: str | None = None

    def record(self, loss: float, phase: str) -> None:
        self.losses.append(loss)
        self.phases.append(phase)

    def extend(self, other: "TrainReport") -> None:
        self.losses += other.losses
        self.phases += other.phases
        self.wall_clock += other.wall_clock

    def __len__(self) -> int:
        return len(self.losses)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    def write_trace_csv(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write("iter,loss\n")
            for i, v in enumerate(self.losses):
                fh.write(f"{i},{v!r}\n")


def likelihood_of(model) -> str:
    return STUDENT_T if isinstance(model, CombinedModel) else GAUSSIAN


def point_nll(model, X, y, likelihood: str | None = None, unit_variance: bool = False) -> Tensor:
    """Per-point NLL vector as a Tensor; ``unit_variance`` scores the mean alone against sigma^2 = 1."""
    if unit_variance:
        mu = T.reshape(model.mean_net(np.asarray(X, dtype=np.float64)), (-1,))
        return gaussian_nll(y, mu, 1.0)
    likelihood = likelihood or likelihood_of(model)
    out = model.forward(X)
    if likelihood == GAUSSIAN:
        if not isinstance(model, GaussianHeadModel):
            raise ValueError("a Gaussian likelihood needs a Gaussian-head model")
        return gaussian_nll(y, *out)
    if likelihood == STUDENT_T:
        if not isinstance(model, CombinedModel):
            raise ValueError("a Student-t likelihood needs a Combined model")
        return student_t_nll(y, *out)
    raise ValueError(f"unknown likelihood {likelihood!r}")


def batch_nll(model, batch: MiniBatch, data: Dataset, likelihood: str | None = None, unit_variance: bool = False) -> Tensor:
    """Horvitz-Thompson weighted NLL ``sum_j NLL_j / pi_j`` over ``batch``."""
    idx = np.asarray(batch.indices)
    if idx.size == 0:
        raise ValueError("empty batch")
    if idx.min() < 0 or idx.max() >= len(data):
        raise IndexError(f"batch indices outside [0, {len(data)})")
    nll = point_nll(model, data.X[idx], data.y[idx], likelihood, unit_variance)
    if isinstance(nll, Tensor):
        vals = nll.data
    else:
        vals = np.asarray(nll)
        nll = Tensor(vals)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise NonFiniteLoss(int(idx[bad[0]]), float(vals[bad[0]]))
    return T.tsum(nll * np.asarray(batch.ht_weights, dtype=np.float64))


def full_nll(model, data: Dataset, likelihood: str | None = None) -> float:
    """Mean NLL over every row of ``data`` (standardized units)."""
    batch = MiniBatch(np.arange(len(data)), np.ones(len(data)))
    return float(batch_nll(model, batch, data, likelihood).data) / len(data)


# -- optimisation plumbing ----------------------------------------------------


def variance_objective(model, batch: MiniBatch, data: Dataset, gamma_penalty: float) -> Tensor:
    """Batch NLL plus ``gamma_penalty * N * gamma`` when the model has an extrapolation head.

    The penalty is per data point, matching the scale of the HT estimate.
    """
    loss = batch_nll(model, batch, data)
    head = getattr(model, "extrap", None)
    if head is None or gamma_penalty == 0:
        return loss
    return loss + head.gamma_tensor() * (gamma_penalty * len(data))


def _set_trainable(params: list[Tensor], flag: bool) -> None:
    for p in params:
        p.requires_grad = flag
        p.grad = None


@dataclass
class Optimizers:
    """One Adam state per parameter group, kept for the whole run."""

    mean: Adam
    variance: Adam

    @classmethod
    def for_model(cls, model, cfg: TrainConfig) -> "Optimizers":
        return cls(Adam(model.mean_params(), lr=cfg.mean_lr or cfg.lr), Adam(model.variance_params(), lr=cfg.var_lr or cfg.lr))


def _attach_optimizers(model, cfg: TrainConfig) -> Optimizers:
    opts = getattr(model, "_optimizers", None)
    if opts is None:
        opts = Optimizers.for_model(model, cfg)
        model._optimizers = opts
    return opts


def gradient_step(model, loss_fn, train: list[Tensor], opts: list[Adam]) -> tuple[float, list[np.ndarray]]:
    """Differentiate ``loss_fn`` with only ``train`` live and apply every optimizer in ``opts``.

    Every other model parameter is a constant for the duration of the step.
    Returns the loss value and the gradients of ``train``.
    """
    everything = model.mean_params() + model.variance_params()
    _set_trainable(everything, False)
    _set_trainable(train, True)
    try:
        loss = loss_fn()
        loss.backward()
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in train]
        for opt in opts:
            opt.step()
            opt.zero_grad()
    finally:
        _set_trainable(everything, True)
    return float(loss.data), grads


def tie_multiplicity(X) -> int:
    """Size of the largest group of identical rows."""
    _, counts = np.unique(np.asarray(X), axis=0, return_counts=True)
    return int(counts.max())


def build_graphs(X, configs: list[LocalityConfig]) -> list[tuple[LocalityConfig, NeighborGraph]]:
    """One k-NN search at the largest k; smaller neighbourhoods are prefixes of its rows.

    A neighbourhood is widened to hold the largest group of identical inputs.
    Ties go to the lower index, so a narrower row would cut every group at the
    same few members, and their reverse-membership counts (hence their HT
    weights) would differ from the rest of the group by orders of magnitude.
    """
    N = len(X)
    ties = tie_multiplicity(X)
    fitted = []
    for c in configs:
        c = c.fitted(N)
        if ties > c.neighborhood:
            c = LocalityConfig(c.psu, c.ssu, ties)
        fitted.append(c)
    k_max = max(c.neighborhood for c in fitted)
    full = build_knn(X, k_max)
    return [(c, NeighborGraph(full.indices[:, : c.neighborhood])) for c in fitted]


def _samplers(data: Dataset, cfg: TrainConfig, rng: np.random.Generator):
    """Mean-head and variance-head samplers; uniform heads draw ``cfg.batch_size`` points."""
    kinds = [cfg.mean_batch or cfg.batch, cfg.var_batch or cfg.batch]
    local = [c for c, k in zip([cfg.mean_locality, cfg.var_locality], kinds) if k == "locality"]
    graphs = iter(build_graphs(data.X, local)) if local else iter(())
    out = []
    for k in kinds:
        if k == "uniform":
            out.append(UniformSampler(len(data), cfg.batch_size, rng))
        else:
            c, g = next(graphs)
            out.append(LocalitySampler(g, c, rng))
    return tuple(out)


def _guarded(report: TrainReport, fn):
    try:
        return fn()
    except (NonFiniteLoss, NonFiniteGradient) as err:
        raise TrainingDiverged(f"training diverged after {len(report)} iterations: {err}", report) from err


# -- phases --------------------------------------------------------------------


def train_mean_warmup(model, data: Dataset, cfg: TrainConfig, rng: np.random.Generator, sampler=None, iters: int | None = None) -> TrainReport:
    """Fit the mean network against a fixed unit variance; variance-side parameters are untouched."""
    iters = cfg.warmup_iters if iters is None else iters
    report = TrainReport()
    if iters <= 0:
        return report
    sampler = sampler or _samplers(data, cfg, rng)[0]
    opts = _attach_optimizers(model, cfg)
    N = len(data)
    t0 = time.perf_counter()

    def run():
        for _ in range(iters):
            b = sampler()
            loss, _ = gradient_step(model, lambda: batch_nll(model, b, data, unit_variance=True), model.mean_params(), [opts.mean])
            report.record(loss / N, "warmup")

    _guarded(report, run)
    report.wall_clock = time.perf_counter() - t0
    return report


def train_mv_split(model, data: Dataset, cfg: TrainConfig, rng: np.random.Generator, iters: int | None = None, samplers=None) -> TrainReport:
    """Alternate blocks of mean-only and variance-only updates.

    The mean block uses the mean-head sampler, the variance block the
    variance-head sampler; for the Combined model the variance side includes
    the inducing points and ``gamma``.
    """
    iters = cfg.total_iters - cfg.warmup_iters if iters is None else iters
    report = TrainReport()
    if iters <= 0:
        return report
    mean_s, var_s = samplers or _samplers(data, cfg, rng)
    opts = _attach_optimizers(model, cfg)
    N = len(data)
    block = cfg.alternation_block
    t0 = time.perf_counter()

    def run():
        for i in range(iters):
            if (i // block) % 2 == 0:
                b = mean_s()
                loss, _ = gradient_step(model, lambda: batch_nll(model, b, data), model.mean_params(), [opts.mean])
                report.record(loss / N, "mean")
            else:
                b = var_s()
                loss, _ = gradient_step(model, lambda: variance_objective(model, b, data, cfg.gamma_penalty), model.variance_params(), [opts.variance])
                report.record(loss / N, "variance")

    _guarded(report, run)
    report.wall_clock = time.perf_counter() - t0
    return report


def train_joint(model, data: Dataset, cfg: TrainConfig, rng: np.random.Generator, iters: int | None = None, sampler=None) -> TrainReport:
    """Update mean and variance parameters together from one loss."""
    iters = cfg.total_iters - cfg.warmup_iters if iters is None else iters
    report = TrainReport()
    if iters <= 0:
        return report
    sampler = sampler or UniformSampler(len(data), cfg.batch_size, rng)
    opts = _attach_optimizers(model, cfg)
    N = len(data)
    params = model.mean_params() + model.variance_params()
    t0 = time.perf_counter()

    def run():
        for _ in range(iters):
            b = sampler()
            loss, _ = gradient_step(model, lambda: batch_nll(model, b, data), params, [opts.mean, opts.variance])
            report.record(loss / N, "joint")

    _guarded(report, run)
    report.wall_clock = time.perf_counter() - t0
    return report


def train_baseline_nn(model: GaussianHeadModel, data: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> TrainReport:
    """Mean warm-up then joint training, both on uniform batches of ``cfg.batch_size``."""
    sampler = UniformSampler(len(data), cfg.batch_size, rng)
    report = train_mean_warmup(model, data, cfg, rng, sampler=sampler)
    try:
        report.extend(train_joint(model, data, cfg, rng, sampler=sampler))
    except TrainingDiverged as err:
        report.extend(err.report)
        raise TrainingDiverged(str(err), report) from err
    return report


def train_combined(model: CombinedModel, data: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> TrainReport:
    """Mean warm-up on the mean-head sampler, then mean-variance split training."""
    samplers = _samplers(data, cfg, rng)
    report = train_mean_warmup(model, data, cfg, rng, sampler=samplers[0])
    try:
        report.extend(train_mv_split(model, data, cfg, rng, samplers=samplers))
    except TrainingDiverged as err:
        report.extend(err.report)
        raise TrainingDiverged(str(err), report) from err
    return report


# -- end-to-end regressor ------------------------------------------------------

MODEL_KINDS = ("nn", "combined")


@dataclass
class FittedRegressor:
    """A trained model with the standardizer that maps it back to data units."""

    model: object
    scaler: Scaler
    report: TrainReport

    @property
    def kind(self) -> str:
        return "combined" if isinstance(self.model, CombinedModel) else "nn"

    def predict_standardized(self, X) -> GaussianParams | NIGParams:
        return predict(self.model, self.scaler.transform_X(X))

    def predict_mean_var(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and variance in original target units."""
        p = self.predict_standardized(X)
        return self.scaler.inverse_y(p.mu), p.variance * self.scaler.y_std**2


def init_model(kind: str, X_std, rng: np.random.Generator, cfg: TrainConfig, **kwargs):
    if kind == "nn":
        return GaussianHeadModel.init(X_std.shape[1], rng, cfg.hidden)
    if kind == "combined":
        return CombinedModel.init(X_std, rng, cfg.hidden, **kwargs)
    raise ValueError(f"model kind must be one of {MODEL_KINDS}, got {kind!r}")


def fit_regressor(train: Dataset, kind: str, cfg: TrainConfig, rng: np.random.Generator | None = None, **model_kwargs) -> FittedRegressor:
    """Standardize ``train``, initialise a fresh model of ``kind`` and train it."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    scaler = fit_standardizer(train)
    data = scaler.apply(train)
    model = init_model(kind, data.X, rng, cfg, **model_kwargs)
    if kind == "nn":
        report = train_baseline_nn(model, data, cfg, rng)
    else:
        report = train_combined(model, data, cfg, rng)
    model._optimizers = None
    return FittedRegressor(model, scaler, report)
