"""Data containers, CSV ingestion, standardisation, splits and synthetic generators."""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    true_variance: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        if self.X.ndim != 2:
            raise DataError(f"X must be 2-D, got shape {self.X.shape}")
        if len(self.X) != len(self.y):
            raise DataError(f"X has {len(self.X)} rows but y has {len(self.y)}")
        if self.true_variance is not None:
            self.true_variance = np.asarray(self.true_variance, dtype=np.float64).reshape(-1)
            if len(self.true_variance) != len(self.y):
                raise DataError("true_variance length differs from y")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise DataError("dataset contains non-finite values")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        tv = None if self.true_variance is None else self.true_variance[idx]
        return Dataset(self.X[idx], self.y[idx], tv, self.name)


# -- CSV -----------------------------------------------------------------------


def load_csv(path, target_column: str | int = -1, has_header: bool = True, name: str | None = None) -> Dataset:
    """Read a comma-separated numeric table; every non-target column becomes a feature.

    ``target_column`` is a header name or a 0-based position (negative counts
    from the end). Rows are numbered from 1, not counting the header.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if has_header:
        if not rows:
            raise DataError(f"{path}: file is empty")
        header = [h.strip() for h in rows[0]]
        rows = rows[1:]
    else:
        header = [str(i) for i in range(len(rows[0]))] if rows else []
    if not rows:
        raise DataError(f"{path}: no data rows")

    width = len(header)
    if isinstance(target_column, str):
        if target_column not in header:
            raise DataError(f"{path}: target column {target_column!r} not in header {header}")
        t = header.index(target_column)
    else:
        t = target_column if target_column >= 0 else width + target_column
        if not 0 <= t < width:
            raise DataError(f"{path}: target column index {target_column} out of range for {width} columns")

    values = np.empty((len(rows), width))
    line_offset = 2 if has_header else 1
    for r, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {r + 1} (line {r + line_offset}) has {len(row)} fields, expected {width}")
        for c, cell in enumerate(row):
            try:
                values[r, c] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: row {r + 1} (line {r + line_offset}), column {header[c]!r}: non-numeric value {cell!r}"
                ) from None
    feats = [c for c in range(width) if c != t]
    return Dataset(values[:, feats], values[:, t], name=name or path.stem)


def write_csv(ds: Dataset, path, feature_names=None, target_name: str = "y") -> None:
    names = feature_names or [f"x{i}" for i in range(ds.D)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*names, target_name])
        for xr, yv in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in xr] + [repr(float(yv))])


# -- standardisation -----------------------------------------------------------


@dataclass
class Scaler:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def transform_X(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std

    def transform_y(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def inverse_X(self, Xs) -> np.ndarray:
        return np.asarray(Xs) * self.x_std + self.x_mean

    def inverse_y(self, ys) -> np.ndarray:
        return np.asarray(ys) * self.y_std + self.y_mean

    def apply(self, ds: Dataset) -> Dataset:
        tv = None if ds.true_variance is None else ds.true_variance / self.y_std**2
        return Dataset(self.transform_X(ds.X), self.transform_y(ds.y), tv, ds.name)

    def invert(self, ds: Dataset) -> Dataset:
        tv = None if ds.true_variance is None else ds.true_variance * self.y_std**2
        return Dataset(self.inverse_X(ds.X), self.inverse_y(ds.y), tv, ds.name)

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.asarray(d["x_mean"], float), np.asarray(d["x_std"], float), float(d["y_mean"]), float(d["y_std"]))


def _safe_std(a: np.ndarray, axis=None):
    s = np.std(a, axis=axis, ddof=1)
    return np.where(s > 0, s, 1.0)


def fit_standardizer(train: Dataset) -> Scaler:
    """Per-column mean and sample (N-1) standard deviation; constant columns get std 1."""
    if len(train) < 2:
        raise DataError("standardisation needs at least two rows")
    return Scaler(
        train.X.mean(axis=0),
        _safe_std(train.X, axis=0),
        float(train.y.mean()),
        float(_safe_std(train.y)),
    )


# -- synthetic generators ------------------------------------------------------


def toy_sine_targets(x, eps1, eps2) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * np.sin(x) + 0.3 * np.asarray(eps1) + 0.3 * x * np.asarray(eps2)


def toy_sine_variance(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return 0.09 + 0.09 * x * x


def gen_toy_sine(N: int, rng: np.random.Generator, noise: bool = True, low: float = 0.0, high: float = 10.0) -> Dataset:
    """``y = x sin x + 0.3 e1 + 0.3 x e2`` with x uniform on [0, 10]."""
    if N < 1:
        raise DataError("N must be at least 1")
    x = rng.uniform(low, high, size=N)
    e = rng.standard_normal(size=(2, N))
    if not noise:
        e[:] = 0.0
    return Dataset(x[:, None], toy_sine_targets(x, e[0], e[1]), toy_sine_variance(x), "toy-sine")


def two_moon_point(U, alpha1, alpha2, u) -> np.ndarray:
    """Deterministic part of the two-moon sampler for given draws (vectorised)."""
    U = np.asarray(U)
    cx = np.where(U == 1, 0.5, -0.5)
    z1 = cx + np.cos(alpha1) + u / 4.0 * np.cos(alpha2)
    z2 = np.sin(alpha1) + u / 4.0 * np.sin(alpha2)
    return np.stack([z1, z2], axis=-1)


def gen_two_moons(N: int, rng: np.random.Generator) -> np.ndarray:
    if N < 1:
        raise DataError("N must be at least 1")
    U = (rng.random(N) < 0.5).astype(np.int64)
    # upper moon angles in [0, pi], lower moon in [pi, 2 pi]
    alpha1 = rng.uniform(0.0, math.pi, size=N) + (1 - U) * math.pi
    alpha2 = rng.uniform(0.0, 2 * math.pi, size=N)
    u = rng.uniform(0.0, 1.0, size=N)
    return two_moon_point(U, alpha1, alpha2, u)


def two_moon_4d_std(Z) -> np.ndarray:
    """Noise standard deviations of the four observed coordinates, shape (N, 4)."""
    Z = np.asarray(Z, dtype=np.float64)
    z1 = Z[:, 0]
    r = np.linalg.norm(Z, axis=1)
    return np.sqrt(
        np.stack(
            [
                0.03 + 0.05 * (3.0 + z1),
                0.03 + 0.03 * r,
                0.03 + 0.05 * r,
                0.03 + 0.03 / (0.2 + r),
            ],
            axis=1,
        )
    )


def two_moon_4d_mean(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    z1, z2 = Z[:, 0], Z[:, 1]
    return np.stack([z1 - z2, z1 * z1 + 0.5 * z2, z1 * z2 - z1, z1 + z2], axis=1)


def map_two_moons_4d(Z, rng: np.random.Generator | None = None, eps=None) -> np.ndarray:
    """Map 2-D latents to the heteroscedastic 4-D observation space.

    Pass ``eps`` (shape (N, 4)) to pin the noise; otherwise it is drawn from ``rng``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != 2:
        raise DataError(f"Z must have 2 columns, got shape {Z.shape}")
    if eps is None:
        if rng is None:
            raise ValueError("either rng or eps is required")
        eps = rng.standard_normal(size=(len(Z), 4))
    return two_moon_4d_mean(Z) + np.asarray(eps) * two_moon_4d_std(Z)


@dataclass
class TwoMoonLatent:
    Z: np.ndarray
    V: np.ndarray


def gen_two_moons_4d(N: int, rng: np.random.Generator) -> TwoMoonLatent:
    Z = gen_two_moons(N, rng)
    return TwoMoonLatent(Z, map_two_moons_4d(Z, rng))


# -- calibration data ----------------------------------------------------------


def build_calibration_dataset(records, per_replicate: bool = False, name: str = "calibration") -> Dataset:
    """Turn ``(feature, replicate values)`` records into a dataset with known variance.

    ``true_variance`` is the unbiased sample variance of each key's replicates.
    By default there is one row per key with the replicate mean as target;
    ``per_replicate=True`` emits one row per replicate instead.
    """
    X, y, tv = [], [], []
    for feature, reps in records:
        reps = np.asarray(reps, dtype=np.float64)
        if reps.size < 2:
            raise DataError(f"key {feature!r} has {reps.size} replicate(s); at least 2 are needed")
        var = float(np.var(reps, ddof=1))
        feat = np.atleast_1d(np.asarray(feature, dtype=np.float64))
        if per_replicate:
            X.extend([feat] * reps.size)
            y.extend(reps.tolist())
            tv.extend([var] * reps.size)
        else:
            X.append(feat)
            y.append(float(reps.mean()))
            tv.append(var)
    if not X:
        raise DataError("no calibration records")
    return Dataset(np.vstack(X), np.asarray(y), np.asarray(tv), name)


def load_calibration_csv(path, has_header: bool = True) -> list[tuple[float, list[float]]]:
    """Read ``key,value`` rows (one per replicate) into records grouped by key, in first-seen order."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    groups: OrderedDict[float, list[float]] = OrderedDict()
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if has_header:
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")
    for r, row in enumerate(rows, start=1):
        if len(row) != 2:
            raise DataError(f"{path}: row {r} has {len(row)} fields, expected key,value")
        try:
            key, val = float(row[0]), float(row[1])
        except ValueError:
            raise DataError(f"{path}: row {r}: non-numeric key or value {row!r}") from None
        groups.setdefault(key, []).append(val)
    return list(groups.items())


def seasonal_mean(day) -> np.ndarray:
    return 10.0 * np.sin(2 * math.pi * np.asarray(day, dtype=np.float64) / 365.0)


def seasonal_std(day) -> np.ndarray:
    """Known per-day noise level of the synthetic temperature series: wide in winter, narrow in summer."""
    return 2.0 + 1.5 * np.cos(2 * math.pi * np.asarray(day, dtype=np.float64) / 365.0)


def gen_seasonal_temperature(rng: np.random.Generator, n_days: int = 365, n_years: int = 130, day_step: int = 1):
    """Synthetic stand-in for a long daily temperature record.

    Returns ``(day, [one value per year])`` records; each day's noise has
    standard deviation :func:`seasonal_std`.
    """
    days = np.arange(1, n_days + 1, day_step, dtype=np.float64)
    vals = seasonal_mean(days)[:, None] + seasonal_std(days)[:, None] * rng.standard_normal((len(days), n_years))
    return [(float(d), v.tolist()) for d, v in zip(days, vals)]


# -- splits --------------------------------------------------------------------


def split_sizes(N: int, fractions) -> list[int]:
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions):
        raise DataError("split fractions must be positive")
    total = sum(fractions)
    if total > 1 + 1e-9:
        raise DataError(f"split fractions sum to {total} > 1")
    sizes = [int(round(f * N)) for f in fractions]
    if abs(total - 1.0) <= 1e-9:
        sizes[-1] = N - sum(sizes[:-1])
    if any(s <= 0 for s in sizes):
        raise DataError(f"split of {N} rows by {fractions} leaves an empty part: {sizes}")
    return sizes


def split_indices(N: int, fractions, rng: np.random.Generator) -> list[np.ndarray]:
    sizes = split_sizes(N, fractions)
    perm = rng.permutation(N)
    bounds = np.cumsum([0] + sizes)
    return [perm[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def split_dataset(ds: Dataset, fractions, rng: np.random.Generator) -> list[Dataset]:
    return [ds.subset(idx) for idx in split_indices(len(ds), fractions, rng)]

