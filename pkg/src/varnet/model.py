"""Prediction heads: a Gaussian mean/variance pair and the Combined (mu, alpha, beta) model.

The Combined model optionally carries an extrapolation head that pulls the
predictive variance towards a prior level ``eta`` as an input moves away from
a set of trainable inducing points:

    v_blend = (1 - nu(delta)) * v + eta * nu(delta),  nu(d) = sigmoid(d / gamma - 6.9077)

where ``delta`` is the distance to the nearest inducing point. Because the
Combined model outputs ``(alpha, beta)`` rather than a variance, the blend acts
on the implied variance ``beta / (alpha - 1)`` with ``alpha`` held fixed, and
``beta`` is recovered as ``v_blend * (alpha - 1)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import Scaler
from .likelihood import VAR_FLOOR
from .neighbors import build_knn
from .numkit import Mlp, Tensor, kmeans, mlp_forward
from .numkit import tensor as T
from .numkit.tensor import _sigmoid, _softplus

FORMAT_VERSION = 1
# sigmoid(-NU_SHIFT) ~= 1e-3, so nu(0) is close to zero for every gamma
NU_SHIFT = 6.9077
GAMMA_INIT = 1.5
MAX_INDUCING = 500
PREDICT_CHUNK = 4096
# keeps alpha strictly above 1 when the softplus output underflows
ALPHA_FLOOR = 1e-6


def _inv_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def nu(delta, gamma):
    """Scaled and translated sigmoid in ``delta``; works on arrays or Tensors."""
    if isinstance(delta, Tensor) or isinstance(gamma, Tensor):
        return T.sigmoid(T.div(delta, gamma) - NU_SHIFT)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta < 0):
        raise ValueError("delta must be non-negative")
    if np.any(np.asarray(gamma) <= 0):
        raise ValueError("gamma must be positive")
    out = _sigmoid(delta / gamma - NU_SHIFT)
    return float(out) if out.ndim == 0 else out


def blend_variance(v_raw, delta, gamma, eta):
    """Convex combination of ``v_raw`` and ``eta`` weighted by ``nu(delta, gamma)``."""
    w = nu(delta, gamma)
    if isinstance(w, Tensor) or isinstance(v_raw, Tensor):
        return T.add(T.mul(T.sub(1.0, w), v_raw), T.mul(eta, w))
    return (1.0 - w) * v_raw + eta * w


@dataclass
class GaussianParams:
    mu: np.ndarray
    var: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return self.var


@dataclass
class NIGParams:
    mu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        """Inverse-Gamma mean ``beta / (alpha - 1)``, also the Student-t variance."""
        return self.beta / (self.alpha - 1.0)


def support_gap(X) -> float:
    """Largest distance from a distinct row of ``X`` to its nearest other distinct row."""
    X = np.unique(np.asarray(X, dtype=np.float64), axis=0)
    if len(X) < 2:
        return 0.0
    g = build_knn(X, 2)
    return float(np.max(np.linalg.norm(X[g.indices[:, 1]] - X, axis=1)))


class ExtrapolationHead:
    """Trainable inducing points plus a positive length scale ``gamma``.

    ``gamma = gamma_min + softplus(gamma_raw)`` with ``gamma_raw``
    unconstrained. ``gamma_min`` puts the sigmoid midpoint no closer than a
    given distance, normally the widest gap inside the training inputs, so
    shrinking ``gamma`` cannot blend points that lie within the data.
    """

    def __init__(self, centers, gamma: float = GAMMA_INIT, eta: float = 1.0, gamma_min: float = 0.0):
        centers = np.array(centers, dtype=np.float64, ndmin=2)
        if centers.shape[0] < 1:
            raise ValueError("need at least one inducing point")
        if gamma <= 0 or eta <= 0:
            raise ValueError("gamma and eta must be positive")
        if gamma_min < 0:
            raise ValueError("gamma_min must be non-negative")
        self.centers = Tensor(centers, requires_grad=True)
        self.gamma_min = float(gamma_min)
        self.gamma_raw = Tensor(np.array(_inv_softplus(max(gamma - gamma_min, 1e-2))), requires_grad=True)
        self.eta = float(eta)

    @classmethod
    def from_data(cls, X, rng: np.random.Generator, max_points: int = MAX_INDUCING, gamma: float = GAMMA_INIT, eta: float = 1.0):
        """Inducing points from k-means on ``X`` with ``min(max_points, N)`` clusters.

        ``gamma_min`` is set so that ``nu`` reaches one half at the widest
        nearest-neighbour gap of ``X``.
        """
        X = np.asarray(X, dtype=np.float64)
        L = min(max_points, len(X))
        centers = X.copy() if L == len(X) else kmeans(X, L, rng=rng)
        return cls(centers, gamma, eta, support_gap(X) / NU_SHIFT)

    @property
    def gamma(self) -> float:
        return self.gamma_min + float(_softplus(self.gamma_raw.data))

    def gamma_tensor(self) -> Tensor:
        return T.softplus(self.gamma_raw) + self.gamma_min

    @property
    def params(self) -> list[Tensor]:
        return [self.centers, self.gamma_raw]

    def delta(self, X) -> Tensor:
        return T.sqrt(T.min_rows(T.sq_dist(X, self.centers)))

    def blend(self, v_raw: Tensor, X) -> Tensor:
        return blend_variance(v_raw, self.delta(X), self.gamma_tensor(), self.eta)

    def delta_numpy(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        c = self.centers.data
        cc = (c * c).sum(1)
        out = np.empty(len(X))
        for s in range(0, len(X), PREDICT_CHUNK):
            x = X[s : s + PREDICT_CHUNK]
            d2 = (x * x).sum(1)[:, None] + cc[None, :] - 2.0 * (x @ c.T)
            out[s : s + PREDICT_CHUNK] = np.sqrt(np.maximum(d2.min(1), 0.0))
        return out

    def blend_numpy(self, v_raw: np.ndarray, X) -> np.ndarray:
        return blend_variance(v_raw, self.delta_numpy(X), self.gamma, self.eta)

    def set_trainable(self, flag: bool) -> None:
        for p in self.params:
            p.requires_grad = flag
            p.grad = None

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.data.tolist(),
            "gamma": self.gamma,
            "gamma_raw": float(self.gamma_raw.data),
            "gamma_min": self.gamma_min,
            "eta": self.eta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExtrapolationHead":
        head = cls(d["centers"], eta=d["eta"], gamma_min=d.get("gamma_min", 0.0))
        head.gamma_raw.data = np.array(float(d["gamma_raw"]))
        return head


def _check_input(X, D: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 and D == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] != D:
        raise ValueError(f"inputs have shape {X.shape}, model expects (N, {D})")
    return X


class GaussianHeadModel:
    """Separate mean and variance networks; variance is ``softplus(net) + VAR_FLOOR``."""

    kind = "gaussian"

    def __init__(self, mean_net: Mlp, var_net: Mlp):
        if var_net.output_activation != "softplus":
            raise ValueError("var_net needs a softplus output")
        if mean_net.n_in != var_net.n_in:
            raise ValueError("mean and variance nets disagree on input size")
        self.mean_net = mean_net
        self.var_net = var_net

    @classmethod
    def init(cls, D: int, rng: np.random.Generator, hidden: int = 50) -> "GaussianHeadModel":
        return cls(Mlp.init([D, hidden, 1], rng), Mlp.init([D, hidden, 1], rng, "softplus"))

    @property
    def D(self) -> int:
        return self.mean_net.n_in

    def mean_params(self) -> list[Tensor]:
        return list(self.mean_net.params)

    def variance_params(self) -> list[Tensor]:
        return list(self.var_net.params)

    def forward(self, X) -> tuple[Tensor, Tensor]:
        X = _check_input(X, self.D)
        mu = T.reshape(self.mean_net(X), (-1,))
        var = T.reshape(self.var_net(X), (-1,)) + VAR_FLOOR
        return mu, var

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mean_net": self.mean_net.to_dict(), "var_net": self.var_net.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianHeadModel":
        return cls(Mlp.from_dict(d["mean_net"]), Mlp.from_dict(d["var_net"]))


class CombinedModel:
    """Mean, alpha and beta networks with an optional extrapolation head.

    ``alpha = 1 + softplus(alpha_net)`` (plus a tiny floor) keeps the
    inverse-Gamma mean finite.
    """

    kind = "combined"

    def __init__(self, mean_net: Mlp, alpha_net: Mlp, beta_net: Mlp, extrap: ExtrapolationHead | None = None):
        if alpha_net.output_activation != "softplus" or beta_net.output_activation != "softplus":
            raise ValueError("alpha_net and beta_net need softplus outputs")
        if not mean_net.n_in == alpha_net.n_in == beta_net.n_in:
            raise ValueError("networks disagree on input size")
        if extrap is not None and extrap.centers.shape[1] != mean_net.n_in:
            raise ValueError("inducing points have the wrong dimension")
        self.mean_net = mean_net
        self.alpha_net = alpha_net
        self.beta_net = beta_net
        self.extrap = extrap

    @classmethod
    def init(
        cls,
        X,
        rng: np.random.Generator,
        hidden: int = 50,
        extrapolate: bool = True,
        eta: float = 1.0,
        gamma: float = GAMMA_INIT,
        max_inducing: int = MAX_INDUCING,
    ) -> "CombinedModel":
        X = np.asarray(X, dtype=np.float64)
        D = X.shape[1]
        nets = [Mlp.init([D, hidden, 1], rng), Mlp.init([D, hidden, 1], rng, "softplus"), Mlp.init([D, hidden, 1], rng, "softplus")]
        head = ExtrapolationHead.from_data(X, rng, max_inducing, gamma, eta) if extrapolate else None
        return cls(*nets, head)

    @property
    def D(self) -> int:
        return self.mean_net.n_in

    def mean_params(self) -> list[Tensor]:
        return list(self.mean_net.params)

    def variance_params(self) -> list[Tensor]:
        ps = list(self.alpha_net.params) + list(self.beta_net.params)
        if self.extrap is not None:
            ps += self.extrap.params
        return ps

    def forward(self, X) -> tuple[Tensor, Tensor, Tensor]:
        X = _check_input(X, self.D)
        mu = T.reshape(self.mean_net(X), (-1,))
        a_off = T.reshape(self.alpha_net(X), (-1,)) + ALPHA_FLOOR
        alpha = a_off + 1.0
        beta_raw = T.reshape(self.beta_net(X), (-1,)) + VAR_FLOOR * a_off
        if self.extrap is None:
            return mu, alpha, beta_raw
        v = self.extrap.blend(T.div(beta_raw, a_off), X)
        return mu, alpha, v * a_off

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "mean_net": self.mean_net.to_dict(),
            "alpha_net": self.alpha_net.to_dict(),
            "beta_net": self.beta_net.to_dict(),
            "extrap": None if self.extrap is None else self.extrap.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CombinedModel":
        head = None if d.get("extrap") is None else ExtrapolationHead.from_dict(d["extrap"])
        return cls(Mlp.from_dict(d["mean_net"]), Mlp.from_dict(d["alpha_net"]), Mlp.from_dict(d["beta_net"]), head)


def predict_gaussian(m: GaussianHeadModel, X) -> GaussianParams:
    X = _check_input(X, m.D)
    mu = mlp_forward(m.mean_net, X)[:, 0]
    var = mlp_forward(m.var_net, X)[:, 0] + VAR_FLOOR
    return GaussianParams(mu, var)


def predict_combined(m: CombinedModel, X) -> NIGParams:
    X = _check_input(X, m.D)
    mu = mlp_forward(m.mean_net, X)[:, 0]
    a_off = mlp_forward(m.alpha_net, X)[:, 0] + ALPHA_FLOOR
    beta = mlp_forward(m.beta_net, X)[:, 0] + VAR_FLOOR * a_off
    if m.extrap is not None:
        beta = m.extrap.blend_numpy(beta / a_off, X) * a_off
    return NIGParams(mu, 1.0 + a_off, beta)


def predict(m, X) -> GaussianParams | NIGParams:
    if isinstance(m, CombinedModel):
        return predict_combined(m, X)
    if isinstance(m, GaussianHeadModel):
        return predict_gaussian(m, X)
    raise TypeError(f"unknown model type {type(m).__name__}")


def model_from_dict(d: dict):
    kinds = {"gaussian": GaussianHeadModel, "combined": CombinedModel}
    if d.get("kind") not in kinds:
        raise ValueError(f"unknown model kind {d.get('kind')!r}")
    return kinds[d["kind"]].from_dict(d)


def save_snapshot(model, path, scaler: Scaler | None = None) -> None:
    doc = {"format_version": FORMAT_VERSION, "model": model.to_dict(), "scaler": None if scaler is None else scaler.to_dict()}
    Path(path).write_text(json.dumps(doc))


def load_snapshot(path):
    """Returns ``(model, scaler)``; ``scaler`` is None when none was stored."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported snapshot version {doc.get('format_version')!r}")
    scaler = None if doc.get("scaler") is None else Scaler.from_dict(doc["scaler"])
    return model_from_dict(doc["model"]), scaler
