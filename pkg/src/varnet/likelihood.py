"""Per-point negative log-likelihoods for Gaussian and Normal-Inverse-Gamma heads.

Marginalising ``sigma^2 ~ InvGamma(alpha, beta)`` out of ``N(y | mu, sigma^2)``
gives a located-scaled Student-t with ``2 alpha`` degrees of freedom and
squared scale ``beta / alpha``:

    p(y) = beta^alpha Gamma(alpha + 1/2) / (Gamma(alpha) sqrt(2 pi) (beta + (y - mu)^2 / 2)^(alpha + 1/2))

The NLL functions accept numpy arrays, floats or :class:`Tensor` inputs; with
any Tensor input the result is a Tensor that can be differentiated.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate

from .numkit import tensor as T
from .numkit.tensor import Tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
VAR_FLOOR = 1e-6


class QuadratureError(ArithmeticError):
    pass


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _wrap(out: Tensor, *inputs):
    if any(isinstance(i, Tensor) for i in inputs):
        return out
    d = out.data
    return float(d) if d.ndim == 0 else d


def gaussian_nll(y, mu, var):
    """``0.5 log(2 pi var) + (y - mu)^2 / (2 var)``, elementwise."""
    if np.any(_data(var) <= 0):
        raise ValueError("Gaussian variance must be positive")
    r2 = T.square(T.sub(y, mu))
    out = T.add(T.mul(0.5, T.log(var)), T.div(r2, T.mul(2.0, var))) + HALF_LOG_2PI
    return _wrap(out, y, mu, var)


def student_t_nll(y, mu, alpha, beta):
    """Negative log of the Normal-Inverse-Gamma marginal density, elementwise."""
    if np.any(_data(alpha) <= 0) or np.any(_data(beta) <= 0):
        raise ValueError("alpha and beta must be positive")
    a = T.as_tensor(alpha)
    b = T.as_tensor(beta)
    half_r2 = T.mul(0.5, T.square(T.sub(y, mu)))
    out = (
        -(a * T.log(b))
        - T.lgamma(a + 0.5)
        + T.lgamma(a)
        + HALF_LOG_2PI
        + (a + 0.5) * T.log(b + half_r2)
    )
    return _wrap(out, y, mu, alpha, beta)


def nig_mean_variance(alpha, beta):
    """Mean of ``InvGamma(alpha, beta)``, ``beta / (alpha - 1)``; defined for alpha > 1."""
    if np.any(_data(alpha) <= 1):
        raise ValueError("the inverse-Gamma mean requires alpha > 1")
    out = T.div(beta, T.sub(alpha, 1.0))
    return _wrap(out, alpha, beta)


def student_t_predictive_variance(alpha, beta):
    """Variance of the Student-t marginal.

    With ``2 alpha`` degrees of freedom and squared scale ``beta / alpha`` this
    is ``(beta / alpha) * 2 alpha / (2 alpha - 2) = beta / (alpha - 1)``, the
    inverse-Gamma mean.
    """
    return nig_mean_variance(alpha, beta)


def marginal_density_oracle(y, mu, alpha, beta, rtol: float = 1e-9, log: bool = False) -> float:
    """Density of ``y`` by numerically integrating the Gaussian over an inverse-Gamma variance.

    The integral is taken over the precision ``tau = 1/sigma^2``, under which
    the inverse-Gamma becomes ``Gamma(alpha, rate=beta)``. The integrand is
    rescaled by its peak value, and the range is split at the peak.
    """
    y, mu, alpha, beta = float(y), float(mu), float(alpha), float(beta)
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    c = beta + 0.5 * (y - mu) ** 2
    log_norm = alpha * math.log(beta) - math.lgamma(alpha) - HALF_LOG_2PI

    def log_integrand(tau):
        # N(y | mu, 1/tau) * Gamma(tau | alpha, beta), without the constant log_norm
        return (alpha - 0.5) * math.log(tau) - c * tau

    scale = (alpha + 0.5) / c
    peak = max(alpha - 0.5, 0.0) / c
    ref = log_integrand(peak) if peak > 0 else log_integrand(scale)

    def f(s):
        if s <= 0:
            return 0.0
        return math.exp(log_integrand(s * scale) - ref)

    split = peak / scale if peak > 0 else 1.0
    parts = []
    for lo, hi in ((0.0, split), (split, math.inf)):
        val, err = integrate.quad(f, lo, hi, epsabs=0.0, epsrel=rtol, limit=500)
        parts.append((val, err))
    total = sum(v for v, _ in parts)
    err = sum(e for _, e in parts)
    if not total > 0 or err > rtol * total * 10:
        raise QuadratureError(f"quadrature did not reach rtol={rtol}: value {total}, error estimate {err}")
    log_density = log_norm + ref + math.log(scale) + math.log(total)
    return log_density if log else math.exp(log_density)


def inverse_gamma_sample(alpha, beta, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw ``sigma^2 ~ InvGamma(alpha, beta)`` as the reciprocal of a Gamma(alpha, rate=beta) draw."""
    return 1.0 / rng.gamma(np.asarray(alpha), 1.0 / np.asarray(beta), size=size)


__all__ = [
    "HALF_LOG_2PI",
    "VAR_FLOOR",
    "QuadratureError",
    "gaussian_nll",
    "inverse_gamma_sample",
    "marginal_density_oracle",
    "nig_mean_variance",
    "student_t_nll",
    "student_t_predictive_variance",
]

