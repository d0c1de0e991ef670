"""Closed-form densities, derivatives and samplers for the conditional families.

Everything here is a pure function of numpy arrays.  Vector arguments may
carry leading batch axes; ``*_rows`` helpers reduce over the last axis only
so that one value per datapoint is returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erfc

from .errors import DomainError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)
SQRT_2 = math.sqrt(2.0)
SQRT_2PI = math.sqrt(2.0 * math.pi)

#: Bernoulli probabilities are clamped into [PROB_FLOOR, 1 - PROB_FLOOR].
PROB_FLOOR = 1e-7

NONLINEARITIES = ("tanh", "sigmoid", "none")


@dataclass(frozen=True)
class GaussianParams:
    mean: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.sigma) <= 0):
            raise DomainError("sigma must be strictly positive")


@dataclass(frozen=True)
class AffineMap:
    """``nonlinearity(sum_i W_i @ v_i + b)`` with one weight matrix per parent."""

    weights: tuple
    bias: np.ndarray
    nonlinearity: str = "tanh"

    def __post_init__(self):
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        out = np.shape(self.bias)[0]
        for w in self.weights:
            if np.shape(w)[0] != out:
                raise ShapeError("weight rows must match the bias length")


def sigmoid(a):
    a = np.asarray(a, dtype=float)
    # exp(-|a|) never overflows
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activate(pre, nonlinearity):
    if nonlinearity == "tanh":
        return np.tanh(pre)
    if nonlinearity == "sigmoid":
        return sigmoid(pre)
    if nonlinearity == "none":
        return pre
    raise ValueError(f"unknown nonlinearity {nonlinearity!r}")


def activation_grad(out, nonlinearity):
    """Derivative of the nonlinearity expressed through its output."""
    if nonlinearity == "tanh":
        return 1.0 - out * out
    if nonlinearity == "sigmoid":
        return out * (1.0 - out)
    return np.ones_like(out)


def affine_preactivation(weights: Sequence[np.ndarray], bias, parent_values):
    pre = bias
    for w, v in zip(weights, parent_values):
        pre = pre + v @ np.asarray(w).T
    return pre


def apply_affine(m: AffineMap, parent_values):
    """Evaluate the affine map and its nonlinearity.

    ``parent_values`` holds one array per weight matrix, either a single
    vector or an ``(M, parent_dim)`` batch.
    """
    if len(parent_values) != len(m.weights):
        raise ValueError("need one parent value per weight matrix")
    pre = affine_preactivation(m.weights, np.asarray(m.bias, dtype=float),
                               [np.asarray(v, dtype=float) for v in parent_values])
    return activate(pre, m.nonlinearity)


# ---------------------------------------------------------------- Gaussian


def gaussian_elementwise(x, mean, log_sigma):
    """Per-element Gaussian log-density parameterized by ``log sigma``."""
    r = (x - mean) * np.exp(-log_sigma)
    return -0.5 * LOG_2PI - log_sigma - 0.5 * r * r


def gaussian_rows(x, mean, log_sigma):
    return np.sum(gaussian_elementwise(x, mean, log_sigma), axis=-1)


def gaussian_logpdf(x, p: GaussianParams) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sum(gaussian_elementwise(x, np.asarray(p.mean, dtype=float),
                                             np.log(np.asarray(p.sigma, dtype=float)))))


def gaussian_logpdf_grad(x, p: GaussianParams):
    """Return ``(d/dx, d/dmean, d/dsigma)`` of :func:`gaussian_logpdf`."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(p.mean, dtype=float)
    sigma = np.asarray(p.sigma, dtype=float)
    diff = x - mean
    dx = -diff / sigma**2
    dsigma = -1.0 / sigma + diff**2 / sigma**3
    return dx, -dx, dsigma


def gaussian_sample(mean, sigma, rng: np.random.Generator):
    mean = np.asarray(mean, dtype=float)
    return mean + np.asarray(sigma, dtype=float) * rng.standard_normal(mean.shape)


# --------------------------------------------------------------- Bernoulli


def clamp_probability(a):
    return np.clip(a, PROB_FLOOR, 1.0 - PROB_FLOOR)


def bernoulli_elementwise(x, a):
    a = clamp_probability(a)
    return x * np.log(a) + (1.0 - x) * np.log1p(-a)


def bernoulli_rows(x, a):
    return np.sum(bernoulli_elementwise(x, a), axis=-1)


def bernoulli_logpmf(x, a) -> float:
    return float(np.sum(bernoulli_elementwise(np.asarray(x, dtype=float),
                                              np.asarray(a, dtype=float))))


def bernoulli_logpmf_grad(x, a):
    """Derivative with respect to ``a``; zero where the clamp is active."""
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    ac = clamp_probability(a)
    g = x / ac - (1.0 - x) / (1.0 - ac)
    return np.where(ac == a, g, 0.0)


def bernoulli_sample(a, rng: np.random.Generator):
    a = np.asarray(a, dtype=float)
    return (rng.random(a.shape) < a).astype(float)


# ------------------------------------------------- standard normal CDF pair


def gaussian_pdf(z):
    z = np.asarray(z, dtype=float)
    return np.exp(-0.5 * z * z) / SQRT_2PI


def gaussian_cdf(z):
    return 0.5 * erfc(-np.asarray(z, dtype=float) / SQRT_2)


# Rational approximation of the normal quantile (P. J. Acklam, 2003),
# relative error below 1.15e-9 before refinement.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408361507170e00)
_P_LOW = 0.02425


def _lower_half_quantile(p):
    """Quantile for ``0 < p <= 0.5``, refined by one Newton step."""
    x = np.empty_like(p)
    tail = p < _P_LOW
    if np.any(tail):
        q = np.sqrt(-2.0 * np.log(p[tail]))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        x[tail] = num / den
    mid = ~tail
    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        x[mid] = num / den
    # Newton on Phi(x) - p = 0; erfc keeps Phi accurate deep in the lower tail
    x = x - (gaussian_cdf(x) - p) / gaussian_pdf(x)
    return x


def gaussian_inverse_cdf(u):
    """Standard normal quantile function.

    Accepts a scalar or array with every entry strictly inside (0, 1);
    raises :class:`DomainError` otherwise.  Upper-half inputs are mapped
    through ``1 - u`` so the result is antisymmetric about 0.5.
    """
    scalar = np.ndim(u) == 0
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if not np.all((u > 0.0) & (u < 1.0)):
        raise DomainError("inverse CDF argument must lie strictly inside (0, 1)")
    upper = u > 0.5
    p = np.where(upper, 1.0 - u, u)
    z = _lower_half_quantile(p)
    z = np.where(upper, -z, z)
    z[u == 0.5] = 0.0
    return float(z[0]) if scalar else z


def gaussian_inverse_cdf_grad(u):
    """d/du of the quantile function, ``1 / phi(z)``."""
    return 1.0 / gaussian_pdf(gaussian_inverse_cdf(u))
