"""Node distribution families and the activations they induce.

Each family fixes a feature function ``T``, a conditional density
``f(T(x), e)`` given the preactivation ``e``, and the expected-feature map
``g(e) = E_f[T(X)]`` that feed-forward propagates.

Shapes: preactivations carry the feature dimension on the last axis, so a
scalar family takes ``e`` of shape ``(..., 1)`` (any shape works, it is
elementwise) and a multilabel family takes ``(..., c)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import erfc

SOFTPLUS_STD = 1.776091849725427
"""Constant std for which a non-leaky rectified Gaussian mimics softplus."""

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DomainError(ValueError):
    """A node value lies outside the support of its distribution."""


class UnsupportedDistribution(TypeError):
    """The operation is not defined for this distribution family."""


def norm_cdf(x):
    return 0.5 * erfc(-np.asarray(x, dtype=float) / _SQRT2)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _check_finite(e):
    e = np.asarray(e, dtype=float)
    if not np.all(np.isfinite(e)):
        raise FloatingPointError("preactivation contains non-finite values")
    return e


@dataclass(frozen=True)
class Binary:
    """Two-valued node taking ``alpha`` or ``beta``.

    ``{0, 1}`` gives the sigmoid, ``{-1, 1}`` gives tanh.
    """

    alpha: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha == self.beta:
            raise ValueError("Binary node needs alpha != beta")

    feature_dim = 1
    discrete = True

    @property
    def n_states(self) -> int:
        return 2

    def states(self) -> np.ndarray:
        return np.array([self.alpha, self.beta], dtype=float)

    def features(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all((x == self.alpha) | (x == self.beta)):
            raise DomainError(f"value not in {{{self.alpha}, {self.beta}}}")
        return x[..., None]

    def log_prob_states(self, e):
        """Log-probabilities of ``(alpha, beta)`` given ``e`` of shape ``(..., 1)``."""
        a = (self.beta - self.alpha) * np.asarray(e, dtype=float)[..., 0]
        # log sigma(-a), log sigma(a)
        return np.stack([-np.logaddexp(0.0, a), -np.logaddexp(0.0, -a)], axis=-1)

    def mean(self, e):
        half = 0.5 * (self.beta - self.alpha)
        return half * np.tanh(half * _check_finite(e)) + 0.5 * (self.alpha + self.beta)

    def derivative(self, e):
        half = 0.5 * (self.beta - self.alpha)
        t = np.tanh(half * np.asarray(e, dtype=float))
        return half * half * (1.0 - t * t)

    def jacobian(self, e):
        return self.derivative(e)[..., None]

    def vjp(self, e, grad, q=None):
        return self.derivative(e) * grad

    def sample(self, e, rng):
        e = np.asarray(e, dtype=float)[..., 0]
        p_beta = 0.5 * (1.0 + np.tanh(0.5 * (self.beta - self.alpha) * e))
        hit = rng.random(e.shape) < p_beta
        return np.where(hit, self.beta, self.alpha)


@dataclass(frozen=True)
class Multilabel:
    """Categorical node over labels ``1..c`` with one-hot indicator features."""

    c: int

    def __post_init__(self):
        if int(self.c) != self.c or self.c < 2:
            raise ValueError("Multilabel node needs an integer c >= 2")

    discrete = True

    @property
    def feature_dim(self) -> int:
        return self.c

    @property
    def n_states(self) -> int:
        return self.c

    def states(self) -> np.ndarray:
        return np.arange(1, self.c + 1)

    def features(self, x):
        x = np.asarray(x)
        if np.any(x != np.round(x)) or np.any(x < 1) or np.any(x > self.c):
            raise DomainError(f"label outside 1..{self.c}")
        return np.eye(self.c)[x.astype(int) - 1]

    def log_prob_states(self, e):
        e = np.asarray(e, dtype=float)
        m = e.max(axis=-1, keepdims=True)
        return e - m - np.log(np.exp(e - m).sum(axis=-1, keepdims=True))

    def mean(self, e):
        e = _check_finite(e)
        z = np.exp(e - e.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)

    def jacobian(self, e):
        s = self.mean(e)
        return s[..., :, None] * np.eye(self.c) - s[..., :, None] * s[..., None, :]

    def vjp(self, e, grad, q=None):
        s = self.mean(e) if q is None else q
        return s * (grad - (s * grad).sum(axis=-1, keepdims=True))

    def sample(self, e, rng):
        p = self.mean(e)
        u = rng.random(p.shape[:-1] + (1,))
        idx = (np.cumsum(p, axis=-1) < u).sum(axis=-1)
        return np.minimum(idx, self.c - 1) + 1


@dataclass(frozen=True)
class RectifiedGaussian:
    """``X = max(leak * Y, Y)`` with ``Y ~ N(e, s(e)^2)``.

    ``std`` is either a positive constant or ``"tanh"`` for ``s(e) = |tanh e|``.
    ``leak=0, std=SOFTPLUS_STD`` approximates softplus, ``std="tanh"``
    approximates the (leaky) ReLU, ``leak=1`` is the identity.
    """

    leak: float = 0.0
    std: Union[float, str] = "tanh"

    def __post_init__(self):
        if not 0.0 <= self.leak <= 1.0:
            raise ValueError("leak must lie in [0, 1]")
        if isinstance(self.std, str):
            if self.std != "tanh":
                raise ValueError(f"unknown std policy {self.std!r}")
        elif not self.std > 0:
            raise ValueError("constant std must be positive")

    feature_dim = 1
    discrete = False

    @property
    def tanh_modulated(self) -> bool:
        return isinstance(self.std, str)

    def features(self, x):
        return np.asarray(x, dtype=float)[..., None]

    def scale(self, e):
        """Standard deviation ``s(e)`` and its derivative ``s'(e)``."""
        e = np.asarray(e, dtype=float)
        if self.tanh_modulated:
            t = np.tanh(e)
            # right-hand derivative at e == 0
            sign = np.where(e < 0, -1.0, 1.0)
            return np.abs(t), sign * (1.0 - t * t)
        return np.full_like(e, self.std), np.zeros_like(e)

    def mean(self, e):
        e = _check_finite(e)
        s, _ = self.scale(e)
        pos = s > 0
        safe_s = np.where(pos, s, 1.0)
        u = e / safe_s
        relu_mean = np.where(pos, e * norm_cdf(u) + s * norm_pdf(u), np.maximum(e, 0.0))
        return self.leak * e + (1.0 - self.leak) * relu_mean

    def derivative(self, e):
        e = np.asarray(e, dtype=float)
        s, ds = self.scale(e)
        pos = s > 0
        # s == 0 only happens at e == 0 under tanh modulation; e/|tanh e| -> 1 from the right
        u = np.where(pos, e / np.where(pos, s, 1.0), 1.0)
        # d/de E[max(0,Y)] = Phi(u) + phi(u) s'(e)
        return self.leak + (1.0 - self.leak) * (norm_cdf(u) + norm_pdf(u) * ds)

    def jacobian(self, e):
        return self.derivative(e)[..., None]

    def vjp(self, e, grad, q=None):
        return self.derivative(e) * grad

    def sample(self, e, rng):
        e = np.asarray(e, dtype=float)[..., 0]
        x, _ = self.reparam(e, rng.standard_normal(e.shape))
        return x

    def reparam(self, e, z):
        """Pathwise sample ``x(e, z)`` and ``dx/de`` for standard normal ``z``."""
        e = np.asarray(e, dtype=float)
        s, ds = self.scale(e)
        y = e + s * z
        x = np.where(y < 0, self.leak * y, y)
        dx = np.where(y < 0, self.leak, 1.0) * (1.0 + ds * z)
        return x, dx


NodeDistribution = Union[Binary, Multilabel, RectifiedGaussian]


def feature_dim(dist: NodeDistribution) -> int:
    return dist.feature_dim


def features(dist: NodeDistribution, x) -> np.ndarray:
    return dist.features(x)


def activation_mean(dist: NodeDistribution, e) -> np.ndarray:
    return dist.mean(e)


def activation_jacobian(dist: NodeDistribution, e) -> np.ndarray:
    """Jacobian ``dg/de`` with trailing shape ``(d, d)``."""
    return dist.jacobian(e)


def sample(dist: NodeDistribution, e, rng: np.random.Generator):
    """Draw node values (not features) given preactivations."""
    return dist.sample(e, rng)


def sample_features(dist: NodeDistribution, e, rng: np.random.Generator) -> np.ndarray:
    return dist.features(dist.sample(e, rng))


def sample_reparam(dist: NodeDistribution, e, z):
    if not isinstance(dist, RectifiedGaussian):
        raise UnsupportedDistribution(
            f"reparameterized sampling needs a continuous node, got {type(dist).__name__}"
        )
    return dist.reparam(e, z)


def mc_activation_estimate(dist: NodeDistribution, e, n: int, rng: np.random.Generator):
    """Monte-Carlo mean of the features and its standard error.

    ``e`` is a single preactivation of shape ``(d,)``.  With ``n == 1`` the
    standard error is undefined and returned as NaN.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    e = np.asarray(e, dtype=float)
    draws = sample_features(dist, np.broadcast_to(e, (n,) + e.shape), rng)
    mean = draws.mean(axis=0)
    if n == 1:
        return mean, np.full_like(mean, np.nan)
    return mean, draws.std(axis=0, ddof=1) / math.sqrt(n)


def to_dict(dist: NodeDistribution) -> dict:
    if isinstance(dist, Binary):
        return {"type": "binary", "alpha": dist.alpha, "beta": dist.beta}
    if isinstance(dist, Multilabel):
        return {"type": "multilabel", "c": dist.c}
    return {"type": "rectified_gaussian", "leak": dist.leak, "std": dist.std}


def from_dict(d: dict) -> NodeDistribution:
    kind = d.get("type")
    if kind == "binary":
        return Binary(float(d.get("alpha", 0.0)), float(d.get("beta", 1.0)))
    if kind == "multilabel":
        return Multilabel(int(d["c"]))
    if kind == "rectified_gaussian":
        std = d.get("std", "tanh")
        return RectifiedGaussian(float(d.get("leak", 0.0)), std if isinstance(std, str) else float(std))
    raise ValueError(f"unknown distribution type {kind!r}")
