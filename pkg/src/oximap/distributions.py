"""Scaled logit-normal distribution over (oef, dbv) and its KL machinery.

A 2-d Gaussian with mean mu and lower-triangular Cholesky factor L lives in
logit space; pushing samples through f(beta) = scale * logistic(beta) + offset
confines them to the open box (offset, offset + scale). The density follows
by the change of variables, whose exact log-Jacobian is
  -sum_i log(scale_i * yhat_i * (1 - yhat_i)),   yhat = (y - offset) / scale.

Because two such distributions that share scale and offset differ only by
their Gaussian bases, their KL divergence equals the Gaussian KL, which is
available in closed form; a Monte Carlo estimate is kept as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr, ndtri

PARAM_SCALE = np.array([0.8, 0.3])
PARAM_OFFSET = np.array([0.05, 0.001])
PARAM_NAMES = ("oef", "dbv")

LOG_2PI = float(np.log(2.0 * np.pi))


def forward_transform(beta, s=None, o=None):
    """Map logit-space coordinates into the open parameter box: s * logistic(beta) + o."""
    s = PARAM_SCALE if s is None else np.asarray(s, dtype=np.float64)
    o = PARAM_OFFSET if o is None else np.asarray(o, dtype=np.float64)
    return s * expit(np.asarray(beta, dtype=np.float64)) + o


def inverse_transform(y, s=None, o=None):
    """Logits of box coordinates; raises if any component leaves the open box."""
    s = PARAM_SCALE if s is None else np.asarray(s, dtype=np.float64)
    o = PARAM_OFFSET if o is None else np.asarray(o, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    yhat = (y - o) / s
    bad = np.nonzero(~((yhat > 0.0) & (yhat < 1.0)))
    if bad[0].size:
        first = tuple(int(b[0]) for b in bad)
        comp = first[-1] if y.ndim else 0
        name = PARAM_NAMES[comp] if len(s.shape) and s.shape[-1] == 2 and comp < 2 else f"component {comp}"
        lo, hi = np.broadcast_to(o, y.shape)[first], (np.broadcast_to(o, y.shape) + np.broadcast_to(s, y.shape))[first]
        raise ValueError(f"{name} value {y[first]} outside the open support ({lo}, {hi})")
    return np.log(yhat) - np.log1p(-yhat)


def _check_chol(chol):
    chol = np.asarray(chol, dtype=np.float64)
    if chol.shape[-2:] != (2, 2):
        raise ValueError("chol must have trailing shape (2, 2)")
    if np.any(chol[..., 0, 1] != 0.0):
        raise ValueError("chol must be lower triangular")
    if np.any(chol[..., 0, 0] <= 0.0) or np.any(chol[..., 1, 1] <= 0.0):
        raise ValueError("chol diagonal must be positive")
    return chol


@dataclass
class ScaledLogitNormal:
    """Distribution over the (oef, dbv) box, parameterized in logit space."""

    mu: np.ndarray
    chol: np.ndarray
    s: np.ndarray = field(default_factory=lambda: PARAM_SCALE.copy())
    o: np.ndarray = field(default_factory=lambda: PARAM_OFFSET.copy())

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if self.mu.shape[-1] != 2:
            raise ValueError("mu must have trailing length 2")
        self.chol = _check_chol(self.chol)
        self.s = np.asarray(self.s, dtype=np.float64)
        self.o = np.asarray(self.o, dtype=np.float64)
        if np.any(self.s <= 0):
            raise ValueError("scale must be positive")

    @classmethod
    def diagonal(cls, mu, sigma, s=None, o=None):
        sigma = np.asarray(sigma, dtype=np.float64)
        chol = np.zeros(sigma.shape[:-1] + (2, 2))
        chol[..., 0, 0] = sigma[..., 0]
        chol[..., 1, 1] = sigma[..., 1]
        kw = {}
        if s is not None:
            kw["s"] = s
        if o is not None:
            kw["o"] = o
        return cls(mu, chol, **kw)

    def log_prob(self, y):
        """Exact log-density at box coordinates y (broadcast over leading axes)."""
        y = np.asarray(y, dtype=np.float64)
        beta = inverse_transform(y, self.s, self.o)
        yhat = (y - self.o) / self.s
        r = beta - self.mu
        l00 = self.chol[..., 0, 0]
        l10 = self.chol[..., 1, 0]
        l11 = self.chol[..., 1, 1]
        w0 = r[..., 0] / l00
        w1 = (r[..., 1] - l10 * w0) / l11
        log_det = np.log(l00) + np.log(l11)
        log_jac = np.log(self.s * yhat * (1.0 - yhat)).sum(axis=-1)
        return -LOG_2PI - log_det - 0.5 * (w0 * w0 + w1 * w1) - log_jac

    def sample(self, rng: np.random.Generator, n: int | None = None):
        """Reparameterized draws f(mu + L z), z standard normal."""
        shape = self.mu.shape if n is None else (n,) + self.mu.shape
        z = rng.standard_normal(shape)
        return self.transform_noise(z)

    def transform_noise(self, z):
        """Push given standard-normal noise through the reparameterization."""
        z = np.asarray(z, dtype=np.float64)
        l00 = self.chol[..., 0, 0]
        l10 = self.chol[..., 1, 0]
        l11 = self.chol[..., 1, 1]
        b0 = self.mu[..., 0] + l00 * z[..., 0]
        b1 = self.mu[..., 1] + l10 * z[..., 0] + l11 * z[..., 1]
        return forward_transform(np.stack([b0, b1], axis=-1), self.s, self.o)


def _require_same_box(q: ScaledLogitNormal, p: ScaledLogitNormal):
    if not (np.array_equal(q.s, p.s) and np.array_equal(q.o, p.o)):
        raise ValueError("KL requires both distributions to share scale and offset")


def kl_analytic(q: ScaledLogitNormal, p: ScaledLogitNormal):
    """Closed-form KL(q || p); exact because the box transform is shared.

    Grouped as 0.5 * [(m00^2-1-2 log m00) + (m11^2-1-2 log m11) + m10^2 + |w|^2]
    with M = Lp^-1 Lq and w = Lp^-1 (mu_q - mu_p); each group is clamped at
    zero so rounding can never produce a negative KL.
    """
    _require_same_box(q, p)
    a = p.chol[..., 0, 0]
    b = p.chol[..., 1, 0]
    cc = p.chol[..., 1, 1]
    m00 = q.chol[..., 0, 0] / a
    m10 = (q.chol[..., 1, 0] - b * m00) / cc
    m11 = q.chol[..., 1, 1] / cc
    v = q.mu - p.mu
    w0 = v[..., 0] / a
    w1 = (v[..., 1] - b * w0) / cc
    t00 = np.maximum(m00 * m00 - 1.0 - 2.0 * np.log(m00), 0.0)
    t11 = np.maximum(m11 * m11 - 1.0 - 2.0 * np.log(m11), 0.0)
    return 0.5 * (t00 + t11 + m10 * m10 + w0 * w0 + w1 * w1)


def kl_monte_carlo(q: ScaledLogitNormal, p: ScaledLogitNormal, rng: np.random.Generator, n: int):
    """Sample estimate mean[log q(y) - log p(y)] over n draws from q."""
    _require_same_box(q, p)
    y = q.sample(rng, n)
    return np.mean(q.log_prob(y) - p.log_prob(y), axis=0)


def truncated_normal_sample(mean, std, low, high, rng: np.random.Generator, size=None):
    """Inverse-CDF sampling of a normal restricted to (low, high).

    std = 0 collapses to the clamped mean. Results are nudged strictly
    inside the interval so downstream logit transforms stay finite.

    When the interval sits above the mean the problem is reflected first:
    the normal CDF saturates at 1.0 long before it underflows at 0.0, so
    the left tail is the numerically safe one.
    """
    if not low < high:
        raise ValueError("low must be smaller than high")
    if std < 0:
        raise ValueError("std must be non-negative")
    inner_lo = np.nextafter(low, high)
    inner_hi = np.nextafter(high, low)
    if std == 0:
        value = min(max(mean, inner_lo), inner_hi)
        return np.full(size, value) if size is not None else np.float64(value)
    flip = mean < 0.5 * (low + high)
    if flip:
        mean, low, high = -mean, -high, -low
    ua = ndtr((low - mean) / std)
    ub = ndtr((high - mean) / std)
    u01 = rng.random(size)
    u01 = np.maximum(u01, np.finfo(np.float64).tiny)
    x = mean + std * ndtri(ua + (ub - ua) * u01)
    if flip:
        x = -x
    return np.clip(x, inner_lo, inner_hi)
