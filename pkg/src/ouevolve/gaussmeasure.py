"""Gaussian measures N(a, Q): density, symmetric square root, quadrature, sampling.

Expectations are taken in whitened variables, ``y = a + Q^{1/2} xi`` with xi
standard normal.  Two schemes produce a standard-normal rule ``(xi, w)``:

* :class:`GaussHermite` -- tensor Gauss-Hermite, ``xi = sqrt(2) z`` for the
  physicists' nodes z, weights normalised to sum to one;
* :class:`MonteCarlo` -- i.i.d. draws from a Philox (counter-based) stream.

Because the rule depends only on the dimension, the same nodes are reused for
every mean and covariance, which gives common random numbers across x in the
Monte Carlo case.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .errors import ConfigError, OddMomentUnsupported, QuadratureOverflow, SingularCovariance

NODE_BUDGET = 10**6


@dataclass(frozen=True)
class GaussHermite:
    order: int = 40
    budget: int = NODE_BUDGET

    def rule(self, n):
        if self.order < 1:
            raise ValueError("Gauss-Hermite order must be >= 1")
        if self.order**n > self.budget:
            raise QuadratureOverflow(f"{self.order}^{n} nodes exceed the tensor budget {self.budget}")
        return _gh_rule(n, self.order)

    def __str__(self):
        return f"gh:{self.order}"


@dataclass(frozen=True)
class MonteCarlo:
    n: int = 100_000
    seed: int = 0

    def rule(self, n):
        return _mc_rule(n, self.n, self.seed)

    def __str__(self):
        return f"mc:{self.n}:{self.seed}"


def parse_scheme(text):
    """``gh:ORDER`` or ``mc:N:SEED``."""
    m = re.fullmatch(r"gh:(\d+)", text.strip())
    if m:
        return GaussHermite(int(m.group(1)))
    m = re.fullmatch(r"mc:(\d+)(?::(\d+))?", text.strip())
    if m:
        return MonteCarlo(int(m.group(1)), int(m.group(2) or 0))
    raise ConfigError(f"cannot parse quadrature scheme {text!r}", field="quad")


@lru_cache(maxsize=32)
def _gh_rule(n, order):
    with np.errstate(all="ignore"):
        z, w = hermgauss(order)
    if not np.all(np.isfinite(w)):
        raise QuadratureOverflow(f"Gauss-Hermite weights underflow at order {order}")
    xi1 = math.sqrt(2.0) * z
    w1 = w / math.sqrt(math.pi)
    grids = np.meshgrid(*([xi1] * n), indexing="ij")
    xi = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.ones(1)
    for _ in range(n):
        weights = np.multiply.outer(weights, w1).ravel()
    weights = weights / weights.sum()
    xi.setflags(write=False)
    weights.setflags(write=False)
    return xi, weights


@lru_cache(maxsize=8)
def _mc_rule(n, count, seed):
    rng = np.random.Generator(np.random.Philox(seed))
    xi = rng.standard_normal((count, n))
    w = np.full(count, 1.0 / count)
    xi.setflags(write=False)
    w.setflags(write=False)
    return xi, w


def symmetric_sqrt(Q):
    """Symmetric PSD square root via eigendecomposition (negative round-off clipped)."""
    Q = 0.5 * (np.asarray(Q, dtype=float) + np.asarray(Q, dtype=float).T)
    lam, V = np.linalg.eigh(Q)
    return (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T


class GaussianMeasure:
    """N(mean, cov) with cached symmetric square root and eigen-data."""

    __slots__ = ("mean", "cov", "sqrt", "eigenvalues", "_V")

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match the mean")
        cov = 0.5 * (cov + cov.T)
        lam, V = np.linalg.eigh(cov)
        lam_c = np.clip(lam, 0.0, None)
        for name, val in (("mean", mean), ("cov", cov), ("eigenvalues", lam), ("_V", V)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        root = (V * np.sqrt(lam_c)) @ V.T
        root.setflags(write=False)
        object.__setattr__(self, "sqrt", root)

    def __setattr__(self, name, value):
        raise AttributeError("GaussianMeasure is immutable")

    @property
    def dimension(self):
        return self.mean.size

    @property
    def is_positive_definite(self):
        return bool(self.eigenvalues[0] > 0.0)

    @property
    def det_factor(self):
        """(2 pi)^{N/2} (det Q)^{1/2}."""
        return float(np.exp(0.5 * self.dimension * math.log(2.0 * math.pi) + 0.5 * np.sum(np.log(self.eigenvalues))))

    def inv_sqrt(self):
        self._require_pd()
        return (self._V / np.sqrt(self.eigenvalues)) @ self._V.T

    def inv(self):
        self._require_pd()
        return (self._V / self.eigenvalues) @ self._V.T

    def _require_pd(self):
        if not self.is_positive_definite:
            raise SingularCovariance(f"covariance is singular (min eigenvalue {self.eigenvalues[0]:.3e})")

    def log_density(self, y):
        self._require_pd()
        d = np.asarray(y, dtype=float) - self.mean
        z = (d @ self._V) / np.sqrt(self.eigenvalues)
        return -0.5 * np.sum(z * z, axis=-1) - 0.5 * self.dimension * math.log(2.0 * math.pi) - 0.5 * np.sum(
            np.log(self.eigenvalues)
        )

    def nodes(self, scheme):
        """Quadrature nodes y = a + Q^{1/2} xi and weights for ``scheme``."""
        xi, w = scheme.rule(self.dimension)
        return self.mean + xi @ self.sqrt, w

    def sample(self, n, seed):
        rng = np.random.Generator(np.random.Philox(seed))
        return self.mean + rng.standard_normal((n, self.dimension)) @ self.sqrt


def density(mu, y):
    """Lebesgue density of N(a, Q) at y (log computed first)."""
    return np.exp(mu.log_density(y))


def guarded_eval(f, y, xi):
    """Evaluate ``f`` on the nodes, probing the outermost ones first.

    Raises :class:`QuadratureOverflow` if the integrand is not finite at the
    nodes of largest |xi|.
    """
    r = np.einsum("ij,ij->i", xi, xi)
    probe = np.flatnonzero(r >= r.max() * (1.0 - 1e-12))
    with np.errstate(over="ignore", invalid="ignore"):
        vals = np.asarray(f(y[probe]), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise QuadratureOverflow(f"integrand not finite at outer node y={y[probe[0]].tolist()}")
    with np.errstate(over="ignore", invalid="ignore"):
        vals = np.asarray(f(y), dtype=float)
    if not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals.reshape(len(y), -1)))[0, 0]
        raise QuadratureOverflow(f"integrand not finite at y={y[bad].tolist()}")
    return vals


def expectation(mu, f, scheme=GaussHermite(), return_error=False):
    """int f dN(a, Q).

    ``f`` maps an array of points (k, N) to values (k,) or (k, ...).  With
    ``return_error`` a pair (value, standard error) is returned; the error is
    zero for Gauss-Hermite.
    """
    if isinstance(scheme, GaussHermite):
        mu._require_pd()
    y, w = mu.nodes(scheme)
    xi, _ = scheme.rule(mu.dimension)
    vals = guarded_eval(f, y, xi)
    value = np.tensordot(w, vals, axes=(0, 0))
    if not return_error:
        return value
    if isinstance(scheme, MonteCarlo):
        n = len(w)
        err = np.std(vals, axis=0, ddof=1) / math.sqrt(n)
    else:
        err = np.zeros_like(value)
    return value, err


def absolute_moment(mu, k, scheme=GaussHermite()):
    """C_k = int |y|^k dN(0, Q) for even k <= 8."""
    if k % 2:
        raise OddMomentUnsupported(f"odd moment k={k} is not supported")
    if not 0 <= k <= 8:
        raise ValueError("moment order must satisfy 0 <= k <= 8")
    if np.any(mu.mean != 0.0):
        raise ValueError("absolute moments are defined for centred measures")
    if k == 0:
        return 1.0
    y, w = mu.nodes(scheme)
    return float(w @ np.sum(y * y, axis=-1) ** (k // 2))


def normal_absolute_moment(n, k):
    """E|Z|^k for Z standard normal in R^n (closed form)."""
    return 2.0 ** (k / 2) * math.gamma((n + k) / 2) / math.gamma(n / 2)
