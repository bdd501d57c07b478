"""Weight functions and empirical weighted norms on balls.

Norms over R^N are estimated on B(0, R) and always reported with their R.
The point set for (R, n) is the origin, axis points on a log ladder of radii
down to 1e-4, and scaled copies ``R 2^{-k} V_n`` of the first n points
``V_n`` of a scrambled Sobol sequence mapped into the unit ball, for every k
with ``R 2^{-k} >= 1/16``.  Point sets
are nested in n, and in R along dyadic schedules such as (5, 10, 20), so
refinement never lowers an estimate.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .coeffs import WeightSpec
from .errors import EvaluationFailure, MissingDerivatives

RADIUS_SCHEDULE = (5.0, 10.0, 20.0)
MIN_SHELL = 1.0 / 16.0
MIN_SEPARATION = 1e-4
POINT_SEED = 20240607

# finite-difference steps for the fallback derivatives, per order
_FD_STEP = {1: 1e-5, 2: 1e-4, 3: 2e-3}


def weight_value(weight, x):
    return weight(x)


def _radial_coefficients(weight, u, invert):
    """Derivatives (phi, phi', phi'', phi''') in u = |x|^2 of p or of 1/p."""
    if weight.family == "polynomial":
        m = weight.m
        fall = [1.0, m, m * (m - 1), m * (m - 1) * (m - 2)]
        phi = 1.0 + u**m
        d1, d2, d3 = (fall[k] * u ** (m - k) if m >= k else np.zeros_like(u) for k in (1, 2, 3))
        if not invert:
            return phi, d1, d2, d3
        return (
            1.0 / phi,
            -d1 / phi**2,
            2.0 * d1**2 / phi**3 - d2 / phi**2,
            -6.0 * d1**3 / phi**4 + 6.0 * d1 * d2 / phi**3 - d3 / phi**2,
        )
    g = weight.gamma
    w = (1.0 + u) ** g
    w1 = g * (1.0 + u) ** (g - 1.0)
    w2 = g * (g - 1.0) * (1.0 + u) ** (g - 2.0)
    w3 = g * (g - 1.0) * (g - 2.0) * (1.0 + u) ** (g - 3.0)
    if invert:
        base = np.exp(-w)
        return base, -w1 * base, (w1**2 - w2) * base, (-(w1**3) + 3.0 * w1 * w2 - w3) * base
    base = np.exp(w)
    return base, w1 * base, (w1**2 + w2) * base, (w1**3 + 3.0 * w1 * w2 + w3) * base


def _radial_derivatives(x, c0, c1, c2, c3, order):
    n = x.shape[-1]
    eye = np.eye(n)
    out = [c0]
    if order >= 1:
        out.append(2.0 * x * c1[:, None])
    if order >= 2:
        out.append(4.0 * np.einsum("ki,kj->kij", x, x) * c2[:, None, None] + 2.0 * eye * c1[:, None, None])
    if order >= 3:
        xxx = np.einsum("ki,kj,kl->kijl", x, x, x)
        dx = (
            np.einsum("ij,kl->kijl", eye, x) + np.einsum("il,kj->kijl", eye, x) + np.einsum("jl,ki->kijl", eye, x)
        )
        out.append(8.0 * xxx * c3[:, None, None, None] + 4.0 * dx * c2[:, None, None, None])
    return out


def weight_derivatives(weight, x, order=3):
    """[p, Dp, D^2 p, D^3 p] at a batch of points (k, N)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.sum(x * x, axis=-1)
    return _radial_derivatives(x, *_radial_coefficients(weight, u, invert=False), order)


def inverse_weight_derivatives(weight, x, order=3):
    """[1/p, D(1/p), D^2(1/p), D^3(1/p)] at a batch of points (k, N)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.sum(x * x, axis=-1)
    return _radial_derivatives(x, *_radial_coefficients(weight, u, invert=True), order)


@dataclass(frozen=True)
class WeightedFunction:
    """A scalar field with optional exact derivatives, paired with a weight.

    ``f`` maps points (k, N) to values (k,); ``derivs[j]`` maps points to the
    order-(j+1) derivative tensor, shapes (k, N), (k, N, N), (k, N, N, N).
    Missing derivatives fall back to central differences.
    """

    f: Callable
    weight: WeightSpec = field(default_factory=WeightSpec)
    derivs: tuple = ()
    dimension: Optional[int] = None
    name: str = ""

    def __call__(self, x):
        return self.f(np.atleast_2d(np.asarray(x, dtype=float)))

    def exact_order(self):
        return len(self.derivs)

    def derivative(self, x, order, exact_only=False):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if order == 0:
            return self.f(x)
        if order <= len(self.derivs):
            return self.derivs[order - 1](x)
        if exact_only:
            raise MissingDerivatives(f"{self.name or 'field'} has no exact derivative of order {order}")
        return _central_difference(lambda y: self.derivative(y, order - 1), x, _FD_STEP[order])

    def scaled(self, factor):
        c = float(factor)
        return WeightedFunction(
            lambda x, f=self.f: c * f(x),
            self.weight,
            tuple((lambda x, d=d: c * d(x)) for d in self.derivs),
            self.dimension,
            self.name,
        )

    def with_weight(self, weight):
        return WeightedFunction(self.f, weight, self.derivs, self.dimension, self.name)


def _central_difference(fn, x, h):
    n = x.shape[-1]
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def sum_fields(a, b):
    """Pointwise sum of two weighted functions (derivatives where both have them)."""
    k = min(len(a.derivs), len(b.derivs))
    return WeightedFunction(
        lambda x: a.f(x) + b.f(x),
        a.weight,
        tuple((lambda x, i=i: a.derivs[i](x) + b.derivs[i](x)) for i in range(k)),
        a.dimension,
        f"{a.name}+{b.name}",
    )


# -- point sets -----------------------------------------------------------


@lru_cache(maxsize=32)
def unit_ball_points(n_dim, count, seed=POINT_SEED):
    """First ``count`` points of a scrambled Sobol sequence inside the unit ball."""
    if n_dim == 1:
        m = max(1, math.ceil(math.log2(max(count, 2))))
        pts = 2.0 * qmc.Sobol(1, scramble=True, seed=seed).random_base2(m) - 1.0
        out = pts[:count]
    else:
        keep = []
        m = max(1, math.ceil(math.log2(count * (2.0**n_dim) / _ball_volume(n_dim)))) + 1
        while True:
            pts = 2.0 * qmc.Sobol(n_dim, scramble=True, seed=seed).random_base2(m) - 1.0
            keep = pts[np.sum(pts * pts, axis=1) <= 1.0]
            if len(keep) >= count:
                break
            m += 1
        out = keep[:count]
    out = np.array(out)
    out.setflags(write=False)
    return out


def _ball_volume(n):
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def shell_radii(R):
    radii = []
    r = float(R)
    while r >= MIN_SHELL - 1e-15:
        radii.append(r)
        r *= 0.5
    return radii


def axis_radii(R):
    """Log ladder R 2^{-j/8} down to MIN_SEPARATION (nested along dyadic R)."""
    j = np.arange(0, int(8 * math.log2(R / MIN_SEPARATION)) + 1)
    return float(R) * 2.0 ** (-j / 8.0)


def ball_points(n_dim, R, n):
    """Evaluation set in B(0, R): origin, axis ladder and scaled Sobol copies."""
    base = unit_ball_points(n_dim, n)
    eye = np.eye(n_dim)
    radii = axis_radii(R)
    parts = [np.zeros((1, n_dim))]
    parts.append(np.einsum("r,ij->rij", radii, eye).reshape(-1, n_dim))
    parts.append(-np.einsum("r,ij->rij", radii, eye).reshape(-1, n_dim))
    for r in shell_radii(R):
        parts.append(r * base)
    return np.vstack(parts)


# -- norm estimates -------------------------------------------------------


@dataclass(frozen=True)
class NormEstimate:
    value: float
    R: float
    n_points: int
    kind: str = "sup"
    witness: Optional[tuple] = None


def _checked(vals, x):
    vals = np.asarray(vals, dtype=float)
    bad = ~np.isfinite(vals.reshape(len(x), -1)).all(axis=1)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise EvaluationFailure(f"non-finite value at x={x[k].tolist()}", witness=tuple(x[k].tolist()))
    return vals


def _dimension(wf, default=1):
    return wf.dimension or default


def weighted_sup_norm(wf, R=10.0, n=256, order=0, points=None):
    """sup |D^order f| / p over the evaluation set in B(0, R).

    For order >= 1 the value is the sum over distinct multi-indices beta with
    |beta| = order of the separate sups, matching the C^theta_p norm.
    """
    x = ball_points(_dimension(wf), R, n) if points is None else points
    vals = _checked(wf.derivative(x, order), x)
    p = wf.weight(x)
    comps = _distinct_components(vals, order)
    ratios = np.abs(comps) / p[:, None]
    sups = ratios.max(axis=0)
    k = int(np.argmax(ratios.max(axis=1)))
    return NormEstimate(float(sups.sum()), float(R), len(x), "sup" if order == 0 else f"sup_D{order}", tuple(x[k]))


def _distinct_components(vals, order):
    """Flatten a derivative tensor batch to its distinct multi-index entries."""
    vals = np.asarray(vals)
    k = vals.shape[0]
    if order == 0:
        return vals.reshape(k, 1)
    n = vals.shape[1]
    idx = list(itertools.combinations_with_replacement(range(n), order))
    return np.stack([vals[(slice(None),) + i] for i in idx], axis=1)


def _holder_pairs(n_dim, R, pair_budget, seed=POINT_SEED):
    """Centres and offsets; pair k is (centre[k // n_off], centre[k // n_off] + offset[k % n_off])."""
    n_sep = 24
    seps = np.logspace(math.log10(MIN_SEPARATION), 0.0, n_sep)
    rng = np.random.default_rng(seed)
    extra = rng.standard_normal((max(0, 2 * n_dim), n_dim))
    extra /= np.linalg.norm(extra, axis=1, keepdims=True)
    dirs = np.vstack([np.eye(n_dim), extra])
    per_center = n_sep * len(dirs)
    n_centers = max(2, pair_budget // per_center)
    centers = np.vstack([np.zeros((1, n_dim)), R * unit_ball_points(n_dim, n_centers - 1)])
    offsets = (seps[:, None, None] * dirs[None, :, :]).reshape(-1, n_dim)
    return centers, offsets


def holder_quotient(g, n_dim, alpha, R=10.0, pair_budget=20_000):
    """max |g(x) - g(y)| / |x - y|^alpha over the sampled pairs.

    ``g`` may be vector-valued (k, ...); the max is taken per component and
    the per-component maxima are summed.  Returns (value, number of pairs).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("Hölder exponent must lie in (0, 1)")
    centers, offsets = _holder_pairs(n_dim, R, pair_budget)
    y = (centers[:, None, :] + offsets[None, :, :]).reshape(-1, n_dim)
    gc = np.asarray(g(centers), dtype=float).reshape(len(centers), 1, -1)
    gy = np.asarray(g(y), dtype=float).reshape(len(centers), len(offsets), -1)
    dist = np.linalg.norm(offsets, axis=1) ** alpha
    diff = np.abs(gy - gc) / dist[None, :, None]
    return float(diff.reshape(-1, diff.shape[-1]).max(axis=0).sum()), len(y)


def holder_seminorm(wf, alpha, R=10.0, pair_budget=20_000, order=0):
    """[D^order f / p]_{C^alpha_b}, summed over distinct multi-indices."""

    def g(x):
        vals = _distinct_components(wf.derivative(x, order), order)
        return vals / wf.weight(x)[:, None]

    value, count = holder_quotient(g, _dimension(wf), alpha, R, pair_budget)
    return NormEstimate(value, float(R), count, f"holder({alpha:g})")


def cp_norm(wf, theta, R=10.0, n=256, pair_budget=20_000):
    """Full ||f||_{C_p^theta} for 0 <= theta <= 3 (integer part by sups, rest by Hölder)."""
    k = int(math.floor(theta + 1e-12))
    frac = theta - k
    total = sum(weighted_sup_norm(wf, R, n, order=j).value for j in range(k + 1))
    if frac > 1e-12:
        total += holder_seminorm(wf, frac, R, pair_budget, order=k).value
    return NormEstimate(float(total), float(R), n, f"C_p^{theta:g}")


def quotient_derivatives(wf, x, theta):
    """Derivatives of f/p up to order theta by the Leibniz rule."""
    q = inverse_weight_derivatives(wf.weight, x, theta)
    f = [wf.derivative(x, j, exact_only=True) for j in range(theta + 1)]
    out = [f[0] * q[0]]
    if theta >= 1:
        out.append(f[1] * q[0][:, None] + f[0][:, None] * q[1])
    if theta >= 2:
        out.append(
            f[2] * q[0][:, None, None]
            + np.einsum("ki,kj->kij", f[1], q[1])
            + np.einsum("kj,ki->kij", f[1], q[1])
            + f[0][:, None, None] * q[2]
        )
    if theta >= 3:
        t = f[3] * q[0][:, None, None, None] + f[0][:, None, None, None] * q[3]
        t = t + np.einsum("kij,kl->kijl", f[2], q[1]) + np.einsum("kil,kj->kijl", f[2], q[1])
        t = t + np.einsum("kjl,ki->kijl", f[2], q[1])
        t = t + np.einsum("ki,kjl->kijl", f[1], q[2]) + np.einsum("kj,kil->kijl", f[1], q[2])
        t = t + np.einsum("kl,kij->kijl", f[1], q[2])
        out.append(t)
    return out


def norm_equivalence_check(wf, theta, radii=RADIUS_SCHEDULE, n=256):
    """Compare sum_{|b|<=theta} ||D^b f||_{C_p} with ||f/p||_{C_b^theta}.

    Returns (ratio_lo, ratio_hi): the extreme ratios usual/alternative over
    the radius schedule.  Both norms zero counts as ratio 1.
    """
    if wf.exact_order() < theta:
        raise MissingDerivatives(f"norm equivalence at theta={theta} needs exact derivatives up to order {theta}")
    ratios = []
    for R in radii:
        x = ball_points(_dimension(wf), R, n)
        p = wf.weight(x)
        usual = 0.0
        for j in range(theta + 1):
            comps = _distinct_components(_checked(wf.derivative(x, j, exact_only=True), x), j)
            usual += float((np.abs(comps) / p[:, None]).max(axis=0).sum())
        alt = 0.0
        for j, d in enumerate(quotient_derivatives(wf, x, theta)):
            alt += float(np.abs(_distinct_components(d, j)).max(axis=0).sum())
        if usual == 0.0 and alt == 0.0:
            ratios.append(1.0)
        elif alt == 0.0 or usual == 0.0:
            ratios.append(math.inf if alt == 0.0 else 0.0)
        else:
            ratios.append(usual / alt)
    return float(min(ratios)), float(max(ratios))


def norm_table(wf, radii=RADIUS_SCHEDULE, n=256, order=0):
    """Rows (R, estimate) for an R-refinement study."""
    return [(float(R), weighted_sup_norm(wf, R, n, order).value) for R in radii]
