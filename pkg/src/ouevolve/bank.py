"""Named test functions.

Every entry is a factory ``(dimension, weight) -> WeightedFunction``.  Smooth
entries carry exact derivatives through order three.  Two entries are
deliberately rough and expose only the derivatives of their regularity
class, so that derivative routes cannot bypass the smoothing kernels:

``step``  tanh(y_1 / eps), continuous but varying on a scale far below any
          Gaussian width used in practice (class C_p, alpha = 0);
``kink``  eps log cosh(y_1 / eps), close to |y_1|, with its exact first
          derivative only (class C^1_p, alpha = 1).
"""

from __future__ import annotations

import math

import numpy as np

from .coeffs import WeightSpec
from .errors import ConfigError
from .weights import WeightedFunction, weight_derivatives

ROUGH_SCALE = 1e-6


def _e1(n):
    e = np.zeros(n)
    e[0] = 1.0
    return e


def _outer(*vs):
    out = vs[0]
    for v in vs[1:]:
        out = np.multiply.outer(out, v)
    return out


def _ridge(n, weight, name, profile, c, shift=0.0):
    """y -> profile(<c, y> + shift) with derivatives profile^(k) c^{(x)k}."""
    c = np.asarray(c, dtype=float)
    cc, ccc = _outer(c, c), _outer(c, c, c)

    def arg(y):
        return y @ c + shift

    return WeightedFunction(
        lambda y: profile[0](arg(y)),
        weight,
        (
            lambda y: profile[1](arg(y))[:, None] * c,
            lambda y: profile[2](arg(y))[:, None, None] * cc,
            lambda y: profile[3](arg(y))[:, None, None, None] * ccc,
        ),
        n,
        name,
    )


_SIN = (np.sin, np.cos, lambda z: -np.sin(z), lambda z: -np.cos(z))
_COS = (np.cos, lambda z: -np.sin(z), lambda z: -np.cos(z), np.sin)


def one(n, weight):
    return WeightedFunction(
        lambda y: np.ones(len(y)),
        weight,
        (
            lambda y: np.zeros((len(y), n)),
            lambda y: np.zeros((len(y), n, n)),
            lambda y: np.zeros((len(y), n, n, n)),
        ),
        n,
        "one",
    )


def linear(n, weight):
    v = np.ones(n)
    return WeightedFunction(
        lambda y: y @ v,
        weight,
        (
            lambda y: np.tile(v, (len(y), 1)),
            lambda y: np.zeros((len(y), n, n)),
            lambda y: np.zeros((len(y), n, n, n)),
        ),
        n,
        "linear",
    )


def square(n, weight):
    eye = np.eye(n)
    return WeightedFunction(
        lambda y: np.sum(y * y, axis=1),
        weight,
        (
            lambda y: 2.0 * y,
            lambda y: np.tile(2.0 * eye, (len(y), 1, 1)),
            lambda y: np.zeros((len(y), n, n, n)),
        ),
        n,
        "square",
    )


def cos1(n, weight):
    return _ridge(n, weight, "cos", _COS, _e1(n))


def wave(n, weight):
    c = 0.5 ** np.arange(n)
    return _ridge(n, weight, "wave", _SIN, c, shift=0.3)


def bump(n, weight):
    eye = np.eye(n)

    def e(y):
        return np.exp(-0.5 * np.sum(y * y, axis=1))

    def d3(y):
        yyy = np.einsum("ki,kj,kl->kijl", y, y, y)
        mixed = np.einsum("ij,kl->kijl", eye, y) + np.einsum("il,kj->kijl", eye, y) + np.einsum("jl,ki->kijl", eye, y)
        return (mixed - yyy) * e(y)[:, None, None, None]

    return WeightedFunction(
        e,
        weight,
        (
            lambda y: -y * e(y)[:, None],
            lambda y: (np.einsum("ki,kj->kij", y, y) - eye) * e(y)[:, None, None],
            d3,
        ),
        n,
        "bump",
    )


def _weighted(n, weight, name, ridge):
    """p(y) r(y) for a ridge function r; derivatives by the Leibniz rule."""

    def d(order):
        def fn(y):
            P = weight_derivatives(weight, y, order)
            C = [ridge.f(y)] + [ridge.derivs[j](y) for j in range(order)]
            return _leibniz(P, C, order)

        return fn

    return WeightedFunction(d(0), weight, (d(1), d(2), d(3)), n, name)


def weighted_cos(n, weight):
    """p(y) cos(y_1), whose growth saturates the weight."""
    return _weighted(n, weight, "weighted_cos", cos1(n, weight))


def weighted_wave(n, weight):
    """p(y) sin(2 y_1 + y_2/2 + ... + 0.3) / 2."""
    c = 2.0 * 0.25 ** np.arange(n)
    ridge = _ridge(n, weight, "", tuple(lambda z, g=g: 0.5 * g(z) for g in _SIN), c, shift=0.3)
    return _weighted(n, weight, "weighted_wave", ridge)


def _leibniz(P, C, order):
    """D^order (p c) from the derivative lists of p and c."""
    if order == 0:
        return P[0] * C[0]
    if order == 1:
        return P[1] * C[0][:, None] + P[0][:, None] * C[1]
    if order == 2:
        return (
            P[2] * C[0][:, None, None]
            + np.einsum("ki,kj->kij", P[1], C[1])
            + np.einsum("kj,ki->kij", P[1], C[1])
            + P[0][:, None, None] * C[2]
        )
    t = P[3] * C[0][:, None, None, None] + P[0][:, None, None, None] * C[3]
    t = t + np.einsum("kij,kl->kijl", P[2], C[1]) + np.einsum("kil,kj->kijl", P[2], C[1])
    t = t + np.einsum("kjl,ki->kijl", P[2], C[1])
    t = t + np.einsum("ki,kjl->kijl", P[1], C[2]) + np.einsum("kj,kil->kijl", P[1], C[2])
    t = t + np.einsum("kl,kij->kijl", P[1], C[2])
    return t


def weighted_sin(n, weight):
    """p(y) sin(5|y|): Lipschitz, no derivatives exposed."""
    return WeightedFunction(
        lambda y: weight(y) * np.sin(5.0 * np.linalg.norm(y, axis=1)), weight, (), n, "weighted_sin"
    )


def weight_itself(n, weight):
    return WeightedFunction(lambda y: weight(y), weight, (), n, "weight")


def soft_step(n, weight):
    return WeightedFunction(lambda y: np.tanh(0.5 * y[:, 0]), weight, (), n, "soft_step")


def step(n, weight, eps=ROUGH_SCALE):
    return WeightedFunction(lambda y: np.tanh(y[:, 0] / eps), weight, (), n, "step")


def kink(n, weight, eps=ROUGH_SCALE):
    def logcosh(z):
        a = np.abs(z)
        return a + np.log1p(np.exp(-2.0 * a)) - math.log(2.0)

    def grad(y):
        out = np.zeros_like(y)
        out[:, 0] = np.tanh(y[:, 0] / eps)
        return out

    return WeightedFunction(lambda y: eps * logcosh(y[:, 0] / eps), weight, (grad,), n, "kink")


def bounded_linear(n, weight):
    """y_1 / 2, in the unit ball of C_p for every admissible weight."""
    return WeightedFunction(lambda y: 0.5 * y[:, 0], weight, (), n, "bounded_linear")


def scaled_square(n, weight):
    """|y|^2 / 2 (unit ball of C_p for p = 1 + |y|^{2m}, m >= 1)."""
    return WeightedFunction(lambda y: 0.5 * np.sum(y * y, axis=1), weight, (), n, "scaled_square")


BANK = {
    "one": one,
    "linear": linear,
    "square": square,
    "cos": cos1,
    "wave": wave,
    "bump": bump,
    "weighted_cos": weighted_cos,
    "weighted_wave": weighted_wave,
    "weighted_sin": weighted_sin,
    "weight": weight_itself,
    "soft_step": soft_step,
    "step": step,
    "kink": kink,
    "bounded_linear": bounded_linear,
    "scaled_square": scaled_square,
}

# smooth entries with exact derivatives through order three
SMOOTH = ("one", "linear", "square", "cos", "wave", "bump", "weighted_cos", "weighted_wave")
# bounded-growth smooth entries for the derivative and composition checks
SMOOTH_BOUNDED = ("one", "cos", "wave", "bump")
# ten members of the unit ball of C_p (polynomial weights), all smooth enough
# for the default Gauss-Hermite rule
UNIT_BALL = (
    "one",
    "cos",
    "wave",
    "bump",
    "weighted_cos",
    "weighted_wave",
    "weight",
    "soft_step",
    "bounded_linear",
    "scaled_square",
)


def get(name, dimension=1, weight=None):
    try:
        factory = BANK[name]
    except KeyError:
        raise ConfigError(f"unknown test function {name!r}", field="f") from None
    return factory(int(dimension), weight or WeightSpec())


def bank(names, dimension=1, weight=None):
    return [get(name, dimension, weight) for name in names]


def random_smooth(dimension, seed, weight=None, n_waves=3, scale=1.0):
    """A random trigonometric ridge sum plus a constant, with exact derivatives."""
    rng = np.random.default_rng(seed)
    weight = weight or WeightSpec()
    const = scale * rng.uniform(-1.0, 1.0)
    c = np.empty((n_waves, dimension))
    amp = np.empty(n_waves)
    phase = np.empty(n_waves)
    for j in range(n_waves):
        c[j] = rng.uniform(-1.5, 1.5, dimension)
        amp[j] = scale * rng.uniform(-1.0, 1.0)
        phase[j] = rng.uniform(0.0, 2.0 * math.pi)
    subscripts = ("kj->k", "kj,ja->ka", "kj,ja,jb->kab", "kj,ja,jb,jc->kabc")

    def combine(order):
        # d^k/dz^k sin(z) = sin(z + k pi / 2)
        def fn(y):
            s = amp * np.sin(y @ c.T + phase + 0.5 * math.pi * order)
            out = np.einsum(subscripts[order], s, *([c] * order))
            return out + const if order == 0 else out

        return fn

    return WeightedFunction(
        combine(0), weight, (combine(1), combine(2), combine(3)), dimension, f"random_smooth[{seed}]"
    )
