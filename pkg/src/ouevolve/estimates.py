"""Numerical experiments behind the quantitative estimates.

* :func:`smoothing_rate` fits the power of (t - s) in the growth of
  ||P_{s,t} f||_{C^theta_p} for f of class C^alpha_p.
* :func:`envelope_check` tests the growth envelopes W, J, G and the
  operator bound C(t - s) e^{gamma (t - s)} sample by sample.
* :func:`exponential_counterexample` exhibits the unbounded ratio
  P_{s,t} p / p along an expanding direction of U(t, s).
* :func:`compactness_decay` tabulates ||S_n f - P_{s,t} f||_{C_p} against n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import bank as testbank
from .coeffs import WeightSpec
from .errors import InconclusiveFit, NoExpandingDirection
from .evolution import EvolutionOperator
from .flow import DEFAULT_TOL, fit_decay_constants, flow_many
from .gaussmeasure import GaussianMeasure, absolute_moment, normal_absolute_moment
from .weights import WeightedFunction, ball_points, cp_norm, holder_quotient

BRANCH_TOL = 1e-8
MIN_R2 = 0.98
RATE_WINDOW = (1e-3, 1.0)


# -- growth envelopes -----------------------------------------------------


@dataclass(frozen=True)
class GrowthEnvelopes:
    """Envelope functions built from M, omega, m, Q_inf and |h|_inf.

    The omega = 0 branch of each formula is taken when |omega| < branch_tol.
    """

    M: float
    omega: float
    m: int
    Q_inf: float
    h_inf: float
    branch_tol: float = BRANCH_TOL

    @property
    def neutral(self):
        return abs(self.omega) < self.branch_tol

    @property
    def omega_minus(self):
        return 0.0 if self.neutral else min(0.0, self.omega)

    def W(self, rho):
        rho = np.asarray(rho, dtype=float)
        if self.neutral:
            return self.M * self.h_inf * rho
        return self.M * self.h_inf / abs(self.omega) * np.ones_like(rho)

    def J(self, rho):
        rho = np.asarray(rho, dtype=float)
        if self.neutral:
            return self.M**2 * self.Q_inf * rho
        return self.M**2 * self.Q_inf / (2.0 * abs(self.omega)) * np.ones_like(rho)

    def G(self, rho):
        rho = np.asarray(rho, dtype=float)
        m = self.m
        base = 2.0 ** (m - 1) * self.M ** (2 * m) * self.Q_inf**m
        if self.neutral:
            return base * rho**m
        return base / (2.0**m * abs(self.omega) ** m) * np.ones_like(rho)

    def K(self, rho, r):
        m = self.m
        return 2.0 ** (2 * m - 1) * (self.W(rho) ** (2 * m) + self.M ** (2 * m) * np.asarray(r, dtype=float) ** (2 * m))

    def H(self, rho, r):
        return self.W(rho) + self.M * (np.asarray(r, dtype=float) + 1.0)

    def C(self, rho, c):
        """Operator bound: sup |P f| / p <= C(rho) e^{gamma rho} ||f||_{C_p}."""
        m = self.m
        inner = self.W(rho) ** (2 * m) + c * self.G(rho)
        return 2.0 ** (2 * m - 1) * (self.M ** (2 * m) + 2.0 ** (2 * m - 1) * inner)

    @property
    def gamma(self):
        return -2.0 * self.m * self.omega_minus

    def c_theory(self, n_dim):
        """c with C_{2m} <= c G e^{-2m omega_- rho}: E|Z|^{2m} / 2^{m-1} for Z ~ N(0, I_N)."""
        return normal_absolute_moment(n_dim, 2 * self.m) / 2.0 ** (self.m - 1)

    @classmethod
    def for_model(cls, model, m, pairs, flow_tol=DEFAULT_TOL):
        dc = fit_decay_constants(model, pairs, flow_tol)
        return cls(dc.M, dc.omega, m, model.Q_norm_sup(), model.h_sup())


@dataclass(frozen=True)
class EnvelopeRow:
    s: float
    t: float
    quantity: str
    lhs: float
    rhs: float
    ok: bool


@dataclass(frozen=True)
class EnvelopeReport:
    envelopes: GrowthEnvelopes
    rows: tuple
    c_fitted: float
    c_theory: float

    @property
    def violations(self):
        return [row for row in self.rows if not row.ok]

    @property
    def passed(self):
        return not self.violations and self.c_fitted <= self.c_theory * (1.0 + BRANCH_TOL)


def default_pairs(starts=(0.0, 0.7, 1.9), lags=None):
    lags = np.logspace(-2, 0.5, 6) if lags is None else lags
    return [(s, s + float(d)) for s in starts for d in lags]


def envelope_check(model, weight, samples=None, functions=None, tol=1e-8, envelopes=None, op=None, R=5.0, n=64):
    """Check the envelope inequalities on sampled (s, t) pairs.

    Rows cover |g| <= W e^{-omega_- rho}, lambda_max(Q(t,s)) <= J e^{-2 omega_- rho},
    C_{2m} <= c G e^{-2m omega_- rho} (with the theoretical c) and, for every
    test function, sup|P f|/p <= C(rho) e^{gamma rho} sup|f|/p.
    """
    if weight.family != "polynomial":
        raise ValueError("envelope checks are stated for polynomial weights")
    samples = default_pairs() if samples is None else [(float(s), float(t)) for s, t in samples]
    env = envelopes or GrowthEnvelopes.for_model(model, weight.m, samples)
    functions = testbank.bank(testbank.UNIT_BALL, model.dimension, weight) if functions is None else functions
    op = op or EvolutionOperator(model, weight)
    N, m = model.dimension, weight.m
    c_th = env.c_theory(N)
    x = ball_points(N, R, n)
    px = weight(x)
    f_norms = [float(np.max(np.abs(f.f(x)) / px)) for f in functions]

    rows = []
    c_fit = 0.0

    def add(s, t, name, lhs, rhs):
        rows.append(EnvelopeRow(s, t, name, float(lhs), float(rhs), bool(lhs <= rhs * (1.0 + tol) + tol)))

    by_start = {}
    for s, t in samples:
        by_start.setdefault(s, []).append(t)
    for s, ts in by_start.items():
        op.prefetch(s, ts)
        for st in (op.flow(s, t) for t in ts):
            rho = st.delta
            decay = math.exp(-env.omega_minus * rho)
            add(s, st.t, "shift", np.linalg.norm(st.g), env.W(rho) * decay)
            add(s, st.t, "eigenvalue", st.lambda_max, env.J(rho) * decay**2)
            moment = absolute_moment(GaussianMeasure(np.zeros(N), st.Qc), 2 * m)
            bound = env.G(rho) * decay ** (2 * m)
            if bound > 0:
                c_fit = max(c_fit, moment / bound)
            add(s, st.t, "moment", moment, c_th * bound)
            C = env.C(rho, c_th) * math.exp(env.gamma * rho)
            for f, fn in zip(functions, f_norms):
                lhs = float(np.max(np.abs(op.apply(f, s, st.t, x)) / px))
                add(s, st.t, f"operator:{f.name}", lhs, C * fn)
    return EnvelopeReport(env, tuple(rows), float(c_fit), float(c_th))


# -- smoothing rates ------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    alpha: float
    theta: float
    slope: float
    intercept: float
    window: tuple
    r2: float
    deltas: tuple = ()
    norms: tuple = ()

    @property
    def expected(self):
        return -(self.theta - self.alpha) / 2.0

    @property
    def conclusive(self):
        return self.r2 >= MIN_R2

    def agrees(self, tol):
        return self.conclusive and abs(self.slope - self.expected) <= tol

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "theta": self.theta,
            "slope": self.slope,
            "expected": self.expected,
            "intercept": self.intercept,
            "window": list(self.window),
            "r2": self.r2,
        }


def evolved_field(op, f, s, t):
    """P_{s,t} f as a WeightedFunction whose derivatives come from the operator."""
    return WeightedFunction(
        lambda x: op.apply(f, s, t, x),
        op.weight,
        tuple((lambda x, k=k: op.derivative(f, s, t, x, k)) for k in (1, 2, 3)),
        op.model.dimension,
        f"P[{f.name}]",
    )


def smoothing_rate(
    model, weight, f, alpha, theta, window=RATE_WINDOW, n_points=7, s=0.0, op=None, R=10.0, n=256, strict=True
):
    """Fit log ||P_{s,s+d} f||_{C^theta_p} against log d over a decadic grid.

    Raises :class:`InconclusiveFit` (carrying the fit) when r^2 < 0.98 and
    ``strict`` is set.
    """
    if not alpha < theta <= 3:
        raise ValueError("need alpha < theta <= 3")
    if n_points < 6:
        raise ValueError("a rate fit needs at least 6 points")
    op = op or EvolutionOperator(model, weight)
    deltas = np.logspace(math.log10(window[0]), math.log10(window[1]), n_points)
    op.prefetch(s, s + deltas)
    norms = np.array([cp_norm(evolved_field(op, f, s, s + d), theta, R, n).value for d in deltas])
    X, Y = np.log(deltas), np.log(norms)
    slope, intercept = np.polyfit(X, Y, 1)
    r2 = float(np.corrcoef(X, Y)[0, 1] ** 2) if np.ptp(Y) > 0 else 0.0
    fit = RateFit(float(alpha), float(theta), float(slope), float(intercept), tuple(window), r2,
                  tuple(deltas.tolist()), tuple(norms.tolist()))
    if strict and not fit.conclusive:
        raise InconclusiveFit(f"r^2 = {r2:.4f} < {MIN_R2}", fit)
    return fit


# -- exponential weights: unbounded ratio -----------------------------------


@dataclass(frozen=True)
class CounterexampleTable:
    direction: tuple
    norm_U: float
    rows: tuple  # (r, ratio for the exponential weight, ratio for the control weight)

    @property
    def ratios(self):
        return np.array([row[1] for row in self.rows])

    @property
    def control(self):
        return np.array([row[2] for row in self.rows])

    @property
    def increasing(self):
        return bool(np.all(np.diff(self.ratios) > 0))

    @property
    def growth(self):
        return float(self.ratios[-1] / self.ratios[0])

    @property
    def control_spread(self):
        return float(self.control.max() / self.control.min())


def expanding_direction(U, iterations=200):
    """Unit x maximising |U x| by power iteration on U^T U."""
    U = np.asarray(U, dtype=float)
    x = np.ones(U.shape[1]) / math.sqrt(U.shape[1])
    for _ in range(iterations):
        y = U.T @ (U @ x)
        nrm = np.linalg.norm(y)
        if nrm == 0:
            break
        x = y / nrm
    return x, float(np.linalg.norm(U @ x))


def default_radii(norm_U, gamma, decades=4, count=9):
    """Geometric radii from 1 far enough out that the expected log-growth exceeds ``decades``."""
    c = norm_U ** (2.0 * gamma) - 1.0
    r_max = (1.0 + 2.0 * decades * math.log(10.0) / c) ** (1.0 / (2.0 * gamma))
    return np.geomspace(1.0, r_max, count)


def exponential_counterexample(model, gamma, s=0.0, t=1.0, radii=None, control_m=1, scheme=None):
    """Ratios P_{s,t} p(r x)/p(r x) along the most expanded direction x of U(t, s).

    The exponential weight is integrated in log space, as E exp(log p(y) - log p(r x)),
    so large radii do not overflow.  A polynomial weight with exponent
    ``control_m`` is evaluated at the same points as a control.
    """
    st = flow_many(model, s, [t])[0]
    x_hat, norm_U = expanding_direction(st.U)
    if norm_U <= 1.0 + 1e-12:
        raise NoExpandingDirection(f"||U({t:g},{s:g})|| = {norm_U:.6g} <= 1")
    radii = default_radii(norm_U, gamma) if radii is None else np.asarray(radii, dtype=float)
    exp_w = WeightSpec.exponential(gamma)
    poly_w = WeightSpec.polynomial(control_m)
    op = EvolutionOperator(model, exp_w, scheme=scheme)
    rows = []
    for r in radii:
        x = (r * x_hat)[None, :]
        log_px = (1.0 + r * r) ** gamma
        fn = lambda y, c=log_px: np.exp((1.0 + np.sum(y * y, axis=1)) ** gamma - c)  # noqa: E731
        ratio = float(op.apply(fn, s, t, x)[0])
        control = float(op.apply(poly_w, s, t, x)[0] / poly_w(x)[0])
        rows.append((float(r), ratio, control))
    return CounterexampleTable(tuple(x_hat.tolist()), norm_U, tuple(rows))


# -- compactness ----------------------------------------------------------


@dataclass(frozen=True)
class CompactnessTable:
    rows: tuple  # (n, max over the bank of ||S_n f - P f||, worst function)
    modulus: tuple  # (n, max Hölder quotient of P_{r,t} f on B(0, n))
    n_final: float
    R: float
    tolerance: float = 1e-9

    @property
    def column(self):
        return np.array([row[1] for row in self.rows])

    @property
    def monotone(self):
        return bool(np.all(np.diff(self.column) <= self.tolerance))

    @property
    def final(self):
        return float(self.column[-1])


def truncation_radius(op, s, r, x, sigmas=8.0):
    """max |a(s, r, x)| over the grid plus ``sigmas`` standard deviations of Q(r, s)."""
    st = op.flow(s, r)
    return float(np.max(np.linalg.norm(st.mean(x), axis=1)) + sigmas * math.sqrt(st.lambda_max))


def compactness_decay(
    model, weight, s, r, t, n_schedule=None, functions=None, R=5.0, n_points=64, theta=0.5, op=None, modulus=True
):
    """Rows (n, max_f sup_x |S_n f - P_{s,t} f|/p) over B(0, R).

    The default schedule runs over the integers up to, and ends at, the
    radius that covers the mean range of the grid plus eight standard
    deviations.
    """
    op = op or EvolutionOperator(model, weight)
    functions = testbank.bank(testbank.UNIT_BALL, model.dimension, weight) if functions is None else functions
    x = ball_points(model.dimension, R, n_points)
    px = weight(x)
    n_final = truncation_radius(op, s, r, x)
    if n_schedule is None:
        n_schedule = [float(k) for k in range(1, int(math.ceil(n_final)))] + [n_final]
    n_schedule = [float(v) for v in n_schedule]
    worst = np.zeros(len(n_schedule))
    names = [""] * len(n_schedule)
    for f in functions:
        direct = op.apply(f, s, t, x)
        profile = op.truncation_profile(f, s, t, r, n_schedule, x)
        diff = np.max(np.abs(profile - direct[None, :]) / px[None, :], axis=1)
        for k, d in enumerate(diff):
            if d >= worst[k]:
                worst[k], names[k] = d, f.name
    rows = tuple((n, float(v), name) for n, v, name in zip(n_schedule, worst, names))
    mod_rows = ()
    if modulus:
        mod = []
        for n in n_schedule[:: max(1, len(n_schedule) // 4)]:
            q = max(
                holder_quotient(lambda y, f=f: op.apply(f, r, t, y), model.dimension, theta, n, 1000)[0]
                for f in functions
            )
            mod.append((n, float(q)))
        mod_rows = tuple(mod)
    return CompactnessTable(rows, mod_rows, n_final, float(R))


def gaussian_tail_bound(op, s, r, x, n, weight):
    """sup_x P_{s,r}(chi_{|y|>n} p)(x) / p(x) over the grid.

    Multiplied by sup |P_{r,t} f| / p this bounds |S_n f - P_{s,t} f| / p.
    """
    def tail(y):
        return np.where(np.sum(y * y, axis=1) > n * n, weight(y), 0.0)

    return float(np.max(op.apply(tail, s, r, x) / weight(x)))

