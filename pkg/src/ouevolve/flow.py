"""Joint integration of the propagator U(t,s), shift g(t,s) and covariance Q(t,s).

The three objects solve, for fixed s and increasing t,

    d/dt U  = A(t) U                         U(s,s)  = I
    d/dt g  = A(t) g + h(t)                  g(s,s)  = 0
    d/dt Qc = A(t) Qc + Qc A(t)^T + Q(t)     Qc(s,s) = 0

The last line is the differential form of Qc = int_s^t U(t,r) Q(r) U(t,r)^T dr;
the integral form is kept in :func:`covariance_integral` as a cross-check.

Integration is classical RK4 with step-doubling error control and local
Richardson extrapolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_legendre

from .errors import InsufficientSamples, StepFailure

DEFAULT_TOL = 1e-10
MAX_STEPS = 200_000


def spectral_norm(M):
    """Operator 2-norm from the symmetric eigenproblem of M^T M."""
    M = np.asarray(M, dtype=float)
    return math.sqrt(max(float(np.linalg.eigvalsh(M.T @ M)[-1]), 0.0))


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FlowState:
    s: float
    t: float
    U: np.ndarray
    g: np.ndarray
    Qc: np.ndarray
    eigenvalues: np.ndarray

    @property
    def lambda_max(self):
        return float(self.eigenvalues[-1])

    @property
    def lambda_min(self):
        return float(self.eigenvalues[0])

    @property
    def delta(self):
        return self.t - self.s

    def mean(self, x):
        """a(s,t,x) = U(t,s) x + g(t,s); ``x`` may be a batch of shape (n, N)."""
        return np.asarray(x, dtype=float) @ self.U.T + self.g


def _make_state(s, t, U, g, Qc):
    Qc = 0.5 * (Qc + Qc.T)
    return FlowState(float(s), float(t), _frozen(U), _frozen(g), _frozen(Qc), _frozen(np.linalg.eigvalsh(Qc)))


class _System:
    def __init__(self, model):
        self.model = model
        self.n = model.dimension

    def rhs(self, t, U, g, Qc):
        A = self.model.A_at(t)
        AQ = A @ Qc
        return A @ U, A @ g + self.model.h_at(t), AQ + AQ.T + self.model.Q_at(t)

    def rk4(self, t, y, dt, k1=None):
        U, g, Qc = y
        if k1 is None:
            k1 = self.rhs(t, U, g, Qc)
        half = 0.5 * dt
        k2 = self.rhs(t + half, U + half * k1[0], g + half * k1[1], Qc + half * k1[2])
        k3 = self.rhs(t + half, U + half * k2[0], g + half * k2[1], Qc + half * k2[2])
        k4 = self.rhs(t + dt, U + dt * k3[0], g + dt * k3[1], Qc + dt * k3[2])
        return tuple(
            yi + dt / 6.0 * (a + 2.0 * b + 2.0 * c + d) for yi, a, b, c, d in zip(y, k1, k2, k3, k4)
        )


def _integrate(system, s, targets, tol, h0=None):
    """Advance from s through the sorted ``targets``, returning the state at each."""
    n = system.n
    y = (np.eye(n), np.zeros(n), np.zeros((n, n)))
    t = s
    out = []
    span = targets[-1] - s if len(targets) else 0.0
    h = h0 or min(0.05, span / 4.0) if span > 0 else 0.0
    steps = 0
    for target in targets:
        while t < target:
            if steps > MAX_STEPS:
                raise StepFailure(f"more than {MAX_STEPS} steps between {s} and {target}")
            dt = min(h, target - t)
            if dt <= 1e-15 * max(1.0, abs(target)):
                t = target
                break
            k1 = system.rhs(t, *y)
            coarse = system.rk4(t, y, dt, k1)
            mid = system.rk4(t, y, 0.5 * dt, k1)
            fine = system.rk4(t + 0.5 * dt, mid, 0.5 * dt)
            scale = max(1.0, max(float(np.abs(c).max()) for c in fine))
            err = max(float(np.abs(f - c).max()) for f, c in zip(fine, coarse)) / 15.0 / scale
            steps += 1
            if err <= tol:
                t = target if dt == target - t else t + dt
                y = tuple(f + (f - c) / 15.0 for f, c in zip(fine, coarse))
                y = (y[0], y[1], 0.5 * (y[2] + y[2].T))
                grow = 5.0 if err == 0.0 else min(5.0, 0.9 * (tol / err) ** 0.2)
                # a step clipped at a target says little about the next one
                if dt >= h:
                    h = dt * grow
            else:
                h = dt * max(0.1, 0.9 * (tol / err) ** 0.2)
                if h < 1e-13 * max(1.0, abs(t)):
                    raise StepFailure(f"step size underflow at t={t:.6g} (error {err:.3e} > tol {tol:.1e})")
        out.append(_make_state(s, target, *y))
    return out


def flow(model, s, t, tol=DEFAULT_TOL):
    """(U(t,s), g(t,s), Q(t,s)) for s <= t."""
    return flow_many(model, s, [t], tol)[0]


def flow_many(model, s, ts, tol=DEFAULT_TOL):
    """Flow from a common start ``s`` to every time in ``ts`` with one integration."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    model.check_time(s)
    for t in ts:
        model.check_time(t)
        if t < s:
            raise ValueError(f"flow requires t >= s (got s={s}, t={t})")
    order = np.argsort(ts, kind="stable")
    states = _integrate(_System(model), float(s), [float(ts[k]) for k in order], tol)
    out = [None] * len(ts)
    for k, st in zip(order, states):
        out[k] = st
    return out


def backward_derivative_check(model, s, t, delta=1e-3, tol=DEFAULT_TOL):
    """Residual of d/ds U(t,s) = -U(t,s) A(s) by a centred difference in s.

    Returns ``||(U(t,s+d) - U(t,s-d)) / 2d + U(t,s) A(s)||``, which should
    scale like d^2.
    """
    if not s < t:
        raise ValueError("need s < t")
    delta = min(delta, 0.5 * (t - s))
    plus = flow(model, s + delta, t, tol).U
    minus = flow(model, s - delta, t, tol).U
    U = flow(model, s, t, tol).U
    return spectral_norm((plus - minus) / (2.0 * delta) + U @ model.A_at(s))


def covariance_integral(model, s, t, panels=16, order=8, tol=DEFAULT_TOL):
    """int_s^t U(t,r) Q(r) U(t,r)^T dr by composite Gauss-Legendre (cross-check only)."""
    x, w = roots_legendre(order)
    edges = np.linspace(s, t, panels + 1)
    n = model.dimension
    total = np.zeros((n, n))
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        for xi, wi in zip(x, w):
            r = lo + half * (xi + 1.0)
            U = flow(model, r, t, tol).U
            total += half * wi * (U @ model.Q_at(r) @ U.T)
    return 0.5 * (total + total.T)


@dataclass(frozen=True)
class DecayConstants:
    M: float
    omega: float
    H: float
    omega_worst: float
    residual: float = 0.0

    @property
    def omega_minus(self):
        return min(0.0, self.omega)

    def U_bound(self, delta):
        return self.M * np.exp(-self.omega * np.asarray(delta))

    def Qinv_sqrt_bound(self, delta):
        delta = np.asarray(delta, dtype=float)
        return self.H * np.exp(-self.omega_minus * delta) / np.sqrt(delta)


def fit_decay_constants(model, pairs, tol=DEFAULT_TOL):
    """Fit ``||U(t,s)|| <= M e^{-omega (t-s)}`` and the covariance constant H.

    omega comes from a least-squares fit of log||U|| against t - s; M is then
    inflated until every sample satisfies the bound.  H is the smallest
    constant with ``||Q(t,s)^{-1/2}|| <= H e^{-omega_- (t-s)} / (t-s)^{1/2}``
    on the samples.  ``omega_worst`` is the Gronwall value -N*A_inf.
    """
    pairs = [(float(s), float(t)) for s, t in pairs]
    if len(pairs) < 8:
        raise InsufficientSamples(f"need at least 8 (s,t) pairs, got {len(pairs)}")
    deltas = np.array([t - s for s, t in pairs])
    if np.any(deltas <= 0):
        raise InsufficientSamples("every pair needs s < t")
    if deltas.max() / deltas.min() < 10.0:
        raise InsufficientSamples("samples must span at least one decade of t - s")

    by_start = {}
    for k, (s, t) in enumerate(pairs):
        by_start.setdefault(s, []).append((k, t))
    states = [None] * len(pairs)
    for s, items in by_start.items():
        for (k, _), st in zip(items, flow_many(model, s, [t for _, t in items], tol)):
            states[k] = st

    logU = np.array([math.log(spectral_norm(st.U)) for st in states])
    design = np.column_stack([np.ones_like(deltas), -deltas])
    (logM, omega), *_ = np.linalg.lstsq(design, logU, rcond=None)
    resid = logU - design @ np.array([logM, omega])
    M = max(1.0, float(np.exp(np.max(logU + omega * deltas))))
    omega_minus = min(0.0, omega)
    H = max(
        math.sqrt(d) * math.exp(omega_minus * d) / math.sqrt(st.lambda_min) for d, st in zip(deltas, states)
    )
    A_inf = model.measured_bounds().A_inf
    return DecayConstants(
        M=M,
        omega=float(omega),
        H=float(H),
        omega_worst=-model.dimension * A_inf,
        residual=float(np.abs(resid).max()),
    )


def flow_table(model, s, ts, tol=DEFAULT_TOL):
    """Rows (t - s, ||U||, |g|, eigenvalues of Qc...) for plotting."""
    rows = []
    for st in flow_many(model, s, ts, tol):
        rows.append([st.delta, spectral_norm(st.U), float(np.linalg.norm(st.g)), *st.eigenvalues.tolist()])
    return rows
