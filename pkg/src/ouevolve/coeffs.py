"""Time-dependent coefficients (A, Q, h) of the Ornstein-Uhlenbeck operator.

A model is a triple of pure callables ``t -> array`` on a closed time
interval, together with optional declared bounds.  The standing hypotheses
(boundedness, symmetry and uniform ellipticity of Q, contractivity of the
propagator for exponential weights, negative definiteness of A) are checked
by sampling in :func:`validate_hypotheses`.

``h`` is a vector-valued function of time: the drift is ``A(t) x + h(t)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DomainError, NonSymmetricQ

SYMMETRY_TOL = 1e-12
BOUND_INFLATION = 1.05

MatrixFn = Callable[[float], np.ndarray]
VectorFn = Callable[[float], np.ndarray]


@dataclass(frozen=True)
class DeclaredBounds:
    A_inf: Optional[float] = None
    Q_inf: Optional[float] = None
    C_ell: Optional[float] = None


@dataclass(frozen=True)
class CoefficientModel:
    dimension: int
    A: MatrixFn
    Q: MatrixFn
    h: VectorFn
    time_domain: tuple = (-50.0, 50.0)
    declared: DeclaredBounds = field(default_factory=DeclaredBounds)
    name: str = "custom"
    # JSON-able description, kept so a run can be persisted and replayed
    source: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        if int(self.dimension) < 1:
            raise ValueError("dimension must be a positive integer")
        lo, hi = self.time_domain
        if not lo < hi:
            raise ValueError("time_domain must satisfy t_min < t_max")

    def check_time(self, t):
        lo, hi = self.time_domain
        if not (lo <= t <= hi):
            raise DomainError(f"time {t} outside the model time domain [{lo}, {hi}]")

    def A_at(self, t):
        self.check_time(t)
        return np.asarray(self.A(t), dtype=float).reshape(self.dimension, self.dimension)

    def Q_at(self, t):
        self.check_time(t)
        return np.asarray(self.Q(t), dtype=float).reshape(self.dimension, self.dimension)

    def h_at(self, t):
        self.check_time(t)
        return np.asarray(self.h(t), dtype=float).reshape(self.dimension)

    def measured_bounds(self, times=None):
        """Declared bounds, with missing entries replaced by sampled maxima x1.05."""
        if times is None:
            times = np.linspace(*self.time_domain, 256)
        d = self.declared
        A_inf, Q_inf, C_ell = d.A_inf, d.Q_inf, d.C_ell
        if A_inf is None:
            A_inf = BOUND_INFLATION * max(np.abs(self.A_at(t)).max() for t in times)
        if Q_inf is None:
            Q_inf = BOUND_INFLATION * max(np.abs(self.Q_at(t)).max() for t in times)
        if C_ell is None:
            # shrink the measured minimum so the declared constant is a strict lower bound
            C_ell = min(np.linalg.eigvalsh(_sym(self.Q_at(t)))[0] for t in times) / BOUND_INFLATION
        return DeclaredBounds(float(A_inf), float(Q_inf), float(C_ell))

    def h_sup(self, times=None):
        if times is None:
            times = np.linspace(*self.time_domain, 256)
        return float(max(np.linalg.norm(self.h_at(t)) for t in times))

    def Q_norm_sup(self, times=None):
        """Sampled sup of the spectral norm of Q(t)."""
        if times is None:
            times = np.linspace(*self.time_domain, 256)
        return float(max(np.linalg.norm(self.Q_at(t), 2) for t in times))


def _sym(M):
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class WeightSpec:
    """Weight family: ``1 + |x|^(2m)`` or ``exp((1 + |x|^2)^gamma)``."""

    family: str = "polynomial"
    m: int = 1
    gamma: float = 0.5

    def __post_init__(self):
        if self.family == "polynomial":
            if int(self.m) != self.m or self.m < 1:
                raise ValueError("polynomial weight needs an integer m >= 1")
        elif self.family == "exponential":
            if not 0.0 < self.gamma <= 0.5:
                raise ValueError("exponential weight needs 0 < gamma <= 1/2")
        else:
            raise ValueError(f"unknown weight family {self.family!r}")

    @classmethod
    def polynomial(cls, m=1):
        return cls("polynomial", m=int(m))

    @classmethod
    def exponential(cls, gamma=0.5):
        return cls("exponential", gamma=float(gamma))

    @classmethod
    def parse(cls, text):
        """Parse ``poly:m`` or ``exp:gamma`` (``exp:1/4`` accepted)."""
        try:
            kind, _, arg = text.partition(":")
            if kind in ("poly", "polynomial"):
                return cls.polynomial(int(arg or 1))
            if kind in ("exp", "exponential"):
                num, _, den = (arg or "0.5").partition("/")
                return cls.exponential(float(num) / float(den or 1.0))
        except ValueError as exc:
            raise ConfigError(str(exc), field="weight") from exc
        raise ConfigError(f"cannot parse weight spec {text!r}", field="weight")

    def __str__(self):
        if self.family == "polynomial":
            return f"poly:{self.m}"
        return f"exp:{self.gamma:g}"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        if self.family == "polynomial":
            return 1.0 + r2**self.m
        return np.exp((1.0 + r2) ** self.gamma)


# -- construction ---------------------------------------------------------


def constant_model(A, Q, h=None, time_domain=(-50.0, 50.0), name="constant", declared=None):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = A.shape[0]
    h = np.zeros(n) if h is None else np.atleast_1d(np.asarray(h, dtype=float))
    if A.shape != (n, n) or Q.shape != (n, n) or h.shape != (n,):
        raise ValueError("A, Q must be NxN and h an N-vector")
    source = {
        "type": "constant",
        "A": A.tolist(),
        "Q": Q.tolist(),
        "h": h.tolist(),
        "time_domain": list(time_domain),
    }
    return CoefficientModel(
        dimension=n,
        A=lambda t: A.copy(),
        Q=lambda t: Q.copy(),
        h=lambda t: h.copy(),
        time_domain=tuple(float(v) for v in time_domain),
        declared=declared or DeclaredBounds(),
        name=name,
        source=source,
    )


def tabulated_model(times, A, Q, h=None, name="tabulated"):
    """Piecewise-linear interpolation of tabulated coefficients."""
    times = np.asarray(times, dtype=float)
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be a strictly increasing grid of length >= 2")
    n = A.shape[1]
    h = np.zeros((len(times), n)) if h is None else np.asarray(h, dtype=float)
    if A.shape != (len(times), n, n) or Q.shape != A.shape or h.shape != (len(times), n):
        raise ValueError("tabulated arrays do not match the time grid")

    def interp(table):
        def fn(t):
            k = int(np.clip(np.searchsorted(times, t) - 1, 0, len(times) - 2))
            w = (t - times[k]) / (times[k + 1] - times[k])
            return (1.0 - w) * table[k] + w * table[k + 1]

        return fn

    source = {
        "type": "tabulated",
        "times": times.tolist(),
        "A": A.tolist(),
        "Q": Q.tolist(),
        "h": h.tolist(),
    }
    return CoefficientModel(
        dimension=n,
        A=interp(A),
        Q=interp(Q),
        h=interp(h),
        time_domain=(float(times[0]), float(times[-1])),
        name=name,
        source=source,
    )


BUILTIN_MODELS = ("heat", "ou1", "rotation", "periodic", "periodic_diag", "expanding", "slow")


def builtin(name, dimension=None, diffusion=None, time_domain=(-50.0, 50.0)):
    """Named models.

    heat       A = 0,              Q = 2I
    ou1        A = -I,             Q = 2I
    rotation   A = [[0,1],[-1,0]], Q = I   (N = 2 only)
    periodic   A = -(2 + sin t) I, Q = I
    expanding  A = +I,             Q = I
    slow       A = -0.05 I,        Q = 1e-3 I  (weak drift and noise)

    ``diffusion`` replaces the default scale of Q (Q = diffusion * I).
    """
    key = "periodic" if name == "periodic_diag" else name
    if key not in BUILTIN_MODELS:
        raise ConfigError(f"unknown built-in model {name!r}", field="model")
    if key == "rotation":
        if dimension not in (None, 2):
            raise ConfigError("rotation model is two-dimensional", field="dimension")
        n = 2
    else:
        n = int(dimension or 1)
    eye = np.eye(n)
    q = {"heat": 2.0, "ou1": 2.0, "slow": 1e-3}.get(key, 1.0) if diffusion is None else float(diffusion)
    Qm = q * eye
    zero = np.zeros(n)
    if key == "heat":
        A = lambda t: np.zeros((n, n))  # noqa: E731
    elif key == "ou1":
        A = lambda t: -eye.copy()  # noqa: E731
    elif key == "rotation":
        R = np.array([[0.0, 1.0], [-1.0, 0.0]])
        A = lambda t: R.copy()  # noqa: E731
    elif key == "periodic":
        A = lambda t: -(2.0 + math.sin(t)) * eye  # noqa: E731
    elif key == "slow":
        A = lambda t: -0.05 * eye  # noqa: E731
    else:
        A = lambda t: eye.copy()  # noqa: E731
    source = {"type": "builtin", "name": key, "dimension": n, "time_domain": list(time_domain)}
    if diffusion is not None:
        source["diffusion"] = q
    return CoefficientModel(
        dimension=n,
        A=A,
        Q=lambda t: Qm.copy(),
        h=lambda t: zero.copy(),
        time_domain=tuple(float(v) for v in time_domain),
        name=key,
        source=source,
    )


def model_from_json(obj):
    """Build a model from its JSON description (dict, JSON text or file path)."""
    if isinstance(obj, (str, Path)):
        text = str(obj)
        if text in BUILTIN_MODELS:
            return builtin(text)
        path = Path(text)
        if path.suffix == ".json" or path.exists():
            try:
                text = path.read_text()
            except OSError as exc:
                raise ConfigError(str(exc), field="model") from exc
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}", field="model") from exc
    if isinstance(obj, str):
        return builtin(obj)
    if not isinstance(obj, dict):
        raise ConfigError("model description must be an object or a built-in name", field="model")
    kind = obj.get("type", "builtin" if "name" in obj else None)
    td = tuple(obj.get("time_domain", (-50.0, 50.0)))
    try:
        if kind == "builtin":
            if "name" not in obj:
                raise ConfigError("missing built-in name", field="model.name")
            return builtin(obj["name"], obj.get("dimension"), obj.get("diffusion"), td)
        if kind == "constant":
            for key in ("A", "Q"):
                if key not in obj:
                    raise ConfigError("required", field=f"model.{key}")
            declared = DeclaredBounds(**obj.get("declared_bounds", {}))
            return constant_model(obj["A"], obj["Q"], obj.get("h"), td, obj.get("name", "constant"), declared)
        if kind == "tabulated":
            for key in ("times", "A", "Q"):
                if key not in obj:
                    raise ConfigError("required", field=f"model.{key}")
            return tabulated_model(obj["times"], obj["A"], obj["Q"], obj.get("h"), obj.get("name", "tabulated"))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), field="model") from exc
    raise ConfigError(f"unknown model type {kind!r}", field="model.type")


# -- hypothesis checks ----------------------------------------------------


@dataclass(frozen=True)
class SamplePlan:
    n_times: int = 256
    n_directions: int = 64
    flow_starts: int = 8
    flow_lags: tuple = (0.05, 0.25, 1.0, 2.0)
    seed: int = 0

    def times(self, model):
        return np.linspace(*model.time_domain, self.n_times)

    def directions(self, n):
        rng = np.random.default_rng(self.seed)
        v = rng.standard_normal((self.n_directions, n))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return np.vstack([np.eye(n), v])


@dataclass(frozen=True)
class HypothesisCheck:
    name: str
    passed: bool
    value: float
    witness: Optional[tuple] = None
    detail: str = ""


@dataclass(frozen=True)
class HypothesisReport:
    checks: tuple

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def __contains__(self, name):
        return any(c.name == name for c in self.checks)

    def to_dict(self):
        return {
            c.name: {"passed": c.passed, "value": c.value, "witness": c.witness, "detail": c.detail}
            for c in self.checks
        }


def validate_hypotheses(model, weight, plan=None, flow_tol=1e-10):
    """Check the standing hypotheses on a sample plan.

    Always checked: bounded drift (|a_ij| <= A_inf), bounded diffusion,
    symmetry and ellipticity of Q.  For exponential weights additionally the
    contraction ``||U(t,s)|| <= exp(-omega (t-s))`` with omega > 0, and
    negative definiteness of the symmetric part of A.
    """
    plan = plan or SamplePlan()
    times = plan.times(model)
    if len(times) == 0:
        raise ValueError("empty sample plan")
    n = model.dimension
    dirs = plan.directions(n)
    bounds = model.measured_bounds(times)
    checks = []

    a_max, a_wit = -1.0, None
    q_max, q_wit = -1.0, None
    ell_min, ell_wit = np.inf, None
    for t in times:
        A = model.A_at(t)
        Q = model.Q_at(t)
        asym = np.abs(Q - Q.T).max()
        if asym >= SYMMETRY_TOL:
            raise NonSymmetricQ(f"Q({t:g}) asymmetric by {asym:.3e}")
        if np.abs(A).max() > a_max:
            a_max, a_wit = float(np.abs(A).max()), (float(t),)
        if np.abs(Q).max() > q_max:
            q_max, q_wit = float(np.abs(Q).max()), (float(t),)
        quad = np.einsum("ki,ij,kj->k", dirs, Q, dirs)
        k = int(np.argmin(quad))
        if quad[k] < ell_min:
            ell_min, ell_wit = float(quad[k]), (float(t), tuple(dirs[k].tolist()))

    checks.append(HypothesisCheck("bounded_drift", a_max <= bounds.A_inf, a_max, a_wit, f"A_inf={bounds.A_inf:g}"))
    checks.append(HypothesisCheck("bounded_diffusion", q_max <= bounds.Q_inf, q_max, q_wit, f"Q_inf={bounds.Q_inf:g}"))
    c_ell = bounds.C_ell if model.declared.C_ell is not None else 0.0
    ok = ell_min >= c_ell and ell_min > 0.0
    checks.append(HypothesisCheck("ellipticity", bool(ok), ell_min, ell_wit, f"C={c_ell:g}"))

    if weight is not None and weight.family == "exponential":
        checks.append(_contraction_check(model, plan, flow_tol))
        worst, wit = -np.inf, None
        for t in times:
            A = model.A_at(t)
            lam = float(np.linalg.eigvalsh(_sym(A))[-1])
            if lam > worst:
                worst, wit = lam, (float(t),)
        checks.append(HypothesisCheck("negative_definite_drift", worst < 0.0, worst, wit))
    return HypothesisReport(tuple(checks))


def _contraction_check(model, plan, tol):
    from .flow import flow_many, spectral_norm

    lo, hi = model.time_domain
    lags = np.asarray(plan.flow_lags, dtype=float)
    lags = lags[lags <= hi - lo]
    starts = np.linspace(lo, hi - lags.max(), plan.flow_starts)
    rate, wit, worst_norm = np.inf, None, 0.0
    for s in starts:
        for lag, st in zip(lags, flow_many(model, s, s + lags, tol=tol)):
            nrm = spectral_norm(st.U)
            worst_norm = max(worst_norm, nrm)
            r = -math.log(nrm) / lag if nrm > 0 else np.inf
            if r < rate:
                rate, wit = r, (float(s), float(s + lag))
    ok = rate > 0.0 and worst_norm <= 1.0
    return HypothesisCheck(
        "contraction", bool(ok), float(rate), wit, f"max ||U||={worst_norm:.6g}; fitted omega={rate:.6g}"
    )
