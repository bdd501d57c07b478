"""The evolution operator P_{s,t} f(x) = E f(Y),  Y ~ N(U(t,s) x + g(t,s), Q(t,s)).

All evaluations are vectorised over a batch of points x of shape (k, N).
Derivatives in x come in four flavours (``method=``):

``kernel``
    f is only assumed continuous with weighted growth.  The gradient uses
    the smoothing kernel  D_x P f(x) = E[f(Y) U^T Q^{-1}(Y - a)];  second
    and third derivatives factor P_{s,t} = P_{s,s1} P_{s1,t} with
    s1 = (s+t)/2 (and s2 = s + (t-s)/4 for order three) and push one
    derivative through the kernel on each factor.
``direct``
    Hermite-polynomial kernels of the required order in one quadrature.
    Independent of the splitting route; used to cross-check it.
``transfer``
    f carries exact derivatives, moved onto f:  D_x P f = U^T P(Df), etc.
``auto``
    transfer as many derivatives as f has exactly, Hermite kernels for the
    rest; falls back to ``kernel`` when f has no exact derivatives.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

from .coeffs import WeightSpec
from .errors import MissingDerivatives, QuadratureOverflow, SingularCovariance
from .flow import DEFAULT_TOL, flow_many
from .gaussmeasure import GaussHermite

SINGULARITY_FLOOR = 1e-6
CHUNK = 2_000_000


def _values(f):
    return f.f if hasattr(f, "f") else f


def _exact_order(f):
    return len(getattr(f, "derivs", ()))


def _field_derivative(f, order):
    if order == 0:
        return _values(f)
    return f.derivs[order - 1]


class EvolutionOperator:
    """P_{s,t} for a coefficient model, a weight and a quadrature scheme.

    Flows are cached by (s, t); the cache only ever grows and every entry is
    immutable, so results do not depend on the order of insertion.
    """

    def __init__(
        self,
        model,
        weight=None,
        scheme=None,
        flow_tol=DEFAULT_TOL,
        floor=SINGULARITY_FLOOR,
        inner_scheme=None,
    ):
        self.model = model
        self.weight = weight or WeightSpec()
        self.scheme = scheme or GaussHermite()
        self.inner_scheme = inner_scheme or self.scheme
        self.flow_tol = flow_tol
        self.floor = floor
        self._cache = {}
        self._lock = threading.Lock()

    # -- flows -------------------------------------------------------------

    def flow(self, s, t):
        key = (float(s), float(t))
        st = self._cache.get(key)
        if st is None:
            st = flow_many(self.model, key[0], [key[1]], self.flow_tol)[0]
            with self._lock:
                st = self._cache.setdefault(key, st)
        return st

    def prefetch(self, s, ts):
        """Integrate once from ``s`` to all of ``ts`` and cache every state."""
        ts = [float(t) for t in ts if (float(s), float(t)) not in self._cache]
        if not ts:
            return
        states = flow_many(self.model, float(s), ts, self.flow_tol)
        with self._lock:
            for t, st in zip(ts, states):
                self._cache.setdefault((float(s), t), st)

    def diagnostics(self, s, t):
        return {"quad": str(self.scheme), "flow_tol": self.flow_tol, "delta": float(t) - float(s)}

    # -- quadrature core ---------------------------------------------------

    def _rule(self, inner=False):
        return (self.inner_scheme if inner else self.scheme).rule(self.model.dimension)

    def _expect(self, st, x, fn, inner=False, kernel=None):
        """sum_n w_n fn(a(x) + S xi_n) [x] kernel_n  for every row of x.

        ``fn`` maps points (m, N) to values (m, *shape); ``kernel`` is an
        optional array (n_nodes, *kshape).  Returns (k, *kshape, *shape).
        """
        xi, w = self._rule(inner)
        S = _sqrt(st)
        offsets = xi @ S
        means = st.mean(x)
        n_nodes, n_dim = offsets.shape
        per = max(1, CHUNK // max(1, n_nodes))
        out = []
        for lo in range(0, len(means), per):
            m = means[lo : lo + per]
            pts = (m[:, None, :] + offsets[None, :, :]).reshape(-1, n_dim)
            with np.errstate(over="ignore", invalid="ignore"):
                vals = np.asarray(fn(pts), dtype=float)
            if not np.all(np.isfinite(vals)):
                raise QuadratureOverflow("integrand overflows on the quadrature nodes")
            vals = vals.reshape((len(m), n_nodes) + vals.shape[1:])
            if kernel is None:
                out.append(np.tensordot(vals, w, axes=(1, 0)) if vals.ndim == 2 else np.einsum("kn...,n->k...", vals, w))
            else:
                kw = kernel * w.reshape((-1,) + (1,) * (kernel.ndim - 1))
                kshape = kernel.shape[1:]
                vshape = vals.shape[2:]
                r = np.tensordot(kw.reshape(n_nodes, -1), vals.reshape(len(m), n_nodes, -1), axes=(0, 1))
                # r: (kk, k, vv)
                r = np.moveaxis(r, 1, 0).reshape((len(m),) + kshape + vshape)
                out.append(r)
        return np.concatenate(out, axis=0)

    def _check_interval(self, s, t, derivative):
        if t < s:
            raise ValueError(f"P_(s,t) needs s <= t (got s={s}, t={t})")
        if derivative and t - s < self.floor:
            raise SingularCovariance(f"t - s = {t - s:.3e} is below the singularity floor {self.floor:.1e}")

    # -- values ------------------------------------------------------------

    def apply(self, f, s, t, x):
        """P_{s,t} f at x (a point or a batch of points)."""
        x, single = _batch(x, self.model.dimension)
        self._check_interval(s, t, False)
        if t == s:
            vals = np.asarray(_values(f)(x), dtype=float)
        else:
            vals = self._expect(self.flow(s, t), x, _values(f))
        return vals[0] if single else vals

    def apply_with_error(self, f, s, t, x):
        """Value and Monte Carlo standard error (zero for Gauss-Hermite)."""
        x, single = _batch(x, self.model.dimension)
        st = self.flow(s, t)
        mean = self._expect(st, x, _values(f))
        second = self._expect(st, x, lambda y: np.asarray(_values(f)(y)) ** 2)
        xi, w = self._rule()
        if len(w) > 1 and not isinstance(self.scheme, GaussHermite):
            err = np.sqrt(np.clip(second - mean**2, 0.0, None) / (len(w) - 1))
        else:
            err = np.zeros_like(mean)
        return (mean[0], err[0]) if single else (mean, err)

    # -- derivatives -------------------------------------------------------

    def gradient(self, f, s, t, x, method="auto"):
        return self.derivative(f, s, t, x, 1, method)

    def hessian(self, f, s, t, x, method="auto"):
        return self.derivative(f, s, t, x, 2, method)

    def third_derivs(self, f, s, t, x, method="auto"):
        return self.derivative(f, s, t, x, 3, method)

    def derivative(self, f, s, t, x, order, method="auto"):
        """D_x^order P_{s,t} f(x) as a tensor of shape (N,)*order (per point)."""
        if order == 0:
            return self.apply(f, s, t, x)
        if order not in (1, 2, 3):
            raise ValueError("derivative order must be 0, 1, 2 or 3")
        x, single = _batch(x, self.model.dimension)
        self._check_interval(s, t, True)
        k_avail = _exact_order(f)
        if method == "auto":
            method = "mixed" if k_avail > 0 else "kernel"
        if method == "transfer":
            if k_avail < order:
                raise MissingDerivatives(f"transfer of {order} derivatives needs exact derivatives of f")
            out = self._mixed(f, s, t, x, order, order)
        elif method == "mixed":
            out = self._mixed(f, s, t, x, order, min(order, k_avail))
        elif method == "direct":
            out = self._mixed(f, s, t, x, order, 0)
        elif method == "kernel":
            if order == 1:
                out = self._kernel_gradient(f, self.flow(s, t), x)
            elif order == 2:
                s1 = 0.5 * (s + t)
                out = self._split_hessian(f, self.flow(s, s1), self.flow(s1, t), x)
            else:
                s1 = s + 0.5 * (t - s)
                s2 = s + 0.25 * (t - s)
                out = self._split_third(f, self.flow(s, s2), self.flow(s2, s1), self.flow(s1, t), x)
        else:
            raise ValueError(f"unknown derivative method {method!r}")
        return out[0] if single else out

    def derivatives(self, f, s, t, x, max_order=2, method="auto"):
        """[P f, D P f, ..., D^max_order P f] at x."""
        return [self.derivative(f, s, t, x, k, method) for k in range(max_order + 1)]

    def _kernel_gradient(self, f, st, x, inner=False):
        xi, _ = self._rule(inner)
        B = _inv_sqrt(st) @ st.U
        return self._expect(st, x, _values(f), inner=inner, kernel=xi @ B)

    def _split_hessian(self, f, outer, inner, x):
        """Hessian through P_{s,s1} P_{s1,t}: one kernel derivative on each factor."""
        xi, _ = self._rule()
        K1 = xi @ (_inv_sqrt(outer) @ outer.U)
        grad_g1 = lambda y: self._kernel_gradient(f, inner, y, inner=True)  # noqa: E731
        M = self._expect(outer, x, grad_g1, kernel=K1)  # (k, i, kk)
        H = M @ outer.U
        return 0.5 * (H + np.swapaxes(H, 1, 2))

    def _split_third(self, f, first, middle, last, x):
        xi, _ = self._rule()
        K1 = xi @ (_inv_sqrt(first) @ first.U)
        hess_g2 = lambda y: self._split_hessian_inner(f, middle, last, y)  # noqa: E731
        T = self._expect(first, x, hess_g2, kernel=K1)  # (k, i, a, b)
        U = first.U
        out = np.einsum("kiab,aj,bl->kijl", T, U, U)
        return _symmetrize(out)

    def _split_hessian_inner(self, f, outer, inner, y):
        xi, _ = self._rule(inner=True)
        K1 = xi @ (_inv_sqrt(outer) @ outer.U)
        grad_g1 = lambda z: self._kernel_gradient(f, inner, z, inner=True)  # noqa: E731
        M = self._expect(outer, y, grad_g1, inner=True, kernel=K1)
        H = M @ outer.U
        return 0.5 * (H + np.swapaxes(H, 1, 2))

    def _mixed(self, f, s, t, x, order, k):
        """k derivatives moved onto f, order - k through a Hermite kernel."""
        st = self.flow(s, t)
        xi, _ = self._rule()
        B = _inv_sqrt(st) @ st.U
        v = xi @ B
        r = order - k
        kernel = _hermite_kernel(v, B.T @ B, r) if r > 0 else None
        U = st.U
        n = self.model.dimension
        Dk = _field_derivative(f, k)

        if k == 0:
            vals = self._expect(st, x, _values(f), kernel=kernel)
        else:
            vals = self._expect(st, x, lambda y: _transform(np.asarray(Dk(y), dtype=float), U, k), kernel=kernel)
        vals = vals.reshape((len(x),) + (n,) * order)
        return _symmetrize(vals) if order >= 2 else vals

    # -- composition and truncation -----------------------------------------

    def compose_check(self, f, s, r, t, x):
        """sup over x of |P_{s,t} f - P_{s,r} P_{r,t} f| / p."""
        if not s < r < t:
            raise ValueError("need s < r < t")
        x, _ = _batch(x, self.model.dimension)
        direct = self.apply(f, s, t, x)
        inner = lambda y: self.apply(f, r, t, y)  # noqa: E731
        composed = self._expect(self.flow(s, r), x, inner)
        return float(np.max(np.abs(direct - composed) / self.weight(x)))

    def truncated(self, f, s, t, r, n, x):
        """S_n f(x) = P_{s,r}(chi_{B(0,n)} P_{r,t} f)(x) with a sharp indicator."""
        if not s < r < t:
            raise ValueError("need s < r < t")
        x, single = _batch(x, self.model.dimension)

        def inner(y):
            inside = np.sum(y * y, axis=-1) <= n * n
            out = np.zeros(len(y))
            if inside.any():
                out[inside] = self.apply(f, r, t, y[inside])
            return out

        vals = self._expect(self.flow(s, r), x, inner)
        return vals[0] if single else vals

    def truncation_profile(self, f, s, t, r, ns, x):
        """S_n f(x) for every n in ``ns``, reusing P_{r,t} f on the outer nodes.

        Returns an array (len(ns), k).
        """
        if not s < r < t:
            raise ValueError("need s < r < t")
        x, _ = _batch(x, self.model.dimension)
        outer = self.flow(s, r)
        xi, w = self._rule()
        y = outer.mean(x)[:, None, :] + (xi @ _sqrt(outer))[None, :, :]
        flat = y.reshape(-1, self.model.dimension)
        inner = self.apply(f, r, t, flat).reshape(len(x), len(w))
        radius2 = np.sum(y * y, axis=-1)
        return np.stack([(inner * (radius2 <= n * n)) @ w for n in ns])

    def tail(self, f, s, t, r, n, x):
        """P_{s,r}(chi_{|y|>n} |P_{r,t} f|)(x): majorant of |S_n f - P_{s,t} f|."""
        x, single = _batch(x, self.model.dimension)

        def outside(y):
            mask = np.sum(y * y, axis=-1) > n * n
            out = np.zeros(len(y))
            if mask.any():
                out[mask] = np.abs(self.apply(f, r, t, y[mask]))
            return out

        vals = self._expect(self.flow(s, r), x, outside)
        return vals[0] if single else vals


def _transform(d, U, k):
    """Apply U^T to each of the k derivative slots of a batch tensor (m, N, ..., N)."""
    for slot in range(1, k + 1):
        d = np.moveaxis(np.tensordot(d, U, axes=([slot], [0])), -1, slot)
    return d


def _hermite_kernel(v, C, r):
    """Derivatives in x of the Gaussian density ratio, in whitened variables.

    r = 1:  v;   r = 2:  v v^T - C;   r = 3:  v v v - sym(C v)
    with v = B^T xi, C = B^T B, B = Q^{-1/2} U.
    """
    if r == 1:
        return v
    if r == 2:
        return np.einsum("ni,nj->nij", v, v) - C[None]
    if r == 3:
        vvv = np.einsum("ni,nj,nk->nijk", v, v, v)
        cv = np.einsum("ij,nk->nijk", C, v) + np.einsum("ik,nj->nijk", C, v) + np.einsum("jk,ni->nijk", C, v)
        return vvv - cv
    raise ValueError(r)


def _symmetrize(T):
    order = T.ndim - 1
    perms = list(itertools.permutations(range(1, order + 1)))
    return sum(np.transpose(T, (0,) + p) for p in perms) / len(perms)


def _sqrt(st):
    lam, V = np.linalg.eigh(st.Qc)
    return (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T


def _inv_sqrt(st):
    lam, V = np.linalg.eigh(st.Qc)
    if lam[0] <= 0.0:
        raise SingularCovariance(f"covariance Q({st.t:g},{st.s:g}) is singular")
    return (V / np.sqrt(lam)) @ V.T


def _batch(x, n):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.ndim == 1:
        if n == 1 and x.size > 1:
            return x.reshape(-1, 1), False
        return x.reshape(1, n), True
    return x, False
