"""The f-function, its first-order condition, and the Merton-Garman pieces.

For a scalar problem with profit pi, dynamics (mu, sigma) and integrating
factor g, the Euclidean action density is

    f(s, X, u) = pi + g + g_s + mu g_x + 1/2 sigma^2 g_xx

and a feedback strategy u(s, X) is a root of

    f_u (f_xx)^2 - 2 f_x f_xu = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .sde import SdeSpec

FD_REL_STEP = 1e-5


class DomainError(ValueError):
    """Inputs outside the admissible domain, or a non-finite f."""


class NoSignChange(ValueError):
    pass


class MaxIterations(RuntimeError):
    pass


def _step(x: float, rel: float = FD_REL_STEP) -> float:
    return rel * max(1.0, abs(x))


@dataclass(frozen=True)
class GFunction:
    """Integrating factor g(s, X) on a k-dimensional state.

    ``value(s, X)`` takes ``X`` as a 1-d array. Derivative callables are optional;
    any that are missing are replaced by central differences with step
    ``1e-5 * max(1, |X_i|)``.
    """

    value: Callable
    d_s_fn: Optional[Callable] = None
    d_x_fn: Optional[Callable] = None
    d_xx_fn: Optional[Callable] = None
    rel_step: float = FD_REL_STEP

    @property
    def mode(self) -> str:
        analytic = all(f is not None for f in (self.d_s_fn, self.d_x_fn, self.d_xx_fn))
        return "analytic" if analytic else "finite-difference"

    def __call__(self, s, X) -> float:
        return float(self.value(s, np.atleast_1d(np.asarray(X, dtype=float))))

    def d_s(self, s, X) -> float:
        X = np.atleast_1d(np.asarray(X, dtype=float))
        if self.d_s_fn is not None:
            return float(self.d_s_fn(s, X))
        h = _step(s, self.rel_step)
        return (self.value(s + h, X) - self.value(s - h, X)) / (2 * h)

    def d_x(self, s, X) -> np.ndarray:
        X = np.atleast_1d(np.asarray(X, dtype=float))
        if self.d_x_fn is not None:
            return np.atleast_1d(np.asarray(self.d_x_fn(s, X), dtype=float))
        out = np.empty(X.size)
        for i in range(X.size):
            e = np.zeros(X.size)
            e[i] = _step(X[i], self.rel_step)
            out[i] = (self.value(s, X + e) - self.value(s, X - e)) / (2 * e[i])
        return out

    def d_xx(self, s, X) -> np.ndarray:
        X = np.atleast_1d(np.asarray(X, dtype=float))
        if self.d_xx_fn is not None:
            return np.atleast_2d(np.asarray(self.d_xx_fn(s, X), dtype=float))
        n = X.size
        H = np.empty((n, n))
        g0 = self.value(s, X)
        hs = [_step(x, self.rel_step) for x in X]
        for i in range(n):
            ei = np.zeros(n)
            ei[i] = hs[i]
            H[i, i] = (self.value(s, X + ei) - 2 * g0 + self.value(s, X - ei)) / hs[i] ** 2
            for j in range(i + 1, n):
                ej = np.zeros(n)
                ej[j] = hs[j]
                H[i, j] = H[j, i] = (
                    self.value(s, X + ei + ej) - self.value(s, X + ei - ej)
                    - self.value(s, X - ei + ej) + self.value(s, X - ei - ej)
                ) / (4 * hs[i] * hs[j])
        return H

    @classmethod
    def zero(cls) -> "GFunction":
        return cls(
            lambda s, X: 0.0,
            lambda s, X: 0.0,
            lambda s, X: np.zeros(np.size(X)),
            lambda s, X: np.zeros((np.size(X), np.size(X))),
        )


@dataclass(frozen=True)
class ProblemSpec:
    """Scalar-state control problem: profit, controlled SDE, integrating factor.

    ``partials(s, X, u) -> (f_u, f_x, f_xx, f_xu)`` may supply exact partials of
    f; otherwise they are taken by central differences.
    """

    profit: Callable
    sde: SdeSpec
    g: GFunction
    zeta: float = 1.0
    partials: Optional[Callable] = None

    def __post_init__(self):
        if not 0 < self.zeta <= 1:
            raise ValueError("zeta must lie in (0, 1]")


@dataclass(frozen=True)
class FValue:
    f: float
    f_u: float
    f_x: float
    f_xx: float
    f_xu: float


def f_value(spec: ProblemSpec, s: float, X, u) -> float:
    """f = pi + g + g_s + mu' grad g + 1/2 tr(sigma' H_g sigma)."""
    X = np.atleast_1d(np.asarray(X, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    # f is evaluated at the raw arguments; the simulator's positivity guards
    # would put kinks into its partials
    mu = np.atleast_1d(np.asarray(spec.sde.drift(s, X, u), dtype=float))
    H = spec.g.d_xx(s, X)
    val = (
        float(spec.profit(s, X if X.size > 1 else X[0], u if u.size > 1 else u[0]))
        + spec.g(s, X)
        + spec.g.d_s(s, X)
        + float(mu @ spec.g.d_x(s, X))
    )
    if np.any(H):
        sig = np.atleast_2d(np.asarray(spec.sde.diffusion(s, X, u), dtype=float))
        val += 0.5 * float(np.trace(sig.T @ H @ sig))
    return val


def compute_f(spec: ProblemSpec, s: float, X: float, u: float,
              h_x: Optional[float] = None, h_u: Optional[float] = None) -> FValue:
    f0 = f_value(spec, s, X, u)
    if not math.isfinite(f0):
        raise DomainError(f"f is not finite at s={s}, X={X}, u={u}")
    if spec.partials is not None:
        f_u, f_x, f_xx, f_xu = spec.partials(s, X, u)
        return FValue(f0, float(f_u), float(f_x), float(f_xx), float(f_xu))
    hx = _step(X) if h_x is None else h_x
    hu = _step(u) if h_u is None else h_u

    def f(x, v):
        return f_value(spec, s, x, v)

    f_xp, f_xm = f(X + hx, u), f(X - hx, u)
    f_x = (f_xp - f_xm) / (2 * hx)
    f_xx = (f_xp - 2 * f0 + f_xm) / hx ** 2
    f_u = (f(X, u + hu) - f(X, u - hu)) / (2 * hu)
    f_xu = (f(X + hx, u + hu) - f(X + hx, u - hu) - f(X - hx, u + hu) + f(X - hx, u - hu)) / (4 * hx * hu)
    out = FValue(f0, f_u, f_x, f_xx, f_xu)
    if not all(math.isfinite(v) for v in (f_u, f_x, f_xx, f_xu)):
        raise DomainError(f"non-finite partials of f at s={s}, X={X}, u={u}")
    return out


def foc_terms(spec: ProblemSpec, s: float, X: float, u: float, **steps) -> tuple:
    """Both sides of the first-order condition: (f_u f_xx^2, 2 f_x f_xu)."""
    fv = compute_f(spec, s, X, u, **steps)
    return fv.f_u * fv.f_xx ** 2, 2.0 * fv.f_x * fv.f_xu


def foc_residual(spec: ProblemSpec, s: float, X: float, u: float, **steps) -> float:
    lhs, rhs = foc_terms(spec, s, X, u, **steps)
    return lhs - rhs


def residual_scale(spec: ProblemSpec, s: float, X: float, u: float) -> float:
    lhs, rhs = foc_terms(spec, s, X, u)
    return abs(lhs) + abs(rhs)


def solve_foc(spec: ProblemSpec, s: float, X: float, u_bracket: tuple, tol: float = 1e-10,
              max_iter: int = 200) -> float:
    """Root of the first-order condition inside ``u_bracket``.

    If the endpoints do not straddle a root, 64 equispaced points are scanned and
    the first sign change is used. Bisection narrows the bracket, then a
    safeguarded secant iteration finishes. Only the root in this bracket is
    returned; callers wanting every root pass several brackets.
    """
    lo, hi = map(float, u_bracket)
    if not lo < hi:
        raise ValueError("u_bracket must satisfy lo < hi")

    def res(v):
        return foc_residual(spec, s, X, v)

    def converged(v, r):
        return abs(r) <= tol * (1.0 + residual_scale(spec, s, X, v))

    r_lo, r_hi = res(lo), res(hi)
    if r_lo == 0 and r_hi == 0 or np.sign(r_lo) == np.sign(r_hi):
        grid = np.linspace(lo, hi, 64)
        vals = np.array([res(v) for v in grid])
        if not np.any(vals):
            raise NoSignChange("no sign change in bracket (residual vanishes identically)")
        zero = np.flatnonzero(vals == 0)
        if zero.size:
            return float(grid[zero[0]])
        flips = np.flatnonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))
        if flips.size == 0:
            raise NoSignChange(f"no sign change in bracket [{lo}, {hi}]")
        i = flips[0]
        lo, hi, r_lo, r_hi = grid[i], grid[i + 1], vals[i], vals[i + 1]
    if r_lo == 0:
        return lo
    if r_hi == 0:
        return hi

    width0 = hi - lo
    for it in range(max_iter):
        if hi - lo > 1e-6 * width0:
            mid = 0.5 * (lo + hi)
        else:
            mid = hi - r_hi * (hi - lo) / (r_hi - r_lo)
            if not lo < mid < hi:
                mid = 0.5 * (lo + hi)
        r_mid = res(mid)
        if r_mid == 0 or converged(mid, r_mid):
            return float(mid)
        if np.sign(r_mid) == np.sign(r_lo):
            lo, r_lo = mid, r_mid
        else:
            hi, r_hi = mid, r_mid
    raise MaxIterations(f"max iterations ({max_iter}) reached; bracket [{lo}, {hi}]")


# Merton-Garman ---------------------------------------------------------------

Coef = Union[float, Callable]


def _coef(c: Coef, s, u) -> float:
    return float(c(s, u)) if callable(c) else float(c)


@dataclass(frozen=True)
class MGParams:
    """Two-factor (price K, variance V) model parameters.

    ``mu1``, ``mu2``, ``sigma1``, ``sigma2`` are constants or maps (s, u) -> float;
    ``rho`` weights the mixed K-V term of f. ``r``, ``beta``, ``alpha`` and
    ``gamma`` (price/volatility correlation) enter the log-coordinate operator.
    """

    mu1: Coef = 0.05
    mu2: Coef = 0.1
    sigma1: Coef = 0.2
    sigma2: Coef = 0.3
    rho: float = 0.5
    r: float = 0.05
    beta: float = 0.02
    alpha: float = 0.75
    gamma: float = 0.5


def mgh_f(s: float, K: float, V: float, u: float, params: MGParams, g2: GFunction,
          profit: Optional[Callable] = None) -> float:
    """f for the two-factor problem, with g2 a GFunction over (K, V)."""
    if not (K > 0 and V > 0):
        raise DomainError(f"K and V must be positive, got K={K}, V={V}")
    X = np.array([K, V], dtype=float)
    mu1, mu2 = _coef(params.mu1, s, u), _coef(params.mu2, s, u)
    sig1, sig2 = _coef(params.sigma1, s, u), _coef(params.sigma2, s, u)
    grad = g2.d_x(s, X)
    H = g2.d_xx(s, X)
    pi = 0.0 if profit is None else float(profit(s, K, V, u))
    return (
        pi
        + g2(s, X)
        + g2.d_s(s, X)
        + K * mu1 * grad[0]
        + V * mu2 * grad[1]
        + 0.5 * K ** 2 * sig1 ** 2 * H[0, 0]
        + K * params.rho * sig1 ** 3 * H[0, 1]
        + 0.5 * V ** 2 * sig2 ** 2 * H[1, 1]
    )


def mgh_coefficients(b, params: MGParams) -> dict:
    """Coefficients of the log-coordinate operator as functions of b = log V."""
    mu2, sig2, al = _coef(params.mu2, 0.0, 0.0), _coef(params.sigma2, 0.0, 0.0), params.alpha
    eb = np.exp(b)
    return {
        "id": params.r,
        "a": params.r - eb / 2,
        "b": mu2 - params.beta * np.exp(-b) - 0.5 * sig2 ** 2 * np.exp(2 * b * (al - 1)),
        "aa": eb / 2,
        "ab": params.gamma * sig2 * np.exp(b * (al - 0.5)),
        "bb": sig2 ** 2 * np.exp(2 * b * (al - 1)),
    }


def mgh_operator_apply(C: np.ndarray, a_grid: np.ndarray, b_grid: np.ndarray, params: MGParams) -> np.ndarray:
    """Apply H_MG = r - c_a d_a - c_b d_b - c_aa d_aa - c_ab d_ab - c_bb d_bb.

    ``C[i, j]`` lives at ``(a_grid[i], b_grid[j])`` on a uniform grid. Interior
    nodes get second-order central differences; boundary nodes are copied.
    """
    C = np.asarray(C, dtype=float)
    a_grid = np.asarray(a_grid, dtype=float)
    b_grid = np.asarray(b_grid, dtype=float)
    if C.ndim != 2 or C.shape[0] < 3 or C.shape[1] < 3:
        raise ValueError("grid must be at least 3x3")
    if C.shape != (a_grid.size, b_grid.size):
        raise ValueError("C shape does not match the coordinate grids")
    ha = a_grid[1] - a_grid[0]
    hb = b_grid[1] - b_grid[0]
    if not (np.allclose(np.diff(a_grid), ha) and np.allclose(np.diff(b_grid), hb)):
        raise ValueError("grid must be uniform")
    if not np.all(np.isfinite(C)):
        raise ValueError("C must be finite")
    c = mgh_coefficients(b_grid[1:-1][None, :], params)
    mid = C[1:-1, 1:-1]
    C_a = (C[2:, 1:-1] - C[:-2, 1:-1]) / (2 * ha)
    C_b = (C[1:-1, 2:] - C[1:-1, :-2]) / (2 * hb)
    C_aa = (C[2:, 1:-1] - 2 * mid + C[:-2, 1:-1]) / ha ** 2
    C_bb = (C[1:-1, 2:] - 2 * mid + C[1:-1, :-2]) / hb ** 2
    C_ab = (C[2:, 2:] - C[2:, :-2] - C[:-2, 2:] + C[:-2, :-2]) / (4 * ha * hb)
    out = C.copy()
    out[1:-1, 1:-1] = (
        c["id"] * mid - c["a"] * C_a - c["b"] * C_b - c["aa"] * C_aa - c["ab"] * C_ab - c["bb"] * C_bb
    )
    return out


def mgh_operator_exact(a, b, derivs: dict, params: MGParams):
    """The operator applied to analytic derivatives {'C', 'a', 'b', 'aa', 'ab', 'bb'}."""
    c = mgh_coefficients(b, params)
    return (
        c["id"] * derivs["C"] - c["a"] * derivs["a"] - c["b"] * derivs["b"]
        - c["aa"] * derivs["aa"] - c["ab"] * derivs["ab"] - c["bb"] * derivs["bb"]
    )


def _smooth_test_function(a, b):
    sa, ca, sb, cb = np.sin(a), np.cos(a), np.sin(b), np.cos(b)
    return {"C": sa * cb, "a": ca * cb, "b": -sa * sb, "aa": -sa * cb, "ab": -ca * sb, "bb": -sa * cb}


def mgh_defect_study(params: MGParams, n0: int = 17, levels: int = 4,
                     a_range: tuple = (-1.0, 1.0), b_range: tuple = (-1.0, 0.5)) -> list:
    """Max interior defect of the discrete operator on sin(a) cos(b), halving h each level.

    Returns a list of (n_nodes, h_a, defect) tuples; second-order differencing
    gives a defect ratio near 4 per halving.
    """
    out = []
    n = n0
    for _ in range(levels):
        a = np.linspace(*a_range, n)
        b = np.linspace(*b_range, n)
        A, B = np.meshgrid(a, b, indexing="ij")
        d = _smooth_test_function(A, B)
        num = mgh_operator_apply(d["C"], a, b, params)
        exact = mgh_operator_exact(A, B, d, params)
        out.append((n, float(a[1] - a[0]), float(np.max(np.abs(num - exact)[1:-1, 1:-1]))))
        n = 2 * n - 1
    return out
