"""Closed-form feedback rules: quantum (path-integral) and Pontryagin branches.

Every rule is implemented exactly as derived in the examples it comes from,
including where the two branches disagree; the experiments compare them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .foc import GFunction, ProblemSpec
from .sde import SdeSpec, TimeGrid


class ZeroDenominator(ZeroDivisionError):
    pass


class NotCubic(ValueError):
    pass


class OdeDenominatorError(ArithmeticError):
    def __init__(self, s: float, which: str):
        self.s = s
        super().__init__(f"ODE denominator {which} passes through zero at s={s}")


def integrating_factor(s, trace_ss: float, sigma_B):
    """E(s) = exp(tr(sigma' sigma) s / 2 - sigma B(s)) for a realised sigma B(s)."""
    return np.exp(0.5 * trace_ss * s - sigma_B)


# Walrasian firm, linear-in-u profit ------------------------------------------

@dataclass(frozen=True)
class WalrasianQuantumParams:
    p: float
    c: float
    zeta: float
    a: float
    lambda_star: float = 0.0

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError("p must be positive")
        if not self.c > 0:
            raise ValueError("c must be positive")
        if not 0 < self.zeta <= 1:
            raise ValueError("zeta must lie in (0, 1]")
        if not self.a > 0:
            raise ValueError("a must be positive")
        if self.lambda_star < 0:
            raise ValueError("lambda_star must be >= 0")


def _walrasian_parts(s, X, prm: WalrasianQuantumParams):
    e = np.exp(-prm.zeta * s)
    A = prm.c * X * e + prm.lambda_star * np.exp(-prm.a * s)
    B = prm.lambda_star * np.exp(-prm.a * s) / A
    lead = e * (prm.p - X / A)
    disc = e ** 2 * (prm.p - X / A) ** 2 - e * (2 * prm.p * X * e / A + B)
    return e, lead, disc


def walrasian_discriminant(s, X, params: WalrasianQuantumParams):
    return _walrasian_parts(s, X, params)[2]


def walrasian_quantum(s: float, X: float, params: WalrasianQuantumParams,
                      branch: str = "minus") -> Optional[float]:
    """Quantum Walrasian strategy; ``None`` when the discriminant is negative."""
    if not X > 0:
        raise ValueError("X must be positive")
    out = walrasian_quantum_batch(s, np.array([X], dtype=float), params, branch)[0]
    return None if math.isnan(out) else float(out)


def walrasian_quantum_batch(s, X, params: WalrasianQuantumParams, branch: str = "minus") -> np.ndarray:
    """Vectorised rule; NaN marks states with no real root."""
    if branch not in ("plus", "minus"):
        raise ValueError("branch must be 'plus' or 'minus'")
    X = np.asarray(X, dtype=float)
    e, lead, disc = _walrasian_parts(s, X, params)
    sign = 1.0 if branch == "plus" else -1.0
    with np.errstate(invalid="ignore"):
        root = np.where(disc >= 0, np.sqrt(np.maximum(disc, 0.0)), np.nan)
    return -(lead + sign * root) / (params.c * e)


def walrasian_rule(params: WalrasianQuantumParams, branch: str = "minus") -> Callable:
    def rule(s, X):
        return walrasian_quantum_batch(s, X[..., 0], params, branch)[..., None]
    return rule


def walrasian_sde(a: float, sigma: float) -> SdeSpec:
    """dX = (aX - u) ds + sqrt(sigma u) dB, u floored at 0 inside the maps."""
    return SdeSpec(
        k=1, m=1,
        drift=lambda s, X, u: a * X - u,
        diffusion=lambda s, X, u: np.sqrt(sigma * u)[..., None],
        guard_u=True,
    )


def walrasian_profit(params: WalrasianQuantumParams):
    def profit(s, X, u):
        return np.exp(-params.zeta * s) * (params.p * X ** 2 - params.c * X ** 2 * u)
    return profit


def walrasian_problem(params: WalrasianQuantumParams, sigma: float) -> ProblemSpec:
    """Linear-in-u Walrasian problem with g = lambda* exp(-a s) X.

    Exact partials of f are attached; g_xx = 0 so sigma drops out of f.
    """
    p, c, z, a, lam = params.p, params.c, params.zeta, params.a, params.lambda_star
    g = GFunction(
        lambda s, X: lam * math.exp(-a * s) * X[0],
        lambda s, X: -a * lam * math.exp(-a * s) * X[0],
        lambda s, X: np.array([lam * math.exp(-a * s)]),
        lambda s, X: np.zeros((1, 1)),
    )

    def partials(s, X, u):
        e, ea = math.exp(-z * s), math.exp(-a * s)
        return (
            -(c * X ** 2 * e + lam * ea),
            2 * X * e * (p - c * u) + lam * ea,
            2 * e * (p - c * u),
            -2 * c * X * e,
        )

    return ProblemSpec(walrasian_profit(params), walrasian_sde(a, sigma), g, z, partials)


# Walrasian firm, quadratic cost: cubic rule -----------------------------------

@dataclass(frozen=True)
class Ex3Params:
    b: float
    c: float
    zeta: float
    lambda_star: float
    p: float = 1.0

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError("b must be positive")
        if not self.c > 0:
            raise ValueError("c must be positive")
        if not 0 < self.zeta <= 1:
            raise ValueError("zeta must lie in (0, 1]")


@dataclass(frozen=True)
class CubicCoefficients:
    B0: float
    B1: float
    B2: float
    B3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.B0, self.B1, self.B2, self.B3], dtype=float)

    def __call__(self, u):
        return ((self.B0 * u + self.B1) * u + self.B2) * u + self.B3


def ex3_cubic_coeffs(s, X, params: Ex3Params) -> CubicCoefficients:
    """Cubic coefficients with revenue R(X) = p X^2 (R' = 2pX, R'' = 2p)."""
    c, z, b, lam = params.c, params.zeta, params.b, params.lambda_star
    R1, R2 = 2 * params.p * X, 2 * params.p
    e = np.exp(-z * s)
    return CubicCoefficients(
        4 * c ** 2 * e,
        4 * (c * X) ** 2 * R2 * e ** 2,
        4 * c * (lam * X * np.exp(-(b + z) * s) - R1 * e - lam * np.exp(-b * s)),
        lam ** 2 * R2 * np.exp(-2 * b * s),
    )


def _cardano_parts(B0, B1, B2, B3):
    D1 = -B1 / (3 * B0)
    D2 = D1 ** 3 + (B1 * B2 - 3 * B0 * B3) / (6 * B0 ** 2)
    D3 = B2 / (3 * B0)
    Q = D3 - D1 ** 2
    return D1, D2, Q, D2 ** 2 + Q ** 3


def _single_root_offset(D2, Q, delta):
    # cbrt(D2 + sqrt(delta)) + cbrt(D2 - sqrt(delta)); the larger cube root is
    # taken directly and the other from their product -Q, avoiding cancellation
    sign = np.where(D2 >= 0, 1.0, -1.0)
    t1 = np.cbrt(D2 + sign * np.sqrt(delta))
    with np.errstate(divide="ignore", invalid="ignore"):
        t2 = np.where(t1 != 0, -Q / np.where(t1 != 0, t1, 1.0), 0.0)
    return t1 + t2


def cardano_real_roots(coeffs: CubicCoefficients) -> list:
    """Real roots of B0 u^3 + B1 u^2 + B2 u + B3, ascending.

    A non-negative discriminant gives the single root from Cardano's formula
    with real cube roots; otherwise the three roots come from the trigonometric
    form.
    """
    B0, B1, B2, B3 = (float(v) for v in coeffs.as_array())
    if B0 == 0:
        raise NotCubic("not cubic: B0 == 0")
    D1, D2, Q, delta = _cardano_parts(B0, B1, B2, B3)
    if delta >= 0:
        return [D1 + float(_single_root_offset(D2, Q, delta))]
    rad = 2 * math.sqrt(-Q)
    arg = max(-1.0, min(1.0, D2 / math.sqrt(-Q ** 3)))
    theta = math.acos(arg) / 3
    return sorted(D1 + rad * math.cos(theta - 2 * math.pi * j / 3) for j in range(3))


def select_root(roots: Sequence[float]) -> float:
    """Smallest non-negative root, else the root of smallest magnitude."""
    nonneg = [r for r in roots if r >= 0]
    if nonneg:
        return min(nonneg)
    return min(roots, key=abs)


def cubic_root_batch(B0, B1, B2, B3) -> np.ndarray:
    """Vectorised ``select_root(cardano_real_roots(...))``."""
    B0, B1, B2, B3 = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (B0, B1, B2, B3)))
    if np.any(B0 == 0):
        raise NotCubic("not cubic: B0 == 0")
    D1, D2, Q, delta = _cardano_parts(B0, B1, B2, B3)
    one = delta >= 0
    with np.errstate(invalid="ignore"):
        single = D1 + _single_root_offset(D2, Q, np.where(one, delta, 0.0))
        negQ = np.where(one, 1.0, -Q)
        arg = np.clip(D2 / np.sqrt(negQ ** 3), -1.0, 1.0)
        theta = np.arccos(arg) / 3
        rad = 2 * np.sqrt(negQ)
    three = np.stack([D1 + rad * np.cos(theta - 2 * np.pi * j / 3) for j in range(3)], axis=-1)
    masked = np.where(three >= 0, three, np.inf)
    smallest_nonneg = masked.min(axis=-1)
    by_mag = np.take_along_axis(three, np.abs(three).argmin(axis=-1)[..., None], axis=-1)[..., 0]
    picked = np.where(np.isfinite(smallest_nonneg), smallest_nonneg, by_mag)
    return np.where(one, single, picked)


def ex3_quantum_rule(params: Ex3Params) -> Callable:
    def rule(s, X):
        c = ex3_cubic_coeffs(s, X[..., 0], params)
        return cubic_root_batch(c.B0, c.B1, c.B2, c.B3)[..., None]
    return rule


def ex3_pontryagin(s, X, b: float):
    """Non-zero Pontryagin branch 2bX/3 (the other branch is u = 0)."""
    return 2 * b * X / 3


def ex3_pontryagin_rule(params: Ex3Params) -> Callable:
    def rule(s, X):
        return ex3_pontryagin(s, X, params.b)
    return rule


def ex3_sde(b: float) -> SdeSpec:
    """dX = (bX - u) ds + sqrt(2b) dB."""
    vol = math.sqrt(2 * b)
    return SdeSpec(
        k=1, m=1,
        drift=lambda s, X, u: b * X - u,
        diffusion=lambda s, X, u: np.full(np.shape(X) + (1,), vol),
    )


def ex3_profit(params: Ex3Params):
    def profit(s, X, u):
        return np.exp(-params.zeta * s) * (params.p * X ** 2 - params.c * u ** 2)
    return profit


def ex3_value_gradient(s, X, b: float, c: float, zeta: float):
    """V_x = (4/3) b c X^2 exp(-zeta s), the non-trivial Pontryagin root."""
    return 4.0 / 3.0 * b * c * X ** 2 * np.exp(-zeta * s)


# Cooperative Pareto, k firms ---------------------------------------------------

@dataclass(frozen=True)
class ParetoParams:
    k: int
    alpha: np.ndarray
    p: float
    c: float
    omega1: float
    omega2: float
    zeta: float
    lambda_star: float
    A_matrix: np.ndarray
    sigma0: float

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        A = np.asarray(self.A_matrix, dtype=float)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "A_matrix", A)
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if alpha.shape != (self.k,):
            raise ValueError(f"alpha must have length k={self.k}")
        if abs(alpha.sum() - 1.0) > 1e-12:
            raise ValueError(f"alpha must sum to 1, got sum {alpha.sum()!r}")
        if np.any(alpha < 0) or np.any(alpha > 1):
            raise ValueError("alpha entries must lie in [0, 1]")
        if A.shape != (self.k, self.k):
            raise ValueError(f"A_matrix must be {self.k}x{self.k}")
        if np.max(np.abs(A - A.T)) > 1e-12:
            raise ValueError("A_matrix must be symmetric")

    @property
    def trace_ss(self) -> float:
        # one-factor driver: sigma = sigma0 * ones(k, 1)
        return self.k * self.sigma0 ** 2


def _pareto_reach(X):
    # X_rho + omega1 * sum_{other} X  ->  computed by the caller with omega1
    X = np.asarray(X, dtype=float)
    return X, X.sum(axis=-1, keepdims=True) - X


def pareto_quantum(s, X_vec, rho: int, params: ParetoParams, B_path_value: float = 0.0) -> float:
    """Quantum Pareto strategy for firm ``rho`` (0-based)."""
    X, others = _pareto_reach(X_vec)
    e = math.exp(-params.zeta * s)
    num = e * float(np.sum(params.p * params.alpha * (X + params.omega1 * others)))
    num -= params.lambda_star * float(integrating_factor(s, params.trace_ss, B_path_value))
    den = 2 * params.c * params.alpha[rho] * X[rho] * e
    if den == 0:
        raise ZeroDenominator("c alpha_rho X_rho exp(-zeta s) must be non-zero")
    return num / den


def pareto_pontryagin(s, X_vec, rho: int, params: ParetoParams, u_max: Optional[float] = None) -> float:
    """Pontryagin Pareto strategy, floored at 0 and capped at ``u_max`` if given."""
    return float(pareto_pontryagin_batch(s, np.asarray(X_vec, dtype=float)[None], params, u_max)[0, rho])


def pareto_pontryagin_batch(s, X, params: ParetoParams, u_max: Optional[float] = None) -> np.ndarray:
    X, others = _pareto_reach(X)
    den = 2 * params.c * X
    if np.any(den == 0):
        raise ZeroDenominator("c X_rho must be non-zero")
    quad = np.einsum("...i,ij,...j->...", X, params.A_matrix, X)[..., None]
    u = ((params.p * params.alpha - 1) * (X + params.omega1 * others) + 2 * params.c * X * quad) / den
    u = np.maximum(0.0, u)
    if u_max is not None:
        u = np.minimum(u_max, u)
    return u


def pareto_sde(params: ParetoParams) -> SdeSpec:
    """dX = [(A X) * X - u] ds + sigma0 X dB with one Brownian factor."""
    A, s0 = params.A_matrix, params.sigma0
    return SdeSpec(
        k=params.k, m=1,
        drift=lambda s, X, u: (X @ A) * X - u,
        diffusion=lambda s, X, u: (s0 * X)[..., None],
    )


def pareto_profit(s, X, u, params: ParetoParams):
    """Cooperative Pareto profit integrand (batched over leading axes)."""
    X = np.asarray(X, dtype=float)
    u = np.asarray(u, dtype=float)
    others_X = X.sum(axis=-1, keepdims=True) - X
    u2 = u ** 2
    others_u2 = u2.sum(axis=-1, keepdims=True) - u2
    terms = params.alpha * (
        params.p * (X + params.omega1 * others_X) * u - params.c * X * (u2 + params.omega2 * others_u2)
    )
    return np.exp(-params.zeta * s) * terms.sum(axis=-1)


# Resource extraction, two players ------------------------------------------------

@dataclass(frozen=True)
class ResourceParams:
    a: float
    b: float
    c1: float
    c2: float
    k1: float
    k2: float
    alpha10: float
    zeta: float
    sigma_row: np.ndarray = field(default_factory=lambda: np.array([0.1]))
    lambda_star: float = 0.0
    r: Optional[float] = None  # rate in the A-equation; defaults to zeta

    def __post_init__(self):
        object.__setattr__(self, "sigma_row", np.atleast_1d(np.asarray(self.sigma_row, dtype=float)))
        for name in ("b", "c1", "c2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("a", "k1", "k2", "alpha10", "lambda_star"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def trace_ss(self) -> float:
        return float(self.sigma_row @ self.sigma_row)

    @property
    def rate(self) -> float:
        return self.zeta if self.r is None else self.r


def resource_quantum(s, X_norm: float, player: int, params: ResourceParams, B_path_value: float = 0.0) -> float:
    e = math.exp(-params.zeta * s)
    E = float(integrating_factor(s, params.trace_ss, B_path_value))
    if player == 1:
        k, c = params.k1, params.c1
    elif player == 2:
        k, c = params.alpha10 * params.k2, params.c2
    else:
        raise ValueError("player must be 1 or 2")
    den = 2 * (params.lambda_star * E + e * c * math.sqrt(X_norm))
    if den == 0:
        raise ZeroDenominator("lambda* E(s) + exp(-zeta s) c X^(1/2) must be non-zero")
    return (k * e / den) ** (2.0 / 3.0)


def resource_pontryagin(s, X_norm: float, player: int, params: ResourceParams, ode: "OdeSolution") -> float:
    """Pontryagin rule with W = exp(-zeta s)[A X^(1/2) + B]."""
    A = ode.A_at(s)
    e = math.exp(-params.zeta * s)
    dW = e * A * 0.5 / math.sqrt(X_norm)
    shift = e * math.sqrt(X_norm) * dW
    if player == 1:
        k, den = params.k1, params.c1 + shift
    elif player == 2:
        if params.alpha10 == 0:
            raise ZeroDenominator("alpha10 must be non-zero for player 2")
        k, den = params.k2, params.c2 + shift / params.alpha10
    else:
        raise ValueError("player must be 1 or 2")
    if den == 0:
        raise ZeroDenominator("Pontryagin denominator vanished")
    return k * X_norm / (4 * den ** 2)


# Non-cooperative Nash, k firms -----------------------------------------------------

@dataclass(frozen=True)
class NashParams:
    k: int
    c: float
    zeta: float
    a: float = 0.5
    b: float = 0.4
    sigma_row: np.ndarray = field(default_factory=lambda: np.array([0.1]))
    lambda_star: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "sigma_row", np.atleast_1d(np.asarray(self.sigma_row, dtype=float)))
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.c > 0:
            raise ValueError("c must be positive")

    @property
    def trace_ss(self) -> float:
        return float(self.sigma_row @ self.sigma_row)


def nash_quantum(s, X_norm: float, u_others_sum: float, params: NashParams, B_path_value: float = 0.0) -> float:
    if not u_others_sum > 0:
        raise ValueError("sum of the other firms' strategies must be positive")
    if not X_norm > 0:
        raise ValueError("X must be positive")
    S = u_others_sum
    e = math.exp(-params.zeta * s)
    E = float(integrating_factor(s, params.trace_ss, B_path_value))
    return 2 / e * S ** 1.5 * (e * (S ** -0.5 - params.c / math.sqrt(X_norm)) - params.lambda_star * E)


def nash_symmetric_fixed_point(s, X_norm: float, params: NashParams, B_path_value: float = 0.0,
                               u0: float = 1.0, damping: float = 0.5, tol: float = 1e-10,
                               max_iter: int = 500) -> float:
    """Symmetric closure u = phi(s, X, (k-1) u) by damped iteration."""
    if params.k < 2:
        raise ValueError("a symmetric Nash closure needs k >= 2")
    u = u0
    for _ in range(max_iter):
        target = nash_quantum(s, X_norm, (params.k - 1) * u, params, B_path_value)
        new = (1 - damping) * u + damping * target
        if abs(new - u) <= tol * max(1.0, abs(u)):
            return new
        u = new
    raise RuntimeError(f"Nash fixed point did not converge in {max_iter} iterations")


def nash_pontryagin(s, X_norm: float, params: NashParams, ode: "OdeSolution") -> float:
    """Pontryagin feedback Nash rule with every firm sharing V = e^{-zeta s}[A X^(1/2) + B]."""
    if not X_norm > 0:
        raise ValueError("X must be positive")
    k = params.k
    grad = math.exp(-params.zeta * s) * ode.A_at(s) * 0.5 / math.sqrt(X_norm)
    own = params.c + math.exp(params.zeta * s) * grad * math.sqrt(X_norm)
    total = k * own
    if total == 0:
        raise ZeroDenominator("sum of c + gradient terms vanished")
    return X_norm * (2 * k - 1) ** 2 / (2 * total) * (total - (k - 1.5) * own)


# A(s), B(s) systems ------------------------------------------------------------------

@dataclass
class OdeSolution:
    grid: TimeGrid
    A_values: np.ndarray
    B_values: np.ndarray

    def A_at(self, s: float) -> float:
        return float(np.interp(s, self.grid.times, self.A_values))

    def B_at(self, s: float) -> float:
        return float(np.interp(s, self.grid.times, self.B_values))


def _rhs_resource(params: ResourceParams):
    def rhs(s, A, B):
        d1 = params.c1 + 0.5 * A
        d2 = params.c2 + A / (2 * params.alpha10) if params.alpha10 else math.inf
        dA = (params.rate + params.trace_ss / 8 + params.b / 2) * A - params.k1 / (4 * d1)
        if params.alpha10:
            dA -= params.alpha10 * params.k2 / (4 * d2)
        return dA, params.zeta * B - 0.5 * params.a * A, (d1, d2)
    return rhs


def _rhs_nash(params: NashParams):
    k, c = params.k, params.c

    def rhs(s, A, B):
        d = c + 0.5 * A
        dA = (
            (params.zeta + params.trace_ss / 8 - params.b / 2) * A
            - (2 * k - 1) / (2 * k ** 2) / d
            + c * (2 * k - 1) ** 2 / (4 * k ** 3) / d ** 2
            + (2 * k - 1) ** 2 * A / (8 * k ** 2 * d ** 2)
        )
        return dA, params.zeta * B - 0.5 * params.a * A, (d,)
    return rhs


def solve_AB_odes(system: str, params, grid: TimeGrid, A0: float = 0.0, B0: float = 0.0) -> OdeSolution:
    """Classic RK4 for the coupled (A, B) systems, forward from s = 0.

    ``system`` is ``"ex5_0"`` (two-player resource extraction, ResourceParams)
    or ``"ex6"`` (k-firm Nash, NashParams).
    """
    if system == "ex5_0":
        rhs = _rhs_resource(params)
    elif system == "ex6":
        rhs = _rhs_nash(params)
    else:
        raise ValueError(f"unknown system {system!r}")
    n, h = grid.n_steps, grid.dt
    A = np.empty(n + 1)
    B = np.empty(n + 1)
    A[0], B[0] = A0, B0
    signs = np.sign(rhs(0.0, A0, B0)[2])
    if np.any(signs == 0):
        raise OdeDenominatorError(0.0, "at s=0")

    def f(s, a, b):
        da, db, dens = rhs(s, a, b)
        if np.any(np.sign(dens) != signs):
            raise OdeDenominatorError(s, "c + A/2")
        return da, db

    for i in range(n):
        s = i * h
        a, b = A[i], B[i]
        k1 = f(s, a, b)
        k2 = f(s + h / 2, a + h / 2 * k1[0], b + h / 2 * k1[1])
        k3 = f(s + h / 2, a + h / 2 * k2[0], b + h / 2 * k2[1])
        k4 = f(s + h, a + h * k3[0], b + h * k3[1])
        A[i + 1] = a + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        B[i + 1] = b + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if not (math.isfinite(A[i + 1]) and math.isfinite(B[i + 1])):
            raise OdeDenominatorError(s + h, "non-finite solution")
    return OdeSolution(grid, A, B)
