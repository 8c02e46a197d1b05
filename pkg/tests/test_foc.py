import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wickpath.foc import (
    GFunction, MGParams, NoSignChange, ProblemSpec, compute_f, foc_residual, mgh_defect_study, mgh_f,
    mgh_operator_apply, residual_scale, solve_foc,
)
from wickpath.sde import SdeSpec
from wickpath.strategies import WalrasianQuantumParams, walrasian_problem

TABLE1 = WalrasianQuantumParams(p=1.0, c=0.8, zeta=0.2, a=0.3, lambda_star=0.6)


def _flat(mu=0.0, sig=0.0):
    return SdeSpec(1, 1, lambda s, X, u: np.full_like(X, mu), lambda s, X, u: np.full(np.shape(X) + (1,), sig))


def _numeric(problem):
    # same problem without the exact partials, so compute_f falls back to differences
    return ProblemSpec(problem.profit, problem.sde, problem.g, problem.zeta)


class TestComputeF:
    def test_constant_case(self):
        spec = ProblemSpec(lambda s, X, u: 1.0, _flat(), GFunction.zero())
        fv = compute_f(spec, 0.3, 1.0, 0.2)
        assert fv.f == 1.0
        assert max(abs(fv.f_u), abs(fv.f_x), abs(fv.f_xx), abs(fv.f_xu)) < 1e-6

    def test_walrasian_value_high_precision(self):
        mp.mp.dps = 30
        s, X, u = mp.mpf(0), mp.mpf(1), mp.mpf(0)
        p, c, z, a, lam = (mp.mpf(v) for v in ("1", "0.8", "0.2", "0.3", "0.6"))
        want = (X ** 2 * mp.e ** (-z * s) * (p - c * u) + lam * X * mp.e ** (-a * s)
                - a * lam * X * mp.e ** (-a * s) + lam * (a * X - u) * mp.e ** (-a * s))
        fv = compute_f(walrasian_problem(TABLE1, 0.5), 0.0, 1.0, 0.0)
        assert fv.f == pytest.approx(float(want), rel=1e-14)

    @pytest.mark.parametrize("s, X, u", [(0.0, 1.0, 0.0), (0.4, 1.7, 0.3), (0.9, 0.6, -0.2)])
    def test_differences_match_exact_partials(self, s, X, u):
        problem = walrasian_problem(TABLE1, 0.5)
        exact = compute_f(problem, s, X, u)
        approx = compute_f(_numeric(problem), s, X, u)
        for name in ("f_u", "f_x", "f_xx", "f_xu"):
            assert getattr(approx, name) == pytest.approx(getattr(exact, name), rel=1e-4, abs=1e-5)

    def test_curvature_from_profit_only(self):
        # drift independent of X and g linear in X: f_xx is the profit's curvature
        g = GFunction(lambda s, X: 2.0 * X[0], None, lambda s, X: np.array([2.0]), lambda s, X: np.zeros((1, 1)))
        spec = ProblemSpec(lambda s, X, u: 3.0 * X ** 2 + u, _flat(mu=0.7, sig=0.4), g)
        assert compute_f(spec, 0.0, 1.3, 0.1).f_xx == pytest.approx(6.0, rel=1e-5)

    def test_difference_error_is_second_order(self):
        spec = ProblemSpec(lambda s, X, u: math.sin(X) * math.exp(u), _flat(), GFunction.zero())
        X, u = 0.7, 0.2
        err = [abs(compute_f(spec, 0.0, X, u, h_x=h).f_x - math.cos(X) * math.exp(u)) for h in (1e-2, 5e-3)]
        assert 3.5 <= err[0] / err[1] <= 4.5


class TestResidual:
    def test_u_independent_f(self):
        spec = ProblemSpec(lambda s, X, u: X ** 3, _flat(), GFunction.zero())
        assert abs(foc_residual(spec, 0.1, 1.2, 0.4)) < 1e-8

    def test_solve_linear_residual(self):
        # f = (u^2/2 - u) + X^2/2: f_u = u - 1, f_xx = 1, f_x f_xu = 0
        spec = ProblemSpec(lambda s, X, u: 0.5 * u ** 2 - u + 0.5 * X ** 2, _flat(), GFunction.zero())
        assert solve_foc(spec, 0.0, 0.0, (0.0, 3.0)) == pytest.approx(1.0, abs=1e-8)

    def test_no_sign_change(self):
        spec = ProblemSpec(lambda s, X, u: X ** 2, _flat(), GFunction.zero())
        with pytest.raises(NoSignChange, match="no sign change"):
            solve_foc(spec, 0.0, 1.0, (0.0, 1.0))

    def test_walrasian_roots(self):
        # with c=10, p=1, lambda*=0 at s=0, X=1 the condition reduces to
        # -c X^2 [2(p - c u)]^2 = 2 [2X(p - c u)](-2 c X), i.e. (p - c u)^2 = 2 ... roots u = +-0.1
        spec = walrasian_problem(WalrasianQuantumParams(p=1, c=10, zeta=0.2, a=0.3, lambda_star=0.0), 0.5)
        for bracket, root in (((-0.5, -0.05), -0.1), ((0.05, 0.5), 0.1)):
            assert solve_foc(spec, 0.0, 1.0, bracket) == pytest.approx(root, abs=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(s=st.floats(0, 1), X=st.floats(0.5, 2), c=st.floats(1, 20))
    def test_solution_meets_tolerance(self, s, X, c):
        spec = walrasian_problem(WalrasianQuantumParams(p=1, c=c, zeta=0.2, a=0.3, lambda_star=0.0), 0.5)
        u = solve_foc(spec, s, X, (0.0, 5.0))
        assert abs(foc_residual(spec, s, X, u)) <= 1e-10 * (1 + residual_scale(spec, s, X, u))


class TestMertonGarman:
    def test_trivial_cases(self):
        prm = MGParams()
        one = lambda s, K, V, u: 1.0
        assert mgh_f(0.2, 1.0, 0.5, 0.0, prm, GFunction.zero(), one) == 1.0
        flat = MGParams(mu1=0.0, mu2=0.0, sigma1=0.0, sigma2=0.0)
        g = GFunction(lambda s, X: X[0] + X[1], lambda s, X: 0.0, lambda s, X: np.ones(2), lambda s, X: np.zeros((2, 2)))
        assert mgh_f(0.2, 1.5, 0.5, 0.0, flat, g, one) == pytest.approx(1.0 + 2.0)

    def test_generic_high_precision(self):
        prm = MGParams(mu1=0.07, mu2=-0.03, sigma1=0.25, sigma2=0.4, rho=0.3)
        K, V, s = 1.3, 0.45, 0.6
        g = GFunction(
            lambda s, X: math.exp(-0.1 * s) * X[0] ** 2 * X[1],
            lambda s, X: -0.1 * math.exp(-0.1 * s) * X[0] ** 2 * X[1],
            lambda s, X: math.exp(-0.1 * s) * np.array([2 * X[0] * X[1], X[0] ** 2]),
            lambda s, X: math.exp(-0.1 * s) * np.array([[2 * X[1], 2 * X[0]], [2 * X[0], 0.0]]),
        )
        mp.mp.dps = 30
        e = mp.e ** (-mp.mpf("0.1") * s)
        Km, Vm = mp.mpf(K), mp.mpf(V)
        want = (Km * Vm + e * Km ** 2 * Vm * (1 - mp.mpf("0.1"))
                + Km * mp.mpf("0.07") * e * 2 * Km * Vm + Vm * mp.mpf("-0.03") * e * Km ** 2
                + mp.mpf("0.5") * Km ** 2 * mp.mpf("0.25") ** 2 * e * 2 * Vm
                + Km * mp.mpf("0.3") * mp.mpf("0.25") ** 3 * e * 2 * Km)
        got = mgh_f(s, K, V, 0.0, prm, g, lambda s, K, V, u: K * V)
        assert got == pytest.approx(float(want), rel=1e-12)

    def test_operator_constant_and_linear(self):
        prm = MGParams()
        a = np.linspace(-1, 1, 11)
        b = np.linspace(-1, 0.5, 9)
        const = mgh_operator_apply(np.full((11, 9), 2.5), a, b, prm)
        assert np.max(np.abs(const[1:-1, 1:-1] - prm.r * 2.5)) < 1e-15
        A, B = np.meshgrid(a, b, indexing="ij")
        lin = mgh_operator_apply(A.copy(), a, b, prm)
        want = prm.r * A - (prm.r - np.exp(B) / 2)
        assert np.allclose(lin[1:-1, 1:-1], want[1:-1, 1:-1], rtol=0, atol=1e-13)
        assert np.array_equal(lin[0], A[0])

    def test_operator_is_linear(self):
        prm = MGParams()
        rng = np.random.default_rng(0)
        a, b = np.linspace(0, 1, 8), np.linspace(-1, 0, 7)
        C1, C2 = rng.normal(size=(8, 7)), rng.normal(size=(8, 7))
        lhs = mgh_operator_apply(2.0 * C1 - 3.0 * C2, a, b, prm)
        rhs = 2.0 * mgh_operator_apply(C1, a, b, prm) - 3.0 * mgh_operator_apply(C2, a, b, prm)
        assert np.allclose(lhs[1:-1, 1:-1], rhs[1:-1, 1:-1], rtol=1e-12, atol=1e-12)

    def test_operator_grid_too_small(self):
        with pytest.raises(ValueError):
            mgh_operator_apply(np.zeros((2, 5)), np.arange(2.0), np.arange(5.0), MGParams())

    def test_defect_quarters(self):
        study = mgh_defect_study(MGParams(), levels=3)
        for (_, _, d0), (_, _, d1) in zip(study, study[1:]):
            assert 3.5 <= d0 / d1 <= 4.5
