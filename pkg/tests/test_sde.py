import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wickpath.sde import (
    BrownianIncrements, DivergenceError, SdeSpec, TimeGrid, brownian_block, em_step, linear_sde,
    simulate_block, simulate_ensemble, simulate_path, zero_rule,
)
from wickpath.strategies import WalrasianQuantumParams, walrasian_quantum, walrasian_sde


def _zero_dynamics():
    return SdeSpec(1, 1, lambda s, X, u: np.zeros_like(X), lambda s, X, u: np.zeros(np.shape(X) + (1,)))


class TestTimeGrid:
    def test_derived_steps(self):
        g = TimeGrid(1.0, 0.001)
        assert g.n_steps == 1000
        assert g.times[-1] == pytest.approx(1.0)

    def test_rejects_bad_steps(self):
        with pytest.raises(ValueError, match="dt must be positive"):
            TimeGrid(1.0, 0.0)
        with pytest.raises(ValueError):
            TimeGrid(1.0, 0.3)
        with pytest.raises(ValueError):
            TimeGrid.from_steps(1.0, 0)


class TestEmStep:
    def test_zero_dynamics(self):
        assert em_step(np.array([1.0]), 0.0, np.array([0.0]), _zero_dynamics(), 0.01, np.array([0.3]))[0] == 1.0

    def test_deterministic_growth(self):
        out = em_step(np.array([1.0]), 0.0, np.array([0.0]), linear_sde(0.30), 0.001, np.array([0.0]))
        assert out[0] == pytest.approx(1.0003, abs=1e-15)

    def test_walrasian_step_matches_high_precision(self):
        # real-root regime so the rule returns a value
        prm = WalrasianQuantumParams(p=1, c=10, zeta=0.2, a=0.3, lambda_star=0.0)
        X, s, dt, dW = 1.2, 0.25, 0.001, 0.0137
        u = walrasian_quantum(s, X, prm, "plus")
        u_eff = max(u, 0.0)
        got = em_step(np.array([X]), s, np.array([u]), walrasian_sde(0.30, 0.50), dt, np.array([dW]))[0]
        mp.mp.dps = 40
        want = mp.mpf(X) + (mp.mpf("0.3") * X - u_eff) * mp.mpf(dt) + mp.sqrt(mp.mpf("0.5") * u_eff) * mp.mpf(dW)
        assert got == pytest.approx(float(want), rel=1e-14)

    def test_divergence(self):
        spec = SdeSpec(1, 1, lambda s, X, u: X * np.inf, lambda s, X, u: np.zeros(np.shape(X) + (1,)))
        with pytest.raises(DivergenceError, match="divergence at step"):
            em_step(np.array([1.0]), 0.5, np.array([0.0]), spec, 0.1, np.array([0.0]))

    def test_noise_length_checked(self):
        with pytest.raises(ValueError):
            em_step(np.array([1.0]), 0.0, np.array([0.0]), linear_sde(0.3), 0.1, np.array([0.0, 0.0]))


class TestSimulatePath:
    def test_linear_ode_terminal(self):
        g = TimeGrid(1.0, 0.001)
        noise = BrownianIncrements.generate(0, 0, g.n_steps, 1, g.dt)
        path = simulate_path([1.0], linear_sde(0.30), zero_rule(), g, noise)
        assert abs(path.terminal[0] - math.exp(0.3)) < 10 * g.dt
        assert path.states.shape == (1001, 1) and path.controls.shape == (1000, 1)

    def test_controls_use_left_endpoint(self):
        g = TimeGrid(1.0, 0.1)
        seen = []

        def rule(s, X):
            seen.append((s, X[0, 0]))
            return np.full((1, 1), 0.1)

        spec = SdeSpec(1, 1, lambda s, X, u: -u, lambda s, X, u: np.zeros(np.shape(X) + (1,)))
        path = simulate_path([1.0], spec, rule, g, BrownianIncrements.generate(0, 0, 10, 1, 0.1))
        for n, (s, x) in enumerate(seen):
            assert s == pytest.approx(n * 0.1)
            assert x == path.states[n, 0]

    def test_repeatable(self):
        g = TimeGrid(1.0, 0.01)
        spec = linear_sde(0.3, 0.2)
        a = simulate_path([1.0], spec, zero_rule(), g, BrownianIncrements.generate(5, 3, 100, 1, 0.01))
        b = simulate_path([1.0], spec, zero_rule(), g, BrownianIncrements.generate(5, 3, 100, 1, 0.01))
        assert np.array_equal(a.states, b.states)

    def test_divergence_carries_step(self):
        g = TimeGrid(1.0, 0.1)
        spec = SdeSpec(1, 1, lambda s, X, u: np.where(s > 0.45, np.inf, 0.0) * X,
                       lambda s, X, u: np.zeros(np.shape(X) + (1,)))
        with pytest.raises(DivergenceError) as info:
            simulate_path([1.0], spec, zero_rule(), g, BrownianIncrements.generate(0, 0, 10, 1, 0.1))
        assert info.value.step == 5

    def test_guard_counts_clamps(self):
        g = TimeGrid(0.1, 0.01)
        spec = walrasian_sde(0.3, 0.5)
        path = simulate_path([1.0], spec, lambda s, X: np.full((1, 1), -0.2), g,
                             BrownianIncrements.generate(0, 0, 10, 1, 0.01))
        assert path.clamped.all()
        assert np.all(np.isfinite(path.states))


class TestEnsemble:
    def test_gbm_mean(self):
        g = TimeGrid(1.0, 0.01)
        ens = simulate_ensemble([1.0], linear_sde(0.30, 0.2), zero_rule(), g, seed=3, n_paths=2000)
        x = ens.terminal_states[:, 0]
        se = x.std(ddof=1) / math.sqrt(x.size)
        assert abs(x.mean() - math.exp(0.3)) < 3 * se

    def test_single_path_matches_simulate_path(self):
        g = TimeGrid(1.0, 0.01)
        spec = linear_sde(0.3, 0.2)
        ens = simulate_ensemble([1.0], spec, zero_rule(), g, seed=9, n_paths=1)
        path = simulate_path([1.0], spec, zero_rule(), g, BrownianIncrements.generate(9, 0, 100, 1, 0.01))
        assert np.array_equal(ens[0].states, path.states)

    def test_thread_count_does_not_change_output(self):
        g = TimeGrid(1.0, 0.01)
        spec = linear_sde(0.3, 0.2)
        one = simulate_ensemble([1.0], spec, zero_rule(), g, seed=1, n_paths=600, threads=1)
        many = simulate_ensemble([1.0], spec, zero_rule(), g, seed=1, n_paths=600, threads=8)
        assert all(np.array_equal(a.states, b.states) for a, b in zip(one, many))

    def test_fallback_on_missing_control(self):
        g = TimeGrid(0.1, 0.01)
        ens = simulate_ensemble([1.0], linear_sde(0.3), lambda s, X: np.full((X.shape[0], 1), np.nan),
                                g, seed=0, n_paths=3)
        assert ens.n_fallback == 30
        assert np.all(ens[0].controls == 0)

    def test_brownian_increment_mean(self):
        dt, n = 0.01, 200_000
        values = brownian_block(4, np.arange(200), 1000, 1, dt).reshape(-1)
        assert values.size == n
        assert abs(values.mean()) < 4 * math.sqrt(dt / n)


def test_strong_order_half():
    # EM on GBM against a dt/64 reference driven by the same Brownian path
    a, b, n_paths, dt0 = 0.3, 0.5, 2000, 0.02
    fine = TimeGrid(1.0, dt0 / 64)
    dW = brownian_block(77, np.arange(n_paths), fine.n_steps, 1, fine.dt)
    spec = linear_sde(a, b)

    def terminal(factor):
        coarse = dW.reshape(n_paths, -1, factor, 1).sum(axis=2)
        grid = TimeGrid(1.0, fine.dt * factor)
        return simulate_block([1.0], spec, zero_rule(), grid, coarse).states[:, -1, 0]

    ref = terminal(1)
    err = [math.sqrt(np.mean((terminal(f) - ref) ** 2)) for f in (64, 32)]
    assert 1.2 <= err[0] / err[1] <= 1.8


@settings(max_examples=30, deadline=None)
@given(x=st.floats(0.1, 10), a=st.floats(-1, 1), dt=st.floats(1e-4, 0.1))
def test_noise_free_step_is_euler(x, a, dt):
    out = em_step(np.array([x]), 0.0, np.array([0.0]), linear_sde(a), dt, np.array([0.5]))
    assert out[0] == pytest.approx(x + a * x * dt, rel=1e-14)
