"""Receding-horizon path-integral controller with entropic temperature selection.

At each decision time, M disturbance sequences of H steps are rolled out under
the baseline (zero) control, each accumulating a discounted running cost J_i.
A temperature theta is chosen on a grid by minimizing

    gamma * theta + theta * log(mean(exp(J / theta)))

and the first-step disturbances, weighted by exp(sign * J / theta), are pushed
through the diffusion matrix to give the control.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .rng import DOMAIN_ROLLOUT, rollout_stream, standard_normals
from .sde import BLOCK_SIZE, BrownianIncrements, DivergenceError, SdeSpec, TimeGrid, _increment
from .strategies import ParetoParams, pareto_profit


@dataclass(frozen=True)
class PiConfig:
    M: int = 800
    H: int = 60
    gamma: float = 0.5
    kappa_u: float = 1.0
    u_min: float = 0.0
    u_max: float = 5.0
    dt: float = 0.01
    theta_count: int = 50
    theta_range: tuple = (1e-2, 1e2)
    # +1 weights rollouts by exp(+J/theta); -1 by exp(-J/theta)
    weight_sign: int = 1

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if not self.u_min <= self.u_max:
            raise ValueError("u_min must not exceed u_max")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        lo, hi = self.theta_range
        if not 0 < lo < hi or self.theta_count < 1:
            raise ValueError("theta grid must be positive and increasing")
        if self.weight_sign not in (1, -1):
            raise ValueError("weight_sign must be +1 or -1")


@dataclass
class RolloutBatch:
    disturbances: np.ndarray  # (M, H, m) standard normals
    costs: np.ndarray  # (M,), +inf for diverged rollouts

    @property
    def n_diverged(self) -> int:
        return int(np.sum(~np.isfinite(self.costs)))


@dataclass(frozen=True)
class TemperatureSelection:
    theta_hat: float
    objective_value: float


def pareto_running_cost(s, X_vec, u_vec, params: ParetoParams):
    """Negative cooperative Pareto profit integrand; batched over leading axes."""
    return -pareto_profit(s, X_vec, u_vec, params)


def pareto_cost_fn(params: ParetoParams) -> Callable:
    def cost(s, X, u):
        return pareto_running_cost(s, X, u, params)
    return cost


def theta_grid(costs, config: PiConfig) -> np.ndarray:
    """Log-spaced grid scaled by the interquartile range of finite costs (floor 1)."""
    J = np.asarray(costs, dtype=float)
    J = J[np.isfinite(J)]
    iqr = float(np.subtract(*np.percentile(J, [75, 25]))) if J.size else 0.0
    scale = max(iqr, 1.0)
    lo, hi = config.theta_range
    return np.logspace(math.log10(lo), math.log10(hi), config.theta_count) * scale


def entropic_value(costs, theta: float) -> float:
    """theta * log(mean(exp(J / theta))), shifted by max(J)."""
    J = np.asarray(costs, dtype=float)
    top = J.max()
    return float(top + theta * math.log(math.fsum(np.exp((J - top) / theta)) / J.size))


def select_temperature(costs, gamma: float, thetas) -> TemperatureSelection:
    """Grid argmin of the entropic-robust objective; ties go to the smaller theta."""
    J = np.asarray(costs, dtype=float)
    J = J[np.isfinite(J)]
    if J.size == 0:
        raise ValueError("all rollout costs are infinite")
    thetas = np.asarray(thetas, dtype=float)
    if thetas.size == 0 or np.any(thetas <= 0) or np.any(np.diff(thetas) <= 0):
        raise ValueError("theta grid must be nonempty, positive and increasing")
    obj = np.array([gamma * th + entropic_value(J, th) for th in thetas])
    i = int(np.argmin(obj))
    return TemperatureSelection(float(thetas[i]), float(obj[i]))


def _rollout_block(X_now, s_now, spec, baseline, cost, config, seed, decision_index, idx):
    eps = standard_normals(seed, rollout_stream(decision_index, idx), config.H, spec.m, DOMAIN_ROLLOUT)
    P = idx.size
    X = np.broadcast_to(np.asarray(X_now, dtype=float), (P, spec.k)).copy()
    u = np.broadcast_to(np.asarray(baseline, dtype=float), (P, spec.k)).copy()
    sq = math.sqrt(config.dt)
    terms = np.zeros((P, config.H))
    alive = np.ones(P, dtype=bool)
    with np.errstate(all="ignore"):
        for h in range(config.H):
            s = s_now + h * config.dt
            terms[:, h] = cost(s, X, u)
            X, _ = _increment(spec, X, s, u, config.dt, eps[:, h] * sq)
            alive &= np.all(np.isfinite(X), axis=1) & np.isfinite(terms[:, h])
    J = np.array([math.fsum(row) for row in terms]) * config.dt
    J[~alive | ~np.isfinite(J)] = np.inf
    return eps, J


def rollout_batch(X_now, s_now: float, spec: SdeSpec, baseline_u, config: PiConfig, seed: int,
                  decision_index: int, running_cost: Callable, threads: int = 1) -> RolloutBatch:
    """M rollouts of H steps from ``X_now`` under a fixed baseline control.

    Rollout i at decision n draws from stream (n << 32 | i) in the rollout
    domain, so the batch does not depend on ``threads``.
    """
    ids = np.arange(config.M, dtype=np.uint64)
    blocks = [ids[a:a + BLOCK_SIZE] for a in range(0, config.M, BLOCK_SIZE)]

    def run(idx):
        return _rollout_block(X_now, s_now, spec, baseline_u, running_cost, config, seed, decision_index, idx)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    eps = np.concatenate([p[0] for p in parts])
    costs = np.concatenate([p[1] for p in parts])
    return RolloutBatch(eps, costs)


def rollout_weights(costs, theta: float, sign: int = 1) -> np.ndarray:
    """r_i proportional to exp(sign * J_i / theta) over finite costs; 0 for diverged rollouts."""
    J = np.asarray(costs, dtype=float)
    ok = np.isfinite(J)
    z = np.full(J.shape, -np.inf)
    z[ok] = sign * J[ok] / theta
    r = np.exp(z - z[ok].max())
    return r / math.fsum(r)


def clamp_control(u, config: PiConfig) -> tuple:
    raw = np.asarray(u, dtype=float)
    out = np.maximum(np.clip(raw, config.u_min, config.u_max), 0.0)
    return out, int(np.sum(out != raw))


def pi_update(X_now, batch: RolloutBatch, sel: TemperatureSelection, spec: SdeSpec, config: PiConfig,
              s_now: float = 0.0) -> np.ndarray:
    """kappa_u * Sigma(X) * (sum_i r_i eps_i) * sqrt(dt), then clamped and floored at 0."""
    return _pi_update(X_now, batch, sel, spec, config, s_now)[0]


def _pi_update(X_now, batch, sel, spec, config, s_now):
    r = rollout_weights(batch.costs, sel.theta_hat, config.weight_sign)
    first = batch.disturbances[:, 0, :]
    push = np.array([math.fsum(r * first[:, j]) for j in range(first.shape[1])])
    X = np.asarray(X_now, dtype=float)
    Sigma = np.asarray(spec.diffusion(s_now, X, np.zeros(spec.k)), dtype=float).reshape(spec.k, spec.m)
    u = config.kappa_u * (Sigma @ push) * math.sqrt(config.dt)
    u, n_clamped = clamp_control(u, config)
    return u, r, n_clamped


@dataclass
class RecedingHorizonResult:
    grid: TimeGrid
    states: np.ndarray  # (n+1, k)
    controls: np.ndarray  # (n, k)
    noise: np.ndarray  # (n, m) closed-loop increments
    diagnostics: list = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return not np.all(np.isfinite(self.states))


class ClosedLoopDivergence(DivergenceError):
    def __init__(self, s, X, step, partial: RecedingHorizonResult):
        super().__init__(s, X, step)
        self.partial = partial


def closed_loop_noise(seed: int, grid: TimeGrid, m: int) -> BrownianIncrements:
    """The closed-loop increment stream shared by every arm of a comparison."""
    return BrownianIncrements.generate(seed, 0, grid.n_steps, m, grid.dt)


def run_receding_horizon(x0, spec: SdeSpec, config: PiConfig, running_cost: Callable, seed: int,
                         t_end: float, threads: int = 1, baseline_u=None) -> RecedingHorizonResult:
    grid = TimeGrid(t_end, config.dt)
    n = grid.n_steps
    noise = closed_loop_noise(seed, grid, spec.m).values
    baseline = np.zeros(spec.k) if baseline_u is None else np.asarray(baseline_u, dtype=float)
    states = np.full((n + 1, spec.k), np.nan)
    controls = np.full((n, spec.k), np.nan)
    states[0] = np.asarray(x0, dtype=float)
    res = RecedingHorizonResult(grid, states, controls, noise)
    for i in range(n):
        s = i * grid.dt
        X = states[i]
        batch = rollout_batch(X, s, spec, baseline, config, seed, i, running_cost, threads)
        if batch.n_diverged > config.M / 2:
            raise ClosedLoopDivergence(s, X, i, res)
        thetas = theta_grid(batch.costs, config)
        sel = select_temperature(batch.costs, config.gamma, thetas)
        u, r, n_clamped = _pi_update(X, batch, sel, spec, config, s)
        controls[i] = u
        with np.errstate(all="ignore"):
            new, _ = _increment(spec, X[None], s, u[None], grid.dt, noise[i][None])
        states[i + 1] = new[0]
        res.diagnostics.append({
            "step": i,
            "s": s,
            "theta_hat": sel.theta_hat,
            "objective": sel.objective_value,
            "ess": 1.0 / math.fsum(r * r),
            "n_diverged": batch.n_diverged,
            "n_clamped": n_clamped,
        })
        if not np.all(np.isfinite(new)):
            raise ClosedLoopDivergence(s, X, i, res)
    return res
