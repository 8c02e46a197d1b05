"""Time grids, seeded Brownian increments and Euler-Maruyama integration."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import DOMAIN_PATH, standard_normals

X_FLOOR = 1e-10
# Paths are simulated in fixed blocks so results never depend on the thread count.
BLOCK_SIZE = 256


class DivergenceError(FloatingPointError):
    """Raised when an Euler-Maruyama update produces a non-finite state."""

    def __init__(self, s: float, X, step: Optional[int] = None):
        self.s = s
        self.X = np.asarray(X)
        self.step = step
        where = f" (step {step})" if step is not None else ""
        super().__init__(f"divergence at step{where}: s={s!r}, X={self.X.tolist()!r}")


@dataclass(frozen=True)
class TimeGrid:
    t_end: float
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if self.n_steps < 1:
            raise ValueError("grid must have n_steps >= 1")
        if abs(self.n_steps * self.dt - self.t_end) > 1e-12 * max(1.0, self.t_end):
            # the step count is derived, so dt must tile [0, t_end]
            raise ValueError(f"dt={self.dt} does not divide t_end={self.t_end}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @classmethod
    def from_steps(cls, t_end: float, n_steps: int) -> "TimeGrid":
        if n_steps < 1:
            raise ValueError("grid must have n_steps >= 1")
        return cls(t_end, t_end / n_steps)


@dataclass(frozen=True)
class BrownianIncrements:
    """Normal(0, dt) increments for one stream, shape ``(n_steps, m)``."""

    values: np.ndarray
    seed: int
    stream_id: int

    @classmethod
    def generate(cls, seed: int, stream_id: int, n_steps: int, m: int, dt: float) -> "BrownianIncrements":
        z = standard_normals(seed, [stream_id], n_steps, m, DOMAIN_PATH)[0]
        return cls(z * math.sqrt(dt), seed, stream_id)


def brownian_block(seed: int, stream_ids, n_steps: int, m: int, dt: float) -> np.ndarray:
    """Increments for several streams at once, shape ``(len(stream_ids), n_steps, m)``."""
    return standard_normals(seed, stream_ids, n_steps, m, DOMAIN_PATH) * math.sqrt(dt)


@dataclass(frozen=True)
class SdeSpec:
    """Controlled diffusion dX = drift(s, X, u) ds + diffusion(s, X, u) dW.

    ``drift`` maps batched ``X (..., k)`` and ``u (..., k_u)`` to ``(..., k)``;
    ``diffusion`` maps them to ``(..., k, m)``. With ``guard_u`` / ``guard_x`` the
    arguments are floored at 0 / ``x_floor`` before the maps are evaluated; the
    state update itself is never altered.
    """

    k: int
    m: int
    drift: Callable
    diffusion: Callable
    guard_u: bool = False
    guard_x: bool = False
    x_floor: float = X_FLOOR

    def guarded(self, X, u):
        X = np.asarray(X, dtype=float)
        u = np.asarray(u, dtype=float)
        clamped = np.zeros(X.shape[:-1], dtype=bool)
        if self.guard_u:
            low = u < 0
            clamped |= low.any(axis=-1)
            u = np.where(low, 0.0, u)
        if self.guard_x:
            low = X < self.x_floor
            clamped |= low.any(axis=-1)
            X = np.where(low, self.x_floor, X)
        return X, u, clamped


def _increment(spec: SdeSpec, X, s, u, dt, dW):
    Xg, ug, clamped = spec.guarded(X, u)
    mu = np.asarray(spec.drift(s, Xg, ug), dtype=float)
    sig = np.asarray(spec.diffusion(s, Xg, ug), dtype=float)
    noise = np.einsum("...ij,...j->...i", sig, np.asarray(dW, dtype=float))
    return np.asarray(X, dtype=float) + mu * dt + noise, clamped


def em_step(X, s: float, u, spec: SdeSpec, dt: float, dW):
    """One Euler-Maruyama step X + mu dt + sigma dW."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    dW = np.asarray(dW, dtype=float)
    if dW.shape[-1] != spec.m:
        raise ValueError(f"dW has length {dW.shape[-1]}, expected m={spec.m}")
    new, _ = _increment(spec, X, s, u, dt, dW)
    if not np.all(np.isfinite(new)):
        raise DivergenceError(s, X)
    return new


@dataclass
class Path:
    grid: TimeGrid
    states: np.ndarray  # (n_steps + 1, k)
    controls: np.ndarray  # (n_steps, k_u)
    noise: np.ndarray  # (n_steps, m)
    clamped: np.ndarray  # (n_steps,) bool
    fallback: np.ndarray  # (n_steps,) bool, rule had no admissible value
    diverged: bool = False
    diverged_step: Optional[int] = None
    stream_id: int = 0

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class BlockResult:
    states: np.ndarray  # (P, n+1, k)
    controls: np.ndarray  # (P, n, k_u)
    clamped: np.ndarray  # (P, n)
    fallback: np.ndarray  # (P, n)
    diverged_step: np.ndarray  # (P,) int, -1 when finite


def simulate_block(x0, spec: SdeSpec, rule: Callable, grid: TimeGrid, noise: np.ndarray) -> BlockResult:
    """Vectorised closed-loop EM over a batch of paths sharing ``x0``.

    ``rule(s, X)`` receives ``X`` of shape ``(P, k)`` and returns ``(P, k_u)``.
    NaN controls mean the rule has no admissible value; they fall back to 0 and
    are flagged. A path whose state turns non-finite is frozen at NaN from then on.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (spec.k,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({spec.k},)")
    P, n, m = noise.shape
    if n != grid.n_steps or m != spec.m:
        raise ValueError("noise shape does not match grid and spec")
    dt = grid.dt
    X = np.broadcast_to(x0, (P, spec.k)).copy()
    states = np.empty((P, n + 1, spec.k))
    states[:, 0] = X
    controls = None
    clamped = np.zeros((P, n), dtype=bool)
    fallback = np.zeros((P, n), dtype=bool)
    diverged_step = np.full(P, -1)
    alive = np.ones(P, dtype=bool)
    with np.errstate(all="ignore"):
        for i in range(n):
            s = i * dt
            u = np.asarray(rule(s, X), dtype=float).reshape(P, -1)
            if controls is None:
                controls = np.full((P, n, u.shape[1]), np.nan)
            missing = np.isnan(u)
            fallback[:, i] = missing.any(axis=1) & alive
            u = np.where(missing, 0.0, u)
            controls[alive, i] = u[alive]
            new, clamp = _increment(spec, X, s, u, dt, noise[:, i])
            clamped[:, i] = clamp & alive
            bad = alive & ~np.all(np.isfinite(new), axis=1)
            if bad.any():
                diverged_step[bad] = i
                alive &= ~bad
                new[~alive] = np.nan
            X = new
            states[:, i + 1] = X
    return BlockResult(states, controls, clamped, fallback, diverged_step)


def simulate_path(x0, spec: SdeSpec, rule: Callable, grid: TimeGrid, noise: BrownianIncrements) -> Path:
    """Single closed-loop path; controls use the left endpoint of each step."""
    values = np.asarray(noise.values, dtype=float)
    res = simulate_block(x0, spec, rule, grid, values[None])
    step = int(res.diverged_step[0])
    if step >= 0:
        raise DivergenceError(step * grid.dt, res.states[0, step], step)
    return Path(grid, res.states[0], res.controls[0], values, res.clamped[0], res.fallback[0],
                stream_id=noise.stream_id)


@dataclass
class Ensemble:
    paths: list
    seed: int
    n_diverged: int = 0
    n_clamped: int = 0
    n_fallback: int = 0

    def __len__(self):
        return len(self.paths)

    def __iter__(self):
        return iter(self.paths)

    def __getitem__(self, i):
        return self.paths[i]

    @property
    def terminal_states(self) -> np.ndarray:
        return np.array([p.terminal for p in self.paths])


def _run_block(args):
    x0, spec, rule, grid, seed, ids = args
    noise = brownian_block(seed, ids, grid.n_steps, spec.m, grid.dt)
    return ids, noise, simulate_block(x0, spec, rule, grid, noise)


def simulate_ensemble(x0, spec: SdeSpec, rule: Callable, grid: TimeGrid, seed: int, n_paths: int,
                      threads: int = 1, block_size: int = BLOCK_SIZE) -> Ensemble:
    """Simulate ``n_paths`` paths; path ``i`` always uses stream ``i``.

    Work is cut into fixed blocks of stream ids, independent of ``threads``, so
    the output is bitwise identical for any degree of parallelism.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    ids = np.arange(n_paths, dtype=np.uint64)
    jobs = [(x0, spec, rule, grid, seed, ids[a:a + block_size]) for a in range(0, n_paths, block_size)]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_block, jobs))
    else:
        results = [_run_block(j) for j in jobs]
    paths = []
    for block_ids, noise, res in results:
        for j, sid in enumerate(block_ids):
            step = int(res.diverged_step[j])
            paths.append(Path(grid, res.states[j], res.controls[j], noise[j], res.clamped[j],
                              res.fallback[j], diverged=step >= 0,
                              diverged_step=step if step >= 0 else None, stream_id=int(sid)))
    return Ensemble(
        paths,
        seed,
        n_diverged=sum(p.diverged for p in paths),
        n_clamped=int(sum(p.clamped.sum() for p in paths)),
        n_fallback=int(sum(p.fallback.sum() for p in paths)),
    )


def linear_sde(a: float, b: float = 0.0) -> SdeSpec:
    """Scalar geometric SDE dX = a X ds + b X dW (uncontrolled)."""
    return SdeSpec(
        k=1,
        m=1,
        drift=lambda s, X, u: a * X,
        diffusion=lambda s, X, u: (b * X)[..., None],
    )


def zero_rule(k_u: int = 1) -> Callable:
    def rule(s, X):
        return np.zeros(np.shape(X)[:-1] + (k_u,))
    return rule


def as_batched(rule: Callable) -> Callable:
    """Lift a scalar rule ``(s, X_vector) -> u`` to batched states (slow path)."""
    def batched(s, X):
        X = np.asarray(X, dtype=float)
        out = [np.atleast_1d(rule(s, x)) for x in X.reshape(-1, X.shape[-1])]
        return np.array(out).reshape(X.shape[:-1] + (-1,))
    return batched
