"""Exponential reweighting of path ensembles and grid propagation of the kernel."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .foc import DomainError, GFunction, ProblemSpec, f_value
from .sde import Path

MAXIMIZE = "maximize"
MINIMIZE = "minimize"


class KernelAnnihilated(FloatingPointError):
    pass


@dataclass(frozen=True)
class WeightedEnsemble:
    costs: np.ndarray
    weights: np.ndarray
    ess: float

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True)
class GridDensity:
    x_grid: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x_grid, dtype=float)
        psi = np.asarray(self.psi, dtype=float)
        if x.ndim != 1 or x.shape != psi.shape:
            raise ValueError("x_grid and psi must be 1-D arrays of equal length")
        if x.size < 2:
            raise ValueError("grid needs at least two nodes")
        steps = np.diff(x)
        if not np.all(steps > 0) or np.ptp(steps) > 1e-9 * abs(steps[0]):
            raise ValueError("x_grid must be uniform and increasing")
        if np.any(psi < 0):
            raise ValueError("psi must be nonnegative")
        object.__setattr__(self, "x_grid", x)
        object.__setattr__(self, "psi", psi)

    @property
    def dx(self) -> float:
        return float(self.x_grid[1] - self.x_grid[0])

    @property
    def mass(self) -> float:
        return float(math.fsum(self.psi) * self.dx)

    def normalized(self) -> "GridDensity":
        m = self.mass
        if not m > 0 or not math.isfinite(m):
            raise KernelAnnihilated("kernel annihilated density")
        return GridDensity(self.x_grid, self.psi / m)


def discrete_action(path: Path, spec: ProblemSpec, g: Optional[GFunction] = None) -> float:
    """Left-endpoint Riemann sum of f(s_n, X_n, u_n) dt along a path."""
    if g is not None and g is not spec.g:
        spec = ProblemSpec(spec.profit, spec.sde, g, spec.zeta, spec.partials)
    if path.states.shape[-1] != spec.sde.k:
        raise ValueError(f"path state dimension {path.states.shape[-1]} != k={spec.sde.k}")
    dt = path.grid.dt
    terms = []
    for n in range(path.grid.n_steps):
        try:
            terms.append(f_value(spec, n * dt, path.states[n], path.controls[n]))
        except DomainError as exc:
            raise DomainError(f"step {n}: {exc}") from exc
        if not math.isfinite(terms[-1]):
            raise DomainError(f"step {n}: f is not finite")
    return math.fsum(terms) * dt


def exp_weights(costs: Sequence[float], eps_w: float = 1.0, sign: str = MAXIMIZE) -> WeightedEnsemble:
    """Normalized weights proportional to exp(+eps_w J) (maximize) or exp(-eps_w J) (minimize).

    The exponent is shifted by the extreme cost so the largest weight is exp(0).
    """
    J = np.asarray(costs, dtype=float).ravel()
    if J.size == 0:
        raise ValueError("costs must be nonempty")
    if not np.all(np.isfinite(J)):
        raise ValueError("costs must be finite")
    if sign == MAXIMIZE:
        z = eps_w * (J - J.max())
    elif sign == MINIMIZE:
        z = -eps_w * (J - J.min())
    else:
        raise ValueError(f"sign must be {MAXIMIZE!r} or {MINIMIZE!r}")
    w = np.exp(z)
    ess = effective_sample_size(w)
    return WeightedEnsemble(J, w / math.fsum(w), ess)


def effective_sample_size(weights) -> float:
    """(sum w)^2 / sum w^2, i.e. 1 / sum of squared normalized weights.

    Taking unnormalized weights keeps the uniform case exact: n ones give n.
    """
    w = np.asarray(weights, dtype=float)
    total = math.fsum(w)
    ess = total * total / math.fsum(w * w)
    return float(min(max(ess, 1.0), w.size))


def weighted_control(controls, ens: WeightedEnsemble) -> np.ndarray:
    """Convex combination sum_i w_i u_i."""
    U = np.asarray(controls, dtype=float)
    if U.shape[0] != len(ens.weights):
        raise ValueError(f"{U.shape[0]} controls for {len(ens.weights)} weights")
    return np.tensordot(ens.weights, U, axes=1)


def propagate_kernel(density: GridDensity, f_values, eps: float) -> GridDensity:
    """psi <- exp(-eps f) psi, renormalized to unit mass."""
    f = np.asarray(f_values, dtype=float)
    if f.shape != density.psi.shape:
        raise ValueError("f_values must match the grid")
    if not eps > 0:
        raise ValueError("eps must be positive")
    # shifting f by its minimum only rescales psi, which the renormalization undoes
    live = density.psi > 0
    shift = f[live].min() if live.any() else 0.0
    with np.errstate(invalid="ignore", over="ignore"):
        psi = density.psi * np.exp(-eps * (f - shift))
    if not np.all(np.isfinite(psi)) or not np.any(psi > 0):
        raise KernelAnnihilated("kernel annihilated density")
    return GridDensity(density.x_grid, psi).normalized()
