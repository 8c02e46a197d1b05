"""Experiment runners: each writes CSVs, a JSON summary and a manifest."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..foc import MGParams, foc_residual, mgh_defect_study, mgh_operator_apply, residual_scale
from ..path_integral import exp_weights
from ..pi_controller import PiConfig, closed_loop_noise, pareto_cost_fn, run_receding_horizon
from ..sde import BrownianIncrements, TimeGrid, simulate_ensemble, simulate_path
from ..strategies import (
    Ex3Params, ParetoParams, WalrasianQuantumParams, ex3_profit, ex3_pontryagin_rule,
    ex3_quantum_rule, ex3_sde, pareto_pontryagin_batch, pareto_sde, walrasian_discriminant,
    walrasian_problem, walrasian_profit, walrasian_quantum_batch, walrasian_rule, walrasian_sde,
)
from .config import ExperimentConfig
from .output import render_csv, write_csv, write_json, write_manifest

HIST_BINS = 50
QUANTILES = (0.05, 0.25, 0.50, 0.75, 0.95)
SAMPLE_PATHS = 20


@dataclass
class RunSummary:
    experiment: str
    stats: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    runtime_s: float = 0.0

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "runtime_s": self.runtime_s, **self.stats}


def nearest_rank_quantile(values, q: float) -> float:
    """Smallest x with at least a fraction q of the sample <= x."""
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        raise ValueError("empty sample")
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    return float(x[max(math.ceil(q * x.size) - 1, 0)])


def _quantiles(values) -> dict:
    return {f"q{int(round(q * 100)):02d}": nearest_rank_quantile(values, q) for q in QUANTILES}


def histogram(values, bins: int = HIST_BINS):
    x = np.asarray(values, dtype=float)
    return np.histogram(x, bins=bins, range=(float(x.min()), float(x.max())))


def discounted_profit(path, profit: Callable) -> float:
    """Left-endpoint Riemann sum of the discounted profit integrand."""
    dt = path.grid.dt
    vals = [float(profit(n * dt, path.states[n, 0], path.controls[n, 0])) for n in range(path.grid.n_steps)]
    return math.fsum(vals) * dt


def discounted_profits(ensemble, profit: Callable) -> np.ndarray:
    """Vectorised ``discounted_profit`` over an ensemble of scalar paths."""
    paths = list(ensemble)
    grid = paths[0].grid
    X = np.stack([p.states[:-1, 0] for p in paths])
    U = np.stack([p.controls[:, 0] for p in paths])
    s = grid.times[:-1][None, :]
    vals = profit(s, X, U)
    return np.array([math.fsum(row) for row in vals]) * grid.dt


def _mc_analysis(ensemble, profit: Callable, eps_w: float, name: str):
    paths = [p for p in ensemble if not p.diverged]
    if not paths:
        raise ValueError("ensemble has no finite paths")
    terminal = np.array([p.terminal[0] for p in paths])
    profits = discounted_profits(paths, profit)
    ens = exp_weights(profits, eps_w, "maximize")
    counts, edges = histogram(terminal)
    n = terminal.size
    stats = {
        "n": n,
        "n_diverged": sum(p.diverged for p in ensemble),
        "n_clamped": int(sum(p.clamped.sum() for p in ensemble)),
        "n_fallback": int(sum(p.fallback.sum() for p in ensemble)),
        "terminal_mean": float(math.fsum(terminal) / n),
        "terminal_se": float(terminal.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
        "terminal_quantiles": _quantiles(terminal),
        "profit_mean": float(math.fsum(profits) / n),
        "profit_quantiles": _quantiles(profits),
        "ess": ens.ess,
        "ess_ratio": ens.ess / n,
        "hist_edges": edges,
        "hist_counts": counts,
    }
    return RunSummary(name, stats), profits, ens.weights


def mc_summary(ensemble, profit: Callable, eps_w: float = 1.0, name: str = "mc") -> RunSummary:
    """Terminal-state and discounted-profit statistics over the finite paths of an ensemble.

    Quantiles are nearest-rank, the histogram has 50 equal-width bins over
    [min, max], and the ESS is that of exp(eps_w * profit) weights.
    """
    return _mc_analysis(ensemble, profit, eps_w, name)[0]


def _grid(cfg: ExperimentConfig) -> TimeGrid:
    return TimeGrid(cfg["grid.t"], cfg["grid.dt"])


def _walrasian_params(cfg):
    return WalrasianQuantumParams(p=cfg["model.p"], c=cfg["model.c"], zeta=cfg["model.zeta"],
                                  a=cfg["model.a"], lambda_star=cfg["model.lambda_star"])


def _ex3_params(cfg):
    return Ex3Params(b=cfg["model.b"], c=cfg["model.c"], zeta=cfg["model.zeta"],
                     lambda_star=cfg["model.lambda_star"], p=cfg["model.p"])


def _pareto_params(cfg):
    return ParetoParams(k=cfg["model.k"], alpha=cfg["model.alpha"], p=cfg["model.p"], c=cfg["model.c"],
                        omega1=cfg["model.omega1"], omega2=cfg["model.omega2"], zeta=cfg["model.zeta"],
                        lambda_star=cfg["model.lambda_star"], A_matrix=cfg["model.A"],
                        sigma0=cfg["model.sigma0"])


def _path_rows(path, grid: TimeGrid, rule: Callable):
    # the final row carries the rule evaluated at the terminal state
    last = np.asarray(rule(grid.t_end, path.states[-1:]), dtype=float).reshape(-1)
    last = np.where(np.isnan(last), 0.0, last)
    for n in range(grid.n_steps + 1):
        s = n * grid.dt
        u = path.controls[n] if n < grid.n_steps else last
        clamped = path.clamped[n] if n < grid.n_steps else False
        yield n, s, s / grid.t_end, path.states[n], u, clamped


def run_walrasian_path(cfg: ExperimentConfig, out: Path, threads: int = 1, svg: bool = True) -> RunSummary:
    prm, grid = _walrasian_params(cfg), _grid(cfg)
    branch = cfg["model.branch"]
    rule = walrasian_rule(prm, branch)
    noise = BrownianIncrements.generate(cfg.seed, 0, grid.n_steps, 1, grid.dt)
    path = simulate_path([cfg["model.x0"]], walrasian_sde(cfg["model.a"], cfg["model.sigma"]), rule, grid, noise)
    files = [write_csv(out / "trajectory.csv", ["step", "s", "s_over_t", "X", "u", "clamped"],
                       ([n, s, st, X[0], u[0], c] for n, s, st, X, u, c in _path_rows(path, grid, rule)))]
    events = np.flatnonzero(path.fallback)
    files.append(write_csv(out / "fallback_events.csv", ["step", "s", "X"],
                           ([int(i), i * grid.dt, path.states[i, 0]] for i in events)))
    if svg:
        files.append(render_csv(out / "trajectory.csv", "s_over_t",
                                [("market share X(s)", ["X"]), ("control u(s)", ["u"])],
                                out / "trajectory.svg"))
    stats = {
        "branch": branch,
        "n_steps": grid.n_steps,
        "terminal_X": float(path.terminal[0]),
        "discounted_profit": discounted_profit(path, walrasian_profit(prm)),
        "n_fallback": int(path.fallback.sum()),
        "n_clamped": int(path.clamped.sum()),
        "notes": cfg.notes,
    }
    return RunSummary(cfg.experiment, stats, files)


def run_walrasian_mc(cfg: ExperimentConfig, out: Path, threads: int = 1, svg: bool = True) -> RunSummary:
    prm, grid = _walrasian_params(cfg), _grid(cfg)
    ens = simulate_ensemble([cfg["model.x0"]], walrasian_sde(cfg["model.a"], cfg["model.sigma"]),
                            walrasian_rule(prm, cfg["model.branch"]), grid, cfg.seed, cfg.n_paths, threads)
    summary, profits, weights = _mc_analysis(ens, walrasian_profit(prm), cfg["run.eps_w"], cfg.experiment)
    files = _write_mc_files(out, ens, profits, weights, summary, "", svg)
    summary.stats.update(branch=cfg["model.branch"], notes=cfg.notes)
    summary.files = files
    return summary


def _write_mc_files(out, ens, profits, weights, summary, suffix, svg):
    edges, counts = summary.stats["hist_edges"], summary.stats["hist_counts"]
    finite = [p for p in ens if not p.diverged]
    hist = write_csv(out / f"hist{suffix}.csv", ["bin_lo", "bin_hi", "bin_mid", "count"],
                     ([edges[i], edges[i + 1], 0.5 * (edges[i] + edges[i + 1]), int(counts[i])]
                      for i in range(len(counts))))
    wts = write_csv(out / f"weights{suffix}.csv", ["path", "terminal_X", "profit", "weight"],
                    ([p.stream_id, p.terminal[0], pr, w] for p, pr, w in zip(finite, profits, weights)))
    grid = ens[0].grid
    sample = ens.paths[:SAMPLE_PATHS]
    paths = write_csv(out / f"paths{suffix}.csv",
                      ["step", "s", "s_over_t"] + [f"path_{p.stream_id}" for p in sample],
                      ([n, n * grid.dt, n * grid.dt / grid.t_end] + [p.states[n, 0] for p in sample]
                       for n in range(grid.n_steps + 1)))
    files = [hist, wts, paths]
    if svg:
        files.append(render_csv(hist, "bin_mid", [("terminal X histogram", ["count"])],
                                out / f"hist{suffix}.svg", kind="bar"))
        files.append(render_csv(paths, "s_over_t",
                                [("sample paths", [f"path_{p.stream_id}" for p in sample])],
                                out / f"paths{suffix}.svg"))
    return files


def _ex3_arms(cfg):
    prm = _ex3_params(cfg)
    return prm, {"quantum": ex3_quantum_rule(prm), "pontryagin": ex3_pontryagin_rule(prm)}


def run_ex3_compare(cfg: ExperimentConfig, out: Path, threads: int = 1, svg: bool = True) -> RunSummary:
    prm, arms = _ex3_arms(cfg)
    grid = _grid(cfg)
    spec = ex3_sde(prm.b)
    noise = BrownianIncrements.generate(cfg.seed, 0, grid.n_steps, 1, grid.dt)
    files, stats = [], {"notes": cfg.notes}
    for name, rule in arms.items():
        path = simulate_path([cfg["model.x0"]], spec, rule, grid, noise)
        rows = ([n, s, st, X[0], u[0], noise.values[n, 0] if n < grid.n_steps else 0.0]
                for n, s, st, X, u, _ in _path_rows(path, grid, rule))
        files.append(write_csv(out / f"{name}.csv", ["step", "s", "s_over_t", "X", "u", "dW"], rows))
        stats[name] = {
            "terminal_X": float(path.terminal[0]),
            "discounted_profit": discounted_profit(path, ex3_profit(prm)),
            "max_abs_u": float(np.max(np.abs(path.controls))),
        }
    if svg:
        for name in arms:
            files.append(render_csv(out / f"{name}.csv", "s_over_t",
                                    [(f"{name}: X(s)", ["X"]), (f"{name}: u(s)", ["u"])], out / f"{name}.svg"))
    return RunSummary(cfg.experiment, stats, files)


def run_ex3_mc(cfg: ExperimentConfig, out: Path, threads: int = 1, svg: bool = True) -> RunSummary:
    prm, arms = _ex3_arms(cfg)
    grid = _grid(cfg)
    spec = ex3_sde(prm.b)
    files, stats = [], {"notes": cfg.notes}
    for name, rule in arms.items():
        ens = simulate_ensemble([cfg["model.x0"]], spec, rule, grid, cfg.seed, cfg.n_paths, threads)
        summary, profits, weights = _mc_analysis(ens, ex3_profit(prm), cfg["run.eps_w"], name)
        files += _write_mc_files(out, ens, profits, weights, summary, f"_{name}", svg)
        stats[name] = summary.stats
    return RunSummary(cfg.experiment, stats, files)


def _vector_rows(states, controls, noise, grid):
    k = states.shape[1]
    for n in range(grid.n_steps + 1):
        u = controls[n] if n < grid.n_steps else np.full(k, np.nan)
        dW = noise[n, 0] if n < grid.n_steps else np.nan
        yield [n, n * grid.dt, n * grid.dt / grid.t_end, *states[n], *u, dW]


def run_pareto_pi_compare(cfg: ExperimentConfig, out: Path, threads: int = 1, svg: bool = True) -> RunSummary:
    prm = _pareto_params(cfg)
    pi_cfg = PiConfig(M=cfg["controller.M"], H=cfg["controller.H"], gamma=cfg["controller.gamma"],
                      kappa_u=cfg["controller.kappa_u"], u_min=cfg["controller.u_min"],
                      u_max=cfg["controller.u_max"], dt=cfg["grid.dt"],
                      weight_sign=cfg["controller.weight_sign"])
    spec = pareto_sde(prm)
    x0 = cfg["model.x0"]
    grid = _grid(cfg)
    res = run_receding_horizon(x0, spec, pi_cfg, pareto_cost_fn(prm), cfg.seed, grid.t_end, threads)

    def pontryagin(s, X):
        return pareto_pontryagin_batch(s, X, prm, pi_cfg.u_max)

    noise = closed_loop_noise(cfg.seed, grid, spec.m)
    pont = simulate_path(x0, spec, pontryagin, grid, noise)
    k = prm.k
    header = ["step", "s", "s_over_t"] + [f"X{i + 1}" for i in range(k)] + [f"u{i + 1}" for i in range(k)] + ["dW"]
    files = [
        write_csv(out / "pi.csv", header, _vector_rows(res.states, res.controls, res.noise, grid)),
        write_csv(out / "pontryagin.csv", header, _vector_rows(pont.states, pont.controls, noise.values, grid)),
    ]
    diag_keys = ["step", "s", "theta_hat", "objective", "ess", "n_diverged", "n_clamped"]
    files.append(write_csv(out / "diagnostics.csv", diag_keys, ([d[c] for c in diag_keys] for d in res.diagnostics)))
    if svg:
        Xs, us = [f"X{i + 1}" for i in range(k)], [f"u{i + 1}" for i in range(k)]
        for name in ("pi", "pontryagin"):
            files.append(render_csv(out / f"{name}.csv", "s_over_t",
                                    [(f"{name}: X(s)", Xs), (f"{name}: u(s)", us)], out / f"{name}.svg"))

    def arm(states, controls):
        return {
            "max_abs_X": float(np.max(np.abs(states))),
            "all_finite": bool(np.all(np.isfinite(states))),
            "u_min_seen": float(np.min(controls)),
            "u_max_seen": float(np.max(controls)),
            "u_in_bounds": bool(np.all((controls >= pi_cfg.u_min) & (controls <= pi_cfg.u_max))),
            "terminal_X": states[-1],
        }

    stats = {
        "pi": {**arm(res.states, res.controls),
               "n_clamped": int(sum(d["n_clamped"] for d in res.diagnostics)),
               "n_rollouts_diverged": int(sum(d["n_diverged"] for d in res.diagnostics)),
               "ess_min": float(min(d["ess"] for d in res.diagnostics))},
        "pontryagin": arm(pont.states, pont.controls),
        "common_noise": bool(np.array_equal(res.noise, noise.values)),
        "notes": cfg.notes,
    }
    return RunSummary(cfg.experiment, stats, files)


def run_foc_scan(cfg: ExperimentConfig, out: Path, threads: int = 1, svg: bool = True) -> RunSummary:
    """Evaluate both rule branches and the first-order-condition residual over an (s, X) grid."""
    prm, grid = _walrasian_params(cfg), _grid(cfg)
    problem = walrasian_problem(prm, cfg["model.sigma"])
    s_vals = np.linspace(0.0, grid.t_end, cfg["scan.n_s"])
    x_vals = np.linspace(cfg["scan.x_min"], cfg["scan.x_max"], cfg["scan.n_x"])
    rows, rel = [], []
    for s in s_vals:
        for x in x_vals:
            disc = float(walrasian_discriminant(s, x, prm))
            row = [s, x, disc]
            for branch in ("minus", "plus"):
                u = float(walrasian_quantum_batch(s, np.array([x]), prm, branch)[0])
                if math.isnan(u):
                    row += [u, math.nan, math.nan]
                    continue
                r = foc_residual(problem, s, np.array([x]), np.array([u]))
                sc = residual_scale(problem, s, np.array([x]), np.array([u]))
                row += [u, r, sc]
                rel.append(abs(r) / (1.0 + sc))
            rows.append(row)
    header = ["s", "X", "discriminant", "u_minus", "residual_minus", "scale_minus",
              "u_plus", "residual_plus", "scale_plus"]
    files = [write_csv(out / "scan.csv", header, rows)]
    n_real = sum(1 for r in rows if r[2] >= 0)
    stats = {
        "n_points": len(rows),
        "n_real_roots": n_real,
        "max_relative_residual": max(rel) if rel else None,
        "notes": cfg.notes,
    }
    return RunSummary(cfg.experiment, stats, files)


def run_mgh_defect(cfg: ExperimentConfig, out: Path, threads: int = 1, svg: bool = True) -> RunSummary:
    prm = MGParams(mu2=cfg["mgh.mu2"], sigma2=cfg["mgh.sigma2"], r=cfg["mgh.r"], beta=cfg["mgh.beta"],
                   alpha=cfg["mgh.alpha"], gamma=cfg["mgh.gamma"])
    study = mgh_defect_study(prm, cfg["mgh.n0"], cfg["mgh.levels"])
    ratios = [math.nan] + [study[i][2] / study[i + 1][2] for i in range(len(study) - 1)]
    files = [write_csv(out / "defect.csv", ["n", "h", "defect", "ratio"],
                       ([n, h, d, r] for (n, h, d), r in zip(study, ratios)))]
    a = np.linspace(-1, 1, 9)
    b = np.linspace(-1, 0.5, 9)
    const = mgh_operator_apply(np.full((9, 9), 1.0), a, b, prm)
    stats = {
        "defects": [d for _, _, d in study],
        "ratios": ratios[1:],
        "constant_error": float(np.max(np.abs(const[1:-1, 1:-1] - prm.r))),
    }
    return RunSummary(cfg.experiment, stats, files)


RUNNERS = {
    "walrasian_path": run_walrasian_path,
    "walrasian_mc": run_walrasian_mc,
    "ex3_compare": run_ex3_compare,
    "ex3_mc": run_ex3_mc,
    "pareto_pi_compare": run_pareto_pi_compare,
    "foc_scan": run_foc_scan,
    "mgh_defect": run_mgh_defect,
}


def run_experiment(cfg: ExperimentConfig, out_dir, threads: int = 1, svg: bool = True) -> RunSummary:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    summary = RUNNERS[cfg.experiment](cfg, out, threads, svg)
    summary.runtime_s = time.perf_counter() - start
    summary.stats.setdefault("seed", cfg.seed)
    summary.files.append(write_json(out / "summary.json", summary.to_dict()))
    write_manifest(out, cfg.experiment, cfg.text_hash, cfg.seed, [f for f in summary.files if f.suffix != ".json"])
    return summary
