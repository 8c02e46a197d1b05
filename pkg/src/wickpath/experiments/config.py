"""Line-oriented experiment configuration.

Each non-blank line is ``section.key = value``; ``#`` starts a comment.
Values are numbers, bare words, comma-separated vectors, or matrices written
as semicolon-separated rows of comma-separated entries.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

FAMILIES = {
    "walrasian_path": "walrasian",
    "walrasian_mc": "walrasian",
    "foc_scan": "walrasian",
    "ex3_compare": "ex3",
    "ex3_mc": "ex3",
    "pareto_pi_compare": "pareto",
    "mgh_defect": "mgh",
}


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


def _positive(name):
    def check(v):
        if not v > 0:
            return f"{name} must be positive"
    return check


def _nonneg(name):
    def check(v):
        if v < 0:
            return f"{name} must be >= 0"
    return check


def _discount(v):
    if not 0 < v <= 1:
        return "zeta must lie in (0, 1]"


def _int_at_least(name, low):
    def check(v):
        if v != int(v) or v < low:
            return f"{name} must be an integer >= {low}"
    return check


def _branch(v):
    if v not in ("plus", "minus"):
        return "branch must be 'plus' or 'minus'"


@dataclass(frozen=True)
class Key:
    kind: str  # float | int | str | vector | matrix
    required: bool = True
    default: Any = None
    check: Optional[Callable] = None


_RUN = {
    "run.seed": Key("int", False, 42, _int_at_least("seed", 0)),
    "run.n_paths": Key("int", False, 2000, _int_at_least("n_paths", 1)),
}

_GRID = {
    "grid.t": Key("float", check=_positive("t")),
    "grid.dt": Key("float", check=_positive("dt")),
    # the tabled step count is informative; the simulator derives N = t / dt
    "grid.n": Key("int", False, None),
}

SCHEMAS = {
    "walrasian": {
        "model.a": Key("float", check=_positive("a")),
        "model.sigma": Key("float", check=_positive("sigma")),
        "model.p": Key("float", check=_positive("p")),
        "model.c": Key("float", check=_positive("c")),
        "model.zeta": Key("float", check=_discount),
        "model.lambda_star": Key("float", check=_nonneg("lambda_star")),
        "model.x0": Key("float", check=_positive("x0")),
        "model.branch": Key("str", False, "minus", _branch),
        "run.eps_w": Key("float", False, 1.0, _positive("eps_w")),
        "scan.n_s": Key("int", False, 21, _int_at_least("n_s", 2)),
        "scan.n_x": Key("int", False, 31, _int_at_least("n_x", 2)),
        "scan.x_min": Key("float", False, 0.5, _positive("x_min")),
        "scan.x_max": Key("float", False, 2.0, _positive("x_max")),
        **_GRID,
        **_RUN,
    },
    "ex3": {
        "model.b": Key("float", check=_positive("b")),
        "model.c": Key("float", check=_positive("c")),
        "model.zeta": Key("float", check=_discount),
        "model.lambda_star": Key("float", check=_nonneg("lambda_star")),
        "model.p": Key("float", check=_positive("p")),
        "model.x0": Key("float", check=_positive("x0")),
        "run.eps_w": Key("float", False, 1.0, _positive("eps_w")),
        **_GRID,
        **_RUN,
    },
    "pareto": {
        "model.k": Key("int", check=_int_at_least("k", 1)),
        "model.zeta": Key("float", check=_discount),
        "model.p": Key("float", check=_positive("p")),
        "model.c": Key("float", check=_positive("c")),
        "model.omega1": Key("float", check=_nonneg("omega1")),
        "model.omega2": Key("float", check=_nonneg("omega2")),
        "model.alpha": Key("vector"),
        "model.sigma0": Key("float", check=_nonneg("sigma0")),
        "model.lambda_star": Key("float", False, 0.0, _nonneg("lambda_star")),
        "model.A": Key("matrix"),
        "model.x0": Key("vector"),
        "controller.gamma": Key("float", check=_nonneg("gamma")),
        "controller.M": Key("int", check=_int_at_least("M", 1)),
        "controller.H": Key("int", check=_int_at_least("H", 1)),
        "controller.kappa_u": Key("float"),
        "controller.u_min": Key("float"),
        "controller.u_max": Key("float"),
        "controller.weight_sign": Key("int", False, 1),
        **_GRID,
        "run.seed": _RUN["run.seed"],
    },
    "mgh": {
        "mgh.r": Key("float", False, 0.05),
        "mgh.mu2": Key("float", False, 0.1),
        "mgh.beta": Key("float", False, 0.02),
        "mgh.sigma2": Key("float", False, 0.3, _positive("sigma2")),
        "mgh.alpha": Key("float", False, 0.75),
        "mgh.gamma": Key("float", False, 0.5),
        "mgh.n0": Key("int", False, 17, _int_at_least("n0", 3)),
        "mgh.levels": Key("int", False, 4, _int_at_least("levels", 2)),
        "run.seed": _RUN["run.seed"],
    },
}


@dataclass
class ExperimentConfig:
    experiment: str
    values: dict
    seed: int
    n_paths: int
    out_dir: Optional[Path] = None
    source: str = "<config>"
    text_hash: str = ""
    lines: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def family(self) -> str:
        return FAMILIES[self.experiment]

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    @property
    def n_steps(self) -> int:
        return int(round(self.values["grid.t"] / self.values["grid.dt"]))

    def with_experiment(self, experiment: str) -> "ExperimentConfig":
        if FAMILIES.get(experiment) != self.family:
            raise ConfigError(f"experiment {experiment!r} cannot run a {self.family} configuration",
                              source=self.source)
        return ExperimentConfig(experiment, self.values, self.seed, self.n_paths, self.out_dir,
                                self.source, self.text_hash, self.lines, self.notes)


def _scalar(text: str, kind: str):
    if kind == "str":
        return text
    val = float(text)
    if kind == "int":
        if val != int(val):
            raise ValueError(f"expected an integer, got {text!r}")
        return int(val)
    return val


def _value(text: str, kind: str):
    if kind == "matrix":
        rows = [[float(x) for x in row.split(",")] for row in text.split(";")]
        if len({len(r) for r in rows}) != 1:
            raise ValueError("matrix rows have different lengths")
        return np.array(rows)
    if kind == "vector":
        return np.array([float(x) for x in text.split(",")])
    return _scalar(text, kind)


def parse_text(text: str, source: str = "<config>") -> ExperimentConfig:
    raw: dict = {}
    lines: dict = {}
    for no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'section.key = value', got {body!r}", no, source)
        key, val = (part.strip() for part in body.split("=", 1))
        if "." not in key:
            raise ConfigError(f"key {key!r} must have the form section.key", no, source)
        if key in raw:
            raise ConfigError(f"duplicate key {key!r}", no, source)
        raw[key], lines[key] = val, no

    if "experiment.id" not in raw:
        raise ConfigError("missing required key 'experiment.id'", None, source)
    exp = raw.pop("experiment.id")
    if exp not in FAMILIES:
        raise ConfigError(f"unknown experiment id {exp!r}", lines["experiment.id"], source)
    schema = SCHEMAS[FAMILIES[exp]]

    values = {}
    for key, val in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r}", lines[key], source)
        spec = schema[key]
        try:
            parsed = _value(val, spec.kind)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lines[key], source) from None
        if spec.check is not None:
            msg = spec.check(parsed)
            if msg:
                raise ConfigError(msg, lines[key], source)
        values[key] = parsed
    for key, spec in schema.items():
        if key not in values:
            if spec.required:
                raise ConfigError(f"missing required key {key!r}", None, source)
            values[key] = spec.default

    cfg = ExperimentConfig(
        exp, values, int(values["run.seed"]), int(values.get("run.n_paths") or 1),
        source=source, text_hash=hashlib.sha256(text.encode()).hexdigest(), lines=lines,
    )
    _cross_checks(cfg)
    return cfg


def _cross_checks(cfg: ExperimentConfig) -> None:
    v, line = cfg.values, cfg.lines.get

    def fail(msg, key):
        raise ConfigError(msg, line(key), cfg.source)

    if "grid.t" in v:
        t, dt = v["grid.t"], v["grid.dt"]
        n = int(round(t / dt))
        if n < 1 or abs(n * dt - t) > 1e-12 * max(1.0, t):
            fail(f"dt={dt} does not divide t={t}", "grid.dt")
        if v.get("grid.n") is not None and v["grid.n"] != n:
            cfg.notes.append(f"grid.n={v['grid.n']} is informative; using N = t/dt = {n}")
    if cfg.family == "walrasian" and not v["scan.x_min"] < v["scan.x_max"]:
        fail("scan.x_min must be below scan.x_max", "scan.x_min")
    if cfg.family == "pareto":
        k = v["model.k"]
        alpha, A, x0 = v["model.alpha"], v["model.A"], v["model.x0"]
        if alpha.shape != (k,):
            fail(f"alpha has {alpha.size} entries, expected k={k}", "model.alpha")
        if abs(math.fsum(alpha) - 1.0) > 1e-12:
            fail(f"alpha must sum to 1, got sum {math.fsum(alpha)!r}", "model.alpha")
        if np.any(alpha < 0):
            fail("alpha entries must be >= 0", "model.alpha")
        if A.shape != (k, k):
            fail(f"A must be {k}x{k}, got {A.shape[0]}x{A.shape[1]}", "model.A")
        if np.max(np.abs(A - A.T)) > 1e-12:
            fail("A must be symmetric", "model.A")
        if x0.shape != (k,):
            fail(f"x0 has {x0.size} entries, expected k={k}", "model.x0")
        if not v["controller.u_min"] <= v["controller.u_max"]:
            fail("u_min must not exceed u_max", "controller.u_min")
        if v["controller.weight_sign"] not in (1, -1):
            fail("weight_sign must be +1 or -1", "controller.weight_sign")


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_text(text, str(path))
