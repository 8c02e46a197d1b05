"""CSV, JSON summary, manifest, and deterministic SVG output."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .. import __version__


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return format(float(value), ".17g")


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path: Path) -> tuple:
    """Header and float columns; malformed rows raise with their row number."""
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    cols = [[] for _ in header]
    for no, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {no} has {len(row)} fields, expected {len(header)}")
        for j, cell in enumerate(row):
            try:
                cols[j].append(float(cell))
            except ValueError:
                raise ValueError(f"{path}: row {no}, column {header[j]!r}: not a number: {cell!r}") from None
    return header, {h: np.array(c) for h, c in zip(header, cols)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


def write_json(path: Path, data: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, experiment: str, config_hash: str, seed: int, files: Sequence[Path]) -> Path:
    """Record what produced the artifacts; no timestamps so reruns compare equal."""
    data = {
        "experiment": experiment,
        "config_sha256": config_hash,
        "seed": seed,
        "version": __version__,
        "files": {Path(f).name: file_sha256(f) for f in sorted(files, key=lambda p: Path(p).name)},
    }
    return write_json(Path(out_dir) / "manifest.json", data)


# SVG --------------------------------------------------------------------------

_W, _PANEL_H, _PAD = 640, 220, 48
_COLOURS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def _num(v: float) -> str:
    return format(v, ".6g")


def _panel(x, ys, title, top, kind="line") -> list:
    x = np.asarray(x, dtype=float)
    series = [np.asarray(y, dtype=float) for y in ys]
    if x.size == 0 or any(y.size == 0 for y in series):
        raise ValueError(f"panel {title!r}: empty series")
    finite = np.concatenate([y[np.isfinite(y)] for y in series])
    if finite.size == 0:
        raise ValueError(f"panel {title!r}: no finite values")
    x0, x1 = float(np.nanmin(x)), float(np.nanmax(x))
    y0, y1 = float(finite.min()), float(finite.max())
    if kind == "bar":
        y0 = min(y0, 0.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    left, right = _PAD, _W - _PAD / 2
    bottom, upper = top + _PANEL_H - _PAD / 2, top + _PAD / 2

    def px(v):
        return left + (v - x0) / (x1 - x0) * (right - left)

    def py(v):
        return bottom - (v - y0) / (y1 - y0) * (bottom - upper)

    out = [
        f'<rect x="{_num(left)}" y="{_num(upper)}" width="{_num(right - left)}" '
        f'height="{_num(bottom - upper)}" fill="none" stroke="#444"/>',
        f'<text x="{_num(left)}" y="{_num(upper - 6)}" font-size="12">{title}</text>',
        f'<text x="4" y="{_num(upper + 10)}" font-size="10">{_num(y1)}</text>',
        f'<text x="4" y="{_num(bottom)}" font-size="10">{_num(y0)}</text>',
        f'<text x="{_num(left)}" y="{_num(bottom + 14)}" font-size="10">{_num(x0)}</text>',
        f'<text x="{_num(right - 30)}" y="{_num(bottom + 14)}" font-size="10">{_num(x1)}</text>',
    ]
    for i, y in enumerate(series):
        colour = _COLOURS[i % len(_COLOURS)]
        if kind == "bar":
            width = (right - left) / max(len(x), 1)
            for xv, yv in zip(x, y):
                top_y = py(max(yv, 0.0))
                out.append(f'<rect x="{_num(px(xv) - width / 2)}" y="{_num(top_y)}" width="{_num(width)}" '
                           f'height="{_num(py(0.0) - top_y)}" fill="{colour}"/>')
            continue
        pts = " ".join(f"{_num(px(a))},{_num(py(b))}" for a, b in zip(x, y) if math.isfinite(b))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="1"/>')
    return out


def render_panels(panels: Sequence[dict], out_path: Path) -> Path:
    """Stack panels vertically; each panel is {'x', 'ys', 'title', optional 'kind'}."""
    if not panels:
        raise ValueError("nothing to render")
    height = _PANEL_H * len(panels)
    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{height}" '
            f'viewBox="0 0 {_W} {height}">', f'<rect width="{_W}" height="{height}" fill="white"/>']
    for i, p in enumerate(panels):
        body += _panel(p["x"], p["ys"], p["title"], i * _PANEL_H, p.get("kind", "line"))
    body.append("</svg>")
    out_path = Path(out_path)
    out_path.write_text("\n".join(body) + "\n", encoding="utf-8")
    return out_path


def render_csv(csv_path: Path, x: str, panels: Sequence[tuple], out_path: Path, kind: str = "line") -> Path:
    """Render columns of one CSV; ``panels`` is a list of (title, [column, ...])."""
    header, cols = read_csv(csv_path)
    specs = []
    for title, names in panels:
        for n in [x, *names]:
            if n not in cols:
                raise ValueError(f"{csv_path}: missing column {n!r}")
        specs.append({"x": cols[x], "ys": [cols[n] for n in names], "title": title, "kind": kind})
    return render_panels(specs, out_path)
