"""TOML run configuration."""
from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import IOFailure, ValidationError
from .model import Ball, Box, CellGeometry, Contrast, Kernel


@dataclass
class RunConfig:
    geom: CellGeometry
    kern: Kernel
    contrast: Contrast
    n: int
    fold_tol: float = 1e-12
    theta_tol: float = 1e-3
    simulation: dict = field(default_factory=dict)
    source: str | None = None
    digest: str = ""
    raw: dict = field(default_factory=dict)


def _boxes(spec, dim):
    if not spec:
        return []
    # a single box may be given as [[lo...], [hi...]]
    if isinstance(spec[0][0], (int, float)):
        spec = [spec]
    out = []
    for pair in spec:
        lo, hi = pair
        if len(lo) != dim or len(hi) != dim:
            raise ValidationError("box corners must have dim entries", box=pair, dim=dim)
        out.append(Box(tuple(map(float, lo)), tuple(map(float, hi))))
    return out


def _balls(spec, dim):
    out = []
    for b in spec or []:
        c = b["center"]
        if len(c) != dim:
            raise ValidationError("ball centre must have dim entries", ball=b, dim=dim)
        out.append(Ball(tuple(map(float, c)), float(b["radius"])))
    return out


def _load_table(path: Path):
    try:
        if path.suffix == ".npy":
            return np.load(path)
        return np.loadtxt(path, delimiter=",", ndmin=1)
    except OSError as exc:
        raise IOFailure(f"cannot read contrast table {path}", path=str(path)) from exc


def from_dict(data: dict, base: Path | None = None, digest: str = "") -> RunConfig:
    try:
        geo = data["geometry"]
        dim = int(geo["dim"])
        regions = _boxes(geo.get("g_boxes"), dim) + _balls(geo.get("g_balls"), dim)
        geom = CellGeometry(dim, regions)
        kd = data["kernel"]
        kern = Kernel(kd["family"], float(kd["radius"]), float(kd.get("amplitude", 1.0)), dim,
                      kd.get("width"), float(kd.get("center", 0.0)))
        cd = data.get("contrast", {"kind": "constant", "value": 1.0})
        kind = cd.get("kind", "constant")
        table = None
        if kind != "constant":
            tp = cd.get("grid_path")
            if tp is None:
                raise ValidationError(f"contrast kind {kind!r} needs grid_path")
            p = Path(tp)
            if base is not None and not p.is_absolute():
                p = base / p
            table = _load_table(p)
            expect = dim if kind == "separable" else 2 * dim
            if table.ndim == 1 and expect > 1:
                m = int(round(table.size ** (1 / expect)))
                table = table.reshape((m,) * expect)
            if table.ndim != expect:
                raise ValidationError("contrast table has the wrong number of axes",
                                      axes=table.ndim, expected=expect)
        contrast = Contrast(kind, float(cd.get("value", 1.0)), table)
        n = int(data.get("grid", {}).get("n", 64))
        tol = data.get("tolerances", {})
    except KeyError as exc:
        raise ValidationError(f"missing config key {exc.args[0]!r}") from exc
    return RunConfig(geom, kern, contrast, n, float(tol.get("fold_tol", 1e-12)),
                     float(tol.get("theta_tol", 1e-3)), dict(data.get("simulation", {})),
                     None if base is None else str(base), digest, data)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}", path=str(path)) from exc
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ValidationError(f"config is not valid TOML: {exc}", path=str(path)) from exc
    return from_dict(data, path.parent.resolve(), hashlib.sha256(raw).hexdigest())
