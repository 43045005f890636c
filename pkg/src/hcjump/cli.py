"""Command line entry point: hcjump <subcommand> [options]."""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, from_dict, load_config
from .errors import HCJumpError, IOFailure, ValidationError

EXIT_USAGE = 64
SUBCOMMANDS = ("validate", "solve-cell", "simulate-eps", "simulate-limit", "memory", "spectrum",
               "converge", "law-test")


# ------------------------------------------------------------------ helpers

def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o).__name__)


def _write_json(path, obj):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}", path=str(path)) from exc
    return str(path)


def _write_csv(path, header, rows):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}", path=str(path)) from exc
    return str(path)


def _fmt(v):
    return format(float(v), ".17g")


class Run:
    """Collects outputs for the manifest written next to the main output."""

    def __init__(self, sub, args):
        self.sub = sub
        self.args = args
        self.started = _now()
        self.outputs = []
        self.seeds = []
        self.config_hash = None

    def out(self, path):
        self.outputs.append(str(path))
        return path

    def finish(self, main_out):
        if main_out is None:
            return
        man = Path(str(main_out) + ".manifest.json")
        self.outputs.append(str(man))
        _write_json(man, {
            "subcommand": self.sub, "tool_version": __version__, "config_hash": self.config_hash,
            "seeds": self.seeds, "started": self.started, "finished": _now(),
            "outputs": self.outputs, "argv": self.args,
        })


def pipeline(cfg: RunConfig, with_kappa=True, check_connected=True):
    from .cell_solver import build_effective_model
    from .connectivity import check_connectivity
    from .model import CellGrid, rate_fields, validate_inputs

    report = validate_inputs(cfg.geom, cfg.kern, cfg.contrast)
    grid = CellGrid(cfg.geom, cfg.n)
    conn = check_connectivity(grid, cfg.kern, raise_on_failure=check_connected)
    rates = rate_fields(cfg.geom, cfg.kern, cfg.contrast, grid, tol=cfg.fold_tol)
    model = build_effective_model(rates, tol=cfg.theta_tol, with_kappa=with_kappa)
    return report, conn, rates, model


def load_cell(path):
    """Rebuild rates from the configuration embedded in cell.json; Theta is read back."""
    from .model import CellGrid, rate_fields

    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IOFailure(f"cannot read cell file {path}", path=str(path)) from exc
    base = data.get("config_base")
    cfg = from_dict(data["config"], None if base is None else Path(base), data.get("config_hash", ""))
    grid = CellGrid(cfg.geom, cfg.n)
    rates = rate_fields(cfg.geom, cfg.kern, cfg.contrast, grid, tol=cfg.fold_tol)
    return cfg, rates, np.asarray(data["theta"]["theta"], dtype=float), data


# -------------------------------------------------------------- subcommands

def cmd_validate(a, run):
    from .connectivity import check_connectivity
    from .model import CellGrid, validate_inputs

    cfg = load_config(a.config)
    run.config_hash = cfg.digest
    rep = validate_inputs(cfg.geom, cfg.kern, cfg.contrast)
    conn = check_connectivity(CellGrid(cfg.geom, cfg.n), cfg.kern, raise_on_failure=False)
    out = {"checks": rep.to_dict(), "connectivity": conn.to_dict(),
           "measure_g": cfg.geom.measure_g, "measure_y": cfg.geom.measure_y}
    if a.out:
        _write_json(run.out(a.out), out)
    else:
        print(json.dumps(out, indent=2, default=_json_default))
    if not conn.connected:
        from .errors import DisconnectedFastPhase
        raise DisconnectedFastPhase("fast set does not percolate", **conn.witness)
    return a.out


def cmd_solve_cell(a, run):
    cfg = load_config(a.config)
    run.config_hash = cfg.digest
    report, conn, rates, model = pipeline(cfg)
    g = rates.grid
    d = g.dim
    out_dir = Path(a.csv_dir) if a.csv_dir else Path(a.out).parent
    stem = Path(a.out).stem
    xi_y = g.centers[g.y_idx]
    xi_g = g.centers[g.g_idx]
    xcols = [f"xi{i + 1}" for i in range(d)]
    phi_csv = _write_csv(run.out(out_dir / f"{stem}_phi.csv"), xcols + [f"phi{i + 1}" for i in range(d)],
                         [[_fmt(v) for v in np.concatenate([xi_y[k], model.phi.phi[:, k]])]
                          for k in range(xi_y.shape[0])])
    kap = model.kappa.kappa
    kcols = [f"kappa{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    kap_csv = _write_csv(run.out(out_dir / f"{stem}_kappa.csv"), xcols + kcols,
                         [[_fmt(v) for v in np.concatenate([xi_y[k], kap[:, :, k].reshape(-1)])]
                          for k in range(xi_y.shape[0])])
    rates_csv = _write_csv(run.out(out_dir / f"{stem}_rates.csv"), xcols + ["b", "c", "Phi"],
                           [[_fmt(v) for v in np.concatenate([xi_g[k], [rates.b[k], rates.c[k], rates.Phi[k]]])]
                            for k in range(xi_g.shape[0])])
    out = {
        "config": cfg.raw, "config_base": cfg.source, "config_hash": cfg.digest,
        "theta": {**model.theta.to_dict(), "theta_raw": model.theta.theta_raw.tolist()},
        "compatibility": {"phi": model.phi.compat.tolist(), "kappa": model.kappa.compat.tolist()},
        "residuals": {"phi": model.phi.residual.tolist(), "kappa": model.kappa.residual.tolist()},
        "measure_g": g.measure_g, "measure_y": g.measure_y, "lambda0": rates.lambda0,
        "rates": {"b_range": [float(rates.b.min()), float(rates.b.max())],
                  "c_range": [float(rates.c.min()), float(rates.c.max())],
                  "Phi_range": [float(rates.Phi.min()), float(rates.Phi.max())],
                  "p_range": [float(rates.p.min()), float(rates.p.max())],
                  "detailed_balance": float(np.max(np.abs(rates.c - g.measure_y * rates.b)))},
        "connectivity": conn.to_dict(), "validation": report.to_dict(),
        "files": {"phi": phi_csv, "kappa": kap_csv, "rates": rates_csv},
    }
    return _write_json(run.out(a.out), out)


def _path_rows(x, phase, xi, times):
    P, S, d = x.shape
    rows = []
    for p in range(P):
        for s in range(S):
            star = bool(phase[p, s])
            row = [str(p), _fmt(times[s])] + [_fmt(v) for v in x[p, s]]
            row.append("*" if star else "G")
            row += ["" if xi is None or (star and xi is not None and np.isnan(xi[p, s, 0]))
                    else _fmt(v) for v in (xi[p, s] if xi is not None else [None] * d)]
            rows.append(row)
    return rows


def _path_header(d):
    return ["path", "t"] + [f"x{i + 1}" for i in range(d)] + ["phase"] + [f"xi{i + 1}" for i in range(d)]


def _snap_times(a, horizon):
    return sorted(set(_floats(a.times))) if a.times else [horizon]


def _marginal_summary(x, star, times):
    out = []
    for s, t in enumerate(times):
        xs = x[:, s, :]
        out.append({"t": float(t), "mean": xs.mean(axis=0).tolist(), "var": xs.var(axis=0, ddof=1).tolist()
                    if xs.shape[0] > 1 else [0.0] * xs.shape[1], "phase_star_fraction": float(star[:, s].mean())})
    return out


def cmd_simulate_eps(a, run):
    from .eps_process import EpsConfig, simulate_eps

    cfg = load_config(a.config)
    run.config_hash = cfg.digest
    sim = cfg.simulation
    eps = a.eps if a.eps is not None else float(sim.get("epsilon", 0.05))
    horizon = a.horizon if a.horizon is not None else float(sim.get("horizon", 1.0))
    seed = a.seed if a.seed is not None else int(sim.get("seed", 0))
    paths = a.paths if a.paths is not None else int(sim.get("paths", 1000))
    x0 = _floats(a.x0) if a.x0 else sim.get("x0")
    run.seeds.append(seed)
    from .model import validate_inputs
    validate_inputs(cfg.geom, cfg.kern, cfg.contrast)
    ec = EpsConfig(cfg.geom, cfg.kern, cfg.contrast, eps, horizon, seed)
    times = _snap_times(a, horizon)
    r = simulate_eps(ec, paths, times=times, x0=x0, threads=a.threads)
    d = cfg.geom.dim
    _write_csv(run.out(a.out), _path_header(d), _path_rows(r.x, r.fast, r.xi(), r.times))
    summary = {"epsilon": eps, "horizon": horizon, "seed": seed, "paths": paths,
               "occupation_fraction_star": float(r.fast_time.mean() / horizon) if horizon > 0 else None,
               "mean_first_hold": float(np.mean(r.first_hold[r.first_hold >= 0])) if np.any(r.first_hold >= 0) else None,
               "mean_jumps": float(r.jumps.mean()), "marginals": _marginal_summary(r.x, r.fast, r.times)}
    _write_json(run.out(a.summary or str(a.out) + ".summary.json"), summary)
    return a.out


def cmd_simulate_limit(a, run):
    from .limit_process import simulate_limit

    cfg, rates, theta, _ = load_cell(a.cell)
    run.config_hash = cfg.digest
    sim = cfg.simulation
    horizon = a.horizon if a.horizon is not None else float(sim.get("horizon", 1.0))
    seed = a.seed if a.seed is not None else int(sim.get("seed", 0))
    paths = a.paths if a.paths is not None else int(sim.get("paths", 1000))
    run.seeds.append(seed)
    times = _snap_times(a, horizon)
    x0 = _floats(a.x0) if a.x0 else None
    r = simulate_limit(rates, theta, paths, horizon, seed, times=times, x0=x0, threads=a.threads)
    d = rates.grid.dim
    _write_csv(run.out(a.out), _path_header(d), _path_rows(r.x, r.phase_star(), r.xi(), r.times))
    summary = {"horizon": horizon, "seed": seed, "paths": paths, "theta": theta.tolist(),
               "occupation_fraction_star": float(r.star_time.mean() / horizon) if horizon > 0 else None,
               "mean_first_hold": float(r.first_hold[r.first_hold >= 0].mean()) if np.any(r.first_hold >= 0) else None,
               "marginals": _marginal_summary(r.x, r.phase_star(), r.times)}
    _write_json(run.out(a.summary or str(a.out) + ".summary.json"), summary)
    return a.out


def cmd_memory(a, run):
    from .semigroup_memory import assemble_A_G, evolve_coupled, evolve_memory, memory_kernel

    cfg, rates, theta, _ = load_cell(a.cell)
    run.config_hash = cfg.digest
    G = assemble_A_G(rates)
    d = rates.grid.dim
    modes = _floats(a.modes)
    n = int(round(a.T / a.dt))
    times = np.arange(n + 1) * a.dt
    table = memory_kernel(G, rates, times)
    cols, header = [times, table.K], ["t", "K"]
    for m in modes:
        kap = np.zeros(d)
        kap[0] = m
        _, fm = evolve_memory(G, rates, theta, kap, 1.0, None, a.T, a.dt, table=table)
        fc, _ = evolve_coupled(G, rates, theta, kap, 1.0, None, a.T, times=times)
        cols += [fm, fc]
        header += [f"f0_memory_k{m:g}", f"f0_coupled_k{m:g}"]
    M = np.column_stack(cols)
    _write_csv(run.out(a.out), header, [[_fmt(v) for v in row] for row in M])
    r1, r2 = G.gap()
    _write_json(run.out(str(a.out) + ".summary.json"), {
        "lambda0": rates.lambda0, "r1": r1, "r2": r2, "K0": float(table.K[0]),
        "decay_fit": table.decay_fit(), "modes": modes,
        "max_relative_difference": {f"{m:g}": float(np.max(np.abs(M[:, 2 + 2 * k] - M[:, 3 + 2 * k])
                                                             / np.maximum(np.abs(M[:, 3 + 2 * k]), 1e-300)))
                                    for k, m in enumerate(modes)}})
    return a.out


def cmd_spectrum(a, run):
    from .spectrum import sigma2_scan, spectral_radius_check

    cfg, rates, theta, _ = load_cell(a.cell)
    run.config_hash = cfg.digest
    rep = sigma2_scan(rates, lmax=a.lmax, samples=a.samples, l1_norm=cfg.kern.l1_norm)
    out = rep.to_dict()
    pr = spectral_radius_check(rates)
    out["perron"] = {"rho": pr["rho"], "beta1": pr["beta1"], "beta2": pr["beta2"]}
    return _write_json(run.out(a.out), out)


def cmd_converge(a, run):
    from .convergence import TestFunctionPair, generator_residual

    cfg = load_config(a.config)
    run.config_hash = cfg.digest
    _, _, rates, model = pipeline(cfg)
    F = TestFunctionPair.default(cfg.geom.dim)
    rep = generator_residual(F, model, cfg.geom, cfg.kern, cfg.contrast, _floats(a.eps),
                             n_per_phase=a.samples, nodes_per_axis=a.nodes, seed=a.seed)
    return _write_json(run.out(a.out), rep.to_dict())


def read_paths(path):
    """PathSample from a path CSV."""
    from .convergence import PathSample

    try:
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            rows = list(rd)
    except (OSError, StopIteration) as exc:
        raise IOFailure(f"cannot read path file {path}", path=str(path)) from exc
    d = sum(1 for h in header if h.startswith("x") and not h.startswith("xi"))
    if not rows:
        raise ValidationError("path file has no rows", path=str(path))
    pid = np.array([int(r[0]) for r in rows])
    t = np.array([float(r[1]) for r in rows])
    x = np.array([[float(v) for v in r[2:2 + d]] for r in rows])
    star = np.array([r[2 + d] == "*" for r in rows])
    times = np.unique(t)
    paths = np.unique(pid)
    pi = np.searchsorted(paths, pid)
    ti = np.searchsorted(times, t)
    X = np.full((paths.size, times.size, d), np.nan)
    S = np.zeros((paths.size, times.size), dtype=bool)
    X[pi, ti] = x
    S[pi, ti] = star
    return PathSample(times, X, S)


def cmd_law_test(a, run):
    from .convergence import law_distance

    A = read_paths(a.eps_paths)
    B = read_paths(a.limit_paths)
    run.seeds.append(a.seed)
    h = hashlib.sha256()
    for p in (a.eps_paths, a.limit_paths):
        h.update(Path(p).read_bytes())
    run.config_hash = h.hexdigest()
    rows = law_distance(A, B, _floats(a.times), n_boot=a.bootstrap, seed=a.seed)
    return _write_json(run.out(a.out), {"times": _floats(a.times), "rows": rows})


# ------------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="hcjump", description="High-contrast jump process toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd")

    def add(name, fn, **kw):
        s = sub.add_parser(name, **kw)
        s.add_argument("--json-diagnostics", action="store_true", help="emit errors as JSON on stderr")
        s.add_argument("--threads", type=int, default=None, help="worker threads (default $HCJUMP_THREADS or 1)")
        s.set_defaults(fn=fn)
        return s

    s = add("validate", cmd_validate)
    s.add_argument("--config", required=True)
    s.add_argument("--out")

    s = add("solve-cell", cmd_solve_cell)
    s.add_argument("--config", required=True)
    s.add_argument("--out", default="cell.json")
    s.add_argument("--csv-dir")

    s = add("simulate-eps", cmd_simulate_eps)
    s.add_argument("--config", required=True)
    s.add_argument("--eps", type=float)
    s.add_argument("--paths", type=int)
    s.add_argument("--horizon", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--times", help="comma separated snapshot times (default: horizon)")
    s.add_argument("--x0", help="comma separated start point")
    s.add_argument("--out", default="eps_paths.csv")
    s.add_argument("--summary")

    s = add("simulate-limit", cmd_simulate_limit)
    s.add_argument("--cell", required=True)
    s.add_argument("--paths", type=int)
    s.add_argument("--horizon", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--times")
    s.add_argument("--x0")
    s.add_argument("--out", default="limit_paths.csv")
    s.add_argument("--summary")

    s = add("memory", cmd_memory)
    s.add_argument("--cell", required=True)
    s.add_argument("--modes", default="0,1,2")
    s.add_argument("--T", type=float, default=5.0)
    s.add_argument("--dt", type=float, default=1e-3)
    s.add_argument("--out", default="mem.csv")

    s = add("spectrum", cmd_spectrum)
    s.add_argument("--cell", required=True)
    s.add_argument("--lmax", type=float, default=5.0)
    s.add_argument("--samples", type=int, default=400)
    s.add_argument("--out", default="spec.json")

    s = add("converge", cmd_converge)
    s.add_argument("--config", required=True)
    s.add_argument("--eps", default="0.2,0.1,0.05")
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--nodes", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="conv.json")

    s = add("law-test", cmd_law_test)
    s.add_argument("--eps-paths", required=True)
    s.add_argument("--limit-paths", required=True)
    s.add_argument("--times", default="1")
    s.add_argument("--bootstrap", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="law.json")
    return p


def run_command(argv) -> int:
    argv = list(argv)
    parser = build_parser()
    cmd = next((x for x in argv if not x.startswith("-")), None)
    if cmd is None or cmd not in SUBCOMMANDS:
        if argv and argv[0] in ("-h", "--help", "--version"):
            try:
                parser.parse_args(argv)
            except SystemExit as e:
                return int(e.code or 0)
        sys.stderr.write(parser.format_usage())
        if cmd is not None:
            sys.stderr.write(f"hcjump: unknown subcommand {cmd!r}\n")
        return EXIT_USAGE
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    run = Run(a.cmd, argv)
    try:
        main_out = a.fn(a, run)
        run.finish(main_out)
    except HCJumpError as exc:
        if a.json_diagnostics:
            sys.stderr.write(json.dumps(exc.to_dict(), default=_json_default) + "\n")
        else:
            sys.stderr.write(f"hcjump {a.cmd}: {type(exc).__name__}: {exc}\n")
        return exc.exit_code
    return 0


def main(argv=None):
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
