"""Monte Carlo for the rescaled high-contrast jump process X_eps(t).

Jumps x -> y = x - eps z happen with intensity eps^-2 a(z) Lambda(xi, eta),
xi = {x/eps}, eta = {y/eps}, Lambda = 1_Y(xi) 1_Y(eta) + eps^2 w(xi, eta)(1 - 1_Y(xi) 1_Y(eta)).
Simulation is exact thinning against the constant rate
eps^-2 |a|_1 max(1, eps^2 alpha2).
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import StepBudgetExceeded, ValidationError
from .model import Ball, Box, CellGeometry, CellGrid, Contrast, Kernel
from .streams import run_paths

EVENT_BUDGET = 10 ** 9
FAMILY_CODE = {"box": 0, "triangle": 1, "truncated-gaussian": 2}
KIND_CODE = {"constant": 0, "separable": 1, "grid": 2}


@dataclass
class EpsConfig:
    geom: CellGeometry
    kern: Kernel
    contrast: Contrast
    epsilon: float
    horizon: float
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.epsilon <= 1):
            raise ValidationError("epsilon must lie in (0, 1]", epsilon=self.epsilon)
        if self.horizon < 0:
            raise ValidationError("horizon must be nonnegative", horizon=self.horizon)


@dataclass
class Packed:
    """Geometry, kernel and contrast flattened for the compiled kernels."""

    box_lo: np.ndarray
    box_hi: np.ndarray
    ball_c: np.ndarray
    ball_r: np.ndarray
    family: int
    radius: float
    sigma: float
    kind: int
    value: float
    table: np.ndarray
    tshape: np.ndarray
    rate: float
    bound: float


def pack(cfg: EpsConfig) -> Packed:
    geom, kern, w = cfg.geom, cfg.kern, cfg.contrast
    d = geom.dim
    boxes = [r for r in geom.g_regions if isinstance(r, Box)]
    balls = [r for r in geom.g_regions if isinstance(r, Ball)]
    lo = np.array([b.lo for b in boxes], dtype=float).reshape(-1, d)
    hi = np.array([b.hi for b in boxes], dtype=float).reshape(-1, d)
    bc = np.array([b.center for b in balls], dtype=float).reshape(-1, d)
    br = np.array([b.radius for b in balls], dtype=float)
    if w.kind == "constant":
        table, tshape = np.ones(1), np.ones(1, dtype=np.int64)
    else:
        t = np.asarray(w.table, dtype=float)
        table, tshape = np.ascontiguousarray(t.reshape(-1)), np.array(t.shape, dtype=np.int64)
    a1, a2 = w.bounds()
    eps = cfg.epsilon
    bound = max(1.0, eps * eps * a2)
    rate = kern.l1_norm * bound / (eps * eps)
    return Packed(lo, hi, bc, br, FAMILY_CODE[kern.family], float(kern.radius), float(kern.sigma),
                  KIND_CODE[w.kind], float(w.value), table, tshape, rate, bound)


# ------------------------------------------------------------ compiled core

@numba.njit(cache=True, nogil=True)
def _frac(v):
    return v - np.floor(v)


@numba.njit(cache=True, nogil=True)
def _in_gbar(xi, box_lo, box_hi, ball_c, ball_r):
    d = xi.shape[0]
    for b in range(box_lo.shape[0]):
        inside = True
        for a in range(d):
            hit = False
            for s in (-1.0, 0.0, 1.0):
                v = xi[a] + s
                if v >= box_lo[b, a] and v <= box_hi[b, a]:
                    hit = True
            if not hit:
                inside = False
                break
        if inside:
            return True
    ncomb = 3 ** d
    for b in range(ball_c.shape[0]):
        for code in range(ncomb):
            r2 = 0.0
            cc = code
            for a in range(d):
                s = (cc % 3) - 1.0
                cc //= 3
                diff = xi[a] + s - ball_c[b, a]
                r2 += diff * diff
            if r2 <= ball_r[b] * ball_r[b]:
                return True
    return False


@numba.njit(cache=True, nogil=True)
def _interp(table, shape, pts):
    k = shape.shape[0]
    i0 = np.empty(k, dtype=np.int64)
    fr = np.empty(k)
    for a in range(k):
        p = _frac(pts[a]) * shape[a]
        f = np.floor(p)
        i0[a] = np.int64(f)
        fr[a] = p - f
    out = 0.0
    for corner in range(1 << k):
        wt = 1.0
        flat = 0
        for a in range(k):
            bit = (corner >> (k - 1 - a)) & 1
            wt *= fr[a] if bit else 1.0 - fr[a]
            flat = flat * shape[a] + (i0[a] + bit) % shape[a]
        out += wt * table[flat]
    return out


@numba.njit(cache=True, nogil=True)
def _weight(xi, eta, kind, value, table, tshape):
    if kind == 0:
        return value
    d = xi.shape[0]
    if kind == 1:
        return value * _interp(table, tshape, xi) * _interp(table, tshape, eta)
    both = np.empty(2 * d)
    for a in range(d):
        both[a] = xi[a]
        both[d + a] = eta[a]
    return value * _interp(table, tshape, both)


@numba.njit(cache=True, nogil=True)
def _draw_profile(rng, family, r, sigma):
    if family == 0:
        return r * (2.0 * rng.random() - 1.0)
    if family == 1:
        v = rng.random()
        t = r * (1.0 - np.sqrt(1.0 - v))
        return t if rng.random() < 0.5 else -t
    while True:
        t = sigma * rng.standard_normal()
        if abs(t) <= r:
            return t


@numba.njit(cache=True, nogil=True)
def _eps_path(rng, x0, eps, T, snaps, P_lo, P_hi, P_bc, P_br, family, r, sigma, kind, value, table,
              tshape, rate, bound, budget, xs_out, fast_out, rec_t, rec_x, rec_fast, first_only=False):
    """One path. Returns (fast time, first holding time, accepted jumps, proposals, status, records)."""
    d = x0.shape[0]
    x = x0.copy()
    xi = np.empty(d)
    eta = np.empty(d)
    y = np.empty(d)
    for a in range(d):
        xi[a] = _frac(x[a] / eps)
    fast = not _in_gbar(xi, P_lo, P_hi, P_bc, P_br)
    t = 0.0
    s = 0
    nsnap = snaps.shape[0]
    fast_time = 0.0
    first_hold = -1.0
    jumps = 0
    proposals = 0
    nrec = 0
    cap = rec_t.shape[0]
    status = 0
    if cap > 0:
        rec_t[0] = 0.0
        for a in range(d):
            rec_x[0, a] = x[a]
        rec_fast[0] = fast
        nrec = 1
    while True:
        tau = rng.exponential(1.0 / rate)
        end = t + tau
        stop = min(end, T)
        while s < nsnap and snaps[s] <= stop:
            for a in range(d):
                xs_out[s, a] = x[a]
            fast_out[s] = fast
            s += 1
        if fast:
            fast_time += stop - t
        if end > T:
            break
        t = end
        proposals += 1
        if proposals > budget:
            status = 1
            break
        for a in range(d):
            z = _draw_profile(rng, family, r, sigma)
            y[a] = x[a] - eps * z
            eta[a] = _frac(y[a] / eps)
        tgt_fast = not _in_gbar(eta, P_lo, P_hi, P_bc, P_br)
        if fast and tgt_fast:
            lam = 1.0
        else:
            lam = eps * eps * _weight(xi, eta, kind, value, table, tshape)
        if rng.random() * bound < lam:
            if first_hold < 0:
                first_hold = t
            for a in range(d):
                x[a] = y[a]
                xi[a] = eta[a]
            fast = tgt_fast
            jumps += 1
            if first_only:
                break
            if cap > 0:
                if nrec < cap:
                    rec_t[nrec] = t
                    for a in range(d):
                        rec_x[nrec, a] = x[a]
                    rec_fast[nrec] = fast
                    nrec += 1
                else:
                    status = 2
    while s < nsnap:
        for a in range(d):
            xs_out[s, a] = x[a]
        fast_out[s] = fast
        s += 1
    return fast_time, first_hold, jumps, proposals, status, nrec


# ------------------------------------------------------------------ driver

def default_x0(cfg: EpsConfig, n: int = 512):
    """eps times the fast cell centre closest to the origin of the torus."""
    grid = CellGrid(cfg.geom, n if cfg.geom.dim == 1 else max(16, int(round(n ** (1 / cfg.geom.dim)))))
    c = grid.centers[grid.y_idx]
    signed = np.where(c > 0.5, c - 1.0, c)
    k = int(np.argmin(np.sum(signed ** 2, axis=1)))
    return cfg.epsilon * signed[k]


def phase_of(cfg: EpsConfig, x):
    """True where {x/eps} lies in the fast set."""
    x = np.atleast_2d(x)
    return ~cfg.geom.in_gbar(x / cfg.epsilon)


@dataclass
class EpsRun:
    times: np.ndarray
    x: np.ndarray            # (paths, snaps, d)
    fast: np.ndarray         # (paths, snaps)
    fast_time: np.ndarray
    first_hold: np.ndarray
    jumps: np.ndarray
    proposals: np.ndarray
    epsilon: float

    def xi(self):
        return self.x / self.epsilon - np.floor(self.x / self.epsilon)


def simulate_eps(cfg: EpsConfig, n_paths: int, times=None, x0=None, threads: int | None = None,
                 budget: int = EVENT_BUDGET) -> EpsRun:
    P = pack(cfg)
    d = cfg.geom.dim
    x0 = default_x0(cfg) if x0 is None else np.asarray(x0, dtype=float).reshape(d)
    snaps = np.array([cfg.horizon] if times is None else sorted(times), dtype=float)
    ns = snaps.size
    empty_t, empty_x, empty_f = np.zeros(0), np.zeros((0, d)), np.zeros(0, dtype=np.bool_)

    def work(stream, a, b):
        m = b - a
        xs = np.zeros((m, ns, d))
        fs = np.zeros((m, ns), dtype=np.bool_)
        st = np.zeros((m, 4))
        for p in range(m):
            rng = stream.at(a + p)
            ft, fh, nj, npr, status, _ = _eps_path(
                rng, x0, cfg.epsilon, float(cfg.horizon), snaps, P.box_lo, P.box_hi, P.ball_c, P.ball_r,
                P.family, P.radius, P.sigma, P.kind, P.value, P.table, P.tshape, P.rate, P.bound,
                budget, xs[p], fs[p], empty_t, empty_x, empty_f)
            if status == 1:
                raise StepBudgetExceeded("event budget exhausted", path=a + p, budget=budget)
            st[p] = (ft, fh, nj, npr)
        return xs, fs, st

    parts = run_paths(n_paths, cfg.seed, work, threads)
    xs = np.concatenate([p[0] for p in parts])
    fs = np.concatenate([p[1] for p in parts])
    st = np.concatenate([p[2] for p in parts])
    return EpsRun(snaps, xs, fs, st[:, 0], st[:, 1], st[:, 2].astype(np.int64),
                  st[:, 3].astype(np.int64), cfg.epsilon)


def first_holding_times(cfg: EpsConfig, n_paths: int, x0, threads: int | None = None,
                        budget: int = EVENT_BUDGET):
    """Time to the first accepted jump from x0, one value per path (inf if none before the horizon)."""
    P = pack(cfg)
    d = cfg.geom.dim
    x0 = np.asarray(x0, dtype=float).reshape(d)
    snaps = np.zeros(0)
    empty_t, empty_x, empty_f = np.zeros(0), np.zeros((0, d)), np.zeros(0, dtype=np.bool_)
    xs, fs = np.zeros((0, d)), np.zeros(0, dtype=np.bool_)

    def work(stream, a, b):
        out = np.empty(b - a)
        for p in range(b - a):
            rng = stream.at(a + p)
            _, fh, _, _, status, _ = _eps_path(
                rng, x0, cfg.epsilon, float(cfg.horizon), snaps, P.box_lo, P.box_hi, P.ball_c, P.ball_r,
                P.family, P.radius, P.sigma, P.kind, P.value, P.table, P.tshape, P.rate, P.bound,
                budget, xs, fs, empty_t, empty_x, empty_f, True)
            if status == 1:
                raise StepBudgetExceeded("event budget exhausted", path=a + p, budget=budget)
            out[p] = fh if fh >= 0 else np.inf
        return out

    return np.concatenate(run_paths(n_paths, cfg.seed, work, threads, chunk=4096))


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    fast: np.ndarray
    terminal_x: np.ndarray
    terminal_fast: bool
    horizon: float


def simulate_eps_path(cfg: EpsConfig, x0=None, index: int = 0, budget: int = EVENT_BUDGET,
                      capacity: int = 4096) -> Trajectory:
    """Full jump record of one path keyed by (seed, index)."""
    from .streams import PathStream

    P = pack(cfg)
    d = cfg.geom.dim
    x0 = default_x0(cfg) if x0 is None else np.asarray(x0, dtype=float).reshape(d)
    snaps = np.array([cfg.horizon])
    while True:
        rng = PathStream(cfg.seed).at(index)
        rt, rx, rf = np.zeros(capacity), np.zeros((capacity, d)), np.zeros(capacity, dtype=np.bool_)
        xs, fs = np.zeros((1, d)), np.zeros(1, dtype=np.bool_)
        ft, fh, nj, npr, status, nrec = _eps_path(
            rng, x0, cfg.epsilon, float(cfg.horizon), snaps, P.box_lo, P.box_hi, P.ball_c, P.ball_r,
            P.family, P.radius, P.sigma, P.kind, P.value, P.table, P.tshape, P.rate, P.bound,
            budget, xs, fs, rt, rx, rf)
        if status == 1:
            raise StepBudgetExceeded("event budget exhausted", budget=budget)
        if status == 2:
            capacity *= 4
            continue
        return Trajectory(rt[:nrec].copy(), rx[:nrec].copy(), rf[:nrec].copy(), xs[0].copy(),
                          bool(fs[0]), float(cfg.horizon))


# ------------------------------------------------------- rates / generator

def lambda_eps(cfg: EpsConfig, xi, eta):
    """Lambda_eps on cell coordinates (vectorised)."""
    xi, eta = np.atleast_2d(xi), np.atleast_2d(eta)
    fx = ~cfg.geom.in_gbar(xi)
    fy = ~cfg.geom.in_gbar(eta)
    both = fx & fy
    w = cfg.contrast.weight(xi, eta)
    return np.where(both, 1.0, cfg.epsilon ** 2 * w)


def midpoint_nodes(kern: Kernel, per_axis: int = 4096):
    r = kern.support_radius
    m = per_axis if kern.dim == 1 else max(16, int(per_axis ** (1 / kern.dim) * 4))
    ax = -r + (np.arange(m) + 0.5) * (2 * r / m)
    z = np.stack(np.meshgrid(*([ax] * kern.dim), indexing="ij"), axis=-1).reshape(-1, kern.dim)
    wts = np.full(z.shape[0], (2 * r / m) ** kern.dim)
    return z, wts


def total_jump_rate(cfg: EpsConfig, x, nodes=None):
    """eps^-2 int a(z) Lambda(xi, {xi - z}) dz by quadrature over the kernel support."""
    z, wts = nodes if nodes is not None else midpoint_nodes(cfg.kern)
    x = np.asarray(x, dtype=float).reshape(-1)
    xi = _frac_np(x / cfg.epsilon)
    eta = _frac_np(xi[None, :] - z)
    lam = lambda_eps(cfg, np.repeat(xi[None, :], z.shape[0], axis=0), eta)
    return float(np.sum(wts * cfg.kern(z) * lam)) / cfg.epsilon ** 2


def _frac_np(v):
    return v - np.floor(v)


def apply_eps_generator(cfg: EpsConfig, F, x, nodes=None):
    """(L_eps f)(x) for the two-branch function F.

    F(y, fast) returns values at points y (M, d) given a boolean fast mask;
    nodes are (z, weights) for the integral over the kernel support.
    """
    z, wts = nodes if nodes is not None else midpoint_nodes(cfg.kern)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    eps = cfg.epsilon
    xi = _frac_np(x / eps)
    y = x - eps * z
    eta = _frac_np(y / eps)
    fy = ~cfg.geom.in_gbar(eta)
    fx = bool(~cfg.geom.in_gbar(xi)[0])
    lam = lambda_eps(cfg, np.repeat(xi, z.shape[0], axis=0), eta)
    vy = F(y, fy)
    vx = F(x, np.array([fx]))[0]
    return float(np.sum(wts * cfg.kern(z) * lam * (vy - vx))) / eps ** 2
