"""Desk-scale checks of generator convergence and convergence in law.

The generator check evaluates L_eps on the corrector ansatz F_eps and compares
with the projected limit generator pi_eps L F on quasi-random sample sets.
Correctors live on the cell grid and are interpolated multilinearly, with
ghost values across the phase boundary from one-sided linear extrapolation.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import ks_2samp, qmc

from .cell_solver import EffectiveModel, corrector_K
from .eps_process import EpsConfig, apply_eps_generator
from .errors import QuadratureUnderResolved, SampleSizeTooSmall
from .model import Ball, Box, CellGeometry, Kernel

MIN_NODES_PER_AXIS = 64


# ---------------------------------------------------------- test functions

@dataclass(frozen=True)
class TestFunction:
    """Re[amplitude * exp(-|x - c|^2 / (2 s^2) + i (k.x + phase))]; scale None drops the Gaussian."""

    __test__ = False

    dim: int = 1
    amplitude: float = 1.0
    center: tuple | None = None
    scale: float | None = 1.0
    wavevector: tuple | None = None
    phase: float = 0.0

    def _parts(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        c = np.zeros(self.dim) if self.center is None else np.asarray(self.center, dtype=float)
        k = np.zeros(self.dim) if self.wavevector is None else np.asarray(self.wavevector, dtype=float)
        q = 1j * (x @ k + self.phase)
        dq = np.broadcast_to(1j * k, x.shape).astype(complex)
        curv = 0.0
        if self.scale is not None:
            r = x - c
            q = q - np.sum(r * r, axis=1) / (2 * self.scale ** 2)
            dq = dq - r / self.scale ** 2
            curv = -1.0 / self.scale ** 2
        return self.amplitude * np.exp(q), dq, curv

    def value(self, x):
        e, _, _ = self._parts(x)
        return e.real

    def grad(self, x):
        e, dq, _ = self._parts(x)
        return (e[:, None] * dq).real

    def hess(self, x):
        e, dq, curv = self._parts(x)
        H = dq[:, :, None] * dq[:, None, :] + curv * np.eye(self.dim)
        return (e[:, None, None] * H).real

    def third(self, x):
        e, dq, curv = self._parts(x)
        I = np.eye(self.dim)
        T = dq[:, :, None, None] * dq[:, None, :, None] * dq[:, None, None, :]
        T = T + curv * (I[None, :, :, None] * dq[:, None, None, :] + I[None, :, None, :] * dq[:, None, :, None]
                        + I[None, None, :, :] * dq[:, :, None, None])
        return (e[:, None, None, None] * T).real

    def sup_bound(self):
        return abs(self.amplitude)


@dataclass(frozen=True)
class CellFactor:
    """gamma(xi) = base + amplitude * cos(2 pi mode * sum(xi))."""

    base: float = 1.0
    amplitude: float = 0.0
    mode: int = 1

    def __call__(self, xi):
        xi = np.atleast_2d(xi)
        return self.base + self.amplitude * np.cos(2 * np.pi * self.mode * xi.sum(axis=1))


@dataclass(frozen=True)
class TestFunctionPair:
    """F = (f0(x), g(x, xi) = gx(x) gamma(xi))."""

    __test__ = False

    f0: TestFunction
    gx: TestFunction
    gamma: CellFactor = field(default_factory=CellFactor)

    @property
    def dim(self):
        return self.f0.dim

    def g(self, x, xi):
        return self.gx.value(x) * self.gamma(xi)

    @classmethod
    def constant(cls, value: float, dim: int = 1):
        c = TestFunction(dim, value, scale=None)
        return cls(c, c, CellFactor(1.0, 0.0))

    @classmethod
    def default(cls, dim: int = 1):
        return cls(TestFunction(dim, 1.0, scale=0.5),
                   TestFunction(dim, 0.5, scale=0.7, wavevector=tuple([1.0] * dim)),
                   CellFactor(1.0, 0.5, 1))


# ------------------------------------------------------------- projection

def _phase_fast(geom: CellGeometry, xi):
    return ~geom.in_gbar(np.atleast_2d(xi))


def _g_average_nodes(geom: CellGeometry, n_grid: int = 64):
    """Nodes and weights for averages over G (weights sum to one)."""
    if len(geom.g_regions) == 1 and isinstance(geom.g_regions[0], Box):
        b = geom.g_regions[0]
        t, w = np.polynomial.legendre.leggauss(8)
        axes = [b.lo[a] + (b.hi[a] - b.lo[a]) * (t + 1) / 2 for a in range(geom.dim)]
        wts = [w / 2 for _ in range(geom.dim)]
        P = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, geom.dim)
        W = np.prod(np.stack(np.meshgrid(*wts, indexing="ij"), -1).reshape(-1, geom.dim), axis=1)
        return P, W
    ax = (np.arange(n_grid) + 0.5) / n_grid
    P = np.stack(np.meshgrid(*([ax] * geom.dim), indexing="ij"), -1).reshape(-1, geom.dim)
    P = P[geom.in_g(P)]
    return P, np.full(P.shape[0], 1.0 / P.shape[0])


def project_pi_eps(F: TestFunctionPair, geom: CellGeometry, eps: float, x, mode: str = "sup"):
    """pi_eps F at points x: f0 on fast points, g on slow points.

    mode "cell-average" replaces g(x, xi) by the average of g(x_hat + eps zeta, xi)
    over zeta in G, x_hat = eps [x / eps].
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = x / eps - np.floor(x / eps)
    fast = _phase_fast(geom, xi)
    out = np.empty(x.shape[0])
    out[fast] = F.f0.value(x[fast])
    slow = ~fast
    if mode == "sup":
        out[slow] = F.g(x[slow], xi[slow])
    elif mode == "cell-average":
        P, W = _g_average_nodes(geom)
        xs = x[slow]
        xhat = eps * np.floor(xs / eps)
        gam = F.gamma(xi[slow])
        vals = np.zeros(xs.shape[0])
        for p, w in zip(P, W):
            vals += w * F.gx.value(xhat + eps * p)
        out[slow] = vals * gam
    else:
        raise ValueError(f"unknown projection mode {mode!r}")
    return out


# ------------------------------------------------------ corrector fields

def _ghost_fill(grid, fields):
    """Full-grid copies of Y-cell fields, with G cells next to Y filled by linear
    extrapolation from the Y side (constant where only one Y layer is available)."""
    n, d = grid.n, grid.dim
    k = fields.shape[0]
    full = np.zeros((k, grid.size))
    full[:, grid.y_idx] = fields
    is_y = ~grid.is_g
    coords = np.stack(np.unravel_index(np.arange(grid.size), grid.shape), axis=1)
    acc = np.zeros((k, grid.size))
    cnt = np.zeros(grid.size)
    lin = np.zeros(grid.size, dtype=bool)
    for o in itertools.product((-1, 0, 1), repeat=d):
        if not any(o):
            continue
        o = np.array(o)
        n1 = np.ravel_multi_index(((coords + o) % n).T, grid.shape)
        n2 = np.ravel_multi_index(((coords + 2 * o) % n).T, grid.shape)
        two = grid.is_g & is_y[n1] & is_y[n2]
        acc[:, two] += 2 * full[:, n1[two]] - full[:, n2[two]]
        cnt[two] += 1
        lin |= two
    for o in itertools.product((-1, 0, 1), repeat=d):
        if not any(o):
            continue
        o = np.array(o)
        n1 = np.ravel_multi_index(((coords + o) % n).T, grid.shape)
        one = grid.is_g & ~lin & is_y[n1]
        acc[:, one] += full[:, n1[one]]
        cnt[one] += 1
    m = cnt > 0
    full[:, m] = acc[:, m] / cnt[m]
    return full


def _interp_fields(full, grid, pts):
    """Multilinear interpolation of cell-centred periodic fields (k, N) at pts (M, d)."""
    n, d = grid.n, grid.dim
    pos = (np.atleast_2d(pts) * n - 0.5)
    i0 = np.floor(pos).astype(np.int64)
    fr = pos - i0
    out = np.zeros((full.shape[0], pos.shape[0]))
    for corner in itertools.product((0, 1), repeat=d):
        wt = np.ones(pos.shape[0])
        idx = np.zeros(pos.shape[0], dtype=np.int64)
        for ax, c in enumerate(corner):
            wt = wt * (fr[:, ax] if c else 1.0 - fr[:, ax])
            idx = idx * n + (i0[:, ax] + c) % n
        out += wt * full[:, idx]
    return out


class CorrectorField:
    """Correctors phi, kappa and the K pieces, evaluable at any fast cell point.

    K enters linearly in (f0, g) = (f0(x), gx(x) gamma), so two cell solves
    give K(x, .) = gx(x) K_g + f0(x) K_f for every x.
    """

    def __init__(self, model: EffectiveModel, kern: Kernel, F: TestFunctionPair):
        self.model = model
        self.kern = kern
        rates = model.rates
        g = rates.grid
        self.grid = g
        d = g.dim
        self.theta_raw = model.theta.theta_raw
        gam = F.gamma(g.centers[g.g_idx])
        self.B_gamma = float(np.sum(rates.b * gam) * g.h)
        self.lambda0 = rates.lambda0
        K_g = corrector_K(model.op, rates, 0.0, gam).K
        K_f = corrector_K(model.op, rates, 1.0, np.zeros(g.g_idx.size)).K
        kap = model.kappa.kappa.reshape(d * d, -1) if model.kappa is not None else np.zeros((d * d, g.y_idx.size))
        self.fields = np.vstack([model.phi.phi, kap, K_g[None], K_f[None]])
        self.full = _ghost_fill(g, self.fields)

    def evaluate(self, pts):
        """(phi (M,d), kappa (M,d,d), K_g (M,), K_f (M,)) at fast cell points pts."""
        d = self.grid.dim
        v = _interp_fields(self.full, self.grid, pts)
        M = v.shape[1]
        return v[:d].T, v[d:d + d * d].T.reshape(M, d, d), v[-2], v[-1]


# ----------------------------------------------------------------- ansatz

class Ansatz:
    """F_eps from the corrector expansion."""

    def __init__(self, F: TestFunctionPair, correctors: CorrectorField, geom: CellGeometry, eps: float):
        self.F = F
        self.cf = correctors
        self.geom = geom
        self.eps = eps

    def fast_value(self, y, eta):
        F, e = self.F, self.eps
        phi, kap, kg, kf = self.cf.evaluate(eta)
        f = F.f0.value(y)
        grad = F.f0.grad(y)
        H = F.f0.hess(y)
        return (f + e * np.sum(phi * grad, axis=1) + e * e * np.einsum("mij,mij->m", kap, H)
                + e * e * (F.gx.value(y) * kg + f * kf))

    def __call__(self, y, fast=None):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        eta = y / self.eps - np.floor(y / self.eps)
        if fast is None:
            fast = _phase_fast(self.geom, eta)
        out = np.empty(y.shape[0])
        if np.any(fast):
            out[fast] = self.fast_value(y[fast], eta[fast])
        slow = ~fast
        if np.any(slow):
            out[slow] = self.F.g(y[slow], eta[slow])
        return out


def build_ansatz(F: TestFunctionPair, model: EffectiveModel, geom: CellGeometry, kern: Kernel,
                 eps: float, correctors: CorrectorField | None = None) -> Ansatz:
    return Ansatz(F, correctors or CorrectorField(model, kern, F), geom, eps)


# -------------------------------------------------------------- quadrature

def _axis_breaks(geom: CellGeometry, axis: int):
    out = []
    for r in geom.g_regions:
        if isinstance(r, Box):
            out += [r.lo[axis], r.hi[axis]]
        elif isinstance(r, Ball):
            out += [r.center[axis] - r.radius, r.center[axis] + r.radius]
    return np.unique(np.mod(out, 1.0))


def kernel_nodes(kern: Kernel, geom: CellGeometry, xi, nodes_per_axis: int = MIN_NODES_PER_AXIS):
    """Piecewise Gauss-Legendre nodes in z, split where {xi - z} crosses a phase boundary
    or the kernel profile has a kink."""
    if nodes_per_axis < MIN_NODES_PER_AXIS:
        raise QuadratureUnderResolved("kernel quadrature needs at least 64 nodes per axis",
                                      nodes_per_axis=nodes_per_axis, minimum=MIN_NODES_PER_AXIS)
    d = kern.dim
    xi = np.asarray(xi, dtype=float).reshape(d)
    c, r = kern.center, kern.radius
    lo, hi = c - r, c + r
    span = hi - lo
    axes_z, axes_w = [], []
    for a in range(d):
        br = [lo, hi, c]
        for b in _axis_breaks(geom, a):
            base = xi[a] - b
            for m in range(int(math.floor(lo - base)) - 1, int(math.ceil(hi - base)) + 2):
                v = base + m
                if lo < v < hi:
                    br.append(v)
        br = np.unique(np.clip(br, lo, hi))
        zs, ws = [], []
        for u, v in zip(br[:-1], br[1:]):
            if v - u <= 1e-15:
                continue
            q = max(8, int(math.ceil(nodes_per_axis * (v - u) / span)))
            t, w = np.polynomial.legendre.leggauss(q)
            zs.append(u + (v - u) * (t + 1) / 2)
            ws.append(w * (v - u) / 2)
        axes_z.append(np.concatenate(zs))
        axes_w.append(np.concatenate(ws))
    Z = np.stack(np.meshgrid(*axes_z, indexing="ij"), -1).reshape(-1, d)
    W = np.prod(np.stack(np.meshgrid(*axes_w, indexing="ij"), -1).reshape(-1, d), axis=1)
    return Z, W


# ---------------------------------------------------------------- residual

def limit_generator_targets(F: TestFunctionPair, cf: CorrectorField, cfg: EpsConfig, x, nodes):
    """pi_eps L F at one point x, with the slow-branch rates integrated on the same z nodes."""
    x = np.atleast_2d(x)
    eps = cfg.epsilon
    xi = x / eps - np.floor(x / eps)
    fast = bool(_phase_fast(cfg.geom, xi)[0])
    f0 = F.f0.value(x)[0]
    gxv = F.gx.value(x)[0]
    if fast:
        theta = cf.theta_raw
        return fast, float(np.sum(theta * F.f0.hess(x)[0]) + gxv * cf.B_gamma - cf.lambda0 * f0)
    z, wts = nodes
    eta = xi - z
    eta = eta - np.floor(eta)
    slow_t = ~_phase_fast(cfg.geom, eta)
    w = cfg.contrast.weight(np.repeat(xi, z.shape[0], axis=0), eta)
    a = cfg.kern(z)
    gam_x = F.gamma(xi)[0]
    inner = np.where(slow_t, gxv * (F.gamma(eta) - gam_x), f0 - gxv * gam_x)
    return fast, float(np.sum(wts * a * w * inner))


@dataclass
class ResidualReport:
    eps: list
    fast_sup: list
    slow_sup: list
    total_sup: list
    ansatz_deviation: list
    slope: float
    slow_slope: float
    samples_per_phase: int
    nodes_per_axis: int
    monotone: bool

    def to_dict(self):
        return dict(self.__dict__)


def sample_points(F: TestFunctionPair, geom: CellGeometry, eps: float, n_per_phase: int, seed: int = 0,
                  half_width: float | None = None):
    """Scrambled Sobol points in a box around the bump, split by phase."""
    d = F.dim
    if half_width is None:
        half_width = 3.0 * (F.f0.scale if F.f0.scale is not None else 1.0 / 3.0)
    c = np.zeros(d) if F.f0.center is None else np.asarray(F.f0.center, dtype=float)
    m = int(2 ** math.ceil(math.log2(max(4 * n_per_phase, 16))))
    for _ in range(8):
        s = qmc.Sobol(d, scramble=True, seed=seed).random(m)
        x = c + half_width * (2 * s - 1)
        xi = x / eps - np.floor(x / eps)
        fast = _phase_fast(geom, xi)
        if fast.sum() >= n_per_phase and (~fast).sum() >= n_per_phase:
            return x[fast][:n_per_phase], x[~fast][:n_per_phase]
        m *= 2
    raise SampleSizeTooSmall("could not place enough sample points in both phases", n=n_per_phase)


def generator_residual(F: TestFunctionPair, model: EffectiveModel, geom: CellGeometry, kern: Kernel,
                       contrast, eps_list, n_per_phase: int = 1000, nodes_per_axis: int = MIN_NODES_PER_AXIS,
                       seed: int = 0) -> ResidualReport:
    if nodes_per_axis < MIN_NODES_PER_AXIS:
        raise QuadratureUnderResolved("kernel quadrature needs at least 64 nodes per axis",
                                      nodes_per_axis=nodes_per_axis, minimum=MIN_NODES_PER_AXIS)
    cf = CorrectorField(model, kern, F)
    fast_sup, slow_sup, dev = [], [], []
    for eps in eps_list:
        cfg = EpsConfig(geom, kern, contrast, float(eps), 1.0)
        ans = Ansatz(F, cf, geom, float(eps))
        xf, xs = sample_points(F, geom, float(eps), n_per_phase, seed)
        res = {True: 0.0, False: 0.0}
        for x in np.concatenate([xf, xs]):
            xi = x / eps - np.floor(x / eps)
            nodes = kernel_nodes(kern, geom, xi, nodes_per_axis)
            lhs = apply_eps_generator(cfg, ans, x, nodes)
            fast, rhs = limit_generator_targets(F, cf, cfg, x, nodes)
            res[fast] = max(res[fast], abs(lhs - rhs))
        fast_sup.append(res[True])
        slow_sup.append(res[False])
        allx = np.concatenate([xf, xs])
        dev.append(float(np.max(np.abs(ans(allx) - project_pi_eps(F, geom, float(eps), allx)))))
    total = [max(a, b) for a, b in zip(fast_sup, slow_sup)]
    slope = _loglog_slope(eps_list, total)
    slow_slope = _loglog_slope(eps_list, slow_sup)
    mono = all(total[k + 1] < total[k] for k in range(len(total) - 1))
    return ResidualReport(list(map(float, eps_list)), fast_sup, slow_sup, total, dev, slope, slow_slope,
                          n_per_phase, nodes_per_axis, mono)


def _loglog_slope(eps, vals):
    eps = np.asarray(eps, dtype=float)
    vals = np.asarray(vals, dtype=float)
    if eps.size < 2 or np.any(vals <= 0):
        return float("nan")
    return float(np.polyfit(np.log(eps), np.log(vals), 1)[0])


# ------------------------------------------------------------ law distance

@dataclass
class PathSample:
    """Marginals of a path ensemble at snapshot times."""

    times: np.ndarray
    x: np.ndarray       # (paths, snaps, d)
    star: np.ndarray    # (paths, snaps) bool

    @classmethod
    def from_eps(cls, run):
        return cls(np.asarray(run.times), run.x, run.fast.astype(bool))

    @classmethod
    def from_limit(cls, run):
        return cls(np.asarray(run.times), run.x, run.phase_star())

    def at(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not among the snapshots")
        return self.x[:, k, :], self.star[:, k]


FUNCTIONALS = {
    "mean_x1": lambda x: x[:, 0],
    "second_moment_x1": lambda x: x[:, 0] ** 2,
    "cos_x1": lambda x: np.cos(x[:, 0]),
    "gauss_x": lambda x: np.exp(-np.sum(x * x, axis=1)),
}


def _stats(xa, sa, xb, sb, funcs):
    ks = float(ks_2samp(xa[:, 0], xb[:, 0]).statistic)
    ph = float(abs(sa.mean() - sb.mean()))
    fd = {k: float(abs(f(xa).mean() - f(xb).mean())) for k, f in funcs.items()}
    return ks, ph, fd


def law_distance(a: PathSample, b: PathSample, times, functionals=None, n_boot: int = 200,
                 seed: int = 0, min_samples: int = 100, level: float = 0.95):
    """KS distance of the first coordinate, phase-frequency gap and functional gaps at each time.

    Bootstrap bands resample both ensembles with replacement.
    """
    funcs = FUNCTIONALS if functionals is None else functionals
    if a.x.shape[0] < min_samples or b.x.shape[0] < min_samples:
        raise SampleSizeTooSmall("too few paths for a law comparison",
                                 n_a=int(a.x.shape[0]), n_b=int(b.x.shape[0]), minimum=min_samples)
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0xB007], dtype=np.uint64)))
    q = [(1 - level) / 2, 1 - (1 - level) / 2]
    rows = []
    for t in times:
        xa, sa = a.at(t)
        xb, sb = b.at(t)
        res = ks_2samp(xa[:, 0], xb[:, 0])
        ks, ph, fd = _stats(xa, sa, xb, sb, funcs)
        boot_ks, boot_ph = np.empty(n_boot), np.empty(n_boot)
        for r in range(n_boot):
            ia = rng.integers(0, xa.shape[0], xa.shape[0])
            ib = rng.integers(0, xb.shape[0], xb.shape[0])
            boot_ks[r] = ks_2samp(xa[ia, 0], xb[ib, 0]).statistic
            boot_ph[r] = abs(sa[ia].mean() - sb[ib].mean())
        rows.append({
            "t": float(t), "ks": ks, "ks_pvalue": float(res.pvalue), "phase_gap": ph,
            "phase_a": float(sa.mean()), "phase_b": float(sb.mean()), "functionals": fd,
            "ks_band": [float(v) for v in np.quantile(boot_ks, q)], "ks_boot_std": float(boot_ks.std(ddof=1)),
            "phase_band": [float(v) for v in np.quantile(boot_ph, q)],
            "n_a": int(xa.shape[0]), "n_b": int(xb.shape[0]),
        })
    return rows
