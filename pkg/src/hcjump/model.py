"""Cell geometry, jump kernels, contrast weights and grid rate fields.

Everything lives on the unit torus [0,1)^d discretised by n cells per axis.
Grid functions are flat arrays in C order over the n^d cell centres.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .errors import (
    AsymmetricContrast,
    AsymmetricKernel,
    EmptyPhase,
    UnboundedContrast,
    ValidationError,
)

FAMILIES = ("box", "triangle", "truncated-gaussian")


# ---------------------------------------------------------------- geometry

@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def volume(self):
        return float(np.prod(np.asarray(self.hi) - np.asarray(self.lo)))

    def _inside(self, pts, closed):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        if closed:
            return np.all((pts >= lo) & (pts <= hi), axis=-1)
        return np.all((pts > lo) & (pts < hi), axis=-1)


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def volume(self):
        d = len(self.center)
        return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * self.radius ** d

    def _inside(self, pts, closed):
        r2 = np.sum((pts - np.asarray(self.center)) ** 2, axis=-1)
        return r2 <= self.radius ** 2 if closed else r2 < self.radius ** 2


class CellGeometry:
    """Slow set G as a union of boxes and balls in the unit cell; Y is the rest."""

    def __init__(self, dim, g_regions):
        self.dim = int(dim)
        if self.dim < 1:
            raise ValidationError("dimension must be at least 1", dim=dim)
        self.g_regions = tuple(g_regions)
        for reg in self.g_regions:
            pts = reg.lo if isinstance(reg, Box) else reg.center
            if len(pts) != self.dim:
                raise ValidationError("region dimension does not match geometry", region=repr(reg))
        self._measure_g = self._compute_measure_g()

    @classmethod
    def boxes(cls, lo_hi_pairs):
        regs = [Box(tuple(map(float, lo)), tuple(map(float, hi))) for lo, hi in lo_hi_pairs]
        return cls(len(regs[0].lo) if regs else 1, regs)

    def _images(self):
        return [np.array(k, dtype=float) for k in itertools.product((-1.0, 0.0, 1.0), repeat=self.dim)]

    def _member(self, pts, closed):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        pts = pts - np.floor(pts)
        out = np.zeros(pts.shape[0], dtype=bool)
        for reg in self.g_regions:
            for k in self._images():
                out |= reg._inside(pts + k, closed)
        return out

    def in_g(self, pts):
        """Open membership in G (used to classify grid cells by their centres)."""
        return self._member(pts, closed=False)

    def in_gbar(self, pts):
        """Closed membership; points outside the closure of G belong to Y."""
        return self._member(pts, closed=True)

    def _compute_measure_g(self):
        if not self.g_regions:
            return 0.0
        if len(self.g_regions) == 1:
            reg = self.g_regions[0]
            if isinstance(reg, Box):
                lo, hi = np.clip(reg.lo, 0, 1), np.clip(reg.hi, 0, 1)
                return float(np.prod(np.maximum(hi - lo, 0.0)))
            if reg.radius <= 0.5:
                return reg.volume()
        m = {1: 1 << 16, 2: 1024, 3: 128}.get(self.dim, 32)
        ax = (np.arange(m) + 0.5) / m
        pts = np.stack(np.meshgrid(*([ax] * self.dim), indexing="ij"), axis=-1).reshape(-1, self.dim)
        return float(self.in_g(pts).mean())

    @property
    def measure_g(self):
        return self._measure_g

    @property
    def measure_y(self):
        return 1.0 - self._measure_g


# ----------------------------------------------------------------- kernels

@dataclass(frozen=True)
class Kernel:
    """Tensor-product kernel a(z) = amplitude * prod_i k(z_i - center).

    The box profile takes the value 1/2 on the edge of its support. With that
    convention the lattice fold of a box of integer radius is exactly constant
    at every lag, including lags that hit the edge.
    """

    family: str
    radius: float
    amplitude: float = 1.0
    dim: int = 1
    width: float | None = None
    center: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown kernel family {self.family!r}", family=self.family)
        if not (self.radius > 0) or not math.isfinite(self.radius):
            raise ValidationError("kernel radius must be positive and finite", radius=self.radius)
        if self.family == "truncated-gaussian" and not (self.width and self.width > 0):
            raise ValidationError("truncated-gaussian kernel needs a positive width")

    @property
    def sigma(self):
        return float(self.width) if self.width else 1.0

    def profile(self, t):
        t = np.abs(np.asarray(t, dtype=float) - self.center)
        r = self.radius
        if self.family == "box":
            return np.where(t < r, 1.0, np.where(t == r, 0.5, 0.0))
        if self.family == "triangle":
            return np.maximum(0.0, 1.0 - t / r)
        g = np.exp(-0.5 * (t / self.sigma) ** 2)
        return np.where(t < r, g, np.where(t == r, 0.5 * g, 0.0))

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self.dim == 1 and (z.ndim == 0 or z.shape[-1] != 1):
            return self.amplitude * self.profile(z)
        return self.amplitude * np.prod(self.profile(z), axis=-1)

    def profile_mass(self, s=None):
        """Integral of the 1D profile over [-s, s] (the whole line if s is None)."""
        r = self.radius
        s = r if s is None else min(max(float(s), 0.0), r)
        if self.family == "box":
            return 2.0 * s
        if self.family == "triangle":
            return r - (r - s) ** 2 / r
        sg = self.sigma
        return sg * math.sqrt(2 * math.pi) * math.erf(s / (sg * math.sqrt(2)))

    @property
    def l1_norm(self):
        return self.amplitude * self.profile_mass() ** self.dim

    def tail_mass(self, s):
        """Mass of a outside the cube |z|_inf <= s."""
        return max(0.0, self.l1_norm - self.amplitude * self.profile_mass(s) ** self.dim)

    @property
    def support_radius(self):
        return self.radius + abs(self.center)

    def third_moment(self):
        """Third absolute moment with the Euclidean norm."""
        r, amp = self.radius, self.amplitude
        if self.dim == 1 and self.center == 0.0:
            if self.family == "box":
                return amp * r ** 4 / 2
            if self.family == "triangle":
                return amp * r ** 4 / 10
            sg = self.sigma
            s = r * r / (2 * sg * sg)
            return 4 * amp * sg ** 4 * (1 - math.exp(-s) * (1 + s))
        x, w = np.polynomial.legendre.leggauss(40)
        c = self.center
        nodes = np.concatenate([c - r + r * (x + 1) / 2, c + r * (x + 1) / 2])
        wts = np.concatenate([w, w]) * r / 2
        grids = np.meshgrid(*([nodes] * self.dim), indexing="ij")
        wgrid = np.prod(np.meshgrid(*([wts] * self.dim), indexing="ij"), axis=0)
        z = np.stack(grids, axis=-1)
        val = np.linalg.norm(z, axis=-1) ** 3 * self(z)
        return float(np.sum(val * wgrid))

    def lower_bound(self):
        """(r0, c) with a >= c on |z|_inf <= r0."""
        r0 = self.radius / 2
        if self.center != 0.0:
            return r0, 0.0
        return r0, float(self.amplitude * self.profile(r0) ** self.dim)

    def fold_radius(self, tol):
        if tol <= 0:
            raise ValidationError("fold tolerance must be positive", tol=tol)
        R = 1
        while self.tail_mass(R - 0.5 - abs(self.center)) >= tol:
            R += 1
        return R


# ---------------------------------------------------------------- contrast

def periodic_interp(table, pts):
    """Multilinear interpolation of a periodic vertex-grid table at pts (N, k)."""
    table = np.asarray(table, dtype=float)
    pts = np.atleast_2d(pts)
    k = table.ndim
    shape = np.array(table.shape)
    pos = (pts - np.floor(pts)) * shape
    i0 = np.floor(pos).astype(np.int64)
    fr = pos - i0
    out = np.zeros(pts.shape[0])
    for corner in itertools.product((0, 1), repeat=k):
        wt = np.ones(pts.shape[0])
        idx = []
        for ax, c in enumerate(corner):
            wt = wt * (fr[:, ax] if c else 1.0 - fr[:, ax])
            idx.append((i0[:, ax] + c) % shape[ax])
        out += wt * table[tuple(idx)]
    return out


@dataclass(frozen=True)
class Contrast:
    """Rate weight w(xi, eta) = value * u(xi) u(eta) * W(xi, eta).

    kind 'constant' uses u = W = 1, 'separable' a vertex table for u and
    'grid' a vertex table for W with 2d axes.
    """

    kind: str = "constant"
    value: float = 1.0
    table: np.ndarray | None = field(default=None, compare=False)

    def u(self, pts):
        pts = np.atleast_2d(pts)
        if self.kind == "separable":
            return periodic_interp(self.table, pts)
        return np.ones(pts.shape[0])

    def weight(self, xi, eta):
        xi, eta = np.atleast_2d(xi), np.atleast_2d(eta)
        w = self.value * self.u(xi) * self.u(eta)
        if self.kind == "grid":
            w = w * periodic_interp(self.table, np.concatenate([xi, eta], axis=1))
        return w

    def bounds(self):
        if self.kind == "constant":
            return float(self.value), float(self.value)
        t = np.asarray(self.table, dtype=float)
        if self.kind == "separable":
            lo, hi = t.min(), t.max()
            cands = [lo * lo, hi * hi, lo * hi]
            return float(self.value * min(cands)), float(self.value * max(cands))
        return float(self.value * t.min()), float(self.value * t.max())

    def is_symmetric(self, tol=1e-12):
        if self.kind != "grid":
            return True
        t = np.asarray(self.table)
        k = t.ndim // 2
        tt = np.transpose(t, list(range(k, 2 * k)) + list(range(k)))
        return bool(np.max(np.abs(t - tt)) <= tol * max(1.0, np.max(np.abs(t))))


# -------------------------------------------------------------------- grid

class CellGrid:
    """Cell-centre grid on the torus with each cell classified as G or Y."""

    def __init__(self, geom: CellGeometry, n: int):
        self.geom = geom
        self.dim = geom.dim
        self.n = int(n)
        self.shape = (self.n,) * self.dim
        self.size = self.n ** self.dim
        self.h = float(self.n) ** (-self.dim)
        ax = (np.arange(self.n) + 0.5) / self.n
        self.axis = ax
        self.centers = np.stack(np.meshgrid(*([ax] * self.dim), indexing="ij"), axis=-1).reshape(-1, self.dim)
        self.index = np.stack(np.meshgrid(*([np.arange(self.n)] * self.dim), indexing="ij"),
                              axis=-1).reshape(-1, self.dim)
        self.is_g = geom.in_g(self.centers)
        self.g_idx = np.flatnonzero(self.is_g)
        self.y_idx = np.flatnonzero(~self.is_g)
        if self.g_idx.size == 0:
            raise EmptyPhase("slow set G contains no grid cell", n=self.n)
        if self.y_idx.size == 0:
            raise EmptyPhase("fast set Y contains no grid cell", n=self.n)
        self.measure_g = self.g_idx.size * self.h
        self.measure_y = self.y_idx.size * self.h

    def lag_index(self, rows, cols):
        """Flat lag index of xi_rows - xi_cols for every pair."""
        diff = (self.index[rows][:, None, :] - self.index[cols][None, :, :]) % self.n
        flat = np.zeros(diff.shape[:2], dtype=np.int64)
        for ax in range(self.dim):
            flat = flat * self.n + diff[..., ax]
        return flat

    def signed_lags(self):
        m = np.arange(self.n)
        return np.where(m <= self.n // 2, m, m - self.n) / self.n

    def full(self, values, idx, fill=0.0):
        out = np.full(self.size, fill, dtype=np.result_type(values, float))
        out[idx] = values
        return out


# ----------------------------------------------------------------- folding

@dataclass
class FoldedKernel:
    """Lag tables of the folded kernel and its first two moments.

    a0[m]       = sum_k a(s_m + k)
    a1[j][m]    = sum_k a(s_m + k) (s_m + k)_j
    a2[i,j][m]  = sum_k a(s_m + k) (s_m + k)_i (s_m + k)_j
    with s_m the signed lag and k over the integer cube of radius R.
    """

    a0: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    radius: int
    n: int
    dim: int


def _fold_1d(kern, n, R):
    m = np.arange(n)
    s = np.where(m <= n // 2, m, m - n) / n
    f = np.zeros((3, n))
    for k in range(-R, R + 1):
        z = s + k
        p = kern.profile(z)
        f[0] += p
        f[1] += p * z
        f[2] += p * z * z
    return f


def fold_kernel(kern: Kernel, grid: CellGrid, tol: float = 1e-12) -> FoldedKernel:
    R = kern.fold_radius(tol)
    n, d = grid.n, grid.dim
    f = _fold_1d(kern, n, R)
    amp = kern.amplitude

    def outer(orders):
        out = np.array(amp)
        for o in orders:
            out = np.multiply.outer(out, f[o])
        return out.reshape(-1)

    a0 = outer([0] * d)
    a1 = np.zeros((d, grid.size))
    a2 = np.zeros((d, d, grid.size))
    for i in range(d):
        o = [0] * d
        o[i] = 1
        a1[i] = outer(o)
        for j in range(d):
            o = [0] * d
            o[i] += 1
            o[j] += 1
            a2[i, j] = outer(o)
    return FoldedKernel(a0=a0, a1=a1, a2=a2, radius=R, n=n, dim=d)


def reverse_lags(table, grid):
    """Table of t(-m) given t(m)."""
    t = np.asarray(table).reshape(grid.shape)
    for ax in range(grid.dim):
        t = np.roll(np.flip(t, axis=ax), 1, axis=ax)
    return t.reshape(-1)


class Convolver:
    """Circular convolution (t * f)(xi) = sum_eta t(xi - eta) f(eta) via FFT."""

    def __init__(self, table, grid: CellGrid, workers=None):
        self.grid = grid
        self.workers = workers
        self.table = np.asarray(table, dtype=float).reshape(-1)
        self._hat = sfft.rfftn(np.asarray(table, dtype=float).reshape(grid.shape), workers=workers)

    def table_at(self, lag_idx):
        return self.table[lag_idx]

    def __call__(self, f):
        f = np.asarray(f, dtype=float)
        shp = self.grid.shape
        if f.ndim == 1:
            out = sfft.irfftn(self._hat * sfft.rfftn(f.reshape(shp), workers=self.workers),
                              s=shp, workers=self.workers)
            return out.reshape(-1)
        return np.stack([self(row) for row in f])


# ------------------------------------------------------------- rate fields

@dataclass
class EffectiveRates:
    """Limit rates on the grid.

    b, c, Phi live on G-cells (ordered as grid.g_idx); p on Y-cells.
    """

    grid: CellGrid
    fold: FoldedKernel
    contrast: Contrast
    b: np.ndarray
    c: np.ndarray
    Phi: np.ndarray
    p: np.ndarray
    u: np.ndarray
    conv: Convolver

    @property
    def measure_y(self):
        return self.grid.measure_y

    @property
    def measure_g(self):
        return self.grid.measure_g

    @property
    def lambda0(self):
        return float(np.sum(self.b) * self.grid.h)

    def pair_weights(self, rows, cols):
        g = self.grid
        w = self.contrast.value * np.multiply.outer(self.u[rows], self.u[cols])
        if self.contrast.kind == "grid":
            xi, eta = g.centers[rows], g.centers[cols]
            P = np.concatenate([np.repeat(xi, len(cols), axis=0), np.tile(eta, (len(rows), 1))], axis=1)
            w = w * periodic_interp(self.contrast.table, P).reshape(len(rows), len(cols))
        return w

    def cross_apply(self, f, src_idx, dst_idx):
        """sum over src cells of a~(xi - eta) w(xi, eta) f(eta) h, evaluated at dst cells."""
        g = self.grid
        if self.contrast.kind == "grid":
            A = self.fold.a0[g.lag_index(dst_idx, src_idx)] * self.pair_weights(dst_idx, src_idx)
            return A @ f * g.h
        full = g.full(self.u[src_idx] * f, src_idx)
        return self.contrast.value * self.u[dst_idx] * self.conv(full)[dst_idx] * g.h

    def k_matrix(self):
        """Dense K on G-cells: K_ij = a~(xi_i - xi_j) w(xi_i, xi_j) h."""
        g = self.grid
        gi = g.g_idx
        A = self.fold.a0[g.lag_index(gi, gi)]
        return A * self.pair_weights(gi, gi) * g.h

    def k_apply(self, f):
        """K f without forming K."""
        return self.cross_apply(f, self.grid.g_idx, self.grid.g_idx)


GRID_CONTRAST_MAX_CELLS = 4096


def rate_fields(geom: CellGeometry, kern: Kernel, w: Contrast, grid: CellGrid,
                fold: FoldedKernel | None = None, tol: float = 1e-12) -> EffectiveRates:
    fold = fold if fold is not None else fold_kernel(kern, grid, tol)
    g = grid
    conv = Convolver(fold.a0, g)
    u = w.u(g.centers)
    one_y = (~g.is_g).astype(float)
    gi, yi = g.g_idx, g.y_idx
    s = w.value
    if w.kind == "grid":
        if g.size > GRID_CONTRAST_MAX_CELLS:
            raise ValidationError("grid contrast is limited to small cell grids",
                                  cells=g.size, limit=GRID_CONTRAST_MAX_CELLS)
        allc = np.arange(g.size)
        W_gy = fold.a0[g.lag_index(gi, yi)] * _pair_w(w, g, gi, yi)
        W_yg = fold.a0[g.lag_index(yi, gi)] * _pair_w(w, g, yi, gi)
        c = W_gy.sum(axis=1) * g.h
        b = W_yg.sum(axis=0) * g.h / g.measure_y
        Phi = (fold.a0[g.lag_index(gi, allc)] * _pair_w(w, g, gi, allc)).sum(axis=1) * g.h
    else:
        rconv = Convolver(reverse_lags(fold.a0, g), g)
        c = s * u[gi] * conv(u * one_y)[gi] * g.h
        # b~ uses a~(eta - xi) w(eta, xi): the reversed table, kept separate from c~
        b = s * u[gi] * rconv(u * one_y)[gi] * g.h / g.measure_y
        Phi = s * u[gi] * conv(u)[gi] * g.h
    p = conv(one_y)[yi] * g.h
    return EffectiveRates(grid=g, fold=fold, contrast=w, b=b, c=c, Phi=Phi, p=p, u=u, conv=conv)


def _pair_w(w, g, rows, cols):
    xi, eta = g.centers[rows], g.centers[cols]
    P_xi = np.repeat(xi, len(cols), axis=0)
    P_eta = np.tile(eta, (len(rows), 1))
    return w.weight(P_xi, P_eta).reshape(len(rows), len(cols))


# -------------------------------------------------------------- validation

@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)

    def add(self, name, passed, **values):
        self.checks.append({"check": name, "passed": bool(passed), **values})

    @property
    def passed(self):
        return all(c["passed"] for c in self.checks)

    def to_dict(self):
        return {"passed": self.passed, "checks": self.checks}


def validate_inputs(geom: CellGeometry, kern: Kernel, w: Contrast, n_probe: int = 2001) -> ValidationReport:
    rep = ValidationReport()
    mg, my = geom.measure_g, geom.measure_y
    rep.add("G nonempty", mg > 0, measure_g=mg)
    rep.add("Y nonempty", my > 0, measure_y=my)
    if mg <= 0:
        raise EmptyPhase("slow set G has zero measure", measure_g=mg)
    if my <= 0:
        raise EmptyPhase("fast set Y has zero measure", measure_y=my)
    if kern.dim != geom.dim:
        raise ValidationError("kernel and geometry dimensions differ", kernel=kern.dim, geometry=geom.dim)

    span = kern.support_radius * 1.1
    t = np.linspace(-span, span, n_probe)
    rng = np.random.default_rng(0)
    z = rng.uniform(-span, span, size=(4000, kern.dim))
    z = np.concatenate([z, np.repeat(t[:, None], kern.dim, axis=1)])
    az, amz = kern(z), kern(-z)
    asym = float(np.max(np.abs(az - amz)))
    rep.add("kernel nonnegative", kern.amplitude > 0 and np.all(az >= 0), min_value=float(az.min()))
    rep.add("kernel even", asym <= 1e-12, max_asymmetry=asym)
    if asym > 1e-12:
        raise AsymmetricKernel("a(-z) differs from a(z)", max_asymmetry=asym)
    if kern.amplitude <= 0:
        raise ValidationError("kernel amplitude must be positive", amplitude=kern.amplitude)
    l1 = kern.l1_norm
    m3 = kern.third_moment()
    rep.add("kernel bounded", math.isfinite(kern.amplitude), sup=float(az.max()))
    rep.add("kernel integrable", math.isfinite(l1), l1_norm=l1)
    rep.add("finite third moment", math.isfinite(m3), third_moment=m3)
    r0, c0 = kern.lower_bound()
    rep.add("positive near origin", c0 > 0, r0=r0, c=c0)

    a1, a2 = w.bounds()
    ok = math.isfinite(a1) and math.isfinite(a2) and a1 > 0
    rep.add("contrast bounds", ok, alpha1=a1, alpha2=a2)
    if not ok:
        raise UnboundedContrast("contrast weight must satisfy 0 < alpha1 <= w <= alpha2 < inf",
                                alpha1=a1, alpha2=a2)
    sym = w.is_symmetric()
    rep.add("contrast symmetric", sym)
    if not sym:
        raise AsymmetricContrast("w(xi, eta) must equal w(eta, xi)")
    return rep
