"""Cell problems on the fast set and the effective diffusion matrix.

The fast-set operator is (A u)(xi) = sum_{eta in Y} a~(xi - eta)(u(eta) - u(xi)) h.
It annihilates constants, so every cell problem is solved on the mean-zero
subspace after checking that the right-hand side has zero mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.sparse.linalg import LinearOperator, cg

from .errors import CompatibilityViolated, SingularSystem, ThetaMismatch
from .model import CellGrid, Convolver, EffectiveRates

DENSE_LIMIT = 4096


@dataclass
class CellOperator:
    grid: CellGrid
    alpha: np.ndarray
    conv: Convolver
    matrix: np.ndarray | None = None

    @property
    def size(self):
        return self.grid.y_idx.size

    def smooth(self, u):
        """T u = sum_{eta in Y} a~(xi - eta) u(eta) h on Y."""
        g = self.grid
        return self.conv(g.full(u, g.y_idx))[g.y_idx] * g.h

    def apply(self, u):
        u = np.asarray(u, dtype=float)
        if self.matrix is not None:
            return self.matrix @ u
        return self.smooth(u) - self.alpha * u

    def dense(self):
        if self.matrix is not None:
            return self.matrix
        g = self.grid
        yi = g.y_idx
        T = self.conv.table_at(g.lag_index(yi, yi)) * g.h
        return T - np.diag(self.alpha)

    def quadratic_form(self, u):
        return float(u @ self.apply(u)) * self.grid.h


def assemble_AY(rates: EffectiveRates, grid: CellGrid | None = None, dense: bool | None = None) -> CellOperator:
    g = grid if grid is not None else rates.grid
    alpha = rates.p.copy()
    op = CellOperator(grid=g, alpha=alpha, conv=rates.conv)
    if dense is None:
        dense = g.y_idx.size <= DENSE_LIMIT
    if dense:
        yi = g.y_idx
        T = rates.fold.a0[g.lag_index(yi, yi)] * g.h
        op.matrix = T - np.diag(alpha)
    return op


@dataclass
class SolveResult:
    u: np.ndarray
    residual: float
    compat: float


def solve_zero_mean(op: CellOperator, rhs, compat_tol: float = 1e-8, check: bool = True) -> SolveResult:
    """Zero-mean solution of A u = rhs on Y."""
    rhs = np.asarray(rhs, dtype=float)
    scale = max(float(np.max(np.abs(rhs))) if rhs.size else 0.0, 1e-300)
    mean = float(np.mean(rhs))
    if check and abs(mean) > compat_tol * scale:
        raise CompatibilityViolated("right-hand side does not have zero mean over Y",
                                    mean=mean, tolerance=compat_tol * scale)
    if not np.any(rhs):
        return SolveResult(np.zeros_like(rhs), 0.0, mean)
    f = rhs - mean
    m = op.size
    if op.matrix is not None:
        M = np.zeros((m + 1, m + 1))
        M[:m, :m] = op.matrix
        M[:m, m] = 1.0
        M[m, :m] = 1.0
        try:
            sol = sla.solve(M, np.append(f, 0.0), assume_a="sym")
        except (sla.LinAlgError, ValueError) as exc:
            raise SingularSystem("cell system is singular; check connectivity of the fast set",
                                 reason=str(exc)) from exc
        u = sol[:m]
    else:
        u = _cg_zero_mean(op, f)
    u = u - u.mean()
    res = float(np.max(np.abs(op.apply(u) - f)))
    if not np.all(np.isfinite(u)) or res > 1e-6 * max(scale, 1.0):
        raise SingularSystem("cell system could not be solved to tolerance; check connectivity",
                             residual=res)
    return SolveResult(u, res, mean)


def _cg_zero_mean(op, f):
    m = op.size
    diag = op.alpha - op.conv.table_at(np.zeros(1, dtype=np.int64))[0] * op.grid.h

    def mv(x):
        x = x - x.mean()
        y = -op.apply(x)
        return y - y.mean()

    A = LinearOperator((m, m), matvec=mv, dtype=float)
    P = LinearOperator((m, m), matvec=lambda x: x / diag, dtype=float)
    u, info = cg(A, -f, rtol=1e-13, atol=0.0, maxiter=20 * m, M=P)
    if info != 0:
        raise SingularSystem("conjugate gradients did not converge on the cell problem", info=int(info))
    return u


def _yconv(rates, table, field):
    """sum_{eta in Y} table(xi - eta) field(eta) h, for xi in Y."""
    g = rates.grid
    c = Convolver(table, g)
    return c(g.full(field, g.y_idx))[g.y_idx] * g.h


def corrector_rhs_phi(rates: EffectiveRates):
    g = rates.grid
    ones = np.ones(g.y_idx.size)
    return np.stack([_yconv(rates, rates.fold.a1[j], ones) for j in range(g.dim)])


@dataclass
class PhiResult:
    phi: np.ndarray          # (d, |Y cells|)
    compat: np.ndarray       # per component integral of the right-hand side
    residual: np.ndarray


def corrector_phi(op: CellOperator, rates: EffectiveRates, grid: CellGrid | None = None) -> PhiResult:
    rhs = corrector_rhs_phi(rates)
    h = rates.grid.h
    out, compat, res = [], [], []
    for j in range(rhs.shape[0]):
        compat.append(float(np.sum(rhs[j]) * h))
        r = solve_zero_mean(op, rhs[j])
        out.append(r.u)
        res.append(r.residual)
    return PhiResult(np.stack(out), np.array(compat), np.array(res))


@dataclass
class ThetaResult:
    theta: np.ndarray        # symmetrised, from the compatibility formula
    theta_raw: np.ndarray    # compatibility formula before symmetrisation
    theta_pd: np.ndarray     # from the quadratic-form identity
    difference: float
    min_eigenvalue: float

    def to_dict(self):
        return {"theta": self.theta.tolist(), "theta_pd": self.theta_pd.tolist(),
                "difference": self.difference, "min_eigenvalue": self.min_eigenvalue}


def _bilinear(rates, table, f, g_):
    """sum_{xi, eta in Y} table(xi - eta) f(xi) g(eta) h^2."""
    return float(np.dot(f, _yconv(rates, table, g_)) * rates.grid.h)


def theta_compatibility(phi, rates):
    """|Y| Theta_ij = sum h^2 [a2_ij(xi-eta)/2 - a1_i(xi-eta) phi_j(eta)]."""
    d = rates.grid.dim
    ones = np.ones(phi.shape[1])
    F = rates.fold
    th = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            th[i, j] = 0.5 * _bilinear(rates, F.a2[i, j], ones, ones) - _bilinear(rates, F.a1[i], ones, phi[j])
    return th / rates.measure_y


def theta_quadratic(phi, rates):
    """|Y| Theta = 1/2 sum h^2 a(xi-eta) [dphi + (xi-eta)] (x) [dphi + (xi-eta)].

    dphi = phi(xi) - phi(eta). Positive semidefinite by construction.
    """
    d = rates.grid.dim
    ones = np.ones(phi.shape[1])
    F = rates.fold
    B = lambda t, f, g_: _bilinear(rates, t, f, g_)
    th = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            pp = (B(F.a0, phi[i] * phi[j], ones) - B(F.a0, phi[i], phi[j])
                  - B(F.a0, phi[j], phi[i]) + B(F.a0, ones, phi[i] * phi[j]))
            pz = B(F.a1[j], phi[i], ones) - B(F.a1[j], ones, phi[i])
            zp = B(F.a1[i], phi[j], ones) - B(F.a1[i], ones, phi[j])
            th[i, j] = 0.5 * (pp + pz + zp + B(F.a2[i, j], ones, ones))
    return th / rates.measure_y


def effective_matrix_theta(phi, rates: EffectiveRates, tol: float = 1e-3, check: bool = True) -> ThetaResult:
    phi = phi.phi if isinstance(phi, PhiResult) else np.asarray(phi)
    raw = theta_compatibility(phi, rates)
    pd = theta_quadratic(phi, rates)
    th = 0.5 * (raw + raw.T)
    diff = float(np.max(np.abs(th - pd)))
    mine = float(np.linalg.eigvalsh(th).min())
    res = ThetaResult(th, raw, pd, diff, mine)
    if check:
        asym = float(np.max(np.abs(raw - raw.T)))
        if diff > tol or asym > tol:
            raise ThetaMismatch("the two effective-matrix formulas disagree",
                                difference=diff, asymmetry=asym, **res.to_dict())
        if mine <= tol * 1e-3:
            raise ThetaMismatch("effective matrix is not positive definite",
                                **res.to_dict())
    return res


@dataclass
class KappaResult:
    kappa: np.ndarray        # (d, d, |Y cells|)
    compat: np.ndarray       # (d, d)
    residual: np.ndarray     # (d, d)


def corrector_rhs_kappa(phi, theta_raw, rates):
    d = rates.grid.dim
    ones = np.ones(phi.shape[1])
    F = rates.fold
    rhs = np.zeros((d, d, phi.shape[1]))
    for i in range(d):
        for j in range(d):
            rhs[i, j] = theta_raw[i, j] - (0.5 * _yconv(rates, F.a2[i, j], ones)
                                           - _yconv(rates, F.a1[i], phi[j]))
    return rhs


def corrector_kappa(op: CellOperator, phi, theta, rates: EffectiveRates) -> KappaResult:
    phi = phi.phi if isinstance(phi, PhiResult) else np.asarray(phi)
    th = theta.theta_raw if isinstance(theta, ThetaResult) else np.asarray(theta)
    rhs = corrector_rhs_kappa(phi, th, rates)
    d = th.shape[0]
    kap = np.zeros_like(rhs)
    compat = np.zeros((d, d))
    res = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            compat[i, j] = float(np.sum(rhs[i, j]) * rates.grid.h)
            r = solve_zero_mean(op, rhs[i, j])
            kap[i, j] = r.u
            res[i, j] = r.residual
    return KappaResult(kap, compat, res)


def psi_field(rates: EffectiveRates, f0_value: float, g_slice):
    """Fast-point coupling defect: local exchange minus its Y-average.

    Psi(eta) = sum_{xi in G} a~(eta - xi) w(eta, xi)(g(xi) - f0) h - sum_G b~ (g - f0) h.
    """
    g = rates.grid
    diff = np.asarray(g_slice, dtype=float) - f0_value
    local = rates.cross_apply(diff, g.g_idx, g.y_idx)
    return local - float(np.sum(rates.b * diff) * g.h)


@dataclass
class KResult:
    K: np.ndarray
    psi: np.ndarray
    compat: float
    residual: float


def corrector_K(op: CellOperator, rates: EffectiveRates, f0_value: float, g_slice,
                compat_tol: float = 1e-10) -> KResult:
    """Solve A K = -Psi with zero mean.

    With this sign the fast-point generator applied to the expansion reproduces
    the averaged exchange term, since A K cancels the local defect Psi.
    """
    psi = psi_field(rates, f0_value, g_slice)
    compat = float(np.sum(psi) * rates.grid.h)
    scale = max(float(np.max(np.abs(psi))), 1.0)
    if abs(compat) > compat_tol * scale:
        raise CompatibilityViolated("exchange defect does not integrate to zero over Y", integral=compat)
    if not np.any(np.abs(psi) > 1e-14 * scale):
        return KResult(np.zeros_like(psi), psi, compat, 0.0)
    r = solve_zero_mean(op, -psi, check=False)
    return KResult(r.u, psi, compat, r.residual)


@dataclass
class EffectiveModel:
    rates: EffectiveRates
    op: CellOperator
    phi: PhiResult
    theta: ThetaResult
    kappa: KappaResult | None = None

    @property
    def Theta(self):
        return self.theta.theta

    @property
    def grid(self):
        return self.rates.grid


def build_effective_model(rates: EffectiveRates, tol: float = 1e-3, with_kappa: bool = True) -> EffectiveModel:
    op = assemble_AY(rates)
    phi = corrector_phi(op, rates)
    th = effective_matrix_theta(phi, rates, tol=tol)
    kap = corrector_kappa(op, phi, th, rates) if with_kappa else None
    return EffectiveModel(rates, op, phi, th, kap)
