"""Spectrum of the limit generator.

-L splits into the eigenvalues of Phi - K on G and the set of lambda where
h(lambda) = 1 + (b~, (Phi - K - lambda)^{-1} 1) is nonnegative.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy.optimize import brentq

from .errors import NearSpectrumSolve, PerronFailure
from .model import EffectiveRates


def phi_minus_k(rates: EffectiveRates):
    return np.diag(rates.Phi) - rates.k_matrix()


def group_eigenvalues(vals, tol=1e-8):
    out = []
    for v in np.sort(vals):
        if out and abs(v - out[-1][0]) <= tol * max(1.0, abs(v)):
            out[-1][1] += 1
        else:
            out.append([float(v), 1])
    return [(v, m) for v, m in out]


@dataclass
class Sigma1:
    values: np.ndarray
    vectors: np.ndarray
    groups: list

    def nearest(self, lam):
        return float(np.min(np.abs(self.values - lam)))


def sigma1_eigen(rates: EffectiveRates, group_tol=1e-8) -> Sigma1:
    M = phi_minus_k(rates)
    vals, vecs = sla.eigh(0.5 * (M + M.T))
    return Sigma1(vals, vecs, group_eigenvalues(vals, group_tol))


def guard_band(rates: EffectiveRates):
    return 1e-3 * float(np.max(rates.Phi))


def h_dense(rates: EffectiveRates, lam, sigma1: Sigma1 | None = None, delta=None):
    """h(lambda) by a dense solve; refuses to solve inside the guard band."""
    delta = guard_band(rates) if delta is None else delta
    if sigma1 is not None and sigma1.nearest(lam) < delta:
        raise NearSpectrumSolve("lambda is within the guard band of an eigenvalue of Phi - K",
                                lam=float(lam), distance=sigma1.nearest(lam), delta=delta)
    M = phi_minus_k(rates) - lam * np.eye(rates.Phi.size)
    u = sla.solve(M, np.ones(rates.Phi.size), assume_a="sym")
    return 1.0 + float(np.sum(rates.b * u) * rates.grid.h)


class SpectralH:
    """h(lambda) through the eigen-expansion of Phi - K.

    Residues below rel_tol times their total are removable poles and dropped.
    """

    def __init__(self, rates: EffectiveRates, sigma1: Sigma1, rel_tol=1e-12):
        q = sigma1.vectors
        r = (q.T @ (rates.b * rates.grid.h)) * (q.T @ np.ones(q.shape[0]))
        keep = np.abs(r) > rel_tol * np.sum(np.abs(r))
        self.poles = sigma1.values[keep]
        self.residues = r[keep]

    def __call__(self, lam):
        lam = np.asarray(lam, dtype=float)
        return 1.0 + np.sum(self.residues / (self.poles - lam[..., None]), axis=-1)


@dataclass
class SpectralReport:
    sigma1: list
    sigma2_samples: list
    lambda1: float
    lambda2: float
    rho: float
    phi_range: tuple
    gamma_bounds: dict
    poles: list
    conflicts: list = field(default_factory=list)

    def to_dict(self):
        return {
            "sigma1": [{"value": v, "multiplicity": m} for v, m in self.sigma1],
            "sigma2_samples": self.sigma2_samples,
            "lambda1": self.lambda1, "lambda2": self.lambda2, "rho": self.rho,
            "phi_range": list(self.phi_range), "gamma_bounds": self.gamma_bounds,
            "poles": self.poles, "conflicts": self.conflicts,
        }


def _root(hf, lo, hi):
    return float(brentq(lambda x: float(hf(x)), lo, hi, xtol=1e-14, maxiter=500))


def _bracket_roots(hf, lo, hi, samples=2000):
    """Sign changes of hf on (lo, hi) refined by bisection."""
    xs = np.linspace(lo, hi, samples)[1:-1]
    if xs.size == 0:
        return []
    ys = hf(xs)
    roots = []
    for k in range(xs.size - 1):
        if ys[k] == 0.0:
            roots.append(float(xs[k]))
        elif ys[k] * ys[k + 1] < 0:
            roots.append(_root(hf, xs[k], xs[k + 1]))
    return roots


def sigma2_endpoints(hs: SpectralH, sigma1: Sigma1):
    """lambda1: end of the initial interval where h >= 0; lambda2: start of the final one."""
    poles = np.sort(hs.poles)
    top = float(sigma1.values.max())
    if poles.size == 0:
        return float(sigma1.values.min()), top
    eps = 1e-12 * max(1.0, abs(poles[-1]))
    p1 = float(poles[0])
    r1 = _bracket_roots(hs, 0.0, p1 - eps) if p1 > 0 else []
    lam1 = min(r1) if r1 else p1
    pn = float(poles[-1])
    far = max(2.0 * pn, pn + 1.0)
    while hs(far) < 0:
        far *= 2.0
    rn = _bracket_roots(hs, pn + eps, far)
    lam2 = max(rn) if rn else pn
    return lam1, max(lam2, top)


def spectral_radius_check(rates: EffectiveRates, iters=5000, tol=1e-14):
    """Perron root and vector of Phi^{-1} K by power iteration, confirmed densely."""
    K = rates.k_matrix()
    Phi = rates.Phi
    g = np.ones(Phi.size)
    mu = 0.0
    for _ in range(iters):
        nxt = (K @ g) / Phi
        if np.any(nxt <= 0):
            raise PerronFailure("power iterate lost positivity", min_value=float(nxt.min()))
        mu_new = float(np.max(nxt))
        nxt /= mu_new
        if np.max(np.abs(nxt - g)) < tol:
            g, mu = nxt, mu_new
            break
        g, mu = nxt, mu_new
    s = 1.0 / np.sqrt(Phi)
    S = s[:, None] * K * s[None, :]
    dense = float(sla.eigh(0.5 * (S + S.T), eigvals_only=True)[-1])
    if abs(dense - mu) > 1e-8 * max(1.0, dense):
        mu = dense
        vals, vecs = sla.eigh(0.5 * (S + S.T))
        g = np.abs(vecs[:, -1]) * np.sqrt(Phi)
        g /= g.max()
    if not (mu < 1.0):
        raise PerronFailure("spectral radius of Phi^{-1} K is not below one", rho=mu)
    if np.any(g <= 0):
        raise PerronFailure("Perron vector is not strictly positive", min_value=float(g.min()))
    return {"rho": mu, "g0": g, "beta1": float(g.min()), "beta2": float(g.max()), "rho_dense": dense}


def gamma_bounds(rates: EffectiveRates, l1_norm: float):
    a1, a2 = rates.contrast.bounds()
    fold_l1 = float(np.sum(rates.fold.a0) * rates.grid.h)
    return {"alpha1": a1, "alpha2": a2, "kernel_l1": l1_norm, "folded_l1": fold_l1,
            "gamma1": a1 * l1_norm, "gamma2": a2 * l1_norm,
            "gamma1_folded": a1 * fold_l1, "gamma2_folded": a2 * fold_l1}


def sigma2_scan(rates: EffectiveRates, sigma1: Sigma1 | None = None, lambdas=None,
                lmax: float = 5.0, samples: int = 400, l1_norm: float | None = None) -> SpectralReport:
    sigma1 = sigma1 if sigma1 is not None else sigma1_eigen(rates)
    if lambdas is None:
        lambdas = np.linspace(0.0, lmax, samples)
    delta = guard_band(rates)
    hs = SpectralH(rates, sigma1)
    lam1, lam2 = sigma2_endpoints(hs, sigma1)
    M = phi_minus_k(rates)
    ones = np.ones(M.shape[0])
    recs, conflicts = [], []
    for lam in np.asarray(lambdas, dtype=float):
        near = sigma1.nearest(lam) < delta
        if near:
            recs.append({"lambda": float(lam), "h": None, "sign": None, "flag": "NearSpectrumSolve"})
            continue
        u = sla.solve(M - lam * np.eye(M.shape[0]), ones, assume_a="sym")
        hv = 1.0 + float(np.sum(rates.b * u) * rates.grid.h)
        recs.append({"lambda": float(lam), "h": hv, "sign": int(np.sign(hv)), "flag": None})
    for v, _ in sigma1.groups:
        side = [v - 2 * delta, v + 2 * delta]
        hv = hs(np.array(side))
        if np.all(hv < 0):
            conflicts.append({"lambda": v, "note": "eigenvalue of Phi - K inside a gap of the h >= 0 set"})
    rho = spectral_radius_check(rates)["rho"]
    l1 = l1_norm if l1_norm is not None else float(np.sum(rates.fold.a0) * rates.grid.h)
    return SpectralReport(
        sigma1=sigma1.groups, sigma2_samples=recs, lambda1=lam1, lambda2=lam2, rho=rho,
        phi_range=(float(rates.Phi.min()), float(rates.Phi.max())),
        gamma_bounds=gamma_bounds(rates, l1), poles=[float(p) for p in hs.poles],
        conflicts=conflicts)


def negative_lambda_value(rates: EffectiveRates, nu: float):
    """-nu * h(-nu); negative for every nu > 0 when -nu is outside the spectrum."""
    return -nu * h_dense(rates, -nu)
