"""Slow-phase semigroup, memory kernel and the coupled limit evolution.

The slow-phase operator is A g = sum_G a~ w (g' - g) h - c~ g = B g + C g,
a symmetric matrix over G-cells. Spatial dependence is handled per Fourier
mode, since Theta is constant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy import linalg as sla

from .errors import ConvolutionGridTooCoarse
from .limit_process import GChain, _propose, build_gchain
from .model import EffectiveRates
from .streams import run_paths


@dataclass
class GOperator:
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    K: np.ndarray

    @property
    def C(self):
        return -np.diag(self.c)

    def eigen(self):
        return sla.eigh(0.5 * (self.A + self.A.T))

    def gap(self):
        """(r1, r2): spectrum of A lies in [-r2, -r1]."""
        vals = sla.eigh(0.5 * (self.A + self.A.T), eigvals_only=True)
        return float(-vals.max()), float(-vals.min())


def assemble_A_G(rates: EffectiveRates) -> GOperator:
    K = rates.k_matrix()
    B = K - np.diag(K.sum(axis=1))
    A = B - np.diag(rates.c)
    return GOperator(A=A, B=B, c=rates.c.copy(), K=K)


def propagator_U(G: GOperator, t: float) -> np.ndarray:
    if t < 0:
        raise ValueError("propagator needs t >= 0")
    return sla.expm(t * G.A)


def propagator_eigen(G: GOperator, t: float) -> np.ndarray:
    vals, vecs = G.eigen()
    return (vecs * np.exp(t * vals)) @ vecs.T


def _uniform_step(times):
    times = np.asarray(times, dtype=float)
    if times.size < 2:
        return None
    d = np.diff(times)
    if np.allclose(d, d[0], rtol=1e-10, atol=1e-14) and abs(times[0]) < 1e-15:
        return float(d[0])
    return None


def _propagate_series(G: GOperator, v0, times):
    """U(t_j) v0 for every time, reusing one exponential on uniform grids."""
    times = np.asarray(times, dtype=float)
    out = np.zeros((times.size, v0.size))
    dt = _uniform_step(times)
    if dt is not None:
        E = sla.expm(dt * G.A)
        v = v0.copy()
        for j in range(times.size):
            out[j] = v
            v = E @ v
        return out
    for j, t in enumerate(times):
        out[j] = sla.expm(t * G.A) @ v0
    return out


@dataclass
class MemoryKernelTable:
    times: np.ndarray
    K: np.ndarray
    lambda0: float
    inhom: np.ndarray | None = None   # int b~ U(t) pi1 when pi1 was supplied

    def decay_fit(self):
        """Slope and intercept of log K(t) against t."""
        m = self.K > 0
        if m.sum() < 2:
            return float("nan"), float("nan")
        s, i = np.polyfit(self.times[m], np.log(self.K[m]), 1)
        return float(s), float(i)


def memory_kernel(G: GOperator, rates: EffectiveRates, times, pi1=None) -> MemoryKernelTable:
    h = rates.grid.h
    series = _propagate_series(G, rates.c.astype(float), times)
    K = series @ (rates.b * h)
    inhom = None
    if pi1 is not None:
        inhom = _propagate_series(G, np.asarray(pi1, dtype=float), times) @ (rates.b * h)
    return MemoryKernelTable(np.asarray(times, dtype=float), K, rates.lambda0, inhom)


def duhamel_g(G: GOperator, rates: EffectiveRates, pi1, f0_times, f0_values, t=None):
    """g(t) = U(t) pi1 + int_0^t U(t - s) c~ f0(s) ds, trapezoidal in s on a uniform grid."""
    f0_times = np.asarray(f0_times, dtype=float)
    f0_values = np.asarray(f0_values, dtype=float)
    t = float(f0_times[-1]) if t is None else float(t)
    sel = f0_times <= t + 1e-12
    ts, fs = f0_times[sel], f0_values[sel]
    dt = _uniform_step(ts)
    if dt is None and ts.size > 1:
        raise ValueError("duhamel_g needs a uniform time grid starting at 0")
    pi1 = np.zeros(G.c.size) if pi1 is None else np.asarray(pi1, dtype=float)
    hom = propagator_U(G, t) @ pi1
    if ts.size < 2:
        return hom
    E = sla.expm(dt * G.A)
    wts = np.full(ts.size, dt)
    wts[0] = wts[-1] = dt / 2
    acc = np.zeros(G.c.size)
    for k in range(ts.size):
        acc = E @ acc + wts[k] * fs[k] * G.c if k else wts[k] * fs[k] * G.c
    return hom + acc


def mode_rate(theta, kappa):
    kap = np.atleast_1d(np.asarray(kappa, dtype=float))
    return float(kap @ np.atleast_2d(theta) @ kap)


def coupled_block(G: GOperator, rates: EffectiveRates, theta, kappa):
    m = G.c.size
    M = np.zeros((m + 1, m + 1))
    M[0, 0] = -mode_rate(theta, kappa) - rates.lambda0
    M[0, 1:] = rates.b * rates.grid.h
    M[1:, 0] = G.c
    M[1:, 1:] = G.A
    return M


def evolve_coupled(G: GOperator, rates: EffectiveRates, theta, kappa, f0_hat: float, pi1_hat, T: float,
                   times=None):
    """Evolve one Fourier mode of (f0, g). Returns (f0 at times, g at T)."""
    m = G.c.size
    state = np.zeros(m + 1)
    state[0] = f0_hat
    if pi1_hat is not None:
        state[1:] = pi1_hat
    M = coupled_block(G, rates, theta, kappa)
    if times is None:
        if T == 0:
            return np.array([f0_hat]), state[1:].copy()
        fin = sla.expm(T * M) @ state
        return np.array([fin[0]]), fin[1:]
    times = np.asarray(times, dtype=float)
    dt = _uniform_step(times)
    out = np.zeros(times.size)
    if dt is not None:
        E = sla.expm(dt * M)
        s = state.copy()
        for j in range(times.size):
            out[j] = s[0]
            if j < times.size - 1:
                s = E @ s
        return out, s[1:]
    for j, t in enumerate(times):
        s = sla.expm(t * M) @ state
        out[j] = s[0]
    return out, s[1:]


def evolve_memory(G: GOperator, rates: EffectiveRates, theta, kappa, f0_hat: float, pi1_hat,
                  T: float, dt: float = 1e-3, table: MemoryKernelTable | None = None, check: bool = True):
    """One Fourier mode of f0 from the closed equation with memory.

    d f/dt = -mu f + int_0^t K(t - s) f(s) ds + I(t), mu = kappa Theta kappa + lambda(0),
    I(t) = int b~ U(t) pi1. The local part is integrated exactly (exponential
    integrator with linear interpolation of the source), the memory term with
    the trapezoidal rule; the endpoint term makes each step a scalar implicit
    solve. Returns (times, f0).
    """
    n = int(round(T / dt))
    times = np.arange(n + 1) * dt
    mu = mode_rate(theta, kappa) + rates.lambda0
    if check:
        r1, r2 = G.gap()
        if dt * max(r2, mu) > 0.5:
            raise ConvolutionGridTooCoarse("time step too large for the kernel decay",
                                           dt=dt, r2=r2, mu=mu)
    if table is None or table.times.size < n + 1 or _uniform_step(table.times[:n + 1]) is None \
            or abs(table.times[1] - dt) > 1e-12:
        table = memory_kernel(G, rates, times, pi1=pi1_hat)
    Kt = table.K[:n + 1]
    I = table.inhom[:n + 1] if (pi1_hat is not None and table.inhom is not None) else np.zeros(n + 1)
    f = np.zeros(n + 1)
    f[0] = f0_hat
    e = np.exp(-mu * dt)
    phi1 = (1 - e) / mu if mu > 0 else dt
    psi = (1 / mu - phi1 / (mu * dt)) if mu > 0 else dt / 2
    S_prev = I[0]
    for k in range(n):
        j = k + 1
        # trapezoid over s in [0, t_j] without the f[j] endpoint
        conv = dt * (0.5 * Kt[j] * f[0] + np.dot(Kt[j - 1:0:-1], f[1:j])) if j > 1 else dt * 0.5 * Kt[1] * f[0]
        S_known = conv + I[j]
        coef = psi * dt * 0.5 * Kt[0]
        f[j] = (e * f[k] + phi1 * S_prev + psi * (S_known - S_prev)) / (1 - coef)
        S_prev = S_known + dt * 0.5 * Kt[0] * f[j]
    return times, f


@numba.njit(cache=True, nogil=True)
def _fk_path(rng, i0, t_end, lag_cdf, n, d, u, value, wmax, W, use_W, rate, is_g, local, c, pi1):
    i = i0
    t = 0.0
    integral = 0.0
    done = False
    while not done:
        tau = rng.exponential(1.0 / rate)
        ci = c[local[i]]
        if t + tau >= t_end:
            integral = integral + ci * (t_end - t)
            done = True
        else:
            integral = integral + ci * tau
            t += tau
            j, ok = _propose(rng, i, lag_cdf, n, d, u, value, wmax, W, use_W)
            if ok and is_g[j]:
                i = j
    return pi1[local[i]] * np.exp(-integral)


def feynman_kac_estimate(rates: EffectiveRates, pi1, t: float, n_paths: int, seed: int,
                         starts=None, threads: int | None = None, chain: GChain | None = None):
    """E_xi[pi1(xi(t)) exp(-int_0^t c~(xi(s)) ds)] over the within-G jump chain.

    starts are G-local indices; the path index for start s and sample p is
    s * n_paths + p, so every estimate has its own streams.
    """
    chain = chain or build_gchain(rates)
    g = rates.grid
    starts = np.arange(g.g_idx.size) if starts is None else np.atleast_1d(starts)
    pi1 = np.asarray(pi1, dtype=float)
    c = chain.c
    est, se = np.zeros(starts.size), np.zeros(starts.size)
    for q, s in enumerate(starts):
        i0 = int(g.g_idx[s])

        def work(stream, a, b, i0=i0, base=q * n_paths):
            out = np.empty(b - a)
            for p in range(b - a):
                rng = stream.at(base + a + p)
                out[p] = _fk_path(rng, i0, float(t), chain.lag_cdf, chain.n, chain.dim, chain.u,
                                  chain.value, chain.wmax, chain.W, chain.use_W, chain.rate,
                                  chain.is_g, chain.local, c, pi1)
            return out

        vals = np.concatenate(run_paths(n_paths, seed, work, threads, chunk=4096))
        est[q] = vals.mean()
        se[q] = vals.std(ddof=1) / np.sqrt(n_paths) if n_paths > 1 else np.inf
    return {"starts": starts, "estimate": est, "stderr": se}
