"""Limit two-component process (X(t), k(t)) on R^d x (G-cells + star).

From star, k leaves at rate lambda(0) and lands on a G-cell with density
b~/lambda(0); X diffuses with covariance 2 Theta per unit time meanwhile.
From a G-cell, k jumps within G with rates a~ w h and returns to star at rate
c~, while X is frozen. Within-G jumps are drawn by thinning a lag proposal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .model import EffectiveRates
from .streams import run_paths

STAR = -1


@dataclass
class GChain:
    """Arrays the jump samplers need, flattened for numba."""

    n: int
    dim: int
    is_g: np.ndarray            # (N,) bool over all cells
    local: np.ndarray           # grid index -> G-local index or -1
    g_idx: np.ndarray
    lag_cdf: np.ndarray         # cumulative a~ over lags, normalised
    rate: float                 # dominating rate w_max * sum a~ h
    u: np.ndarray               # (N,) separable factor
    value: float
    wmax: float
    W: np.ndarray               # dense (N, N) for grid contrast, else (1, 1)
    use_W: bool
    b_cdf: np.ndarray           # landing CDF on G-local cells
    lambda0: float
    c: np.ndarray               # c~ on G-local cells


def build_gchain(rates: EffectiveRates) -> GChain:
    g = rates.grid
    a0 = rates.fold.a0
    total = float(np.sum(a0))
    cdf = np.cumsum(a0) / total
    cdf[-1] = 1.0
    u = rates.u.astype(float)
    w = rates.contrast
    use_W = w.kind == "grid"
    if use_W:
        allc = np.arange(g.size)
        W = rates.pair_weights(allc, allc) / (w.value * np.multiply.outer(u, u))
    else:
        W = np.ones((1, 1))
    wmax = float(w.value * np.max(u) ** 2 * np.max(W))
    local = -np.ones(g.size, dtype=np.int64)
    local[g.g_idx] = np.arange(g.g_idx.size)
    bc = np.cumsum(rates.b * g.h)
    lam0 = float(bc[-1])
    bc = bc / lam0
    bc[-1] = 1.0
    return GChain(n=g.n, dim=g.dim, is_g=g.is_g.copy(), local=local, g_idx=g.g_idx.copy(),
                  lag_cdf=cdf, rate=wmax * total * g.h, u=u, value=float(w.value), wmax=wmax,
                  W=np.ascontiguousarray(W), use_W=use_W, b_cdf=bc, lambda0=lam0,
                  c=rates.c.astype(float))


@numba.njit(cache=True, nogil=True)
def _sub_lag(i, m, n, d):
    # cell whose offset from cell i is minus the flat lag m, axis by axis
    out = 0
    stride = 1
    for ax in range(d):
        ii = (i // stride) % n
        mm = (m // stride) % n
        out += ((ii - mm) % n) * stride
        stride *= n
    return out


@numba.njit(cache=True, nogil=True)
def _propose(rng, i, lag_cdf, n, d, u, value, wmax, W, use_W):
    """Proposed target cell and whether the thinning test accepts it."""
    m = np.searchsorted(lag_cdf, rng.random(), side="right")
    if m >= lag_cdf.shape[0]:
        m = lag_cdf.shape[0] - 1
    # table index m holds a~(xi_i - xi_j), so the target sits at lag -m
    j = _sub_lag(i, m, n, d)
    w = value * u[i] * u[j]
    if use_W:
        w *= W[i, j]
    return j, rng.random() * wmax < w


@numba.njit(cache=True, nogil=True)
def _limit_path(rng, x0, k0, T, snaps, chol, lag_cdf, n, d, is_g, u, value, wmax, W, use_W,
                rate, b_cdf, g_idx, lam0, xs_out, ks_out):
    """Simulate one path; returns (star time, first star holding, star intervals, star total, events)."""
    x = x0.copy()
    k = k0
    t = 0.0
    s = 0
    nsnap = snaps.shape[0]
    star_time = 0.0
    first_hold = -1.0
    n_int = 0
    int_total = 0.0
    events = 0
    z = np.empty(d)
    while True:
        if k == -1:
            tau = rng.exponential(1.0 / lam0) if lam0 > 0 else np.inf
            if first_hold < 0:
                first_hold = tau
            end = t + tau
            stop = min(end, T)
            cur = t
            while s < nsnap and snaps[s] <= stop:
                dt = snaps[s] - cur
                for a in range(d):
                    z[a] = rng.standard_normal()
                for a in range(d):
                    acc = 0.0
                    for b in range(d):
                        acc += chol[a, b] * z[b]
                    x[a] += np.sqrt(dt) * acc
                cur = snaps[s]
                for a in range(d):
                    xs_out[s, a] = x[a]
                ks_out[s] = -1
                s += 1
            star_time += stop - t
            if end > T:
                break
            dt = end - cur
            for a in range(d):
                z[a] = rng.standard_normal()
            for a in range(d):
                acc = 0.0
                for b in range(d):
                    acc += chol[a, b] * z[b]
                x[a] += np.sqrt(dt) * acc
            n_int += 1
            int_total += tau
            t = end
            q = np.searchsorted(b_cdf, rng.random(), side="right")
            if q >= b_cdf.shape[0]:
                q = b_cdf.shape[0] - 1
            k = g_idx[q]
            events += 1
        else:
            tau = rng.exponential(1.0 / rate)
            end = t + tau
            stop = min(end, T)
            while s < nsnap and snaps[s] <= stop:
                for a in range(d):
                    xs_out[s, a] = x[a]
                ks_out[s] = k
                s += 1
            if end > T:
                break
            t = end
            j, ok = _propose(rng, k, lag_cdf, n, d, u, value, wmax, W, use_W)
            if ok:
                events += 1
                if is_g[j]:
                    k = j
                else:
                    k = -1
    while s < nsnap:
        for a in range(d):
            xs_out[s, a] = x[a]
        ks_out[s] = k
        s += 1
    return star_time, first_hold, n_int, int_total, events


@dataclass
class LimitRun:
    times: np.ndarray
    x: np.ndarray          # (paths, snaps, d)
    k: np.ndarray          # (paths, snaps) grid index of G-cell or -1 for star
    star_time: np.ndarray
    first_hold: np.ndarray
    intervals: np.ndarray
    interval_total: np.ndarray
    events: np.ndarray
    centers: np.ndarray    # grid cell centres for decoding k

    def phase_star(self):
        return self.k == STAR

    def xi(self):
        out = np.full(self.k.shape + (self.centers.shape[1],), np.nan)
        m = self.k >= 0
        out[m] = self.centers[self.k[m]]
        return out


def k_chain_rates(rates: EffectiveRates):
    """Exit structure of the phase chain on the grid."""
    g = rates.grid
    K = rates.k_matrix()
    lam0 = rates.lambda0
    within = K.sum(axis=1) - np.diag(K)
    return {
        "lambda0": lam0,
        "landing_density": rates.b / lam0,
        "to_star": rates.c.copy(),
        "within_G": within,
        "K": K,
        "detailed_balance_residual": float(np.max(np.abs(g.measure_y * rates.b * g.h - rates.c * g.h))),
    }


def covariance_root(cov):
    """Symmetric square root of a positive semidefinite covariance."""
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def simulate_limit(rates: EffectiveRates, theta, n_paths: int, horizon: float, seed: int,
                   times=None, x0=None, k0: int = STAR, threads: int | None = None,
                   chain: GChain | None = None) -> LimitRun:
    g = rates.grid
    d = g.dim
    chain = chain or build_gchain(rates)
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    chol = covariance_root(2.0 * theta)
    snaps = np.array([horizon] if times is None else sorted(times), dtype=float)
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float).reshape(d)
    ns = snaps.size

    def work(stream, a, b):
        m = b - a
        xs = np.zeros((m, ns, d))
        ks = np.zeros((m, ns), dtype=np.int64)
        stats = np.zeros((m, 5))
        for p in range(m):
            rng = stream.at(a + p)
            stats[p] = _limit_path(rng, x0, k0, float(horizon), snaps, chol, chain.lag_cdf, chain.n, d,
                                   chain.is_g, chain.u, chain.value, chain.wmax, chain.W, chain.use_W,
                                   chain.rate, chain.b_cdf, chain.g_idx, chain.lambda0, xs[p], ks[p])
        return xs, ks, stats

    parts = run_paths(n_paths, seed, work, threads)
    xs = np.concatenate([p[0] for p in parts])
    ks = np.concatenate([p[1] for p in parts])
    st = np.concatenate([p[2] for p in parts])
    return LimitRun(snaps, xs, ks, st[:, 0], st[:, 1], st[:, 2].astype(np.int64), st[:, 3],
                    st[:, 4].astype(np.int64), g.centers)


def simulate_limit_path(rates, theta, x0, horizon, seed, index=0, times=None):
    """Single path keyed by (seed, index)."""
    full = simulate_limit(rates, theta, index + 1, horizon, seed, times=times, x0=x0, threads=1)
    sl = slice(index, index + 1)
    return LimitRun(full.times, full.x[sl], full.k[sl], full.star_time[sl], full.first_hold[sl],
                    full.intervals[sl], full.interval_total[sl], full.events[sl], full.centers)


def apply_limit_generator(rates: EffectiveRates, theta, f0, hess_f0, g, x, k):
    """(L F)(x, k) for F = (f0, g).

    f0(x) and hess_f0(x) are callables; g(x) returns the slice g(x, .) on G-cells.
    k is STAR or a G-local index.
    """
    gr = rates.grid
    f = float(f0(x))
    gs = np.asarray(g(x), dtype=float)
    if k == STAR:
        H = np.atleast_2d(hess_f0(x))
        return float(np.sum(np.atleast_2d(theta) * H)) + float(np.sum(rates.b * (gs - f)) * gr.h)
    return _k_row_apply(rates, gs, k) + float(rates.c[k]) * (f - gs[k])


def _k_row_apply(rates, gs, k):
    g = rates.grid
    gi = g.g_idx
    lag = g.lag_index(gi[k:k + 1], gi)[0]
    row = rates.fold.a0[lag] * rates.pair_weights(gi[k:k + 1], gi)[0] * g.h
    return float(np.sum(row * (gs - gs[k])))
