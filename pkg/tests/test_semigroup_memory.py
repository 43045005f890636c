import numpy as np
import pytest
from scipy import linalg as sla

from hcjump.semigroup_memory import (assemble_A_G, coupled_block, duhamel_g, evolve_coupled,
                                     evolve_memory, feynman_kac_estimate, memory_kernel, propagator_U)
from hcjump.spectrum import phi_minus_k

THETA = np.array([[1 / 12]])


@pytest.fixture(scope="module")
def G1(box1d):
    return assemble_A_G(box1d["rates"])


def test_A_equals_K_minus_Phi(G1, box1d):
    assert np.max(np.abs(G1.A + phi_minus_k(box1d["rates"]))) <= 1e-12


def test_box1d_constants_and_eigenvalues(G1):
    one = np.ones(G1.c.size)
    assert np.max(np.abs(G1.A @ one + 0.5)) <= 1e-10
    assert np.max(np.abs(G1.B.sum(axis=1))) <= 1e-10
    vals = np.sort(np.linalg.eigvalsh(G1.A))
    assert vals[-1] == pytest.approx(-0.5, abs=1e-6)
    assert np.all(np.abs(vals[:-1] + 1.0) <= 1e-6)
    r1, r2 = G1.gap()
    assert r1 == pytest.approx(0.5, abs=1e-6) and r2 == pytest.approx(1.0, abs=1e-6)


def test_propagator_structure(G1):
    assert np.allclose(propagator_U(G1, 0.0), np.eye(G1.c.size))
    one = np.ones(G1.c.size)
    for t in (0.1, 1.0, 10.0):
        U = propagator_U(G1, t)
        assert U.min() >= -1e-14
        assert np.all(U @ one <= 1 + 1e-12)
        assert np.max(np.abs(U @ one / np.exp(-t / 2) - 1)) <= 1e-6


def test_semigroup_identity(G1):
    for s in (0.1, 0.7):
        for t in (0.1, 0.7):
            lhs = propagator_U(G1, s) @ propagator_U(G1, t)
            assert np.max(np.abs(lhs - propagator_U(G1, s + t))) <= 1e-8


def test_memory_kernel_box1d(G1, box1d):
    r = box1d["rates"]
    t = np.linspace(0, 10, 1001)
    tab = memory_kernel(G1, r, t)
    assert tab.lambda0 == pytest.approx(0.5, abs=1e-3)
    assert np.max(np.abs(tab.K / (0.25 * np.exp(-t / 2)) - 1)) <= 1e-3
    assert tab.K[0] == pytest.approx(float(np.sum(r.b * r.c) * r.grid.h), rel=1e-12)
    slope, _ = tab.decay_fit()
    assert slope == pytest.approx(-0.5, abs=1e-6)


def test_duhamel_homogeneous_and_stationary(G1, box1d):
    r = box1d["rates"]
    pi1 = np.linspace(0, 1, G1.c.size)
    t = np.linspace(0, 2, 201)
    g = duhamel_g(G1, r, pi1, t, np.zeros_like(t))
    assert np.allclose(g, propagator_U(G1, 2.0) @ pi1, atol=1e-12)
    t = np.linspace(0, 20, 4001)
    g = duhamel_g(G1, r, None, t, np.ones_like(t))
    stat = np.linalg.solve(phi_minus_k(r), r.c)
    assert np.max(np.abs(stat - 1.0)) <= 1e-8
    assert np.max(np.abs(g - stat)) <= 1e-3


def test_duhamel_matches_coupled(G1, box1d):
    r = box1d["rates"]
    T, dt = 3.0, 1e-3
    times = np.arange(int(T / dt) + 1) * dt
    f0, gT = evolve_coupled(G1, r, THETA, [1.0], 1.0, None, T, times=times)
    g = duhamel_g(G1, r, None, times, f0)
    assert np.max(np.abs(g - gT)) <= 1e-4


def test_zero_mode_conservation(G1, box1d):
    r = box1d["rates"]
    times = np.linspace(0, 10, 101)
    m = G1.c.size
    M = coupled_block(G1, r, THETA, [0.0])
    s0 = np.zeros(m + 1)
    s0[0] = 1.0
    mass0 = r.measure_y * 1.0
    for t in times:
        s = sla.expm(t * M) @ s0
        assert abs(r.measure_y * s[0] + np.sum(s[1:]) * r.grid.h - mass0) <= 1e-8


def test_slowest_decay_matches_eigensolver(G1, box1d):
    r = box1d["rates"]
    kap = np.array([np.sqrt(12.0)])   # Theta kappa^2 = 1
    M = coupled_block(G1, r, THETA, kap)
    top = np.max(np.linalg.eigvals(M).real)
    f, _ = evolve_coupled(G1, r, THETA, kap, 1.0, None, 40.0, times=np.array([39.0, 40.0]))
    assert np.log(f[1] / f[0]) == pytest.approx(top, abs=1e-8)


def test_T_zero_identity(G1, box1d):
    pi1 = np.full(G1.c.size, 0.3)
    f, g = evolve_coupled(G1, box1d["rates"], THETA, [1.0], 0.7, pi1, 0.0)
    assert f[0] == 0.7 and np.array_equal(g, pi1)


def test_memory_equals_coupled(G1, box1d):
    r = box1d["rates"]
    for k in (0.0, 1.0, 2.0):
        times, fm = evolve_memory(G1, r, THETA, [k], 1.0, None, 5.0, 1e-3)
        fc, _ = evolve_coupled(G1, r, THETA, [k], 1.0, None, 5.0, times=times)
        assert np.max(np.abs(fm - fc) / np.abs(fc)) <= 1e-3


def test_memory_with_initial_slow_mass(G1, box1d):
    r = box1d["rates"]
    pi1 = np.linspace(0.2, 1.0, G1.c.size)
    times, fm = evolve_memory(G1, r, THETA, [1.0], 0.5, pi1, 3.0, 1e-3)
    fc, _ = evolve_coupled(G1, r, THETA, [1.0], 0.5, pi1, 3.0, times=times)
    assert np.max(np.abs(fm - fc) / np.abs(fc)) <= 1e-3


def test_memoryless_reduction(G1, box1d):
    r = box1d["rates"]
    from hcjump.semigroup_memory import MemoryKernelTable
    times = np.arange(2001) * 1e-3
    zero = MemoryKernelTable(times, np.zeros_like(times), r.lambda0)
    _, f = evolve_memory(G1, r, THETA, [2.0], 1.0, None, 2.0, 1e-3, table=zero)
    assert np.max(np.abs(f - np.exp(-(4 / 12 + 0.5) * times))) <= 1e-12


def test_stationary_zero_mode(G1, box1d):
    r = box1d["rates"]
    m = G1.c.size
    stat = np.linalg.solve(phi_minus_k(r), r.c)
    M = coupled_block(G1, r, THETA, [0.0])
    s = np.concatenate([[1.0], stat])
    assert np.max(np.abs(M @ s)) <= 1e-8
    f, _ = evolve_coupled(G1, r, THETA, [0.0], 1.0, stat, 5.0, times=np.linspace(0, 5, 6))
    assert np.max(np.abs(f - 1.0)) <= 1e-8
    assert m == stat.size


def test_feynman_kac_constant(box1d):
    r = box1d["rates"]
    out = feynman_kac_estimate(r, np.ones(r.b.size), 2.0, 100_000, seed=3, starts=[10])
    # c~ is constant on box1d, so every path carries the same weight
    assert abs(out["estimate"][0] - np.exp(-1.0)) <= 3 * out["stderr"][0] + 1e-12


def test_feynman_kac_matches_propagator(G1, box1d):
    r = box1d["rates"]
    pi1 = np.linspace(0.0, 2.0, r.b.size)
    starts = [0, 128, 255]
    out = feynman_kac_estimate(r, pi1, 1.0, 20_000, seed=4, starts=starts)
    exact = (propagator_U(G1, 1.0) @ pi1)[starts]
    assert np.all(np.abs(out["estimate"] - exact) <= 3 * out["stderr"])


def test_feynman_kac_without_killing(box1d):
    r = box1d["rates"]
    from dataclasses import replace
    r0 = replace(r, c=np.zeros_like(r.c))
    out = feynman_kac_estimate(r0, np.ones(r.b.size), 2.0, 2000, seed=1, starts=[0, 100])
    assert np.allclose(out["estimate"], 1.0)
