import numpy as np
import pytest

from hcjump.convergence import (CellFactor, PathSample, TestFunction, TestFunctionPair, build_ansatz,
                                generator_residual, kernel_nodes, law_distance, project_pi_eps,
                                sample_points)
from hcjump.eps_process import EpsConfig, apply_eps_generator
from hcjump.errors import QuadratureUnderResolved, SampleSizeTooSmall
from hcjump.limit_process import simulate_limit
from hcjump.semigroup_memory import assemble_A_G, evolve_coupled


def test_test_function_derivatives_by_differences():
    f = TestFunction(2, 0.8, center=(0.1, -0.2), scale=0.6, wavevector=(1.0, -2.0), phase=0.3)
    x = np.array([[0.3, 0.1], [-0.4, 0.5]])
    h = 1e-5
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        gd = (f.value(x + e) - f.value(x - e)) / (2 * h)
        assert np.allclose(f.grad(x)[:, k], gd, atol=1e-8)
        hd = (f.grad(x + e) - f.grad(x - e)) / (2 * h)
        assert np.allclose(f.hess(x)[:, :, k], hd, atol=1e-7)
        td = (f.hess(x + e) - f.hess(x - e)) / (2 * h)
        assert np.allclose(f.third(x)[:, :, :, k], td, atol=1e-6)


def test_projection_fast_and_slow(box1d):
    F = TestFunctionPair.default()
    eps = 0.1
    x = np.array([[0.02], [0.07], [0.31], [0.36]])
    v = project_pi_eps(F, box1d["geom"], eps, x)
    assert v[0] == F.f0.value(x[:1])[0] and v[2] == F.f0.value(x[2:3])[0]
    xi = x / eps - np.floor(x / eps)
    assert v[1] == pytest.approx(F.g(x[1:2], xi[1:2])[0])


def test_projection_modes_agree_for_x_free_g(box1d):
    F = TestFunctionPair(TestFunction(1, 1.0, scale=0.5), TestFunction(1, 0.7, scale=None), CellFactor(1, 0.4))
    x = np.linspace(-1, 1, 301)[:, None]
    a = project_pi_eps(F, box1d["geom"], 0.1, x, "sup")
    b = project_pi_eps(F, box1d["geom"], 0.1, x, "cell-average")
    assert np.allclose(a, b, atol=1e-14)


def test_cell_average_midpoint_exact(box1d):
    # sin(k x) / k with tiny k is linear in x up to O(k^2)
    k = 1e-4
    gx = TestFunction(1, 1.0 / k, scale=None, wavevector=(k,), phase=-np.pi / 2)
    F = TestFunctionPair(TestFunction(1, 0.0, scale=None), gx, CellFactor(1, 0))
    eps = 0.1
    x = np.array([[0.06], [0.28]])
    v = project_pi_eps(F, box1d["geom"], eps, x, "cell-average")
    centroid = eps * np.floor(x / eps) + eps * 0.75
    assert np.allclose(v, centroid[:, 0], atol=1e-7)


def test_projection_contraction(box1d):
    F = TestFunctionPair.default()
    x = np.random.default_rng(0).uniform(-3, 3, (5000, 1))
    for mode in ("sup", "cell-average"):
        v = project_pi_eps(F, box1d["geom"], 0.05, x, mode)
        bound = max(np.max(np.abs(F.f0.value(x))), np.max(np.abs(F.g(x, x - np.floor(x)))))
        assert np.max(np.abs(v)) <= bound * (1 + 1e-12) + 1e-12


def test_ansatz_slow_branch_exact(box1d, box1d_model):
    F = TestFunctionPair.default()
    eps = 0.1
    ans = build_ansatz(F, box1d_model, box1d["geom"], box1d["kern"], eps)
    x = np.array([[0.07], [0.18], [-0.33]])
    xi = x / eps - np.floor(x / eps)
    assert np.array_equal(ans(x), F.g(x, xi))


def test_ansatz_first_order_deviation(box1d, box1d_model):
    F = TestFunctionPair.default()
    eps = 0.1
    ans = build_ansatz(F, box1d_model, box1d["geom"], box1d["kern"], eps)
    xf, _ = sample_points(F, box1d["geom"], eps, 2000, seed=1)
    dev = np.max(np.abs(ans(xf) - F.f0.value(xf)))
    phi_sup = np.max(np.abs(box1d_model.phi.phi))
    grad_sup = np.max(np.abs(F.f0.grad(np.linspace(-3, 3, 20001)[:, None])))
    assert dev <= eps * phi_sup * grad_sup + 5 * eps ** 2


def test_residual_box1d(box1d, box1d_model):
    F = TestFunctionPair.default()
    rep = generator_residual(F, box1d_model, box1d["geom"], box1d["kern"], box1d["w"],
                             [0.2, 0.1, 0.05], n_per_phase=150, seed=2)
    assert rep.monotone
    assert 0.7 <= rep.slope <= 1.3
    assert rep.slow_sup[-1] < rep.slow_sup[0] / 2.5


def test_residual_box2d(box2d, box2d_model):
    F = TestFunctionPair.default(2)
    rep = generator_residual(F, box2d_model, box2d["geom"], box2d["kern"], box2d["w"],
                             [0.2, 0.1], n_per_phase=40, seed=3)
    assert rep.monotone


def test_residual_constant(box1d, box1d_model):
    F = TestFunctionPair.constant(2.5)
    rep = generator_residual(F, box1d_model, box1d["geom"], box1d["kern"], box1d["w"],
                             [0.2, 0.05], n_per_phase=50)
    assert max(rep.total_sup) <= 1e-10


def test_residual_needs_nodes(box1d, box1d_model):
    with pytest.raises(QuadratureUnderResolved):
        generator_residual(TestFunctionPair.default(), box1d_model, box1d["geom"], box1d["kern"],
                           box1d["w"], [0.1], nodes_per_axis=32)


def test_slow_generator_exchange_term(box1d, box1d_model):
    # gamma constant: on slow points the generator tends to c~ (f0 - g) = 0.5 (f0 - g)
    F = TestFunctionPair(TestFunction(1, 1.0, scale=0.5), TestFunction(1, 0.5, scale=0.7), CellFactor(1, 0))
    errs = []
    for eps in (0.1, 0.05, 0.025):
        cfg = EpsConfig(box1d["geom"], box1d["kern"], box1d["w"], eps, 1.0)
        ans = build_ansatz(F, box1d_model, box1d["geom"], box1d["kern"], eps)
        _, xs = sample_points(F, box1d["geom"], eps, 60, seed=4)
        e = 0.0
        for x in xs:
            xi = x / eps - np.floor(x / eps)
            lhs = apply_eps_generator(cfg, ans, x, kernel_nodes(box1d["kern"], box1d["geom"], xi))
            rhs = 0.5 * (F.f0.value(x[None])[0] - F.gx.value(x[None])[0])
            e = max(e, abs(lhs - rhs))
        errs.append(e)
    assert errs[1] < 0.7 * errs[0] and errs[2] < 0.7 * errs[1]


def _sample(x, star):
    return PathSample(np.array([1.0]), x[:, None, None], star[:, None])


def test_law_distance_self(box1d):
    rng = np.random.default_rng(5)
    a = _sample(rng.normal(size=500), rng.random(500) < 0.5)
    row = law_distance(a, a, [1.0], n_boot=20)[0]
    assert row["ks"] == 0 and row["phase_gap"] == 0
    assert all(v == 0 for v in row["functionals"].values())


def test_law_distance_needs_samples():
    rng = np.random.default_rng(6)
    a = _sample(rng.normal(size=50), rng.random(50) < 0.5)
    with pytest.raises(SampleSizeTooSmall):
        law_distance(a, a, [1.0])


def test_law_distance_detects_shift():
    rng = np.random.default_rng(7)
    a = _sample(rng.normal(size=4000), rng.random(4000) < 0.5)
    b = _sample(rng.normal(0.3, 1.0, size=4000), rng.random(4000) < 0.5)
    row = law_distance(a, b, [1.0], n_boot=50)[0]
    assert row["ks"] > 0.08 and row["ks_band"][0] > 0.05


def test_limit_paths_follow_coupled_evolution(box1d, box1d_model):
    # E_star[cos(X_t) 1{star at t}] is the f0 component of the coupled mode evolution
    r = box1d["rates"]
    th = box1d_model.Theta
    t = 1.0
    run = simulate_limit(r, th, 200_000, t, seed=9)
    obs = np.cos(run.x[:, 0, 0]) * run.phase_star()[:, 0]
    f, _ = evolve_coupled(assemble_A_G(r), r, th, [1.0], 1.0, None, t)
    se = obs.std(ddof=1) / np.sqrt(obs.size)
    assert abs(obs.mean() - f[0]) <= 3 * se
