import numpy as np
import pytest

from conftest import box1d_parts, box2d_parts
from hcjump.errors import NearSpectrumSolve
from hcjump.model import CellGeometry, CellGrid, Contrast, Kernel, rate_fields
from hcjump.spectrum import (SpectralH, h_dense, negative_lambda_value, phi_minus_k, sigma1_eigen,
                             sigma2_scan, spectral_radius_check)


@pytest.fixture(scope="module")
def rough():
    geom = CellGeometry.boxes([((0.2,), (0.7,))])
    kern = Kernel("triangle", 0.6, 1.5)
    tab = (1.2 + 0.5 * np.sin(2 * np.pi * np.arange(64) / 64),)
    return rate_fields(geom, kern, Contrast("separable", 1.0, tab), CellGrid(geom, 128))


def test_sigma1_box1d(box1d):
    s1 = sigma1_eigen(box1d["rates"])
    m = s1.values.size
    assert s1.groups[0][0] == pytest.approx(0.5, abs=1e-6) and s1.groups[0][1] == 1
    assert s1.groups[1][0] == pytest.approx(1.0, abs=1e-6) and s1.groups[1][1] == m - 1
    assert np.all(np.isreal(s1.values))


def test_sigma1_interval(box1d):
    r = box1d["rates"]
    rep = sigma2_scan(r, samples=20)
    gb = rep.gamma_bounds
    lo = gb["gamma1"] - rep.rho * gb["gamma2"]
    vals = sigma1_eigen(r).values
    assert np.all(vals >= lo - 1e-9) and np.all(vals <= gb["gamma2"] + 1e-9)
    assert np.all(vals > 0)


def test_h_closed_form(box1d):
    r = box1d["rates"]
    s1 = sigma1_eigen(r)
    hs = SpectralH(r, s1)
    for lam in (0.25, 0.75):
        exact = 1 + 0.5 / (0.5 - lam)
        assert h_dense(r, lam, s1) == pytest.approx(exact, abs=1e-3)
        assert float(hs(lam)) == pytest.approx(exact, abs=1e-3)
    assert h_dense(r, 0.25) == pytest.approx(3.0, abs=1e-3)
    assert h_dense(r, 0.75) == pytest.approx(-1.0, abs=1e-3)


def test_guard_band(box1d):
    r = box1d["rates"]
    with pytest.raises(NearSpectrumSolve):
        h_dense(r, 0.5 + 1e-5, sigma1_eigen(r))


def test_sigma2_endpoints_box1d(box1d):
    rep = sigma2_scan(box1d["rates"])
    assert rep.lambda1 == pytest.approx(0.5, abs=1e-3)
    assert rep.lambda2 == pytest.approx(1.0, abs=1e-3)
    for rec in rep.sigma2_samples:
        if rec["flag"] is None and rec["lambda"] < 0.5 - 1e-3:
            assert rec["h"] >= 0


def test_h_tends_to_one(box1d):
    r = box1d["rates"]
    assert h_dense(r, 1e4 * float(r.Phi.max())) == pytest.approx(1.0, abs=1e-3)


def test_perron_box1d(box1d):
    pr = spectral_radius_check(box1d["rates"])
    assert pr["rho"] == pytest.approx(0.5, abs=1e-6)
    assert np.ptp(pr["g0"]) <= 1e-10


def test_negative_lambda_excluded(box1d):
    assert negative_lambda_value(box1d["rates"], 0.3) < 0


def test_perron_box2d_positive():
    geom, kern, w, grid = box2d_parts(n=32)
    pr = spectral_radius_check(rate_fields(geom, kern, w, grid))
    assert pr["beta1"] > 0 and pr["rho"] < 1


def test_rayleigh_and_strict_inequality(rough):
    pr = spectral_radius_check(rough)
    K = rough.k_matrix()
    g0 = pr["g0"]
    assert g0 @ K @ g0 == pytest.approx(pr["rho"] * np.sum(rough.Phi * g0 * g0), rel=1e-8)
    rng = np.random.default_rng(5)
    for _ in range(20):
        g = rng.uniform(0.1, 2.0, rough.Phi.size)
        assert g @ K @ g < np.sum(rough.Phi * g * g)


def test_phi_range_filled_by_spectrum():
    # on a grid the range of Phi is covered by eigenvalues of Phi - K up to O(1/n)
    geom = CellGeometry.boxes([((0.2,), (0.7,))])
    kern = Kernel("triangle", 0.6, 1.5)
    tab = (1.2 + 0.5 * np.sin(2 * np.pi * np.arange(64) / 64),)
    gaps = []
    for n in (128, 256, 512):
        r = rate_fields(geom, kern, Contrast("separable", 1.0, tab), CellGrid(geom, n))
        s1 = sigma1_eigen(r)
        lams = np.linspace(r.Phi.min(), r.Phi.max(), 400)
        gaps.append(max(s1.nearest(l) for l in lams))
        rep = sigma2_scan(r, lambdas=lams[::20])
        assert 0 < rep.lambda1 < r.Phi.min()
    assert gaps[1] < 0.6 * gaps[0] and gaps[2] < 0.6 * gaps[1]


def test_spectrum_is_dense_symmetric(rough):
    M = phi_minus_k(rough)
    assert np.max(np.abs(M - M.T)) <= 1e-12
