import numpy as np
import pytest

from hcjump.cell_solver import build_effective_model
from hcjump.model import CellGeometry, CellGrid, Contrast, Kernel, rate_fields

BOX1D_TOML = """\
[geometry]
dim = 1
g_boxes = [[0.5], [1.0]]

[kernel]
family = "box"
radius = 1.0
amplitude = 0.5

[contrast]
kind = "constant"
value = 1.0

[grid]
n = 512

[simulation]
epsilon = 0.05
horizon = 1.0
seed = 11
paths = 400
"""


def box1d_parts(n=512, radius=1.0):
    geom = CellGeometry.boxes([((0.5,), (1.0,))])
    kern = Kernel("box", radius, 0.5)
    return geom, kern, Contrast("constant", 1.0, None), CellGrid(geom, n)


def box2d_parts(n=128):
    geom = CellGeometry.boxes([((0.25, 0.25), (0.75, 0.75))])
    kern = Kernel("box", 1.0, 0.25, dim=2)
    return geom, kern, Contrast("constant", 1.0, None), CellGrid(geom, n)


@pytest.fixture(scope="session")
def box1d():
    geom, kern, w, grid = box1d_parts()
    rates = rate_fields(geom, kern, w, grid)
    return {"geom": geom, "kern": kern, "w": w, "grid": grid, "rates": rates}


@pytest.fixture(scope="session")
def box1d_model(box1d):
    return build_effective_model(box1d["rates"])


@pytest.fixture(scope="session")
def box2d():
    geom, kern, w, grid = box2d_parts()
    rates = rate_fields(geom, kern, w, grid)
    return {"geom": geom, "kern": kern, "w": w, "grid": grid, "rates": rates}


@pytest.fixture(scope="session")
def box2d_model(box2d):
    return build_effective_model(box2d["rates"])


@pytest.fixture
def box1d_toml(tmp_path):
    p = tmp_path / "box1d.toml"
    p.write_text(BOX1D_TOML)
    return p


def lattice_sum(kern, xi, reach=3):
    """Independent folded-kernel oracle: direct sum over integer shifts."""
    xi = np.atleast_2d(xi)
    d = xi.shape[1]
    grids = np.meshgrid(*([np.arange(-reach, reach + 1)] * d), indexing="ij")
    shifts = np.stack([g.ravel() for g in grids], axis=1)
    return np.array([kern(p + shifts).sum() for p in xi])


# acceptance summary: one line per criterion at the end of the run

def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def criterion(request):
    """report(k, passed, detail) records and prints an acceptance line."""
    def report(k, passed, detail):
        line = f"CRITERION {k:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config._acceptance[k] = line
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
