from collections import deque

import numpy as np
import pytest
import sympy
from sympy.matrices.normalforms import smith_normal_form

from conftest import box1d_parts, box2d_parts
from hcjump.connectivity import check_connectivity, lattice_basis, lattice_index
from hcjump.errors import DisconnectedFastPhase
from hcjump.model import CellGeometry, CellGrid, Kernel


def bfs_oracle(grid, kern):
    """Components and winding-lattice index by plain BFS and a Smith normal form."""
    n, d = grid.n, grid.dim
    ycells = [tuple(v) for v in grid.index[grid.y_idx]]
    yset = set(ycells)
    reach = int(np.floor(kern.support_radius * n))
    offs = [o for o in np.ndindex(*([2 * reach + 1] * d))]
    offs = [tuple(v - reach for v in o) for o in offs]
    offs = [o for o in offs if any(o) and kern(np.array(o, float) / n) > 0]
    pot, comps, cycles = {}, 0, []
    for s in ycells:
        if s in pot:
            continue
        comps += 1
        pot[s] = (0,) * d
        q = deque([s])
        while q:
            u = q.popleft()
            for o in offs:
                t = [u[k] + o[k] for k in range(d)]
                w = tuple(v // n for v in t)
                v = tuple(x % n for x in t)
                if v not in yset:
                    continue
                pv = tuple(pot[u][k] + w[k] for k in range(d))
                if v not in pot:
                    pot[v] = pv
                    q.append(v)
                else:
                    c = tuple(pv[k] - pot[v][k] for k in range(d))
                    if any(c):
                        cycles.append(c)
    if not cycles:
        return comps, 0
    M = sympy.Matrix(sorted(set(cycles)))
    snf = smith_normal_form(M, domain=sympy.ZZ)
    diag = [abs(snf[i, i]) for i in range(min(snf.shape))]
    index = int(np.prod(diag)) if len(diag) == d and all(diag) else 0
    return comps, index


def test_box1d_connected_matches_oracle():
    geom, kern, _, _ = box1d_parts()
    grid = CellGrid(geom, 32)
    rep = check_connectivity(grid, kern)
    assert rep.connected and rep.components == 1 and rep.lattice_index == 1
    assert bfs_oracle(grid, kern) == (1, 1)


def test_box1d_half_support_disconnected():
    geom, _, _, _ = box1d_parts()
    kern = Kernel("box", 0.5, 0.5)
    grid = CellGrid(geom, 32)
    comps, index = bfs_oracle(grid, kern)
    assert comps == 1 and index == 0
    rep = check_connectivity(grid, kern, raise_on_failure=False)
    assert not rep.connected
    assert rep.lattice_index == 0 and rep.winding_basis == []
    with pytest.raises(DisconnectedFastPhase):
        check_connectivity(grid, kern)


def test_box2d_connected_matches_oracle():
    geom, kern, _, _ = box2d_parts()
    grid = CellGrid(geom, 8)
    assert bfs_oracle(grid, kern) == (1, 1)
    rep = check_connectivity(grid, kern)
    assert rep.connected
    assert check_connectivity(CellGrid(geom, 128), kern).connected


def test_isolated_fast_islands_disconnected():
    # G is the cell minus a small centred square, so Y is an island per period
    geom = CellGeometry.boxes([((0.0, 0.0), (1.0, 0.35)), ((0.0, 0.65), (1.0, 1.0)),
                               ((0.0, 0.35), (0.35, 0.65)), ((0.65, 0.35), (1.0, 0.65))])
    kern = Kernel("box", 0.2, 1.0, dim=2)
    grid = CellGrid(geom, 20)
    comps, index = bfs_oracle(grid, kern)
    rep = check_connectivity(grid, kern, raise_on_failure=False)
    assert (rep.components, rep.lattice_index) == (comps, index)
    assert not rep.connected


def test_stripe_connects_only_one_direction():
    # horizontal fast stripe: windings span e1 only
    geom = CellGeometry.boxes([((0.0, 0.5), (1.0, 1.0))])
    kern = Kernel("box", 0.2, 1.0, dim=2)
    grid = CellGrid(geom, 20)
    rep = check_connectivity(grid, kern, raise_on_failure=False)
    assert bfs_oracle(grid, kern) == (1, 0)
    assert rep.lattice_index == 0 and not rep.connected
    assert rep.witness["missing_winding"] == [0, 1]


def test_lattice_basis_index_against_smith_form():
    rng = np.random.default_rng(3)
    for _ in range(20):
        vecs = rng.integers(-4, 5, size=(5, 3)).tolist()
        b = lattice_basis(vecs, 3)
        snf = smith_normal_form(sympy.Matrix(vecs), domain=sympy.ZZ)
        diag = [abs(snf[i, i]) for i in range(3)]
        assert lattice_index(b, 3) == (int(np.prod(diag)) if all(diag) else 0)
