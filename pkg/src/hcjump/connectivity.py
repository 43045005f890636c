"""Connectivity of the periodic extension of the fast set.

The infinite graph on lattice copies of Y-cells is connected exactly when the
quotient graph on the torus is connected and the winding vectors of its cycles
generate Z^d. Both are tracked by a union-find that stores, for every node,
the lattice shift from its root.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import DisconnectedFastPhase
from .model import CellGrid, Kernel


@numba.njit(cache=True)
def _find(parent, pot, i):
    # with compression; afterwards pot[x] is the shift from the root copy to x
    path = []
    x = i
    while parent[x] != x:
        path.append(x)
        x = parent[x]
    root = x
    for k in range(len(path) - 1, -1, -1):
        y = path[k]
        p = parent[y]
        if p != root:
            pot[y] += pot[p]
        parent[y] = root
    return root


@numba.njit(cache=True)
def _roots(parent, pot):
    out = np.empty(parent.shape[0], dtype=np.int64)
    for i in range(parent.shape[0]):
        out[i] = _find(parent, pot, i)
    return out


@numba.njit(cache=True)
def _union_batch(parent, pot, rank, src, dst, wind, cycles):
    """Process edges src -> dst with winding; return count of cycle vectors written."""
    ncyc = 0
    d = wind.shape[1]
    for e in range(src.shape[0]):
        i, j = src[e], dst[e]
        ri = _find(parent, pot, i)
        rj = _find(parent, pot, j)
        if ri == rj:
            nz = False
            for k in range(d):
                v = pot[i, k] + wind[e, k] - pot[j, k]
                cycles[ncyc, k] = v
                if v != 0:
                    nz = True
            if nz:
                ncyc += 1
        else:
            # lift(j) = lift(i) + wind  =>  pot of rj relative to ri
            if rank[ri] < rank[rj]:
                parent[ri] = rj
                for k in range(d):
                    pot[ri, k] = pot[j, k] - wind[e, k] - pot[i, k]
            else:
                parent[rj] = ri
                for k in range(d):
                    pot[rj, k] = pot[i, k] + wind[e, k] - pot[j, k]
                if rank[ri] == rank[rj]:
                    rank[ri] += 1
    return ncyc


def lattice_basis(vectors, dim):
    """Row-style Hermite normal form of the integer lattice spanned by vectors."""
    rows = [list(map(int, v)) for v in vectors if any(int(x) != 0 for x in v)]
    basis = []
    col = 0
    while rows and col < dim:
        rows = [r for r in rows if any(r)]
        piv = [r for r in rows if r[col] != 0]
        rest = [r for r in rows if r[col] == 0]
        if not piv:
            col += 1
            continue
        while len(piv) > 1:
            piv.sort(key=lambda r: abs(r[col]))
            p = piv[0]
            nxt = [p]
            for r in piv[1:]:
                q = r[col] // p[col]
                r2 = [a - q * b for a, b in zip(r, p)]
                if r2[col] != 0:
                    nxt.append(r2)
                else:
                    rest.append(r2)
            piv = nxt
        p = piv[0]
        if p[col] < 0:
            p = [-x for x in p]
        basis.append(p)
        rows = rest
        col += 1
    return basis


def lattice_index(basis, dim):
    """Index of the lattice in Z^d (0 when rank deficient)."""
    if len(basis) < dim:
        return 0
    return int(abs(round(np.linalg.det(np.array(basis, dtype=float)))))


@dataclass
class ConnectivityReport:
    connected: bool
    components: int
    winding_basis: list
    lattice_index: int
    witness: dict = field(default_factory=dict)

    def to_dict(self):
        return {"connected": self.connected, "components": self.components,
                "winding_basis": self.winding_basis, "lattice_index": self.lattice_index,
                "witness": self.witness}


def _offsets(kern: Kernel, n, dim):
    reach = int(np.floor(kern.support_radius * n + 1e-9))
    ax = np.arange(-reach, reach + 1)
    offs = np.stack(np.meshgrid(*([ax] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    offs = offs[np.any(offs != 0, axis=1)]
    pos = kern(offs / n) > 0
    offs = offs[pos]
    order = np.lexsort((offs[:, ::-1].T.tolist() + [np.sum(offs.astype(float) ** 2, axis=1)]))
    return offs[order]


def check_connectivity(grid: CellGrid, kern: Kernel, raise_on_failure=True) -> ConnectivityReport:
    d, n = grid.dim, grid.n
    yi = grid.y_idx
    ny = yi.size
    local = -np.ones(grid.size, dtype=np.int64)
    local[yi] = np.arange(ny)
    idx = grid.index[yi]
    parent = np.arange(ny, dtype=np.int64)
    pot = np.zeros((ny, d), dtype=np.int64)
    rank = np.zeros(ny, dtype=np.int64)
    basis = []
    found = set()
    offs = _offsets(kern, n, d)
    batch = max(1, 200000 // max(ny, 1))
    for start in range(0, len(offs), batch):
        chunk = offs[start:start + batch]
        tgt = idx[None, :, :] + chunk[:, None, :]
        wind = np.floor_divide(tgt, n).reshape(-1, d)
        tflat = np.zeros(tgt.shape[:2], dtype=np.int64)
        for ax in range(d):
            tflat = tflat * n + (tgt[..., ax] % n)
        dst = local[tflat.reshape(-1)]
        src = np.tile(np.arange(ny), len(chunk))
        ok = dst >= 0
        src, dst, wind = src[ok], dst[ok], np.ascontiguousarray(wind[ok])
        cycles = np.zeros((src.size, d), dtype=np.int64)
        m = _union_batch(parent, pot, rank, src, dst, wind, cycles)
        if m:
            new = {tuple(int(v) for v in c) for c in np.unique(cycles[:m], axis=0)}
            new -= found
            if new:
                found |= new
                basis = lattice_basis(basis + [list(c) for c in new], d)
        if lattice_index(basis, d) == 1 and len(np.unique(_roots(parent, pot))) == 1:
            break
    roots = _roots(parent, pot)
    components = len(np.unique(roots))
    index = lattice_index(basis, d)
    witness = {}
    if components > 1:
        a = 0
        b = int(np.flatnonzero(roots != roots[0])[0])
        witness["unreachable_pair"] = [grid.centers[yi[a]].tolist(), grid.centers[yi[b]].tolist()]
    if index != 1:
        witness["missing_winding"] = _missing_direction(basis, d)
    rep = ConnectivityReport(connected=(components == 1 and index == 1), components=int(components),
                             winding_basis=[list(map(int, b)) for b in basis], lattice_index=index,
                             witness=witness)
    if raise_on_failure and not rep.connected:
        raise DisconnectedFastPhase("periodic extension of the fast set is not connected",
                                    **rep.to_dict())
    return rep


def _missing_direction(basis, d):
    for k in range(d):
        e = [0] * d
        e[k] = 1
        if len(basis) < d:
            M = np.array(basis + [e], dtype=float).reshape(-1, d)
            if np.linalg.matrix_rank(M) > len(basis):
                return e
        elif lattice_index(lattice_basis(basis + [e], d), d) != lattice_index(basis, d):
            return e
    return None
