"""Density filters, smoothed Heaviside projection and sensitivity chain rule.

Tile fields are flat arrays ordered ``(i, j) -> i*n + j`` (i along x, j along
y), tile after tile, matching :attr:`MeshTopology.tile_map`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import ConfigError


@dataclass(frozen=True)
class ProjectionParams:
    beta: float
    eta: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not (0 <= self.eta <= 1):
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")


def heaviside_project(rho_filtered, params: ProjectionParams):
    b, e = params.beta, params.eta
    den = np.tanh(b * e) + np.tanh(b * (1.0 - e))
    return (np.tanh(b * e) + np.tanh(b * (np.asarray(rho_filtered) - e))) / den


def heaviside_derivative(rho_filtered, params: ProjectionParams):
    b, e = params.beta, params.eta
    den = np.tanh(b * e) + np.tanh(b * (1.0 - e))
    with np.errstate(over="ignore"):
        sech = 1.0 / np.cosh(b * (np.asarray(rho_filtered) - e))  # avoids 1 - tanh^2 cancellation
    return b * sech * sech / den


def nondiscreteness(rho_physical) -> float:
    rho = np.asarray(rho_physical, dtype=float)
    return float(np.sum(4.0 * rho * (1.0 - rho)) / rho.size)


class FilterOperator:
    """Linear density filter ``rho_tilde = apply(rho)`` with its adjoint."""

    kind = "identity"

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def matrix(self) -> np.ndarray:
        """Dense matrix of the filter (small problems and tests)."""
        n = self.size
        return np.column_stack([self.apply(e) for e in np.eye(n)])


class NeighbourhoodFilter(FilterOperator):
    """Cone-weighted density filter on one periodic tile.

    Weights ``max(0, rmin - d)`` between element centres are evaluated on a
    3x3 block of copies of the tile; rows of the centre copy are folded back
    onto the tile and normalised.
    """

    kind = "neighbourhood"

    def __init__(self, n: int, rmin: float):
        if rmin > 1.5 * n:
            raise ConfigError(f"filter radius {rmin} exceeds 1.5 tiles (n={n})")
        self.n, self.rmin = n, rmin
        r = int(np.ceil(rmin)) - 1
        offs = np.arange(-r, r + 1)
        di, dj = np.meshgrid(offs, offs, indexing="ij")
        wts = np.maximum(0.0, rmin - np.hypot(di, dj)).ravel()
        keep = wts > 0
        di, dj, wts = di.ravel()[keep], dj.ravel()[keep], wts[keep]
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        i, j = i.ravel(), j.ravel()
        # (i, j) index the centre copy; a neighbour anywhere in the 3x3 block
        # maps back onto the tile by wrapping mod n
        ib = i[:, None] + di[None, :]
        jb = j[:, None] + dj[None, :]
        inside = (ib >= -n) & (ib < 2 * n) & (jb >= -n) & (jb < 2 * n)
        rows = np.broadcast_to((i * n + j)[:, None], ib.shape)[inside]
        cols = ((ib % n) * n + jb % n)[inside]
        vals = np.broadcast_to(wts[None, :], ib.shape)[inside]
        Hm = sp.csr_matrix((vals, (rows, cols)), shape=(n * n, n * n))
        Hm.sum_duplicates()
        self.W = sp.diags(1.0 / np.asarray(Hm.sum(axis=1)).ravel()) @ Hm
        self.W = self.W.tocsr()
        self.WT = self.W.T.tocsr()
        self.size = n * n

    def apply(self, x):
        return self.W @ x

    def adjoint(self, y):
        return self.WT @ y


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n)

    def find(self, a):
        p = self.parent
        root = a
        while p[root] != root:
            root = p[root]
        while p[a] != root:
            p[a], a = root, p[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _q1_matrices(r: float):
    """Element diffusion (scaled by r^2) plus mass for a unit square, BL, BR, TR, TL."""
    Ke = r**2 * np.array([[4, -1, -2, -1], [-1, 4, -1, -2], [-2, -1, 4, -1], [-1, -2, -1, 4]]) / 6.0
    Me = np.array([[4, 2, 1, 2], [2, 4, 2, 1], [1, 2, 4, 2], [2, 1, 2, 4]]) / 36.0
    return Ke + Me


class PDEFilter(FilterOperator):
    """Screened-Poisson density filter on tile blocks with collapsed DOFs.

    ``blocks`` lists ``(nx, ny)`` element grids; each block is meshed with its
    own bilinear nodes, and every group in ``merge_groups`` (a list of
    ``(block, ix, iy)`` tuples) is collapsed into one DOF.  The
    filter is ``T^T S (S^T A S)^{-1} S^T T`` with ``T`` the element-to-node
    load map and ``S`` the collapse scatter, so it is self-adjoint.
    """

    kind = "pde"

    def __init__(self, blocks, rmin: float, merge_groups):
        self.rmin = rmin
        r = rmin / (2.0 * np.sqrt(3.0))
        KE = _q1_matrices(r)
        node_off, elem_off = [0], [0]
        for nx, ny in blocks:
            node_off.append(node_off[-1] + (nx + 1) * (ny + 1))
            elem_off.append(elem_off[-1] + nx * ny)
        self.blocks = list(blocks)
        self.node_off, self.elem_off = node_off, elem_off
        nnode, nel = node_off[-1], elem_off[-1]
        enodes = []
        for b, (nx, ny) in enumerate(blocks):
            ex, ey = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
            ex, ey = ex.ravel(), ey.ravel()
            nid = lambda ix, iy: node_off[b] + ix * (ny + 1) + iy  # noqa: E731
            enodes.append(np.stack([nid(ex, ey), nid(ex + 1, ey), nid(ex + 1, ey + 1), nid(ex, ey + 1)], 1))
        enodes = np.concatenate(enodes)
        uf = _UnionFind(nnode)
        for group in merge_groups:
            group = [self.node(b, ix, iy) for b, ix, iy in group]
            for a in group[1:]:
                uf.union(group[0], a)
        roots = np.array([uf.find(a) for a in range(nnode)])
        uniq, self.collapse = np.unique(roots, return_inverse=True)
        nu = uniq.size
        S = sp.csr_matrix((np.ones(nnode), (np.arange(nnode), self.collapse)), shape=(nnode, nu))
        rows = np.repeat(enodes, 4, axis=1).ravel()
        cols = np.tile(enodes, (1, 4)).ravel()
        A = sp.csr_matrix((np.tile(KE.ravel(), nel), (rows, cols)), shape=(nnode, nnode))
        T = sp.csr_matrix((np.full(4 * nel, 0.25), (enodes.ravel(), np.repeat(np.arange(nel), 4))),
                          shape=(nnode, nel))
        self.S, self.T = S, T
        self.ST_T = (S.T @ T).tocsr()
        self._lu = spla.splu((S.T @ A @ S).tocsc())
        self.size = nel
        self.n_unique = nu

    def node(self, b, ix, iy):
        ny = self.blocks[b][1]
        return self.node_off[b] + ix * (ny + 1) + iy

    def nodal(self, x):
        """Filtered nodal field on the (uncollapsed) block nodes."""
        return self.S @ self._lu.solve(self.ST_T @ x)

    def apply(self, x):
        return self.ST_T.T @ self._lu.solve(self.ST_T @ x)

    def adjoint(self, y):
        return self.apply(y)


def _periodic_lr(b, nx, ny):
    return [[(b, 0, iy), (b, nx, iy)] for iy in range(ny + 1)]


def build_neighbourhood_filter(n: int, rmin: float) -> NeighbourhoodFilter:
    return NeighbourhoodFilter(n, rmin)


def build_pde_filter(kind: str, n: int, rmin: float, n_tiles: int = 1) -> PDEFilter:
    """PDE filter for a layout.

    ``single``: one tile, fully periodic.  ``layers``: ``n_tiles`` tiles, each
    periodic left-right, every top and bottom edge merged into one set.
    ``slices``: the tiles stacked into one vertical slice, periodic left-right
    only; tile 0 is the top row.
    """
    if kind in ("single", "layers"):
        blocks = [(n, n)] * n_tiles
        groups = []
        for b in range(n_tiles):
            groups += _periodic_lr(b, n, n)
        for ix in range(n + 1):
            groups.append([(b, ix, iy) for b in range(n_tiles) for iy in (0, n)])
        return PDEFilter(blocks, rmin, groups)
    if kind == "slices":
        f = PDEFilter([(n, n * n_tiles)], rmin, _periodic_lr(0, n, n * n_tiles))
        return _SliceFilter(f, n, n_tiles)
    raise ConfigError(f"unknown layout {kind!r} for the PDE filter")


class _SliceFilter(FilterOperator):
    """Reorders a vertical-slice PDE filter into per-tile design ordering."""

    kind = "pde"

    def __init__(self, inner: PDEFilter, n: int, n_tiles: int):
        self.inner = inner
        H = n * n_tiles
        t, i, j = np.meshgrid(np.arange(n_tiles), np.arange(n), np.arange(n), indexing="ij")
        # tile t is coarse row (n_tiles-1-t) counted from the bottom
        gy = (n_tiles - 1 - t) * n + j
        self.perm = (i * H + gy).ravel()  # design index -> slice element index
        self.size = inner.size

    def apply(self, x):
        y = np.empty_like(x, dtype=float)
        z = np.empty(self.size)
        z[self.perm] = x
        y[:] = self.inner.apply(z)[self.perm]
        return y

    def adjoint(self, y):
        return self.apply(y)


def build_filter(layout_kind: str, n: int, n_tiles: int, kind: str, rmin: float) -> FilterOperator:
    if kind == "neighbourhood":
        if layout_kind != "single":
            raise ConfigError("neighbourhood filter supports only the single-tile layout")
        return build_neighbourhood_filter(n, rmin)
    return build_pde_filter(layout_kind, n, rmin, n_tiles)


def backprop_sensitivities(d_dphys_tile: np.ndarray, filt: FilterOperator, rho_filtered: np.ndarray,
                           params: ProjectionParams) -> np.ndarray:
    """Chain rule from physical tile densities back to design variables.

    ``d_dphys_tile`` must already be accumulated over the tiling map.
    """
    return filt.adjoint(heaviside_derivative(rho_filtered, params) * d_dphys_tile)
