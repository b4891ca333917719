"""Structured fine/coarse grids, DOF maps, boundary data and agglomerates.

Numbering is row-major with y fastest: node ``(ix, iy)`` has id
``ix * (nely + 1) + iy``, element ``(ex, ey)`` has id ``ex * nely + ey`` and
node ``k`` carries DOFs ``2k`` (x) and ``2k + 1`` (y).  Coarse cells and coarse
nodes follow the same convention on the coarse grid.  y points up, the origin
is the lower-left corner.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, ProblemConfig, layer_rows


@dataclass(frozen=True)
class DesignLayout:
    """How fine elements map onto design tiles.

    ``kind`` is ``single`` (one periodic tile), ``layers`` (one tile per
    horizontal band) or ``slices`` (one tile per coarse row).  ``rows`` lists
    the coarse rows of each layer from the top down.
    """

    kind: str
    rows: tuple[int, ...]

    @property
    def n_tiles(self) -> int:
        return len(self.rows)


@dataclass
class Agglomerate:
    coarse_node_id: int
    member_cells: tuple[int, ...]
    fine_dof_list: np.ndarray
    # lower-left fine node of the local grid and its size in nodes
    origin: tuple[int, int]
    shape: tuple[int, int]
    elements: np.ndarray
    class_id: int = -1


@dataclass
class MeshTopology:
    L: float
    B: float
    Mx: int
    My: int
    n: int
    layout: DesignLayout
    dirichlet_dofs: np.ndarray
    f: np.ndarray
    loads: list = field(default_factory=list)

    @property
    def H(self) -> float:
        return self.B / self.Mx

    @property
    def h(self) -> float:
        return self.H / self.n

    @property
    def nelx(self) -> int:
        return self.My * self.n

    @property
    def nely(self) -> int:
        return self.Mx * self.n

    @property
    def n_elements(self) -> int:
        return self.nelx * self.nely

    @property
    def n_nodes(self) -> int:
        return (self.nelx + 1) * (self.nely + 1)

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    def node_id(self, ix, iy):
        return np.asarray(ix) * (self.nely + 1) + np.asarray(iy)

    @property
    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.dirichlet_dofs] = False
        return np.flatnonzero(mask)

    @property
    def edof(self) -> np.ndarray:
        """(n_elements, 8) DOF table, nodes ordered BL, BR, TR, TL."""
        if getattr(self, "_edof", None) is None:
            ex, ey = np.meshgrid(np.arange(self.nelx), np.arange(self.nely), indexing="ij")
            ex, ey = ex.ravel(), ey.ravel()
            bl = self.node_id(ex, ey)
            br = self.node_id(ex + 1, ey)
            tr = self.node_id(ex + 1, ey + 1)
            tl = self.node_id(ex, ey + 1)
            nodes = np.stack([bl, br, tr, tl], axis=1)
            edof = np.empty((self.n_elements, 8), dtype=np.int64)
            edof[:, 0::2] = 2 * nodes
            edof[:, 1::2] = 2 * nodes + 1
            self._edof = edof
        return self._edof

    def element_cell(self) -> np.ndarray:
        """Coarse cell id of every fine element."""
        ex, ey = np.meshgrid(np.arange(self.nelx), np.arange(self.nely), indexing="ij")
        return (ex.ravel() // self.n) * self.Mx + ey.ravel() // self.n

    def cell_tile(self) -> np.ndarray:
        """Design tile index of every coarse cell."""
        cy = np.arange(self.Mx)
        # layers are listed from the top; coarse rows count from the bottom
        tile_of_row = np.empty(self.Mx, dtype=np.int64)
        top = self.Mx
        for t, r in enumerate(self.layout.rows):
            tile_of_row[top - r:top] = t
            top -= r
        return np.tile(tile_of_row[cy], self.My)

    @property
    def tile_map(self) -> np.ndarray:
        """Design-variable index of every fine element.

        Tile ``t`` owns variables ``t*n*n .. (t+1)*n*n - 1``, ordered
        ``(i, j) -> i*n + j`` with i along x and j along y.
        """
        if getattr(self, "_tile_map", None) is None:
            n = self.n
            ex, ey = np.meshgrid(np.arange(self.nelx), np.arange(self.nely), indexing="ij")
            ex, ey = ex.ravel(), ey.ravel()
            tile = self.cell_tile()[self.element_cell()]
            self._tile_map = tile * n * n + (ex % n) * n + (ey % n)
        return self._tile_map

    @property
    def n_design(self) -> int:
        return self.layout.n_tiles * self.n * self.n

    def element_centres(self) -> np.ndarray:
        ex, ey = np.meshgrid(np.arange(self.nelx), np.arange(self.nely), indexing="ij")
        return np.stack([(ex.ravel() + 0.5) * self.h, (ey.ravel() + 0.5) * self.h], axis=1)


def _edge_nodes(mesh: MeshTopology, edge: str) -> np.ndarray:
    if edge == "left":
        return mesh.node_id(0, np.arange(mesh.nely + 1))
    if edge == "right":
        return mesh.node_id(mesh.nelx, np.arange(mesh.nely + 1))
    if edge == "bottom":
        return mesh.node_id(np.arange(mesh.nelx + 1), 0)
    if edge == "top":
        return mesh.node_id(np.arange(mesh.nelx + 1), mesh.nely)
    raise ConfigError(f"loads: unknown edge {edge!r}")


def _load_vector(mesh: MeshTopology, loads) -> np.ndarray:
    f = np.zeros(mesh.n_dofs)
    for i, ld in enumerate(loads):
        if ld.kind == "point":
            x, y = ld.location
            tol = 1e-9 * mesh.h
            if not (-tol <= x <= mesh.L + tol and -tol <= y <= mesh.B + tol):
                raise ConfigError(f"loads[{i}].location: {ld.location} lies outside the domain")
            ix = int(round(x / mesh.h))
            iy = int(round(y / mesh.h))
            f[2 * mesh.node_id(ix, iy) + ld.component] += ld.magnitude
        else:
            nodes = _edge_nodes(mesh, ld.location)
            # consistent lumping of a uniform traction on a linear edge
            w = np.full(len(nodes), mesh.h)
            w[0] = w[-1] = 0.5 * mesh.h
            np.add.at(f, 2 * nodes + ld.component, ld.magnitude * w)
    return f


def build_mesh(config: ProblemConfig) -> MeshTopology:
    """Build the full fine/coarse topology described by ``config``."""
    g = config.geometry
    if g.Mx < 1 or g.My < 1 or g.n < 1:
        raise ConfigError("geometry: zero-measure mesh")
    layout = DesignLayout(config.layout.kind, tuple(layer_rows(config)))
    mesh = MeshTopology(
        L=g.L, B=g.B, Mx=g.Mx, My=g.My, n=g.n, layout=layout,
        dirichlet_dofs=np.zeros(0, dtype=np.int64), f=np.zeros(0), loads=list(config.loads),
    )
    if config.supports == "double-clamped":
        nodes = np.concatenate([_edge_nodes(mesh, "left"), _edge_nodes(mesh, "right")])
    elif config.supports == "cantilever":
        nodes = _edge_nodes(mesh, "left")
    else:
        nodes = np.zeros(0, dtype=np.int64)
    mesh.dirichlet_dofs = np.unique(np.concatenate([2 * nodes, 2 * nodes + 1])).astype(np.int64)
    f = _load_vector(mesh, config.loads)
    f[mesh.dirichlet_dofs] = 0.0
    mesh.f = f
    return mesh


def build_agglomerates(mesh: MeshTopology) -> list[Agglomerate]:
    """One agglomerate per coarse node: the union of the cells touching it."""
    n, Mx, My = mesh.n, mesh.Mx, mesh.My
    aggs = []
    for I in range(My + 1):
        for J in range(Mx + 1):
            cx0, cx1 = max(I - 1, 0), min(I, My - 1)
            cy0, cy1 = max(J - 1, 0), min(J, Mx - 1)
            cells = tuple(cx * Mx + cy for cx in range(cx0, cx1 + 1) for cy in range(cy0, cy1 + 1))
            ix0, iy0 = cx0 * n, cy0 * n
            nx = (cx1 - cx0 + 1) * n + 1
            ny = (cy1 - cy0 + 1) * n + 1
            ix, iy = np.meshgrid(np.arange(ix0, ix0 + nx), np.arange(iy0, iy0 + ny), indexing="ij")
            nodes = mesh.node_id(ix.ravel(), iy.ravel())
            dofs = np.empty(2 * nodes.size, dtype=np.int64)
            dofs[0::2] = 2 * nodes
            dofs[1::2] = 2 * nodes + 1
            ex, ey = np.meshgrid(np.arange(ix0, ix0 + nx - 1), np.arange(iy0, iy0 + ny - 1), indexing="ij")
            elems = ex.ravel() * mesh.nely + ey.ravel()
            aggs.append(Agglomerate(
                coarse_node_id=I * (Mx + 1) + J, member_cells=cells, fine_dof_list=dofs,
                origin=(ix0, iy0), shape=(nx, ny), elements=elems,
            ))
    return aggs


def _structural_key(mesh: MeshTopology, agg: Agglomerate, cell_tile: np.ndarray, dir_mask: np.ndarray):
    Mx = mesh.Mx
    cx = [c // Mx for c in agg.member_cells]
    cy = [c % Mx for c in agg.member_cells]
    ncx = max(cx) - min(cx) + 1
    ncy = max(cy) - min(cy) + 1
    tiles = tuple(int(cell_tile[c]) for c in agg.member_cells)
    return (ncx, ncy, tiles, dir_mask[agg.fine_dof_list].tobytes())


def classify_agglomerates(aggs: list[Agglomerate], mesh: MeshTopology) -> np.ndarray:
    """Assign equivalence classes and return the class id per agglomerate.

    Two agglomerates share a class when their cell footprint, the design tile
    of each member cell and the Dirichlet pattern in local ordering coincide;
    their local stiffness matrices are then identical for any tiled design.
    """
    cell_tile = mesh.cell_tile()
    dir_mask = np.zeros(mesh.n_dofs, dtype=bool)
    dir_mask[mesh.dirichlet_dofs] = True
    keys: dict = {}
    out = np.empty(len(aggs), dtype=np.int64)
    for k, agg in enumerate(aggs):
        key = _structural_key(mesh, agg, cell_tile, dir_mask)
        cid = keys.setdefault(key, len(keys))
        agg.class_id = cid
        out[k] = cid
    return out


def class_representatives(classes: np.ndarray) -> dict[int, int]:
    """First agglomerate index of every class."""
    reps: dict[int, int] = {}
    for k, c in enumerate(classes):
        reps.setdefault(int(c), k)
    return reps
