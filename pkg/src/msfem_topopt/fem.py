"""Bilinear quadrilateral elasticity: element matrix, SIMP, assembly, sensitivities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Agglomerate, MeshTopology


class MaterialError(ValueError):
    pass


def element_stiffness_template(nu: float = 0.3, plane: str = "stress") -> np.ndarray:
    """8x8 stiffness of a unit square, unit-modulus bilinear element.

    Nodes are ordered BL, BR, TR, TL with DOFs (x, y) per node.  Plane strain
    is obtained through the usual effective-modulus substitution.
    """
    if not (0 <= nu < 0.5):
        raise MaterialError(f"Poisson ratio must lie in [0, 0.5), got {nu}")
    scale = 1.0
    if plane == "strain":
        scale = 1.0 / (1.0 - nu**2)
        nu = nu / (1.0 - nu)
    elif plane != "stress":
        raise MaterialError(f"unknown plane assumption {plane!r}")
    k = np.array([
        1 / 2 - nu / 6, 1 / 8 + nu / 8, -1 / 4 - nu / 12, -1 / 8 + 3 * nu / 8,
        -1 / 4 + nu / 12, -1 / 8 - nu / 8, nu / 6, 1 / 8 - 3 * nu / 8,
    ])
    idx = np.array([
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ])
    return scale / (1.0 - nu**2) * k[idx]


def simp_modulus(rho, p: float, Emin: float, Emax: float):
    return Emin + (Emax - Emin) * np.asarray(rho, dtype=float) ** p


def simp_derivative(rho, p: float, Emin: float, Emax: float):
    rho = np.asarray(rho, dtype=float)
    if p == 1:
        return np.full_like(rho, Emax - Emin)
    return p * (Emax - Emin) * rho ** (p - 1)


@dataclass
class PhysicalField:
    """Physical densities on the design tile(s); expanded through ``mesh.tile_map``."""

    rho: np.ndarray
    p: float = 3.0
    Emin: float = 1e-9
    Emax: float = 1.0

    def element_moduli(self, mesh: MeshTopology) -> np.ndarray:
        return simp_modulus(self.rho, self.p, self.Emin, self.Emax)[mesh.tile_map]


@dataclass
class LinearSystem:
    K: sp.csr_matrix
    f: np.ndarray


class Assembler:
    """Global assembly with a design-independent CSR pattern.

    The triplet-to-CSR scatter is computed once; each assembly is then a
    single weighted ``bincount``.  Dirichlet rows and columns are zeroed and
    given a unit diagonal so vectors stay full length.
    """

    def __init__(self, mesh: MeshTopology, K0: np.ndarray):
        self.mesh = mesh
        self.K0 = K0
        edof = mesh.edof
        ndof = mesh.n_dofs
        rows = np.repeat(edof, 8, axis=1).ravel()
        cols = np.tile(edof, (1, 8)).ravel()
        key = rows * ndof + cols
        uniq, self._slot = np.unique(key, return_inverse=True)
        r, c = np.divmod(uniq, ndof)
        indptr = np.zeros(ndof + 1, dtype=np.int64)
        np.add.at(indptr, r + 1, 1)
        self.indptr = np.cumsum(indptr)
        self.indices = c
        self._nnz = uniq.size
        fixed = np.zeros(ndof, dtype=bool)
        fixed[mesh.dirichlet_dofs] = True
        self._kill = fixed[r] | fixed[c]
        self._unit = np.flatnonzero(fixed[r] & (r == c))

    def assemble_matrix(self, E_elem: np.ndarray) -> sp.csr_matrix:
        vals = (E_elem[:, None] * self.K0.ravel()[None, :]).ravel()
        data = np.bincount(self._slot, weights=vals, minlength=self._nnz)
        data[self._kill] = 0.0
        data[self._unit] = 1.0
        n = self.mesh.n_dofs
        K = sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(n, n))
        K.has_sorted_indices = True
        return K


_ASSEMBLERS: dict = {}


def get_assembler(mesh: MeshTopology, K0: np.ndarray) -> Assembler:
    key = (id(mesh), K0.tobytes())
    asm = _ASSEMBLERS.get(key)
    if asm is None or asm.mesh is not mesh:
        if len(_ASSEMBLERS) > 8:
            _ASSEMBLERS.clear()
        asm = Assembler(mesh, K0)
        _ASSEMBLERS[key] = asm
    return asm


def assemble(mesh: MeshTopology, field: PhysicalField, K0: np.ndarray | None = None) -> LinearSystem:
    """Global stiffness K = sum_e E(rho_e) K0 scattered, with Dirichlet elimination."""
    if K0 is None:
        K0 = element_stiffness_template()
    K = get_assembler(mesh, K0).assemble_matrix(field.element_moduli(mesh))
    f = mesh.f.copy()
    f[mesh.dirichlet_dofs] = 0.0
    return LinearSystem(K, f)


def assemble_local(mesh: MeshTopology, field: PhysicalField, agg: Agglomerate,
                   K0: np.ndarray | None = None):
    """Neumann stiffness of one agglomerate and its diagonal weight.

    Only elements inside the agglomerate contribute, so interior agglomerates
    keep their rigid-body modes.  Physical Dirichlet DOFs are eliminated with
    a unit diagonal exactly as in the global matrix.  Rows and columns follow
    ``agg.fine_dof_list``.
    """
    if K0 is None:
        K0 = element_stiffness_template()
    nx, ny = agg.shape
    ix0, iy0 = agg.origin
    E = field.element_moduli(mesh)[agg.elements]
    # local edof table on the agglomerate's own node grid
    ex, ey = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    ex, ey = ex.ravel(), ey.ravel()
    nodes = np.stack([ex * ny + ey, (ex + 1) * ny + ey, (ex + 1) * ny + ey + 1, ex * ny + ey + 1], axis=1)
    ledof = np.empty((nodes.shape[0], 8), dtype=np.int64)
    ledof[:, 0::2] = 2 * nodes
    ledof[:, 1::2] = 2 * nodes + 1
    rows = np.repeat(ledof, 8, axis=1).ravel()
    cols = np.tile(ledof, (1, 8)).ravel()
    vals = (E[:, None] * K0.ravel()[None, :]).ravel()
    nl = 2 * nx * ny
    Kw = sp.coo_matrix((vals, (rows, cols)), shape=(nl, nl)).tocsr()
    fixed = np.isin(agg.fine_dof_list, mesh.dirichlet_dofs)
    if fixed.any():
        keep = sp.diags((~fixed).astype(float))
        Kw = (keep @ Kw @ keep + sp.diags(fixed.astype(float))).tocsr()
    Kw.sum_duplicates()
    Kw.sort_indices()
    w = Kw.diagonal()
    if np.any(w <= 0):
        raise MaterialError("non-positive diagonal in agglomerate stiffness")
    return Kw, w


def compliance(f: np.ndarray, u: np.ndarray) -> float:
    return float(np.dot(f, u))


def element_energies(mesh: MeshTopology, u: np.ndarray, K0: np.ndarray | None = None) -> np.ndarray:
    """u_e^T K0 u_e for every fine element."""
    if K0 is None:
        K0 = element_stiffness_template()
    ue = u[mesh.edof]
    return np.einsum("ei,ij,ej->e", ue, K0, ue)


def physical_sensitivities(mesh: MeshTopology, u: np.ndarray, field: PhysicalField,
                           K0: np.ndarray | None = None) -> np.ndarray:
    """d(f^T u)/d rho per fine element (physical density)."""
    dE = simp_derivative(field.rho, field.p, field.Emin, field.Emax)[mesh.tile_map]
    return -dE * element_energies(mesh, u, K0)


def element_sensitivities(mesh: MeshTopology, u: np.ndarray, field: PhysicalField,
                          K0: np.ndarray | None = None) -> np.ndarray:
    """Compliance gradient w.r.t. the tile densities (sum over every tiled copy)."""
    return tile_sum(mesh, physical_sensitivities(mesh, u, field, K0))


def tile_sum(mesh: MeshTopology, per_element: np.ndarray) -> np.ndarray:
    return np.bincount(mesh.tile_map, weights=per_element, minlength=mesh.n_design)


def brute_force_classes(mesh: MeshTopology, aggs, field: PhysicalField, K0=None) -> np.ndarray:
    """Group agglomerates whose local matrices are entrywise identical (debug oracle)."""
    found: list[tuple[sp.csr_matrix, int]] = []
    out = np.empty(len(aggs), dtype=np.int64)
    for k, agg in enumerate(aggs):
        Kw, _ = assemble_local(mesh, field, agg, K0)
        for M, cid in found:
            if M.shape == Kw.shape and (M != Kw).nnz == 0:
                out[k] = cid
                break
        else:
            out[k] = len(found)
            found.append((Kw, len(found)))
    return out
