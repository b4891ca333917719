"""Spectral coarse basis (MsFEM) preconditioner and preconditioned GMRES.

Each agglomerate contributes the local eigenvectors of the pencil
``(K_w, diag(K_w))`` below a global threshold, localised by the bilinear
coarse hat function of its coarse node.  The resulting restriction ``R``
gives the coarse operator ``R K R^T`` which is used as the coarse level of a
two-level cycle with symmetric Gauss-Seidel smoothing.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from pyamg.relaxation.relaxation import gauss_seidel

from .fem import PhysicalField, assemble_local, element_stiffness_template
from .mesh import Agglomerate, MeshTopology, class_representatives

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Iterative solver failure; carries the residual history."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class EigenSolverError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# local eigenproblems


def _normalise_signs(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def smallest_eigpairs(K, w, lambda_max: float, m_cap: int | None = None,
                      dense_limit: int = 1000, min_modes: int = 1):
    """Eigenpairs of ``K psi = lam diag(w) psi`` with ``lam < lambda_max``.

    At least ``min_modes`` and at most ``m_cap`` pairs are returned, sorted
    ascending, ``diag(w)``-orthonormal, each with its largest-magnitude entry
    positive.  Small problems are solved densely; larger ones by shift-invert
    Lanczos around a small negative shift, growing the block until the
    largest converged eigenvalue passes the threshold.
    """
    w = np.asarray(w, dtype=float)
    n = w.size
    if np.any(w <= 0):
        raise EigenSolverError("weight must be strictly positive")
    m_cap = n if m_cap is None else min(int(m_cap), n)
    if n <= dense_limit or m_cap > n // 3:
        Kd = K.toarray() if sp.issparse(K) else np.asarray(K, dtype=float)
        s = 1.0 / np.sqrt(w)
        vals, vecs = sla.eigh(s[:, None] * Kd * s[None, :])
        vecs = s[:, None] * vecs
    else:
        vals, vecs = _sparse_smallest(sp.csr_matrix(K), w, lambda_max, m_cap)
    count = int(np.searchsorted(vals, lambda_max, side="left"))
    count = min(max(count, min_modes), m_cap)
    vals, vecs = vals[:count], vecs[:, :count]
    return vals, _normalise_signs(vecs)


def _sparse_smallest(K: sp.csr_matrix, w: np.ndarray, lambda_max: float, m_cap: int):
    n = w.size
    W = sp.diags(w)
    sigma = -0.1 * lambda_max
    lu = spla.splu((K - sigma * W).tocsc())
    op = spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
    k = min(max(12, 1), m_cap, n - 2)
    v0 = np.ones(n) / np.sqrt(n)
    while True:
        ncv = min(n - 1, max(2 * k + 1, k + 20))
        try:
            vals, vecs = spla.eigsh(K, k=k, M=W, sigma=sigma, which="LM", OPinv=op,
                                    tol=1e-12, ncv=ncv, v0=v0, maxiter=10 * n)
        except spla.ArpackNoConvergence as exc:
            raise EigenSolverError(f"eigensolver did not converge for k={k}, n={n}") from exc
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
        if vals[-1] >= lambda_max or k >= min(m_cap, n - 2):
            break
        k = min(2 * k, m_cap, n - 2)
    # Rayleigh-Ritz cleans up clustered (rigid-body) eigenvectors
    Q = vecs
    Kq = Q.T @ (K @ Q)
    Wq = Q.T @ (w[:, None] * Q)
    vals, C = sla.eigh(0.5 * (Kq + Kq.T), 0.5 * (Wq + Wq.T))
    vecs = Q @ C
    res = K @ vecs - (w[:, None] * vecs) * vals[None, :]
    Knorm = spla.norm(K, np.inf)
    bad = np.linalg.norm(res, axis=0) > 1e-8 * Knorm
    if np.any(bad & (vals < lambda_max)):
        raise EigenSolverError(
            f"eigenpair residuals above tolerance: {np.linalg.norm(res, axis=0)[bad]}"
        )
    return vals, vecs


# --------------------------------------------------------------------------
# coarse basis


def partition_of_unity(mesh: MeshTopology, agg: Agglomerate) -> np.ndarray:
    """Nodal values of the bilinear coarse hat of ``agg``'s coarse node, local ordering."""
    n = mesh.n
    I, J = divmod(agg.coarse_node_id, mesh.Mx + 1)
    nx, ny = agg.shape
    ix = agg.origin[0] + np.arange(nx)
    iy = agg.origin[1] + np.arange(ny)
    cx = np.clip(1.0 - np.abs(ix - I * n) / n, 0.0, None)
    cy = np.clip(1.0 - np.abs(iy - J * n) / n, 0.0, None)
    return np.outer(cx, cy).ravel()


@dataclass
class SpectralBasis:
    lambda_threshold: float
    R: sp.csr_matrix
    eigenvalues: dict  # class id -> ascending eigenvalues kept
    modes_per_agglomerate: np.ndarray
    n_eigensolves: int
    build_time: float = 0.0
    Kc: sp.csr_matrix | None = None
    _lu: object = None
    factor_time: float = 0.0

    @property
    def n_coarse(self) -> int:
        return int(self.R.shape[0])

    def coarse_solve(self, rc: np.ndarray) -> np.ndarray:
        if self._lu is None:
            raise SolverError("coarse matrix has not been factorised")
        return self._lu.solve(rc)

    def write_csv(self, path) -> None:
        """Per-class eigenvalue dump with the coarse-space size."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["class_id", "index", "eigenvalue", "n_coarse"])
            for cid in sorted(self.eigenvalues):
                for j, lam in enumerate(self.eigenvalues[cid]):
                    wr.writerow([cid, j, repr(float(lam)), self.n_coarse])


def build_basis(mesh: MeshTopology, field: PhysicalField, aggs: list[Agglomerate],
                classes: np.ndarray, lambda_threshold: float, m_cap: int | None = None,
                K0: np.ndarray | None = None) -> SpectralBasis:
    """Solve one local eigenproblem per class and assemble the restriction ``R``."""
    t0 = time.perf_counter()
    if K0 is None:
        K0 = element_stiffness_template()
    fixed_global = np.zeros(mesh.n_dofs, dtype=bool)
    fixed_global[mesh.dirichlet_dofs] = True
    modes: dict[int, np.ndarray] = {}
    eigvals: dict[int, np.ndarray] = {}
    for cid, k in class_representatives(classes).items():
        agg = aggs[k]
        Kw, w = assemble_local(mesh, field, agg, K0)
        free = ~fixed_global[agg.fine_dof_list]
        Kf = Kw[free][:, free]
        vals, vecs = smallest_eigpairs(Kf, w[free], lambda_threshold, m_cap)
        full = np.zeros((free.size, vals.size))
        full[free] = vecs
        modes[cid] = full
        eigvals[cid] = vals
    rows, cols, data = [], [], []
    counts = np.empty(len(aggs), dtype=np.int64)
    offset = 0
    for k, agg in enumerate(aggs):
        psi = modes[int(classes[k])]
        chi = np.repeat(partition_of_unity(mesh, agg), 2)
        phi = psi * chi[:, None]
        nz = np.flatnonzero(chi)
        m = psi.shape[1]
        counts[k] = m
        block = phi[nz]  # (len(nz), m)
        rows.append(np.repeat(offset + np.arange(m)[None, :], nz.size, axis=0).ravel())
        cols.append(np.repeat(agg.fine_dof_list[nz], m))
        data.append(block.ravel())
        offset += m
    R = sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(offset, mesh.n_dofs),
    )
    R.eliminate_zeros()
    basis = SpectralBasis(lambda_threshold, R, eigvals, counts, len(modes))
    basis.build_time = time.perf_counter() - t0
    log.debug("basis: %d classes, N_t=%d, %.2fs", len(modes), offset, basis.build_time)
    return basis


def coarse_factorise(basis: SpectralBasis, K: sp.spmatrix) -> SpectralBasis:
    """Form ``Kc = R K R^T`` and factorise it (in place; returns ``basis``)."""
    t0 = time.perf_counter()
    R = basis.R
    Kc = (R @ (K @ R.T)).tocsr()
    Kc = 0.5 * (Kc + Kc.T)
    Kc = Kc.tocsc()
    nt = Kc.shape[0]
    tr = Kc.diagonal().sum()
    reg = 1e-12 * tr / max(nt, 1)
    try:
        lu = spla.splu((Kc + reg * sp.identity(nt, format="csc")).tocsc())
    except RuntimeError as exc:
        raise SolverError(f"coarse matrix is singular: {exc}") from exc
    basis.Kc = Kc.tocsr()
    basis._lu = lu
    basis.factor_time = time.perf_counter() - t0
    return basis


def coarse_approximation(basis: SpectralBasis, f: np.ndarray) -> np.ndarray:
    """Single coarse solve ``u_a = R^T Kc^{-1} R f``."""
    return basis.R.T @ basis.coarse_solve(basis.R @ f)


# --------------------------------------------------------------------------
# preconditioner and GMRES


class MsfemPreconditioner:
    """Symmetric two-level cycle: SGS pre-smooth, coarse correction, SGS post-smooth."""

    def __init__(self, K: sp.csr_matrix, basis: SpectralBasis):
        self.K = sp.csr_matrix(K)
        self.basis = basis
        self.R = basis.R
        self.RT = basis.R.T.tocsr()
        self.n_applies = 0

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return self.apply(r)

    def apply(self, r: np.ndarray) -> np.ndarray:
        self.n_applies += 1
        r = np.asarray(r, dtype=float)
        x = np.zeros_like(r)
        gauss_seidel(self.K, x, r, iterations=1, sweep="symmetric")
        res = r - self.K @ x
        x += self.RT @ self.basis.coarse_solve(self.R @ res)
        gauss_seidel(self.K, x, r, iterations=1, sweep="symmetric")
        return x


def precond_apply(r: np.ndarray, K, basis: SpectralBasis) -> np.ndarray:
    return MsfemPreconditioner(K, basis).apply(r)


@dataclass
class SolveStats:
    gmres_iterations: int = 0
    residuals: list = field(default_factory=list)
    basis_recomputed: bool = False
    t_basis: float = 0.0
    t_projection: float = 0.0
    t_solve: float = 0.0


def gmres_solve(K, f: np.ndarray, precond=None, tol_rel: float = 1e-8, x0=None,
                max_iter: int = 500):
    """Left-preconditioned GMRES without restarts (modified Gram-Schmidt).

    Stops once the preconditioned residual norm is at most ``tol_rel`` times
    the preconditioned norm of ``f``.  Returns ``(u, SolveStats)``.
    """
    if tol_rel <= 0:
        raise ValueError("tol_rel must be positive")
    t0 = time.perf_counter()
    M = precond if precond is not None else (lambda v: v)
    n = f.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float, copy=True)
    stats = SolveStats()
    Mf = M(f)
    bnorm = np.linalg.norm(Mf)
    if bnorm == 0.0:
        stats.residuals = [0.0]
        stats.t_solve = time.perf_counter() - t0
        return np.zeros(n), stats
    r = M(f - K @ x) if x0 is not None else Mf
    beta = np.linalg.norm(r)
    hist = [beta / bnorm]
    if beta <= tol_rel * bnorm:
        stats.residuals = hist
        stats.t_solve = time.perf_counter() - t0
        return x, stats
    V = [r / beta]
    H = np.zeros((max_iter + 1, max_iter))
    cs = np.zeros(max_iter)
    sn = np.zeros(max_iter)
    g = np.zeros(max_iter + 1)
    g[0] = beta
    for j in range(max_iter):
        wv = M(K @ V[j])
        for i in range(j + 1):
            hij = np.dot(wv, V[i])
            H[i, j] = hij
            wv -= hij * V[i]
        hn = np.linalg.norm(wv)
        H[j + 1, j] = hn
        for i in range(j):
            a, b = H[i, j], H[i + 1, j]
            H[i, j] = cs[i] * a + sn[i] * b
            H[i + 1, j] = -sn[i] * a + cs[i] * b
        a, b = H[j, j], H[j + 1, j]
        rho = np.hypot(a, b)
        cs[j], sn[j] = (1.0, 0.0) if rho == 0 else (a / rho, b / rho)
        H[j, j] = rho
        H[j + 1, j] = 0.0
        g[j + 1] = -sn[j] * g[j]
        g[j] = cs[j] * g[j]
        res = abs(g[j + 1])
        hist.append(res / bnorm)
        if res <= tol_rel * bnorm or hn <= 1e-300:
            y = sla.solve_triangular(H[: j + 1, : j + 1], g[: j + 1])
            x += np.asarray(V[: j + 1]).T @ y
            stats.gmres_iterations = j + 1
            stats.residuals = hist
            stats.t_solve = time.perf_counter() - t0
            return x, stats
        V.append(wv / hn)
    raise SolverError(f"GMRES hit the iteration cap ({max_iter}); last residual {hist[-1]:.3e}", hist)


def direct_solve(K: sp.spmatrix, f: np.ndarray) -> np.ndarray:
    return spla.spsolve(sp.csc_matrix(K), f)


# --------------------------------------------------------------------------
# basis update policy


@dataclass
class BasisPolicy:
    kind: str = "heuristic"  # constant | heuristic | heuristic-warm
    threshold_pct: float = 25.0

    @property
    def warm(self) -> bool:
        return self.kind == "heuristic-warm"


def should_rebuild_basis(history: list[int], policy: BasisPolicy, forced: bool = False) -> bool:
    """Decide whether the basis must be rebuilt before the next solve.

    ``history`` holds the GMRES counts of every solve since the last build,
    the first entry being the solve right after the build.  With warm starts
    the reference is the running minimum instead of the first count.
    """
    if forced or policy.kind == "constant":
        return True
    if not history:
        return False
    ref = min(history) if policy.warm else history[0]
    ref = max(ref, 1)
    return abs(history[-1] - ref) / ref > policy.threshold_pct / 100.0


def dilated_index(etas) -> int:
    """Index of the realization with the smallest threshold (the dilated design)."""
    return int(np.argmin(np.asarray(etas)))


def basis_for_realizations(mesh, fields: list[PhysicalField], etas, aggs, classes,
                           lambda_threshold: float, **kw) -> SpectralBasis:
    """Build the shared basis from the dilated realization's physical field."""
    return build_basis(mesh, fields[dilated_index(etas)], aggs, classes, lambda_threshold, **kw)
