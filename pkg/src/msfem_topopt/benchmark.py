"""Solver benchmark on a fixed cross-shaped microstructure.

For every eigenvalue threshold and void modulus the benchmark records the
energy-norm error of a single coarse solve, the coarse dimension and the
GMRES iteration count.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, asdict

import numpy as np

from .config import ProblemConfig
from .fem import PhysicalField, assemble, element_stiffness_template
from .filters import build_neighbourhood_filter
from .mesh import build_agglomerates, build_mesh, classify_agglomerates
from .spectral import (MsfemPreconditioner, build_basis, coarse_approximation, coarse_factorise,
                       direct_solve, gmres_solve)

log = logging.getLogger(__name__)


def cross_tile(n: int, bar_width: float = 0.2, shape: str = "x") -> np.ndarray:
    """0/1 tile with a centred cross; ``bar_width`` is a fraction of the cell edge."""
    c = (np.arange(n) + 0.5) / n - 0.5
    X, Y = np.meshgrid(c, c, indexing="ij")
    half = 0.5 * bar_width
    if shape == "plus":
        solid = (np.abs(X) <= half) | (np.abs(Y) <= half)
    elif shape == "x":
        d = half * np.sqrt(2.0)
        solid = (np.abs(X - Y) <= d) | (np.abs(X + Y) <= d)
    else:
        raise ValueError(f"unknown cross shape {shape!r}")
    return solid.astype(float).ravel()


def benchmark_field(cfg: ProblemConfig) -> np.ndarray:
    b = cfg.benchmark
    n = cfg.geometry.n
    rho = cross_tile(n, b.get("bar_width", 0.2), b.get("shape", "x"))
    if b.get("filtered", True):
        rho = build_neighbourhood_filter(n, b.get("rmin", 4.0)).apply(rho)
    return rho


@dataclass
class BenchmarkRow:
    lambda_threshold: float
    Emin: float
    n_coarse: int
    energy_error: float
    gmres_iterations: int
    t_basis: float
    t_projection: float
    t_solve: float


def energy_error(K, u, ua) -> float:
    """Relative energy-norm error, returned as the squared ratio (e.Ke)/(u.Ku)."""
    e = u - ua
    return float(e @ (K @ e) / (u @ (K @ u)))


def run_benchmark(cfg: ProblemConfig, lambdas=None, emins=None, tol=None) -> list[BenchmarkRow]:
    b = cfg.benchmark
    lambdas = list(lambdas if lambdas is not None else b.get("lambdas", [3e-4, 1e-3, 3e-3, 1e-2]))
    emins = list(emins if emins is not None else b.get("emins", [1e-3, 1e-6, 1e-9, 1e-12]))
    tol = cfg.solver.tol if tol is None else tol
    mesh = build_mesh(cfg)
    aggs = build_agglomerates(mesh)
    classes = classify_agglomerates(aggs, mesh)
    K0 = element_stiffness_template(cfg.material.nu, cfg.material.plane)
    rho = benchmark_field(cfg)
    rows = []
    for Emin in emins:
        fld = PhysicalField(rho, p=b.get("p", 3.0), Emin=Emin, Emax=cfg.material.Emax)
        sys_ = assemble(mesh, fld, K0)
        u = direct_solve(sys_.K, sys_.f)
        for lam in lambdas:
            t0 = time.perf_counter()
            basis = build_basis(mesh, fld, aggs, classes, lam, cfg.solver.max_modes, K0)
            t1 = time.perf_counter()
            coarse_factorise(basis, sys_.K)
            t2 = time.perf_counter()
            ua = coarse_approximation(basis, sys_.f)
            err = energy_error(sys_.K, u, ua)
            pc = MsfemPreconditioner(sys_.K, basis)
            _, stats = gmres_solve(sys_.K, sys_.f, pc, tol, max_iter=cfg.solver.max_iter)
            row = BenchmarkRow(lam, Emin, basis.n_coarse, err, stats.gmres_iterations,
                               t1 - t0, t2 - t1, stats.t_solve)
            log.info("benchmark %s", row)
            rows.append(row)
    return rows


def write_rows(rows: list[BenchmarkRow], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        fields = list(BenchmarkRow.__dataclass_fields__)
        wr.writerow(fields)
        for r in rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
