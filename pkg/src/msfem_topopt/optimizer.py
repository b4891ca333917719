"""Design loop: robust compliance, volume constraint, MMA and continuation.

One iteration filters the design once, projects it at every threshold,
solves the realizations (dilated first, since its field is the one the
shared coarse basis is built from), forms the robust objective and the
expected-volume constraint with their sensitivities, and takes an MMA step.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ProblemConfig
from .fem import (PhysicalField, assemble, compliance, element_sensitivities,
                  element_stiffness_template)
from .filters import (FilterOperator, ProjectionParams, backprop_sensitivities, build_filter,
                      heaviside_derivative, heaviside_project, nondiscreteness)
from .mesh import MeshTopology, build_agglomerates, build_mesh, classify_agglomerates
from .mma import MmaState, OptimizerError, initial_asymptote, mma_update
from .spectral import (BasisPolicy, MsfemPreconditioner, SolveStats, SpectralBasis,
                       basis_for_realizations, coarse_factorise, direct_solve, dilated_index,
                       gmres_solve, should_rebuild_basis)

log = logging.getLogger(__name__)

__all__ = [
    "RealizationState", "RobustObjective", "ContinuationSchedule", "StageMetrics", "StageDecision",
    "ConvergenceRecord", "OptimizationResult", "OptimizationProblem", "SolverManager",
    "MmaState", "OptimizerError", "mma_update", "robust_objective", "volume_constraint",
    "continuation_step", "evaluate_design", "run_optimisation", "evaluate_thresholds",
]


@dataclass
class RealizationState:
    eta: float
    rho_physical: np.ndarray
    u: np.ndarray
    compliance: float
    stats: SolveStats
    dc: np.ndarray | None = None  # d compliance / d rho_physical (tile-summed)


@dataclass
class RobustObjective:
    kappa: float
    mean: float
    variance: float
    value: float
    weights: np.ndarray


@dataclass
class ContinuationSchedule:
    mode: str
    stages: list  # [(p, beta), ...]
    stage_max_iter: int = 50
    change_tol: float = 1e-3
    change_window: int = 3
    max_iter: int = 200
    stop_on_convergence: bool = True

    @classmethod
    def from_config(cls, cfg: ProblemConfig) -> "ContinuationSchedule":
        pc = cfg.projection
        return cls(pc.mode, [(float(p), float(b)) for p, b in pc.stages], pc.stage_max_iter,
                   pc.change_tol, pc.change_window, cfg.optimizer.max_iter,
                   bool(cfg.optimizer.stop_on_convergence))

    @property
    def n_stages(self) -> int:
        return len(self.stages)


@dataclass
class StageMetrics:
    stage: int
    stage_iter: int  # iterations completed in the current stage
    rel_change: float | None  # max relative objective change over the window, None if not yet defined


@dataclass
class StageDecision:
    advance: bool
    stop: bool
    force_rebuild: bool
    reason: str = ""


@dataclass
class ConvergenceRecord:
    iter: int
    stage: int
    p: float
    beta: float
    objective: float
    compliances: list
    g: float
    m_nd: float
    gmres_iterations: list
    basis_rebuilt: bool
    n_coarse: int
    wall_time: float


@dataclass
class OptimizationResult:
    x: np.ndarray
    states: list
    records: list
    stage_designs: list  # (stage index, [rho_physical per realization])
    basis_builds: int
    gmres_total: int
    timings: dict
    converged: bool
    etas: list
    final_stage: tuple

    @property
    def compliances(self) -> list:
        return [s.compliance for s in self.states]


# --------------------------------------------------------------------------
# objective, constraint and continuation


def robust_objective(states, kappa: float) -> RobustObjective:
    """Equal-weight mean plus ``kappa`` times the population standard deviation."""
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    c = np.array([s.compliance if hasattr(s, "compliance") else s for s in states], dtype=float)
    m = c.size
    if m == 0:
        raise ValueError("at least one realization is required")
    mean = float(c.mean())
    var = float(np.mean((c - mean) ** 2))
    w = np.full(m, 1.0 / m)
    if var >= 1e-30 and kappa != 0:
        sd = np.sqrt(var)
        w = w + kappa * (c - mean) / (m * sd)
        value = mean + kappa * sd
    else:
        value = mean + kappa * np.sqrt(max(var, 0.0))
    return RobustObjective(kappa, mean, var, float(value), w)


def volume_constraint(states, vf: float, filt: FilterOperator, rho_filtered: np.ndarray,
                      params: list[ProjectionParams], tile_weights: np.ndarray):
    """Expected-volume constraint ``E[v(rho_bar)] / vf - 1`` and its design gradient.

    ``tile_weights`` gives each design variable's share of the macroscopic
    volume (they sum to one).
    """
    m = len(states)
    vols = [float(tile_weights @ s.rho_physical) for s in states]
    g = float(np.mean(vols) / vf - 1.0)
    dg = np.zeros_like(rho_filtered)
    for prm in params:
        dg += heaviside_derivative(rho_filtered, prm) * tile_weights
    dg = filt.adjoint(dg) / (m * vf)
    return g, dg


def continuation_step(schedule: ContinuationSchedule, metrics: StageMetrics) -> StageDecision:
    """Advance to the next stage when the objective has settled or the stage cap is hit."""
    settled = metrics.rel_change is not None and metrics.rel_change < schedule.change_tol
    last = metrics.stage >= schedule.n_stages - 1
    if last:
        stop = settled and schedule.stop_on_convergence
        return StageDecision(False, stop, False, "settled" if stop else "")
    if settled:
        return StageDecision(True, False, True, "settled")
    if metrics.stage_iter >= schedule.stage_max_iter:
        return StageDecision(True, False, True, "stage cap")
    return StageDecision(False, False, False)


def _max_rel_change(values: list, window: int) -> float | None:
    if len(values) < window + 1:
        return None
    v = np.asarray(values[-(window + 1):], dtype=float)
    den = np.maximum(np.abs(v[1:]), 1e-300)
    return float(np.max(np.abs(np.diff(v)) / den))


# --------------------------------------------------------------------------
# solver orchestration


class SolverManager:
    """Owns the shared coarse basis, its update policy and warm starts."""

    def __init__(self, mesh: MeshTopology, cfg: ProblemConfig, K0: np.ndarray, n_real: int,
                 kind: str | None = None, threads: int = 1):
        sc = cfg.solver
        self.mesh = mesh
        self.kind = kind or sc.kind
        self.K0 = K0
        self.tol = sc.tol
        self.max_iter = sc.max_iter
        self.lambda_threshold = sc.lambda_threshold
        self.m_cap = sc.max_modes
        self.policy = BasisPolicy(sc.policy, sc.threshold_pct)
        self.threads = max(1, int(threads))
        self.basis: SpectralBasis | None = None
        self.history: list[int] = []
        self.pending = True
        self.u_prev: list = [None] * n_real
        self.n_builds = 0
        self.gmres_total = 0
        self.t_basis = self.t_projection = self.t_solve = 0.0
        if self.kind == "msfem":
            self.aggs = build_agglomerates(mesh)
            self.classes = classify_agglomerates(self.aggs, mesh)

    def request_rebuild(self) -> None:
        self.pending = True

    def _solve_one(self, K, f, k: int) -> tuple[np.ndarray, SolveStats]:
        if self.kind == "direct":
            t0 = time.perf_counter()
            u = direct_solve(K, f)
            st = SolveStats(t_solve=time.perf_counter() - t0)
            return u, st
        t0 = time.perf_counter()
        basis = coarse_factorise(dataclasses.replace(self.basis), K)
        t1 = time.perf_counter()
        x0 = self.u_prev[k] if self.policy.warm else None
        u, st = gmres_solve(K, f, MsfemPreconditioner(K, basis), self.tol, x0=x0, max_iter=self.max_iter)
        st.t_projection = t1 - t0
        return u, st

    def solve(self, systems, fields, etas) -> tuple[list, list, bool]:
        """Solve every realization; returns displacements, stats and the rebuild flag."""
        m = len(systems)
        rebuilt = False
        if self.kind == "msfem" and (self.pending or self.basis is None):
            t0 = time.perf_counter()
            self.basis = basis_for_realizations(self.mesh, fields, etas, self.aggs, self.classes,
                                                self.lambda_threshold, m_cap=self.m_cap, K0=self.K0)
            self.t_basis += time.perf_counter() - t0
            self.n_builds += 1
            self.history = []
            self.pending = False
            rebuilt = True
        order = [dilated_index(etas)] + [k for k in range(m) if k != dilated_index(etas)]
        us: list = [None] * m
        stats: list = [None] * m
        first = order[0]
        us[first], stats[first] = self._solve_one(systems[first].K, systems[first].f, first)
        rest = order[1:]
        if self.threads > 1 and len(rest) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as ex:
                out = list(ex.map(lambda k: self._solve_one(systems[k].K, systems[k].f, k), rest))
        else:
            out = [self._solve_one(systems[k].K, systems[k].f, k) for k in rest]
        for k, (u, st) in zip(rest, out):
            us[k], stats[k] = u, st
        for k in range(m):
            stats[k].basis_recomputed = rebuilt
            self.u_prev[k] = us[k]
            self.gmres_total += stats[k].gmres_iterations
            self.t_projection += stats[k].t_projection
            self.t_solve += stats[k].t_solve
        if rebuilt:
            stats[first].t_basis = self.basis.build_time
        if self.kind == "msfem":
            self.history.append(stats[first].gmres_iterations)
            if should_rebuild_basis(self.history, self.policy):
                self.pending = True
        return us, stats, rebuilt

    @property
    def n_coarse(self) -> int:
        return self.basis.n_coarse if self.basis is not None else 0


# --------------------------------------------------------------------------
# problem setup and evaluation


class OptimizationProblem:
    """Mesh, filter, element matrix and solver manager for one configuration."""

    def __init__(self, cfg: ProblemConfig, solver: str | None = None, threads: int = 1):
        self.cfg = cfg
        self.mesh = build_mesh(cfg)
        self.K0 = element_stiffness_template(cfg.material.nu, cfg.material.plane)
        lay = self.mesh.layout
        self.filter = build_filter(lay.kind, cfg.geometry.n, lay.n_tiles, cfg.filter.kind, cfg.filter.rmin)
        self.etas = [float(e) for e in cfg.projection.eta]
        if cfg.projection.mode == "single":
            self.etas = self.etas[:1]
        counts = np.bincount(self.mesh.tile_map, minlength=self.mesh.n_design).astype(float)
        self.tile_weights = counts / counts.sum()
        self.solver = SolverManager(self.mesh, cfg, self.K0, len(self.etas), solver, threads)

    @property
    def n_design(self) -> int:
        return self.mesh.n_design

    def initial_design(self, seed: int | None = None) -> np.ndarray:
        oc = self.cfg.optimizer
        if oc.init == "random":
            rng = np.random.default_rng(seed if seed is not None else oc.seed)
            x = rng.uniform(0.0, 1.0, self.n_design)
            return np.clip(x * oc.vf / x.mean(), 0.0, 1.0)
        return np.full(self.n_design, oc.vf)

    def fields(self, x: np.ndarray, p: float, beta: float, etas=None):
        etas = self.etas if etas is None else etas
        xf = self.filter.apply(x)
        params = [ProjectionParams(beta, e) for e in etas]
        mat = self.cfg.material
        flds = [PhysicalField(heaviside_project(xf, prm), p, mat.Emin, mat.Emax) for prm in params]
        return xf, params, flds


def evaluate_design(problem: OptimizationProblem, x: np.ndarray, stage: tuple[float, float],
                    etas=None, manager: SolverManager | None = None):
    """Filter once, project per threshold, solve every realization.

    Returns ``(states, rho_filtered, params, rebuilt)``; states keep the input
    threshold order.
    """
    p, beta = stage
    etas = problem.etas if etas is None else list(etas)
    manager = manager or problem.solver
    xf, params, flds = problem.fields(x, p, beta, etas)
    systems = [assemble(problem.mesh, fl, problem.K0) for fl in flds]
    us, stats, rebuilt = manager.solve(systems, flds, etas)
    states = []
    for eta, fl, sys_, u, st in zip(etas, flds, systems, us, stats):
        dc = element_sensitivities(problem.mesh, u, fl, problem.K0)
        states.append(RealizationState(eta, fl.rho, u, compliance(sys_.f, u), st, dc))
    return states, xf, params, rebuilt


def objective_and_gradient(problem: OptimizationProblem, x: np.ndarray, stage, kappa: float | None = None,
                           manager: SolverManager | None = None):
    """Robust objective, volume constraint and their design gradients (unscaled)."""
    kappa = problem.cfg.projection.kappa if kappa is None else kappa
    states, xf, params, rebuilt = evaluate_design(problem, x, stage, manager=manager)
    obj = robust_objective(states, kappa)
    df = np.zeros(problem.n_design)
    for w, st, prm in zip(obj.weights, states, params):
        df += w * backprop_sensitivities(st.dc, problem.filter, xf, prm)
    g, dg = volume_constraint(states, problem.cfg.optimizer.vf, problem.filter, xf, params,
                              problem.tile_weights)
    return obj, df, g, dg, states, rebuilt


def _nominal_index(etas) -> int:
    return int(np.argmin(np.abs(np.asarray(etas) - 0.5)))


def run_optimisation(cfg: ProblemConfig, solver: str | None = None, threads: int = 1,
                     seed: int | None = None, x0: np.ndarray | None = None,
                     callback=None, problem: OptimizationProblem | None = None) -> OptimizationResult:
    """Run the continuation stages until the iteration budget or final-stage convergence."""
    problem = problem or OptimizationProblem(cfg, solver, threads)
    sched = ContinuationSchedule.from_config(cfg)
    x = problem.initial_design(seed) if x0 is None else np.clip(np.asarray(x0, dtype=float), 0, 1)
    stage = 0
    p, beta = sched.stages[0]
    mma = MmaState(x.copy(), a0=initial_asymptote(beta))
    records: list[ConvergenceRecord] = []
    stage_designs = []
    stage_obj: list[float] = []
    scale = None
    t_start = time.perf_counter()
    converged = False
    states = []
    for it in range(1, sched.max_iter + 1):
        obj, df, g, dg, states, rebuilt = objective_and_gradient(problem, x, (p, beta))
        if scale is None:
            scale = obj.value if obj.value > 0 else 1.0
        mnd = nondiscreteness(states[_nominal_index(problem.etas)].rho_physical)
        rec = ConvergenceRecord(
            it, stage, p, beta, obj.value, [s.compliance for s in states], g, mnd,
            [s.stats.gmres_iterations for s in states], rebuilt, problem.solver.n_coarse,
            time.perf_counter() - t_start,
        )
        records.append(rec)
        if callback is not None:
            callback(rec)
        log.info("it %d stage %d p=%g beta=%g f=%.6e g=%+.2e Mnd=%.3f gmres=%s%s", it, stage, p, beta,
                 obj.value, g, mnd, rec.gmres_iterations, " [basis]" if rebuilt else "")
        stage_obj.append(obj.value)
        dec = continuation_step(sched, StageMetrics(stage, len(stage_obj),
                                                    _max_rel_change(stage_obj, sched.change_window)))
        if dec.stop:
            converged = True
            break
        if it == sched.max_iter:
            break
        if dec.advance:
            stage_designs.append((stage, [s.rho_physical.copy() for s in states]))
            stage += 1
            p, new_beta = sched.stages[stage]
            if new_beta != beta:
                mma.reset(initial_asymptote(new_beta))
            beta = new_beta
            stage_obj = []
            problem.solver.request_rebuild()
            log.info("stage %d: p=%g beta=%g (%s)", stage, p, beta, dec.reason)
            # the step below still uses the gradient of the old stage
        x = mma_update(mma, obj.value / scale, df / scale, g, dg, (0.0, 1.0))
    stage_designs.append((stage, [s.rho_physical.copy() for s in states]))
    sm = problem.solver
    timings = {"basis": sm.t_basis, "projection": sm.t_projection, "solve": sm.t_solve,
               "total": time.perf_counter() - t_start}
    return OptimizationResult(x, states, records, stage_designs, sm.n_builds, sm.gmres_total, timings,
                              converged, list(problem.etas), (p, beta))


def evaluate_thresholds(problem: OptimizationProblem, x: np.ndarray, stage, etas) -> list[float]:
    """Compliance of ``x`` projected at arbitrary thresholds (direct solves)."""
    mgr = SolverManager(problem.mesh, problem.cfg, problem.K0, len(etas), "direct")
    states, *_ = evaluate_design(problem, x, stage, etas=list(etas), manager=mgr)
    return [s.compliance for s in states]
