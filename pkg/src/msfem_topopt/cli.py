"""Command line front end: ``optimize``, ``benchmark`` and ``analyze``.

Configuration is a JSON document or a preset name; ``section.key=value``
arguments override single fields.  The log level is read from the
``MSFEM_TOPOPT_LOG`` environment variable (default WARNING).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import struct
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ProblemConfig, parse_config
from .filters import nondiscreteness

log = logging.getLogger("msfem_topopt")

DUMP_MAGIC = b"MSTD"
DUMP_VERSION = 1
_HEADER = struct.Struct("<4sIQ")  # magic, version, variable count: 16 bytes


# --------------------------------------------------------------------------
# output helpers


def write_pgm(path, rho: np.ndarray) -> None:
    """8-bit binary PGM, solid black: pixel = round(255 (1 - rho))."""
    img = np.rint(255.0 * (1.0 - np.clip(rho, 0.0, 1.0))).astype(np.uint8)
    h, w = img.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(img.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def tile_image(rho_tiles: np.ndarray, n: int) -> np.ndarray:
    """Unique cell(s) as an image, tiles stacked top to bottom, y up."""
    t = rho_tiles.reshape(-1, n, n)  # (tile, i, j)
    return np.concatenate([np.flipud(ti.T) for ti in t], axis=0)


def macro_image(mesh, rho_tiles: np.ndarray) -> np.ndarray:
    """Full macrostructure, one pixel per fine element."""
    full = rho_tiles[mesh.tile_map].reshape(mesh.nelx, mesh.nely)
    return np.flipud(full.T)


def write_dump(path, x: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, x.size))
        fh.write(x.tobytes())


def read_dump(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated design dump")
    magic, version, count = _HEADER.unpack_from(data)
    if magic != DUMP_MAGIC or version != DUMP_VERSION:
        raise ValueError(f"{path}: not a design dump (magic {magic!r}, version {version})")
    x = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if x.size != count:
        raise ValueError(f"{path}: expected {count} values, found {x.size}")
    return x.astype(float)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_convergence_csv(path, records, m: int) -> None:
    head = (["iter", "stage", "p", "beta", "objective"] + [f"compliance_{k}" for k in range(m)]
            + ["g", "m_nd"] + [f"gmres_{k}" for k in range(m)] + ["basis_rebuilt", "n_coarse", "wall_time"])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(head)
        for r in records:
            row = ([r.iter, r.stage, r.p, r.beta, r.objective] + list(r.compliances) + [r.g, r.m_nd]
                   + list(r.gmres_iterations) + [int(r.basis_rebuilt), r.n_coarse, r.wall_time])
            wr.writerow([_fmt(v) for v in row])


def read_convergence_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# subcommands


def _load(args) -> ProblemConfig:
    cfg = parse_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.optimizer.seed = args.seed
    if args.solver is not None:
        cfg.solver.kind = args.solver
    return cfg


def run(cfg: ProblemConfig, out: Path, threads: int = 1) -> dict:
    """Optimise ``cfg`` and write images, convergence CSV, summary and dump to ``out``."""
    from .optimizer import run_optimisation

    out.mkdir(parents=True, exist_ok=True)
    res = run_optimisation(cfg, threads=threads, seed=cfg.optimizer.seed)
    from .mesh import build_mesh

    mesh = build_mesh(cfg)
    n = cfg.geometry.n
    for stage, fields in res.stage_designs:
        for eta, rho in zip(res.etas, fields):
            write_pgm(out / f"stage{stage}_eta{eta:g}.pgm", tile_image(rho, n))
    for eta, st in zip(res.etas, res.states):
        write_pgm(out / f"final_eta{eta:g}.pgm", tile_image(st.rho_physical, n))
        write_pgm(out / f"macro_eta{eta:g}.pgm", macro_image(mesh, st.rho_physical))
    write_convergence_csv(out / "convergence.csv", res.records, len(res.etas))
    write_dump(out / "design.bin", res.x)
    last = res.records[-1]
    summary = {
        "preset": cfg.preset,
        "iterations": last.iter,
        "converged": res.converged,
        "etas": res.etas,
        "final_stage": {"p": res.final_stage[0], "beta": res.final_stage[1]},
        "compliances": res.compliances,
        "objective": last.objective,
        "g": last.g,
        "m_nd": last.m_nd,
        "basis_builds": res.basis_builds,
        "gmres_total": res.gmres_total,
        "timings": res.timings,
        "solver": cfg.solver.kind,
    }
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def cmd_optimize(args) -> int:
    cfg = _load(args)
    summary = run(cfg, Path(args.output_dir), args.threads)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_benchmark(args) -> int:
    from .benchmark import run_benchmark, write_rows

    cfg = _load(args)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_benchmark(cfg)
    write_rows(rows, out / "benchmark.csv")
    for r in rows:
        print(f"lambda={r.lambda_threshold:.3g} Emin={r.Emin:.0e} N_t={r.n_coarse} "
              f"err={r.energy_error:.4e} its={r.gmres_iterations}")
    return 0


def analyze(cfg: ProblemConfig, x: np.ndarray) -> dict:
    """Single solve per realization of a stored design at the final stage parameters."""
    from .optimizer import OptimizationProblem, evaluate_design, robust_objective, volume_constraint

    pb = OptimizationProblem(cfg)
    if x.size != pb.n_design:
        raise ValueError(f"design has {x.size} variables, configuration expects {pb.n_design}")
    stage = tuple(float(v) for v in cfg.projection.stages[-1])
    states, xf, params, _ = evaluate_design(pb, x, stage)
    obj = robust_objective(states, cfg.projection.kappa)
    g, _ = volume_constraint(states, cfg.optimizer.vf, pb.filter, xf, params, pb.tile_weights)
    return {
        "etas": pb.etas,
        "p": stage[0],
        "beta": stage[1],
        "compliances": [s.compliance for s in states],
        "objective": obj.value,
        "g": g,
        "m_nd": [nondiscreteness(s.rho_physical) for s in states],
        "gmres_iterations": [s.stats.gmres_iterations for s in states],
        "solver": cfg.solver.kind,
    }


def cmd_analyze(args) -> int:
    cfg = _load(args)
    rep = analyze(cfg, read_dump(args.dump))
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "analysis.json").write_text(json.dumps(rep, indent=2))
    print(json.dumps(rep, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker threads for realization solves")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--output-dir", default="out")
    common.add_argument("--solver", choices=["direct", "msfem"], default=None)
    ap = argparse.ArgumentParser(prog="msfem-topopt", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("optimize", parents=[common], help="run a design optimisation")
    p.add_argument("config", help="JSON file or preset name")
    p.add_argument("overrides", nargs="*", help="section.key=value")
    p.set_defaults(func=cmd_optimize)
    p = sub.add_parser("benchmark", parents=[common], help="coarse-space accuracy and GMRES sweep")
    p.add_argument("config")
    p.add_argument("overrides", nargs="*")
    p.set_defaults(func=cmd_benchmark)
    p = sub.add_parser("analyze", parents=[common], help="solve a stored design")
    p.add_argument("config")
    p.add_argument("dump")
    p.add_argument("overrides", nargs="*")
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("MSFEM_TOPOPT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    # overrides may follow the options; argparse leaves those unmatched
    bad = [a for a in extra if a.startswith("-") or "=" not in a]
    if bad:
        ap.error(f"unrecognized arguments: {' '.join(bad)}")
    args.overrides = list(args.overrides) + extra
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
