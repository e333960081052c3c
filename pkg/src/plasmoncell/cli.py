"""Command line interface: ``plasmoncell {mesh,solve-cell,optimize,gradient-check}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .cellproblem import CellProblem
from .config import ConfigError, RunConfig
from .cost import CostEvaluator
from .fem import SolverError
from .geometry import MeshError, generate_reference_mesh, save_mesh
from .io import complex_entries, load_deformation, mesh_hash, save_deformation, write_iteration_log, write_json, write_vtk
from .kinematics import DegenerateDeformationError
from .optimizer import HistoryCorruptionError, LineSearchError, optimize

log = logging.getLogger("plasmoncell")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEGENERATE = 3
EXIT_SOLVER = 4
EXIT_LINE_SEARCH = 5

FD_STEPS = tuple(10.0 ** -k for k in range(2, 10))


class _Failure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load(args) -> RunConfig:
    cfg = RunConfig() if args.config is None else RunConfig.load(args.config)
    return cfg


def _mesh(cfg: RunConfig, refinements: int | None = None):
    g = cfg.geometry
    return generate_reference_mesh(g.radius, g.refinements if refinements is None else refinements)


def _deformation(cfg: RunConfig, mesh):
    if not cfg.geometry.deformation:
        return None
    try:
        return load_deformation(cfg.geometry.deformation, mesh.n_vertices)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"deformation file: {exc}") from None


def _emit(payload: dict):
    print(json.dumps(payload, indent=2))


# -- subcommands -------------------------------------------------------------


def cmd_mesh(args) -> int:
    cfg = _load(args)
    mesh = _mesh(cfg)
    if args.out:
        try:
            save_mesh(mesh, args.out)
        except OSError as exc:
            raise _Failure(EXIT_CONFIG, f"cannot write mesh to {args.out}: {exc.strerror}") from None
    print(f"cells: {mesh.n_cells}")
    print(f"vertices: {mesh.n_vertices}")
    print(f"interface faces: {len(mesh.interface_faces)}")
    return EXIT_OK


def solve_cell(cfg: RunConfig, out: Path | None = None) -> dict:
    mesh = _mesh(cfg)
    problem = CellProblem(mesh, cfg.material_parameters())
    q = _deformation(cfg, mesh)
    kin = problem.kinematics(q)
    if not kin.admissible:
        raise DegenerateDeformationError(f"deformation folds the cell (min J = {kin.min_J:.3e})")
    t0 = time.perf_counter()
    cs = problem.assemble(kin=kin)
    chi = problem.solve(cs)
    eff = problem.effective_tensor(kin, chi.values)
    target = cfg.cost_config().target
    payload = {
        "eps_eff": complex_entries(eff.value),
        "deviation_percent": eff.deviation_percent(target),
        "relative_deviation_percent": 100 * eff.relative_deviation(target),
        "min_J": kin.min_J,
        "cells": mesh.n_cells,
        "condition_estimate": cs.factorization.condition,
        "solve_seconds": time.perf_counter() - t0,
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_vtk(
            out / "corrector.vtk", mesh,
            point_data={"q": kin.q, "chi_x_re": chi.values[:, 0].real, "chi_x_im": chi.values[:, 0].imag,
                        "chi_y_re": chi.values[:, 1].real, "chi_y_im": chi.values[:, 1].imag},
            cell_data={"min_J": kin.J.min(axis=1)},
            displacement=kin.q,
        )
        write_json(out / "cell.json", payload)
    return payload


def cmd_solve_cell(args) -> int:
    cfg = _load(args)
    _emit(solve_cell(cfg, Path(args.out) if args.out else None))
    return EXIT_OK


def run_optimization(cfg: RunConfig, out: Path, fixed_order: bool = False) -> tuple[dict, int]:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    mesh = _mesh(cfg)
    mat, cost = cfg.material_parameters(), cfg.cost_config()
    ev = CostEvaluator(mesh, mat, cost)
    q0 = _deformation(cfg, mesh)
    q0 = None if q0 is None else ev.control.from_vertices(q0)
    o = cfg.optimizer
    every = cfg.output.vtk_every

    def snapshot(record, st):
        if every and record.step % every == 0:
            write_vtk(out / f"deformed_{record.step:05d}.vtk", mesh, point_data={"q": st.kin.q},
                      cell_data={"min_J": st.kin.J.min(axis=1)}, displacement=st.kin.q)

    res = optimize(
        mesh, mat, cost, cfg.schedule(), tol=o.tol, max_steps=o.max_steps,
        beta_ls=o.armijo_beta, gamma=o.armijo_gamma, history_cap=o.history_cap or None,
        q0=q0, evaluator=ev, callback=snapshot,
    )
    q_vert = ev.control.to_vertices(res.q)
    save_deformation(out / "q_final.txt", q_vert)
    write_vtk(out / "deformed_final.vtk", mesh, point_data={"q": q_vert}, displacement=q_vert)
    log_name = "iterations." + cfg.output.log_format
    write_iteration_log(out / log_name, res.records, cfg.output.log_format)
    first, last = res.records[0], res.records[-1]
    report = {
        "eps_eff": complex_entries(res.eps_eff.value),
        "initial_deviation_percent": first.deviation_percent,
        "final_deviation_percent": last.deviation_percent,
        "initial_relative_deviation_percent": first.relative_deviation_percent,
        "final_relative_deviation_percent": last.relative_deviation_percent,
        "steps": res.steps,
        "converged": res.converged,
        "line_search_failed": res.line_search_failed,
        "message": res.message,
        "wall_time": res.wall_time,
        "mesh_hash": mesh_hash(mesh),
        "fixed_order": fixed_order,
        "iteration_log": log_name,
        "records": [r.as_dict() for r in res.records],
    }
    write_json(out / "report.json", report)
    return report, EXIT_LINE_SEARCH if res.line_search_failed else EXIT_OK


def cmd_optimize(args) -> int:
    cfg = _load(args)
    out = Path(args.out or cfg.output.directory)
    report, code = run_optimization(cfg, out, args.fixed_order)
    summary = {k: v for k, v in report.items() if k != "records"}
    _emit(summary)
    return code


def gradient_check(cfg: RunConfig, seed: int = 0) -> dict:
    """Compare adjoint directional derivatives with central differences."""
    mesh = _mesh(cfg, cfg.check.refinements)
    ev = CostEvaluator(mesh, cfg.material_parameters(), cfg.cost_config())
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(cfg.check.directions):
        amp = cfg.check.amplitude
        while True:
            q = amp * rng.standard_normal(ev.control.n_dofs)
            st = ev.state(q)
            if st.breakdown.admissible:
                break
            amp *= 0.5
        h = rng.standard_normal(q.size)
        exact = float(ev.shape_derivative(st) @ h)
        sweep = []
        for t in FD_STEPS:
            fd = (ev.cost(q + t * h) - ev.cost(q - t * h)) / (2 * t)
            if not np.isfinite(fd):
                continue  # step leaves the admissible set
            sweep.append({"step": t, "fd": fd, "error": abs(fd - exact) / max(abs(fd), 1e-14)})
        rows.append({"direction": k, "adjoint": exact, "best_error": min(s["error"] for s in sweep), "sweep": sweep})
    worst = max(r["best_error"] for r in rows)
    return {"refinements": cfg.check.refinements, "seed": seed, "max_best_error": worst, "passed": worst < 1e-4, "directions": rows}


def cmd_gradient_check(args) -> int:
    cfg = _load(args)
    result = gradient_check(cfg, args.seed)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_json(args.out, result)
    _emit(result)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plasmoncell", description="Shape optimization of periodic plasmonic unit cells.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="INI configuration file (defaults apply if omitted)")
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--seed", type=int, default=0, help="random seed")
        sp.add_argument("--fixed-order", action="store_true", help="deterministic assembly order")

    common(sub.add_parser("mesh", help="generate the reference mesh"), "mesh file to write")
    common(sub.add_parser("solve-cell", help="solve the cell problem and print the effective tensor"), "directory for VTK/JSON output")
    common(sub.add_parser("optimize", help="run the shape optimization"), "run directory (overrides [output] directory)")
    common(sub.add_parser("gradient-check", help="adjoint versus finite-difference check"), "JSON file for the result table")
    return p


COMMANDS = {"mesh": cmd_mesh, "solve-cell": cmd_solve_cell, "optimize": cmd_optimize, "gradient-check": cmd_gradient_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _Failure as exc:
        code, msg = exc.code, str(exc)
    except (ConfigError, MeshError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except DegenerateDeformationError as exc:
        code, msg = EXIT_DEGENERATE, str(exc)
    except (SolverError, HistoryCorruptionError, MemoryError) as exc:
        code, msg = EXIT_SOLVER, str(exc)
    except LineSearchError as exc:
        code, msg = EXIT_LINE_SEARCH, str(exc)
    _emit({"error": msg, "exit_code": code})
    return code


if __name__ == "__main__":
    sys.exit(main())
