"""Plate-with-hole benchmark driver behind the ``run`` command."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import export
from .config import ConfigError, RunConfig
from .fem import (DofMap, Discretization, Mesh, MeshError, build_quarter_plate_mesh,
                  prescribed_values)
from .material import DimMode, IsotropicHardening, VonMisesModel, elastic_moduli, von_mises_stress
from .material import yield_value
from .solver import ReducedDual, contraction_constants, is_quadratic_tail, observed_order

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def build_model(cfg: RunConfig) -> VonMisesModel:
    m = cfg.material
    H = None
    if m.kinematic_modulus is not None:
        H = elastic_moduli(m.kinematic_modulus, m.nu, DimMode.PLANE_STRESS)
    return VonMisesModel(DimMode.PLANE_STRESS, elastic_moduli(m.E, m.nu, DimMode.PLANE_STRESS),
                         m.sigma_y, IsotropicHardening(m.h, m.q, m.delta), H)


def build_dofmap(mesh: Mesh, cfg: RunConfig) -> DofMap:
    """Symmetry constraints (where the mesh has them) plus the loaded DOFs."""
    lo = cfg.loading
    if lo.node_set not in mesh.node_sets:
        raise ConfigError(f"[loading] node_set {lo.node_set!r} is not defined by the mesh")
    fixed = [(name, d) for name, d in (("symmetry_x", 0), ("symmetry_y", 1))
             if name in mesh.node_sets]
    return DofMap.from_sets(mesh, fixed + [(lo.node_set, lo.direction)])


@dataclass
class IncrementSummary:
    increment: int
    converged: bool
    iterations: int
    final_residual: float
    max_backtracks: int
    noise_steps: int
    duality_gap: float
    objective: float
    max_yield_value: float
    yielded_points: int
    strict_active_set: bool
    contraction: list = field(default_factory=list)
    observed_order: float = float("nan")
    quadratic_tail: bool = False

    def as_dict(self):
        # JSON has no NaN
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in vars(self).items()}


@dataclass
class BenchmarkResult:
    exit_code: int
    increments: list
    problem: ReducedDual
    reports: list

    @property
    def converged(self):
        return self.exit_code == EXIT_OK


def strict_active_set(model, results, rel=1e-10):
    """Every point is either clearly elastic or clearly plastic."""
    lam = results.lam
    elastic = lam <= model.active_threshold
    phi = yield_value(model, results.sigma, results.zeta_kh, results.zeta_ih)
    return bool(np.all(phi[elastic] < -rel * model.sigma_y))


def run_benchmark(cfg: RunConfig, mesh: Mesh = None, out_dir=None, write=True):
    """Run every load increment and write the configured artifacts.

    Returns a :class:`BenchmarkResult`; its ``exit_code`` is 0 when all
    increments converged and 2 otherwise.
    """
    model = build_model(cfg)
    if mesh is None:
        mesh = build_quarter_plate_mesh(cfg.geometry)
    try:
        dofmap = build_dofmap(mesh, cfg)
        disc = Discretization(mesh, dofmap)
    except MeshError as exc:
        raise ConfigError(f"mesh: {exc}") from exc
    problem = ReducedDual(disc, model)
    out_dir = out_dir or cfg.output.directory
    if write:
        os.makedirs(out_dir, exist_ok=True)
    s_grid = np.linspace(0.0, cfg.output.s_max, cfg.output.s_points)
    wanted = set(cfg.output.line_search)
    summaries, reports = [], []
    exit_code = EXIT_OK

    for inc, step in enumerate(cfg.loading.increments, start=1):
        mu_prsc = prescribed_values(mesh, dofmap, {(cfg.loading.node_set, cfg.loading.direction): step})

        def profile(k, ev, dmu, inc=inc, mu_prsc=mu_prsc):
            if write and (inc, k) in wanted:
                table = problem.line_search_profile(ev, dmu, s_grid, mu_prsc, cfg.solver.beta)
                export.write_line_search(os.path.join(out_dir, f"line_search_inc{inc}_iter{k}.csv"),
                                         table)

        mu, ev, report = problem.newton_solve(mu_prsc, cfg=cfg.solver, on_iteration=profile)
        reports.append(report)
        if write and cfg.output.residuals:
            export.write_residuals(os.path.join(out_dir, f"residuals_inc{inc}.csv"), report.records)
        res = ev.results
        phi = yield_value(model, res.sigma, res.zeta_kh, res.zeta_ih)
        c = contraction_constants(report.residuals) if report.iterations > 2 else np.array([])
        summaries.append(IncrementSummary(
            increment=inc, converged=report.converged, iterations=report.iterations,
            final_residual=report.residuals[-1],
            max_backtracks=max((r.backtracks or 0) for r in report.records),
            noise_steps=sum(r.noise_step for r in report.records),
            duality_gap=problem.duality_gap(ev, mu_prsc), objective=ev.objective,
            max_yield_value=float(phi.max()), yielded_points=int(np.count_nonzero(res.yielded)),
            strict_active_set=strict_active_set(model, res),
            contraction=[float(v) for v in c],
            observed_order=observed_order(report.residuals),
            quadratic_tail=is_quadratic_tail(report.residuals) if report.iterations > 2 else False,
        ))
        if not report.converged:
            log.error("increment %d did not converge in %d iterations", inc, report.iterations)
            exit_code = EXIT_DIVERGED
            break
        problem.commit_increment(mu, ev, mu_prsc, report)

    if write:
        vm = von_mises_stress(model, problem.sigma)
        if cfg.output.fields:
            export.write_vtk(os.path.join(out_dir, "fields.vtk"), mesh,
                             {"von_mises": vm.reshape(-1, 4).mean(axis=1),
                              "yield_code": export.yield_codes(problem.first_yield)},
                             {"displacement": problem.u.reshape(-1, 2)})
            export.write_ip_fields(os.path.join(out_dir, "ip_fields.csv"), disc, problem.sigma, vm,
                                   problem.alpha_ih, problem.first_yield)
        export.write_json(os.path.join(out_dir, "summary.json"), {
            "converged": exit_code == EXIT_OK,
            "total_iterations": sum(s.iterations for s in summaries),
            "n_elements": mesh.n_elements,
            "n_free_dofs": dofmap.n_free,
            "increments": [s.as_dict() for s in summaries],
        })
    return BenchmarkResult(exit_code, summaries, problem, reports)
