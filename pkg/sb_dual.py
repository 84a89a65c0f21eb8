"""Pont de Schrödinger martingale : valeur duale u(t0, X0, Y0) - mu1.u1 - mu2.u2,
montée sur les potentiels et rapport Monte Carlo sur la densité optimale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import CflError, DomainError, GridError, InfeasibleError
from fokker_planck import dirac_2d, evolve_2d, simulate
from grids import Grid1D, Grid2D, TimeGrid
from hj_solver import solve_hj_sb, stable_time_grid_2d
from measures import GridMeasure, convex_order
from mot_dual import cell_widths, project_potential
from svm_models import model_from_config

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SbInstance:
    svm: object
    mu1: GridMeasure | None
    mu2: GridMeasure
    grid2: Grid2D
    tg: TimeGrid
    G: object = field(repr=False)
    boundary: str = "absorbing"

    def __post_init__(self):
        if not np.array_equal(self.mu2.nodes, self.grid2.first.nodes):
            raise GridError("mu2 doit vivre sur la grille en x du problème")
        if self.tg.has_jump and self.mu1 is None:
            raise DomainError("mu1 requis lorsque t0 <= T1")

    @property
    def x0(self):
        return self.svm.x0

    @property
    def y0(self):
        return self.svm.y0

    def check_feasible(self, tol=1e-10, mean_tol=1e-8):
        """Conditions nécessaires : moyennes égales à X0 et ordre convexe."""
        measures = [("mu2", self.mu2)] if self.mu1 is None else [("mu1", self.mu1), ("mu2", self.mu2)]
        for name, mu in measures:
            gap = abs(mu.mean() - self.x0)
            if gap > mean_tol:
                raise InfeasibleError(f"Moyenne de {name} différente de X0 (écart {gap:.3e})",
                                      report={"measure": name, "mean_gap": gap})
        if self.mu1 is not None:
            report = convex_order(self.mu1, self.mu2, tol, mean_tol)
            if not report:
                raise InfeasibleError(f"mu1 n'est pas dominée par mu2 (écart {report.violation:.3e})",
                                      report=report.to_dict())


def build_sb_instance(svm, mu1, mu2, ygrid, t0, T1, T2, settings):
    grid2 = Grid2D(mu2.grid, ygrid, "x")
    tg, G = stable_time_grid_2d(svm, grid2, t0, T1, T2, settings.lipschitz_bound,
                                settings.boundary, settings.cfl_safety)
    if not tg.has_jump:
        mu1 = None
    return SbInstance(svm, mu1, mu2, grid2, tg, G, settings.boundary)


def sb_instance_from_dict(conf, settings):
    """Instance JSON {model, mu1, mu2, t0, T1, T2, X0, Y0, grid?}."""
    model = dict(conf["model"], X0=conf["X0"], Y0=conf["Y0"])
    svm = model_from_config(model)
    grid_conf = conf.get("grid", {})
    if "x_lo" in grid_conf:
        xgrid = Grid1D.uniform(grid_conf["x_lo"], grid_conf["x_hi"], grid_conf.get("n_x", settings.n_x))
    else:
        nodes = [v for k in ("mu1", "mu2") for v in (conf.get(k) or {}).get("nodes", [])]
        if not nodes:
            raise DomainError("Grille en x absente et marges données par atomes")
        xgrid = Grid1D.uniform(min(nodes), max(nodes), grid_conf.get("n_x", settings.n_x))
    ygrid = Grid1D.uniform(grid_conf.get("y_lo", settings.y_lo), grid_conf.get("y_hi", settings.y_hi),
                           grid_conf.get("n_y", settings.n_y))
    mu1 = GridMeasure.from_dict(conf["mu1"], xgrid) if conf.get("mu1") else None
    mu2 = GridMeasure.from_dict(conf["mu2"], xgrid)
    return build_sb_instance(svm, mu1, mu2, ygrid, conf["t0"], conf["T1"], conf["T2"], settings)


@dataclass(frozen=True, eq=False)
class SbDualState:
    u1: np.ndarray
    u2: np.ndarray
    dual_value: float = float("nan")
    residual1: np.ndarray | None = None
    residual2: np.ndarray | None = None
    entropy: float = float("nan")
    history: tuple = ()
    status: str = "init"
    solution: object = field(default=None, repr=False)
    flow: object = field(default=None, repr=False)

    @classmethod
    def zeros(cls, grid):
        n = len(grid)
        return cls(np.zeros(n), np.zeros(n))

    @property
    def iterations(self):
        return len(self.history)

    def residual_norms(self):
        r1 = 0.0 if self.residual1 is None else float(np.max(np.abs(self.residual1)))
        r2 = 0.0 if self.residual2 is None else float(np.max(np.abs(self.residual2)))
        return {"T1": r1, "T2": r2}

    def trace_frame(self):
        return pd.DataFrame(list(self.history), columns=[
            "iteration", "value", "entropy", "residual_T1", "residual_T2", "gap_bound", "step"])

    def to_dict(self):
        return {"dual_value": self.dual_value, "entropy": self.entropy,
                "residual_norms": self.residual_norms(), "iterations": self.iterations,
                "status": self.status,
                "potentials": {"u1": self.u1.tolist(), "u2": self.u2.tolist()}}


def sb_dual_objective(u1, u2, svm, mu1, mu2, grid2, tg, G=None, boundary="absorbing"):
    """u(t0, X0, Y0) - mu1.u1 - mu2.u2 ; le terme mu1 disparaît si t0 > T1."""
    nx = grid2.shape[0]
    u1 = np.zeros(nx) if u1 is None else np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    sol = solve_hj_sb(svm, u1, u2, grid2, tg, boundary, G)
    value = float(grid2.interpolate(sol.initial, svm.x0, svm.y0)) - float(mu2.weights @ u2)
    if tg.has_jump:
        value -= float(mu1.weights @ u1)
    return value, sol


def _evaluate(instance, u1, u2):
    value, sol = sb_dual_objective(u1, u2, instance.svm, instance.mu1, instance.mu2,
                                   instance.grid2, instance.tg, instance.G, instance.boundary)
    m0 = dirac_2d(instance.grid2, instance.x0, instance.y0)
    flow = evolve_2d(instance.svm, sol, m0, instance.tg, instance.grid2, instance.G)
    r2 = flow.masses[-1].sum(axis=1) - instance.mu2.weights
    r1 = None
    if instance.tg.has_jump:
        r1 = flow.masses[instance.tg.jump_index].sum(axis=1) - instance.mu1.weights
    return value, sol, flow, r1, r2


def sb_ascend(init, instance, settings):
    """Même règle de pas que la montée MOT ; un plateau à résidu non nul est
    rapporté comme indice de non-admissibilité, pas comme une erreur."""
    instance.check_feasible(settings.order_tol, max(settings.mean_tol, 1e-8))
    grid = instance.grid2.first
    widths = cell_widths(grid)
    bound = settings.potential_bound
    project = lambda u: project_potential(u, grid, bound, settings.lipschitz_bound)
    jump = instance.tg.has_jump

    u1 = project(init.u1) if jump else np.zeros(len(grid))
    u2 = project(init.u2)
    value, sol, flow, r1, r2 = _evaluate(instance, u1, u2)
    history = []
    status = "max_iters"
    stalled = 0
    for it in range(settings.max_iters):
        norm1 = float(np.max(np.abs(r1))) if jump else 0.0
        norm2 = float(np.max(np.abs(r2)))
        gap_bound = 2.0 * bound * (float(np.abs(r2).sum()) + (float(np.abs(r1).sum()) if jump else 0.0))
        if max(norm1, norm2) <= settings.tol:
            status = "converged"
            break
        step = settings.step
        accepted = None
        for _ in range(settings.max_halvings + 1):
            c1 = project(u1 + step * r1 / widths) if jump else u1
            c2 = project(u2 + step * r2 / widths)
            try:
                trial = _evaluate(instance, c1, c2)
            except CflError:
                step *= 0.5
                continue
            if trial[0] >= value:
                accepted = (c1, c2) + trial
                break
            step *= 0.5
        history.append((it, value, flow.cost, norm1, norm2, gap_bound, step if accepted else 0.0))
        logger.debug("itération %d : valeur %.10g, entropie %.6g, résidus %.3e / %.3e",
                     it, value, flow.cost, norm1, norm2)
        if accepted is None:
            status = "plateau"
            break
        gain = accepted[2] - value
        u1, u2, value, sol, flow, r1, r2 = accepted
        stalled = stalled + 1 if gain <= settings.tol * (1.0 + abs(value)) else 0
        if stalled >= settings.plateau_patience:
            status = "plateau"
            break

    if status == "plateau":
        logger.info("Plateau avec résidu %.3e : contraintes peut-être non admissibles",
                    max(float(np.max(np.abs(r2))), float(np.max(np.abs(r1))) if jump else 0.0))
    logger.info("Montée MSB terminée (%s) après %d itérations : valeur %.8g, entropie %.6g",
                status, len(history), value, flow.cost)
    return SbDualState(u1, u2, value, r1, r2, flow.cost, tuple(history), status, sol, flow)


def jump_consistency(sol):
    "Écart maximal entre d_y u(T1-) et d_y u(T1+) : le saut ne dépend que de x."
    if sol.jump_index is None or sol.after_jump is None:
        return 0.0
    hy = sol.grid.second.steps[None, :]
    before = np.diff(sol.values[sol.jump_index], axis=1) / hy
    after = np.diff(sol.after_jump, axis=1) / hy
    return float(np.max(np.abs(before - after)))


def optimal_density_report(sol, svm, tg, n_paths, seed, u1=None, u2=None, energy=None,
                           chunk_size=8192, workers=4):
    """Diagnostics Monte Carlo de dP*/dP0 = exp(int alpha dW_perp - ½ int alpha²).

    Trajectoires sous P0 pour E[densité] et l'identité de portefeuille, sous P*
    pour l'entropie.
    """
    grid2 = sol.grid
    xnodes = grid2.first.nodes
    nx = xnodes.size
    u1 = np.zeros(nx) if u1 is None else np.asarray(u1, dtype=float)
    u2 = np.asarray(sol.terminal[:, 0] if u2 is None else u2, dtype=float)

    ref = simulate(svm, sol, n_paths, tg, seed, "reference", hedge=sol,
                   chunk_size=chunk_size, workers=workers)
    tilted = simulate(svm, sol, n_paths, tg, seed, "tilted", chunk_size=chunk_size, workers=workers)
    mean_w, se_w = ref.mean_weight()
    ent, se_ent = tilted.entropy()
    finite = bool(np.all(np.isfinite(ref.log_weight)) and np.all(np.isfinite(tilted.log_weight)))

    u_t0 = float(grid2.interpolate(sol.initial, svm.x0, svm.y0))
    x_t2 = ref.X[:, ref.column(tg.n_steps)]
    predicted = u_t0 - np.interp(x_t2, xnodes, u2) - ref.hedge
    if tg.has_jump:
        predicted -= np.interp(ref.X[:, ref.column(tg.jump_index)], xnodes, u1)
    residual = ref.log_weight - predicted

    report = {
        "n_paths": int(n_paths), "seed": int(seed), "finite_weights": finite,
        "density_mean": mean_w, "density_se": se_w,
        "density_pass": bool(abs(mean_w - 1.0) <= 3.0 * se_w + 1e-12),
        "entropy_mc": ent, "entropy_se": se_ent,
        "entropy_nonnegative": bool(ent >= -3.0 * se_ent - 1e-12),
        "portfolio_mean": float(residual.mean()),
        "portfolio_rms": float(np.sqrt(np.mean(residual**2))),
    }
    if energy is not None:
        report["entropy_pde"] = float(energy)
        report["entropy_pass"] = bool(abs(ent - energy) <= 3.0 * se_ent + 1e-12)
    if not finite:
        logger.error("Poids de Girsanov non finis : diagnostic invalide")
    return report
