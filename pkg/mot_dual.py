"""Montée duale pour le transport martingale à trois marges (ou deux si T0 > T1).

La valeur duale est  mu0.u(T0) - mu1.u1 - mu2.u2  où u résout l'équation de
Hamilton-Jacobi avec saut u1 en T1. Les sur-gradients sont les résidus
m*_{T1} - mu1 et m*_{T2} - mu2 du flot primal associé à u.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from errors import DomainError, GridError, InfeasibleError, TableRangeError, TruncationError
from fokker_planck import evolve_1d, evolve_kernels
from grids import Grid1D, TimeGrid
from hamiltonian import hamiltonian_from_settings, make_lagrangian
from hj_solver import mot_step, mot_time_grid, solve_hj_mot
from measures import GridMeasure, convex_order

logger = logging.getLogger(__name__)

A_RANGE_FACTOR = 2.1
A_SLOPE_MARGIN = 1.05
MAX_TABLE_DOUBLINGS = 12
LBFGS_RESTARTS = 8
OBSERVED_MASS = 1e-8


@dataclass(frozen=True, eq=False)
class MotInstance:
    """Marges sur une grille commune, hamiltonien tabulé et grille de temps."""

    mu0: GridMeasure
    mu1: GridMeasure | None
    mu2: GridMeasure
    h: object
    tg: TimeGrid
    boundary: str = "absorbing"
    scheme: str = "envelope"

    def __post_init__(self):
        grid = self.mu2.grid
        for name, mu in (("mu0", self.mu0), ("mu1", self.mu1)):
            if mu is not None and mu.grid is not grid and not np.array_equal(mu.nodes, grid.nodes):
                raise GridError(f"{name} n'est pas sur la grille de mu2")
        if self.tg.has_jump and self.mu1 is None:
            raise DomainError("mu1 requis lorsque T0 <= T1")

    @property
    def grid(self):
        return self.mu2.grid

    @property
    def two_marginal(self):
        return not self.tg.has_jump

    def check_order(self, tol=1e-10, mean_tol=1e-10):
        "Ordre convexe des marges consécutives ; InfeasibleError sinon."
        pairs = [("mu0", self.mu0, "mu2", self.mu2)] if self.two_marginal else [
            ("mu0", self.mu0, "mu1", self.mu1), ("mu1", self.mu1, "mu2", self.mu2)]
        for left, mu, right, nu in pairs:
            report = convex_order(mu, nu, tol, mean_tol)
            if not report:
                raise InfeasibleError(
                    f"{left} n'est pas dominée par {right} en ordre convexe "
                    f"(écart {report.violation:.3e}, moyennes {report.mean_gap:.3e})",
                    report={"pair": [left, right], **report.to_dict()})


def cfl_cap(grid, tg):
    "Borne b_cap = min(h+ h-) / max(dt) rendant chaque pas explicite monotone."
    return float(np.min(grid.h_plus * grid.h_minus)) / float(np.max(tg.dt))


def variance_cap(grid, tg):
    "Plus grand b atteignable en un pas : variance ((hi - lo)/2)² sur le plus petit dt."
    return (0.5 * (grid.hi - grid.lo)) ** 2 / float(np.min(tg.dt))


def a_range(grid, lipschitz_bound):
    "Demi-largeur de la table en a couvrant D²u/2 pour des potentiels Lambda-lipschitziens."
    return A_RANGE_FACTOR * lipschitz_bound / float(np.min(grid.steps))


def slope_range(settings, b_max):
    "Demi-largeur de la table en a couvrant -L'(b) sur [0, b_max] (différences finies)."
    spec = make_lagrangian(settings.lagrangian, settings.gamma, settings.power, settings.ellipticity,
                           settings.lagrangian_csv, b_max=b_max)
    eps = 1e-6 * b_max
    left = float(spec(eps) - spec(0.0)) / eps
    right = float(spec(b_max) - spec(b_max - eps)) / eps
    return A_SLOPE_MARGIN * max(abs(left), abs(right), 1.0)


def _uncapped_table(settings, a_max, n_b):
    "Double b_max tant que b* touche le bord de la grille en b."
    b_max = settings.b_max or 1.0
    for _ in range(MAX_TABLE_DOUBLINGS):
        try:
            return hamiltonian_from_settings(settings, a_max, b_max, n_b=n_b, capped=False)
        except TruncationError as exc:
            logger.debug("Table de H tronquée en b_max=%.4g", b_max)
            b_max = exc.suggested_b_max
    raise TruncationError(f"b* non borné sur [-{a_max:.4g}, {a_max:.4g}] après "
                          f"{MAX_TABLE_DOUBLINGS} doublements de b_max", suggested_b_max=b_max)


def build_instance(mu0, mu1, mu2, T0, T1, T2, settings, n_b=None):
    """Grille de temps, hamiltonien et instance selon ``settings.mot_scheme``.

    * envelope : pas fixés par steps_t1/steps_t2, table en b bornée par la plus
      grande variance atteignable en un pas ;
    * explicit plafonné : b <= borne CFL de la grille fixée ;
    * explicit libre : table non tronquée, puis grille en temps sous CFL.
    """
    tg = TimeGrid(T0, T1, T2, settings.steps_t1, settings.steps_t2)
    grid = mu2.grid
    if settings.mot_scheme == "envelope":
        b_max = settings.b_max or variance_cap(grid, tg)
        a_max = settings.a_max or slope_range(settings, b_max)
        h = hamiltonian_from_settings(settings, a_max, b_max, n_b=n_b, capped=True)
    elif settings.capped:
        a_max = settings.a_max or a_range(grid, settings.lipschitz_bound)
        h = hamiltonian_from_settings(settings, a_max, cfl_cap(grid, tg), n_b=n_b, capped=True)
    else:
        a_max = settings.a_max or a_range(grid, settings.lipschitz_bound)
        h = _uncapped_table(settings, a_max, n_b)
        tg = mot_time_grid(h, grid, T0, T1, T2, settings.cfl_safety)
        logger.info("Grille en temps sous CFL : %d + %d pas (b* <= %.4g)", tg.n1, tg.n2, h.b_sup)
    if not tg.has_jump:
        mu1 = None
    return MotInstance(mu0, mu1, mu2, h, tg, settings.boundary, settings.mot_scheme)


def two_marginal_instance(mu, nu, T0, T1, T2, settings):
    """Problème à deux marges U(T0, mu, nu) : T0 > T1, u1 = 0 et mu1 sans objet."""
    if not T0 > T1:
        raise DomainError(f"Le cas à deux marges demande T0 > T1 (T0={T0}, T1={T1})")
    return build_instance(mu, None, nu, T0, T1, T2, settings)


def instance_from_dict(conf, settings, n_b=None):
    """Instance JSON {mu0, mu1, mu2, T0, T1, T2, grid?} projetée sur la grille."""
    grid_conf = conf.get("grid", {})
    grid = Grid1D.uniform(grid_conf.get("lo", settings.x_lo), grid_conf.get("hi", settings.x_hi),
                          grid_conf.get("n", settings.n_x))
    mu0 = GridMeasure.from_dict(conf["mu0"], grid)
    mu1 = GridMeasure.from_dict(conf["mu1"], grid) if conf.get("mu1") else None
    mu2 = GridMeasure.from_dict(conf["mu2"], grid)
    return build_instance(mu0, mu1, mu2, conf["T0"], conf["T1"], conf["T2"], settings, n_b)


@dataclass(frozen=True, eq=False)
class DualState:
    u1: np.ndarray
    u2: np.ndarray
    dual_value: float = float("nan")
    residual1: np.ndarray | None = None
    residual2: np.ndarray | None = None
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
        return pd.DataFrame(list(self.history),
                            columns=["iteration", "value", "residual_T1", "residual_T2", "step"])

    def to_dict(self):
        return {"dual_value": self.dual_value, "residual_norms": self.residual_norms(),
                "iterations": self.iterations, "status": self.status,
                "potentials": {"u1": self.u1.tolist(), "u2": self.u2.tolist()}}


def dual_objective(u1, u2, mu0, mu1, mu2, h, grid, tg, boundary="absorbing", scheme="explicit"):
    """Valeur duale et solution HJ utilisée ; le terme mu1 disparaît si T0 > T1."""
    n = len(grid)
    u1 = np.zeros(n) if u1 is None else np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    sol = solve_hj_mot(h, u1, u2, grid, tg, boundary, scheme)
    value = float(mu0.weights @ sol.initial) - float(mu2.weights @ u2)
    if tg.has_jump:
        value -= float(mu1.weights @ u1)
    return value, sol


def _evaluate(instance, u1, u2):
    value, sol = dual_objective(u1, u2, instance.mu0, instance.mu1, instance.mu2, instance.h,
                                instance.grid, instance.tg, instance.boundary, instance.scheme)
    if instance.scheme == "envelope":
        flow = evolve_kernels(sol, instance.mu0, instance.h.lagrangian)
    else:
        flow = evolve_1d(sol.controls, instance.mu0, instance.tg, instance.h.lagrangian)
    r2 = flow.masses[-1] - instance.mu2.weights
    r1 = None
    if instance.tg.has_jump:
        r1 = flow.masses[instance.tg.jump_index] - instance.mu1.weights
    return value, sol, flow, r1, r2


def _norms(r1, r2):
    n1 = 0.0 if r1 is None else float(np.max(np.abs(r1)))
    return n1, float(np.max(np.abs(r2)))


def cell_widths(grid):
    "Largeur des cellules duales (demi-cellules aux extrémités)."
    h = grid.steps
    return 0.5 * (np.concatenate([[0.0], h]) + np.concatenate([h, [0.0]]))


def project_potential(u, grid, bound, lipschitz):
    """Projection sur {|pentes| <= Lambda, |u| <= M} : pentes écrêtées,
    recentrage, puis écrêtage des valeurs."""
    u = np.asarray(u, dtype=float)
    h = grid.steps
    slopes = np.clip(np.diff(u) / h, -lipschitz, lipschitz)
    out = u[0] + np.concatenate([[0.0], np.cumsum(slopes * h)])
    out -= 0.5 * (out.max() + out.min())
    return np.clip(out, -bound, bound)


def ascend(init, instance, settings):
    """Montée duale depuis ``init`` : L-BFGS-B (par défaut) ou sur-gradient."""
    instance.check_order(settings.order_tol, settings.mean_tol)
    if settings.ascent == "lbfgs":
        return _lbfgs_ascent(init, instance, settings)
    return _supergradient_ascent(init, instance, settings)


def _supergradient_ascent(init, instance, settings):
    """Sur-gradient à pas fixe avec divisions par deux.

    Le pas s'applique au résidu rapporté à la largeur des cellules (résidu en
    densité). Un pas n'est accepté que s'il n'abaisse pas la valeur.
    """
    grid = instance.grid
    widths = cell_widths(grid)
    project = lambda u: project_potential(u, grid, settings.potential_bound, settings.lipschitz_bound)
    jump = instance.tg.has_jump

    u1 = project(init.u1) if jump else np.zeros(len(grid))
    u2 = project(init.u2)
    value, sol, flow, r1, r2 = _evaluate(instance, u1, u2)
    history = []
    status = "max_iters"
    stalled = 0
    for it in range(settings.max_iters):
        norm1, norm2 = _norms(r1, r2)
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
            except TableRangeError:
                step *= 0.5
                continue
            if trial[0] >= value:
                accepted = (c1, c2) + trial
                break
            step *= 0.5
        history.append((it, value, norm1, norm2, step if accepted else 0.0))
        logger.debug("itération %d : valeur %.10g, résidus %.3e / %.3e, pas %.3g",
                     it, value, norm1, norm2, step)
        if accepted is None:
            status = "plateau"
            break
        gain = accepted[2] - value
        u1, u2, value, sol, flow, r1, r2 = accepted
        stalled = stalled + 1 if gain <= settings.tol * (1.0 + abs(value)) else 0
        if stalled >= settings.plateau_patience:
            status = "plateau"
            break

    logger.info("Montée MOT terminée (%s) après %d itérations : valeur %.8g",
                status, len(history), value)
    return DualState(u1, u2, value, r1, r2, tuple(history), status, sol, flow)


def slopes_to_potential(z, steps):
    "u = c + cumsum(s h) à partir de z = (c, s_0, ..., s_{n-2})."
    return z[0] + np.concatenate([[0.0], np.cumsum(z[1:] * steps)])


def potential_to_slopes(u, steps):
    return np.concatenate([[u[0]], np.diff(u) / steps])


def slope_gradient(g, steps):
    "Gradient en (c, s) de la forme linéaire u -> g.u."
    tail = np.cumsum(g[::-1])[::-1]
    return np.concatenate([[tail[0]], steps * tail[1:]])


class _Tracker:
    "Meilleure évaluation rencontrée et historique des itérations L-BFGS-B."

    def __init__(self, instance, settings, blocks):
        self.instance = instance
        self.settings = settings
        self.blocks = blocks
        self.steps = instance.grid.steps
        self.best = None
        self.last = None
        self.start = None
        self.history = []

    def unpack(self, z):
        n = len(self.instance.grid)
        us = [slopes_to_potential(z[k * n:(k + 1) * n], self.steps) for k in range(self.blocks)]
        return (us[0], us[1]) if self.blocks == 2 else (np.zeros(n), us[0])

    def __call__(self, z):
        u1, u2 = self.unpack(z)
        value, sol, flow, r1, r2 = _evaluate(self.instance, u1, u2)
        grads = ([r1] if self.blocks == 2 else []) + [r2]
        grad = np.concatenate([slope_gradient(g, self.steps) for g in grads])
        self.last = (z.copy(), value, r1, r2)
        if self.best is None or value > self.best[2]:
            self.best = (u1, u2, value, sol, flow, r1, r2)
        return -value, -grad

    def record(self, zk):
        z, value, r1, r2 = self.last
        if not np.array_equal(z, zk):
            self(zk)
            z, value, r1, r2 = self.last
        previous = self.history[-1][5] if self.history else self.start
        norm1, norm2 = _norms(r1, r2)
        move = float(np.max(np.abs(zk - previous)))
        self.history.append((len(self.history), value, norm1, norm2, move, zk.copy()))
        logger.debug("itération %d : valeur %.10g, résidus %.3e / %.3e", len(self.history) - 1,
                     value, norm1, norm2)
        if max(norm1, norm2) <= self.settings.tol:
            raise StopIteration


def _lbfgs_ascent(init, instance, settings):
    """L-BFGS-B sur (niveau, pentes) de chaque potentiel, pentes bornées par Lambda.

    La valeur duale est invariante par translation des potentiels : le niveau
    reste borné par M. Relance depuis le meilleur point tant que la valeur progresse.
    """
    grid = instance.grid
    n = len(grid)
    jump = instance.tg.has_jump
    blocks = 2 if jump else 1
    M, lam = settings.potential_bound, settings.lipschitz_bound
    bounds = [(-M, M)] + [(-lam, lam)] * (n - 1)
    bounds = bounds * blocks
    lower = np.array([b[0] for b in bounds])
    upper = np.array([b[1] for b in bounds])
    start = [np.asarray(init.u1, dtype=float)] if jump else []
    start.append(np.asarray(init.u2, dtype=float))
    z = np.clip(np.concatenate([potential_to_slopes(u, grid.steps) for u in start]), lower, upper)

    tracker = _Tracker(instance, settings, blocks)
    tracker(z)
    for _ in range(LBFGS_RESTARTS):
        u1, u2, value, sol, flow, r1, r2 = tracker.best
        if max(_norms(r1, r2)) <= settings.tol:
            break
        remaining = settings.max_iters - len(tracker.history)
        if remaining <= 0:
            break
        z = np.concatenate([potential_to_slopes(u, grid.steps) for u in ((u1, u2) if jump else (u2,))])
        tracker.start = z
        before = value
        res = minimize(tracker, z, jac=True, method="L-BFGS-B", bounds=bounds, callback=tracker.record,
                       options={"maxiter": remaining, "maxfun": 2 * remaining, "ftol": 1e-12,
                                "gtol": 0.1 * settings.tol})
        logger.debug("L-BFGS-B : %s", res.message)
        if tracker.best[2] - before <= settings.tol * (1.0 + abs(before)):
            break

    u1, u2, value, sol, flow, r1, r2 = tracker.best
    if max(_norms(r1, r2)) <= settings.tol:
        status = "converged"
    elif len(tracker.history) >= settings.max_iters:
        status = "max_iters"
    else:
        status = "plateau"
    history = tuple(row[:5] for row in tracker.history)
    logger.info("Montée MOT (L-BFGS-B) terminée (%s) après %d itérations : valeur %.8g",
                status, len(history), value)
    return DualState(u1, u2, value, r1, r2, history, status, sol, flow)


def observed_rate(state):
    "Plus grand b porté par une masse non négligeable du flot optimal."
    b = np.asarray(state.solution.controls)
    mass = state.flow.masses[:-1]
    return float(b[mass > OBSERVED_MASS].max(initial=0.0))


def extract_optimal_diffusion(sol, h):
    """b(t_k, x) = -H'(D²u(t_{k+1})/2) = b*(a), nul aux bords absorbants.

    Pour le schéma enveloppe : variance du noyau optimal divisée par dt.
    """
    if sol.metadata.get("scheme") == "envelope":
        b = np.array(sol.controls, dtype=float)
    else:
        grid = sol.grid
        layers = []
        for k in range(sol.times.size - 1):
            a = 0.5 * grid.second_difference(sol.values[k + 1])
            b = h.b_star(a)
            if sol.metadata.get("boundary") == "absorbing":
                b[[0, -1]] = 0.0
            layers.append(b)
        b = np.array(layers)
    if np.any(b < 0):
        raise DomainError("Diffusion optimale négative : table de H incohérente")
    return b


def certify_supersolution(sol, h, tol=1e-8):
    """Vérifie (u(t_k) - S_dt u(t_{k+1})) / dt <= tol aux noeuds intérieurs,
    S_dt étant le pas rétrograde du schéma qui a produit ``sol``.

    Renvoie (ok, violation maximale, (pas, noeud) du maximum).
    """
    grid = sol.grid
    scheme = sol.metadata.get("scheme", "explicit")
    boundary = sol.metadata.get("boundary", "absorbing")
    worst, where = -np.inf, None
    for k in range(sol.times.size - 1):
        dt = sol.times[k + 1] - sol.times[k]
        upper = sol.values[k + 1]
        lower = sol.values[k]
        if k == sol.jump_index and sol.after_jump is not None:
            lower = sol.after_jump
        residual = (lower - mot_step(h, grid, upper, dt, boundary, scheme)) / dt
        inner = residual[1:-1]
        i = int(np.argmax(inner))
        if inner[i] > worst:
            worst, where = float(inner[i]), (k, i + 1)
    worst = max(worst, 0.0)
    return worst <= tol, worst, where


def envelope_residual(sol, flow, u1, u2, mu0):
    """mu0.u(T0) - (coût + m_{T1}.u1 + m_{T2}.u2) : nul à la résolution de la table près."""
    lhs = float(mu0.weights @ sol.initial)
    rhs = flow.cost + float(flow.masses[-1] @ np.asarray(u2, dtype=float))
    if sol.jump_index is not None:
        rhs += float(flow.masses[sol.jump_index] @ np.asarray(u1, dtype=float))
    return lhs - rhs
