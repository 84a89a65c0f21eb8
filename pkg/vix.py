"""Calibration jointe SPX / VIX : famille post-T1 paramétrée par delta, fonction Phi,
valeur pré-T1, valeur duale complète et borne sur les puts VIX.

Coordonnée logarithmique w = log x partout ; V = E[-log X_T2 + log X_T1 | F_T1].
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import isotonic_regression

from errors import CflError, DomainError, GridError, HypothesisError, InfeasibleError, TableRangeError
from fokker_planck import dirac_2d, evolve_2d, simulate
from grids import Grid1D, Grid2D, TimeGrid
from hj_solver import solve_hj_log, solve_hj_vix_post, stable_time_grid_2d
from measures import GridMeasure, convex_order
from mot_dual import cell_widths, project_potential
from svm_models import model_from_config

logger = logging.getLogger(__name__)

NODE_CHUNK = 64
CONCAVITY_TOL = 1e-9


def vix_index(V, T1, T2):
    """VIX = 100 sqrt(2 V / (T2 - T1))."""
    V = np.asarray(V, dtype=float)
    if np.any(V < 0):
        raise DomainError(f"V doit être positif (min {V.min():.3e})")
    if not T2 > T1:
        raise DomainError("Il faut T2 > T1")
    out = 100.0 * np.sqrt(2.0 * V / (T2 - T1))
    return float(out) if out.ndim == 0 else out


def vix_put_bound(mu3, V, strikes, T1, T2):
    """E[(K - VIX)+] sous P contre la borne int (K - 100 sqrt(2x/(T2-T1)))+ dmu3,
    strike par strike, à 3 erreurs types près."""
    V = np.asarray(V, dtype=float)
    if np.any(V < 0):
        raise DomainError("Échantillons de V négatifs")
    if np.any(mu3.support < 0):
        raise DomainError("mu3 doit être portée par [0, +inf)")
    vix = vix_index(V, T1, T2)
    target = vix_index(np.maximum(mu3.nodes, 0.0), T1, T2)
    rows = []
    for K in np.asarray(strikes, dtype=float):
        payoff = np.maximum(K - vix, 0.0)
        price = float(payoff.mean())
        se = float(payoff.std(ddof=1) / math.sqrt(payoff.size)) if payoff.size > 1 else 0.0
        bound = float(mu3.weights @ np.maximum(K - target, 0.0))
        rows.append({"strike": float(K), "price": price, "se": se, "bound": bound,
                     "pass": bool(price <= bound + 3.0 * se + 1e-12),
                     "hard_violation": bool(price - 3.0 * se > bound + 1e-12)})
    return {"rows": rows, "passed": all(r["pass"] for r in rows),
            "hard_violations": int(sum(r["hard_violation"] for r in rows))}


def default_strikes(mu3, T1, T2, n=21):
    top = vix_index(max(float(mu3.nodes.max()), 0.0), T1, T2)
    return np.linspace(0.0, 1.2 * top, n)


def project_u3(u3, v_grid, slope_bound):
    """u3 convexe : pentes rendues croissantes (régression isotone pondérée par les
    pas), bornées, puis recentrage."""
    u3 = np.asarray(u3, dtype=float)
    dv = v_grid.steps
    slopes = np.diff(u3) / dv
    slopes = isotonic_regression(slopes, weights=dv, increasing=True).x
    slopes = np.clip(slopes, -slope_bound, slope_bound)
    out = np.concatenate([[0.0], np.cumsum(slopes * dv)])
    return out - 0.5 * (out.max() + out.min())


@dataclass(frozen=True, eq=False)
class VixInstance:
    svm: object
    mu1: GridMeasure
    mu2: GridMeasure
    mu3: GridMeasure
    grid2: Grid2D
    tg: TimeGrid
    deltas: np.ndarray
    v_grid: Grid1D
    G: object = field(repr=False)
    boundary: str = "absorbing"
    workers: int = 4

    def __post_init__(self):
        if not self.tg.t0 < self.tg.T1:
            raise DomainError("Le problème VIX demande t0 < T1")
        if self.grid2.coordinate != "w":
            raise GridError("La grille VIX doit être en coordonnée w = log x")
        if not np.array_equal(self.mu1.nodes, self.mu2.nodes):
            raise GridError("mu1 et mu2 doivent partager la grille en x")
        d = np.asarray(self.deltas, dtype=float)
        if d.size % 2 == 0 or not np.allclose(d, -d[::-1], atol=1e-12):
            raise GridError("La grille en delta doit être symétrique avec un nombre impair de noeuds")
        if np.any(self.mu3.support < 0):
            raise DomainError("mu3 doit être portée par [0, +inf)")
        vmin = self.svm.sigma_tilde_max(self.grid2.second.nodes) ** 2 * self.tau / 2.0
        if self.v_grid.lo < 0 or self.v_grid.hi < vmin * (1.0 - 1e-12):
            raise DomainError(f"Grille en v à étendre : v_max={self.v_grid.hi:.4g} < {vmin:.4g}")

    @property
    def xgrid(self):
        return self.mu2.grid

    @property
    def tau(self):
        return self.tg.T2 - self.tg.T1

    @property
    def post_times(self):
        return self.tg.times[self.tg.jump_index:]

    @property
    def pre_times(self):
        return self.tg.times[:self.tg.jump_index + 1]

    def check_feasible(self, tol=1e-10, mean_tol=1e-8):
        report = convex_order(self.mu1, self.mu2, tol, mean_tol)
        if not report:
            raise InfeasibleError(f"mu1 n'est pas dominée par mu2 (écart {report.violation:.3e})",
                                  report=report.to_dict())
        gap = abs(self.mu1.mean() - self.svm.x0)
        if gap > mean_tol:
            raise InfeasibleError(f"Moyenne de mu1 différente de X0 (écart {gap:.3e})",
                                  report={"mean_gap": gap})

    def to_w(self, u):
        "Fonction de x (noeuds de la grille en x) évaluée en exp(w)."
        return self.xgrid.interpolate(u, np.exp(self.grid2.first.nodes))

    def pull_back(self, mass_w):
        "Masse portée par les noeuds w envoyée sur la grille en x (interpolation transposée)."
        P = self.xgrid.interpolation_matrix(np.exp(self.grid2.first.nodes))
        return P.T @ mass_w


def build_vix_instance(svm, mu1, mu2, mu3, t0, T1, T2, settings):
    ygrid = Grid1D.uniform(settings.y_lo, settings.y_hi, settings.n_y)
    w0 = math.log(svm.x0)
    wgrid = Grid1D.uniform(w0 - settings.w_width, w0 + settings.w_width, settings.n_w)
    grid2 = Grid2D(wgrid, ygrid, "w")
    tg, G = stable_time_grid_2d(svm, grid2, t0, T1, T2, settings.lipschitz_bound,
                                settings.boundary, settings.cfl_safety)
    v_max = settings.v_factor * svm.sigma_tilde_max(ygrid.nodes) ** 2 * (T2 - T1) / 2.0
    v_grid = Grid1D.uniform(0.0, v_max, settings.n_v)
    if isinstance(mu3, dict):
        mu3 = GridMeasure.from_dict(mu3, v_grid)
    if mu3.nodes[mu3.weights > 0].max() > v_max:
        logger.warning("mu3 chargée au-delà de v_max=%.4g : masse ramenée au bord", v_max)
    mu3 = mu3.project(v_grid)
    deltas = np.linspace(-settings.delta_max, settings.delta_max, settings.n_delta)
    return VixInstance(svm, mu1, mu2, mu3, grid2, tg, deltas, v_grid, G, settings.boundary,
                       settings.workers)


def vix_instance_from_dict(conf, settings):
    """Instance JSON {model, mu1, mu2, mu3, t0, T1, T2, X0, Y0, grid?}."""
    svm = model_from_config(dict(conf["model"], X0=conf["X0"], Y0=conf["Y0"]))
    grid_conf = conf.get("grid", {})
    if "x_lo" in grid_conf:
        xgrid = Grid1D.uniform(grid_conf["x_lo"], grid_conf["x_hi"], grid_conf.get("n_x", settings.n_x))
    else:
        nodes = [v for k in ("mu1", "mu2") for v in conf[k].get("nodes", [])]
        if not nodes:
            raise DomainError("Grille en x absente et marges données par atomes")
        xgrid = Grid1D.uniform(min(nodes), max(nodes), grid_conf.get("n_x", settings.n_x))
    mu1 = GridMeasure.from_dict(conf["mu1"], xgrid)
    mu2 = GridMeasure.from_dict(conf["mu2"], xgrid)
    return build_vix_instance(svm, mu1, mu2, conf["mu3"], conf["t0"], conf["T1"], conf["T2"], settings)


# --- famille post-T1 ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PostT1Family:
    """Solutions v(., .; delta) sur [T1, T2], table U[i] = v(T1; delta_i) et
    solutions non contrôlées E0[u2(X_T2)] et E0[-log X_T2] + log x."""

    deltas: np.ndarray
    solutions: list = field(repr=False)
    table: np.ndarray = field(repr=False)
    reference: np.ndarray = field(repr=False)
    anchor: np.ndarray = field(repr=False)
    grid2: Grid2D = field(repr=False)
    diagnostics: dict = field(default_factory=dict)


def _delta_diagnostics(deltas, table, wnodes, sigma_max, tau):
    """Concavité discrète en delta et pente |dU/ddelta| <= (1 + |w|) max(1, s² tau / 2)."""
    dd = np.diff(deltas)[:, None, None]
    slopes = np.diff(table, axis=0) / dd
    concavity = float(np.max(np.diff(slopes, axis=0))) if slopes.shape[0] > 1 else 0.0
    ratio = float(np.max(np.abs(slopes) / (1.0 + np.abs(wnodes))[None, :, None]))
    bound = max(1.0, sigma_max**2 * tau / 2.0)
    return {"concave": bool(concavity <= CONCAVITY_TOL * (1.0 + float(np.abs(table).max()))),
            "concavity_violation": max(concavity, 0.0),
            "delta_lipschitz": ratio, "lipschitz_bound": bound}


def post_t1_family(instance, u2, check_domain=False):
    """Une résolution par noeud delta, en parallèle, ordre conservé."""
    u2w = instance.to_w(u2)
    wgrid, ygrid = instance.grid2.first, instance.grid2.second
    post = instance.post_times

    def solve(delta):
        sol = solve_hj_vix_post(instance.svm, u2w, float(delta), wgrid, ygrid, instance.tg,
                                instance.boundary, check_domain=check_domain, G=instance.G)
        return sol

    with ThreadPoolExecutor(max_workers=max(1, instance.workers)) as pool:
        solutions = list(pool.map(solve, instance.deltas))
    table = np.stack([s.initial for s in solutions])

    ones = np.ones((1, len(ygrid)))
    reference = solve_hj_log(instance.svm, u2w[:, None] * ones, instance.grid2, post,
                             instance.boundary, quadratic=False, G=instance.G).initial
    log_contract = solve_hj_log(instance.svm, -wgrid.nodes[:, None] * ones, instance.grid2, post,
                                instance.boundary, quadratic=False, G=instance.G).initial
    anchor = log_contract + wgrid.nodes[:, None]

    sigma_max = instance.svm.sigma_tilde_max(ygrid.nodes)
    diag = _delta_diagnostics(instance.deltas, table, wgrid.nodes, sigma_max, instance.tau)
    if diag["delta_lipschitz"] > diag["lipschitz_bound"] * (1.0 + 1e-9) + 1e-12:
        raise GridError(f"Continuité en delta violée ({diag['delta_lipschitz']:.4g} > "
                        f"{diag['lipschitz_bound']:.4g}) : raffiner la grille en delta")
    if not diag["concave"]:
        logger.warning("Table non concave en delta (écart %.3e)", diag["concavity_violation"])
    return PostT1Family(np.asarray(instance.deltas, dtype=float), solutions, table, reference,
                        anchor, instance.grid2, diag)


# --- Phi ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PhiTable:
    grid2: Grid2D
    values: np.ndarray
    deltas: np.ndarray = field(repr=False)
    v_grid: Grid1D = field(repr=False)
    v_star: np.ndarray = field(repr=False)
    delta_index: np.ndarray = field(repr=False)
    lower: np.ndarray = field(repr=False)
    upper: np.ndarray = field(repr=False)

    @property
    def delta_star(self):
        return self.deltas[self.delta_index]

    def check_bounds(self, tol=1e-9):
        "Encadrement inf_v {U_0 + u3} <= Phi <= E0[u2] + u3(v_barre) à chaque noeud."
        scale = tol * (1.0 + float(np.abs(self.values).max()))
        below = float(np.max(self.lower - self.values))
        above = float(np.max(self.values - self.upper))
        return {"passed": bool(below <= scale and above <= scale),
                "lower_violation": max(below, 0.0), "upper_violation": max(above, 0.0)}

    def to_frame(self):
        W, Y = self.grid2.mesh()
        return pd.DataFrame({"w": W.ravel(), "y": Y.ravel(), "phi": self.values.ravel(),
                             "v_star": self.v_star.ravel(), "delta_star": self.delta_star.ravel()})


def compute_phi(family, u3, v_grid):
    """Phi(w, y) = min_v { u3(v) + max_i [delta_i (w - v) + U_i(w, y)] }.

    Le minimum d'une fonction convexe affine par morceaux est atteint en un
    noeud de la grille en v, un coude de l'enveloppe en delta ou l'ancre v_barre :
    ces candidats sont évalués exactement.
    """
    u3 = np.asarray(u3, dtype=float)
    if u3.size != len(v_grid):
        raise GridError(f"u3 a {u3.size} valeurs pour {len(v_grid)} noeuds en v")
    grid2 = family.grid2
    nw, ny = grid2.shape
    d = family.deltas
    U = family.table.reshape(d.size, -1).T
    w = np.repeat(grid2.first.nodes, ny)
    kinks = w[:, None] + np.diff(U, axis=1) / np.diff(d)[None, :]
    cands = np.concatenate([np.broadcast_to(v_grid.nodes, (w.size, len(v_grid))), kinks,
                            family.anchor.reshape(-1, 1)], axis=1)
    cands = np.clip(cands, v_grid.lo, v_grid.hi)

    values = np.empty(w.size)
    v_star = np.empty(w.size)
    d_idx = np.empty(w.size, dtype=int)
    for start in range(0, w.size, NODE_CHUNK):
        sl = slice(start, start + NODE_CHUNK)
        c = cands[sl]
        inner = U[sl, None, :] + d[None, None, :] * (w[sl, None, None] - c[:, :, None])
        best_d = inner.argmax(axis=2)
        total = np.interp(c, v_grid.nodes, u3) + np.take_along_axis(inner, best_d[:, :, None], 2)[:, :, 0]
        k = total.argmin(axis=1)
        rows = np.arange(k.size)
        values[sl] = total[rows, k]
        v_star[sl] = c[rows, k]
        d_idx[sl] = best_d[rows, k]

    zero = int(np.argmin(np.abs(d)))
    lower = family.table[zero] + float(u3.min())
    upper = family.reference + np.interp(family.anchor, v_grid.nodes, u3)
    top = d_idx.reshape(nw, ny)
    if np.any((top == 0) | (top == d.size - 1)):
        logger.warning("delta* atteint le bord de la grille en delta : élargir delta_max")
    return PhiTable(grid2, values.reshape(nw, ny), d, v_grid, v_star.reshape(nw, ny), top,
                    lower, upper)


# --- avant T1 et valeur duale -----------------------------------------------

def pre_t1_value(instance, phi, u1, route="pde", n_paths=10_000, seed=0):
    """Valeur sur [t0, T1] de terminal u1(e^w) + Phi(w, y).

    ``route="pde"`` résout l'équation en w (tau2 constant requis) ; ``route="mc"``
    renvoie un rapport de borne supérieure à contrôle nul, sans gradient.
    """
    terminal = instance.to_w(u1)[:, None] + phi.values
    if route == "mc":
        paths = simulate(instance.svm, None, n_paths, instance.pre_times, seed,
                         record=[instance.tg.jump_index])
        P = instance.grid2.interpolation_matrix(np.log(paths.X[:, 0]), paths.Y[:, 0])
        sample = P @ terminal.ravel()
        se = float(sample.std(ddof=1) / math.sqrt(sample.size)) if sample.size > 1 else 0.0
        return {"route": "mc", "upper_bound": float(sample.mean()), "se": se,
                "n_paths": int(n_paths), "seed": int(seed)}
    if route != "pde":
        raise DomainError(f"Méthode inconnue: {route} (pde, mc)")
    if not instance.svm.constant_tau2:
        raise HypothesisError("La résolution EDP avant T1 demande tau2 constant ; utiliser route='mc'")
    return solve_hj_log(instance.svm, terminal, instance.grid2, instance.pre_times,
                        instance.boundary, quadratic=True, G=instance.G)


def reference_v_samples(instance, family, n_paths, seed, chunk_size=8192, workers=4):
    """Échantillons de V sous P0 : V(w, y) = E0[-log X_T2 | w, y] + w lu sur
    l'ancre de la famille aux points (log X_T1, Y_T1) simulés."""
    paths = simulate(instance.svm, None, n_paths, instance.pre_times, seed,
                     record=[instance.tg.jump_index], chunk_size=chunk_size, workers=workers)
    P = instance.grid2.interpolation_matrix(np.log(paths.X[:, 0]), paths.Y[:, 0])
    return np.maximum(P @ family.anchor.ravel(), 0.0)


def vix_dual_value(instance, u1, u2, u3, family=None):
    """v(t0, log X0, Y0) - mu1.u1 - mu2.u2 - mu3.u3 ; renvoie (valeur, détails)."""
    family = family if family is not None else post_t1_family(instance, u2)
    phi = compute_phi(family, u3, instance.v_grid)
    pre = pre_t1_value(instance, phi, u1)
    head = instance.grid2.interpolate(pre.initial, math.log(instance.svm.x0), instance.svm.y0)
    value = (head - float(instance.mu1.weights @ np.asarray(u1, dtype=float))
             - float(instance.mu2.weights @ np.asarray(u2, dtype=float))
             - float(instance.mu3.weights @ np.asarray(u3, dtype=float)))
    return value, {"family": family, "phi": phi, "pre": pre}


def supergradients(instance, parts):
    """Résidus (T1, T2, v) des flots optimaux : marge en X à T1, marge en X à T2
    des flots post-T1 démarrés sur la masse allouée à chaque delta*, loi de v*."""
    grid2 = instance.grid2
    pre, phi, family = parts["pre"], parts["phi"], parts["family"]
    m0 = dirac_2d(grid2, math.log(instance.svm.x0), instance.svm.y0)
    flow = evolve_2d(instance.svm, pre, m0, instance.pre_times, grid2, instance.G)
    m_t1 = flow.masses[-1]
    r1 = instance.pull_back(m_t1.sum(axis=1)) - instance.mu1.weights

    law_v = instance.v_grid.interpolation_matrix(phi.v_star.ravel()).T @ m_t1.ravel()
    r3 = law_v - instance.mu3.weights

    def forward(i):
        start = np.where(phi.delta_index == i, m_t1, 0.0)
        mass = float(start.sum())
        if mass <= 0:
            return np.zeros(grid2.shape)
        post = evolve_2d(instance.svm, family.solutions[i], start, instance.post_times, grid2, instance.G)
        return mass * post.masses[-1]

    used = np.unique(phi.delta_index[m_t1 > 0])
    with ThreadPoolExecutor(max_workers=max(1, instance.workers)) as pool:
        layers = list(pool.map(forward, used))
    m_t2 = np.sum(layers, axis=0) if layers else np.zeros(grid2.shape)
    r2 = instance.pull_back(m_t2.sum(axis=1)) - instance.mu2.weights
    return r1, r2, r3, flow


@dataclass(frozen=True, eq=False)
class VixState:
    u1: np.ndarray
    u2: np.ndarray
    u3: np.ndarray
    dual_value: float = float("nan")
    residuals: tuple = (None, None, None)
    history: tuple = ()
    status: str = "init"
    phi: PhiTable | None = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, instance):
        n = len(instance.xgrid)
        return cls(np.zeros(n), np.zeros(n), np.zeros(len(instance.v_grid)))

    @property
    def iterations(self):
        return len(self.history)

    def residual_norms(self):
        names = ("T1", "T2", "v")
        return {k: (0.0 if r is None else float(np.max(np.abs(r)))) for k, r in zip(names, self.residuals)}

    def trace_frame(self):
        return pd.DataFrame(list(self.history), columns=[
            "iteration", "value", "residual_T1", "residual_T2", "residual_v", "step"])

    def to_dict(self):
        return {"dual_value": self.dual_value, "residual_norms": self.residual_norms(),
                "iterations": self.iterations, "status": self.status,
                "potentials": {"u1": self.u1.tolist(), "u2": self.u2.tolist(), "u3": self.u3.tolist()},
                "diagnostics": self.diagnostics}


def _evaluate(instance, u1, u2, u3):
    value, parts = vix_dual_value(instance, u1, u2, u3)
    r1, r2, r3, _ = supergradients(instance, parts)
    return value, parts, (r1, r2, r3)


def vix_ascend(init, instance, settings):
    """Montée sur (u1, u2, u3) ; u3 reste convexe par projection isotone des pentes."""
    instance.check_feasible(settings.order_tol, max(settings.mean_tol, 1e-8))
    xgrid, vgrid = instance.xgrid, instance.v_grid
    wx, wv = cell_widths(xgrid), cell_widths(vgrid)
    px = lambda u: project_potential(u, xgrid, settings.potential_bound, settings.lipschitz_bound)
    pv = lambda u: project_u3(u, vgrid, settings.u3_slope_bound)

    u1, u2, u3 = px(init.u1), px(init.u2), pv(init.u3)
    value, parts, res = _evaluate(instance, u1, u2, u3)
    history = []
    status = "max_iters"
    stalled = 0
    for it in range(settings.max_iters):
        norms = [float(np.max(np.abs(r))) for r in res]
        if max(norms) <= settings.tol:
            status = "converged"
            break
        step = settings.step
        accepted = None
        for _ in range(settings.max_halvings + 1):
            cand = (px(u1 + step * res[0] / wx), px(u2 + step * res[1] / wx),
                    pv(u3 + step * res[2] / wv))
            try:
                trial = _evaluate(instance, *cand)
            except (TableRangeError, CflError):
                step *= 0.5
                continue
            if trial[0] >= value:
                accepted = cand, trial
                break
            step *= 0.5
        history.append((it, value, *norms, step if accepted else 0.0))
        logger.debug("itération %d : valeur %.10g, résidus %s", it, value, norms)
        if accepted is None:
            status = "plateau"
            break
        gain = accepted[1][0] - value
        (u1, u2, u3), (value, parts, res) = accepted
        stalled = stalled + 1 if gain <= settings.tol * (1.0 + abs(value)) else 0
        if stalled >= settings.plateau_patience:
            status = "plateau"
            break

    phi = parts["phi"]
    diagnostics = {"phi_bounds": phi.check_bounds(), **parts["family"].diagnostics}
    logger.info("Montée VIX terminée (%s) après %d itérations : valeur %.8g",
                status, len(history), value)
    return VixState(u1, u2, u3, value, res, tuple(history), status, phi, diagnostics)
