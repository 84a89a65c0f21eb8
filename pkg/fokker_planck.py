"""Flots primaux : Fokker-Planck 1D d_t m = ½ d_xx(b m), Fokker-Planck 2D contrôlé,
et simulation d'Euler-Maruyama avec poids de Girsanov.

Les pas explicites sont les transposés exacts des pas de hj_solver : la masse et
la moyenne en x sont conservées exactement en arithmétique exacte.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import CflError, DomainError, GridError, NumericalFailure
from grids import Grid1D, Grid2D
from hj_solver import CFL_SLACK, HjSolution
from measures import GridMeasure

logger = logging.getLogger(__name__)

NEGATIVE_TOL = 1e-14


def _clean(m, step):
    low = float(m.min())
    if low < -NEGATIVE_TOL:
        raise NumericalFailure(f"Masse négative {low:.3e} au pas {step} : schéma hors CFL ?")
    if low < 0:
        m = np.maximum(m, 0.0)
    total = m.sum()
    if not np.isfinite(total) or total <= 0:
        raise NumericalFailure(f"Masse totale invalide au pas {step}")
    return m / total


@dataclass(frozen=True, eq=False)
class FlowResult:
    """Marginales m_t, flux w (b m ou alpha m) et coût accumulé."""

    times: np.ndarray
    masses: np.ndarray
    grid: object
    flux: np.ndarray
    cost: float
    running: np.ndarray = field(repr=False)
    kind: str = "mot"

    def marginal(self, index):
        "Marginale en x (somme sur y pour un flot 2D)."
        layer = self.masses[index]
        if isinstance(self.grid, Grid2D):
            return GridMeasure(self.grid.first, layer.sum(axis=1))
        return GridMeasure(self.grid, layer)

    def x_means(self):
        nodes = self.grid.first.nodes if isinstance(self.grid, Grid2D) else self.grid.nodes
        if isinstance(self.grid, Grid2D) and self.grid.coordinate == "w":
            nodes = np.exp(nodes)
        layers = self.masses.sum(axis=2) if self.masses.ndim == 3 else self.masses
        return layers @ nodes

    def to_frame(self):
        if isinstance(self.grid, Grid2D):
            P, Y = self.grid.mesh()
            frames = [pd.DataFrame({"t": t, "node": P.ravel(), "y": Y.ravel(), "mass": m.ravel()})
                      for t, m in zip(self.times, self.masses)]
        else:
            frames = [pd.DataFrame({"t": t, "node": self.grid.nodes, "mass": m})
                      for t, m in zip(self.times, self.masses)]
        return pd.concat(frames, ignore_index=True)


# --- 1D -------------------------------------------------------------------

def _control_layers(control, times, shape, name):
    """Tableau (N,) + shape à partir d'une solution HJ, d'un tableau, d'un scalaire ou d'une fonction."""
    steps = times.size - 1
    if control is None:
        return np.zeros((steps,) + shape)
    if isinstance(control, HjSolution):
        control = control.controls
    if callable(control):
        return np.stack([np.broadcast_to(control(t), shape) for t in times[:-1]])
    arr = np.asarray(control, dtype=float)
    if arr.ndim == 0:
        return np.full((steps,) + shape, float(arr))
    if arr.shape != (steps,) + shape:
        raise GridError(f"{name} de forme {arr.shape}, attendu {(steps,) + shape}")
    return arr


def evolve_1d(b, m0, tg, spec):
    """d_t m = ½ d_xx(b m) : le noeud i envoie dt b / (h±(h+ + h-)) à ses voisins.

    Les noeuds extrêmes sont absorbants (b = 0). ``b`` peut être une HjSolution,
    un tableau (N, n), un scalaire ou une fonction de t renvoyant les valeurs nodales.
    """
    grid = m0.grid
    times = tg.times
    n = len(grid)
    if callable(b) and not isinstance(b, HjSolution):
        fn = b
        b = lambda t: fn(t, grid.nodes)
    layers = _control_layers(b, times, (n,), "b").copy()
    if np.any(layers < 0):
        raise DomainError(f"b négatif : {layers.min():.3e}")
    layers[:, [0, -1]] = 0.0
    hp, hm = grid.h_plus, grid.h_minus
    to_right = 1.0 / (hp * (hp + hm))
    to_left = 1.0 / (hm * (hp + hm))

    masses = np.empty((times.size, n))
    masses[0] = m0.weights
    running = np.empty(times.size - 1)
    for k in range(times.size - 1):
        dt = times[k + 1] - times[k]
        bk = layers[k]
        rate = bk[1:-1] / (hp * hm)
        if rate.size and dt * rate.max() > 1.0 + CFL_SLACK:
            raise CflError(f"CFL violée au pas {k}", required_dt=1.0 / float(rate.max()))
        m = masses[k]
        running[k] = dt * float(m @ spec(bk))
        right = dt * bk[1:-1] * to_right * m[1:-1]
        left = dt * bk[1:-1] * to_left * m[1:-1]
        new = m.copy()
        new[1:-1] -= right + left
        new[2:] += right
        new[:-2] += left
        masses[k + 1] = _clean(new, k)
    flux = layers * masses[:-1]
    return FlowResult(times, masses, grid, flux, float(running.sum()), running, "mot")


def evolve_kernels(sol, m0, spec):
    """m_{k+1} = K_k^T m_k avec les noyaux martingale du schéma enveloppe.

    Le coût du pas k vaut dt sum_i m_i L(b_i), b_i = variance du noyau / dt.
    """
    if sol.kernels is None:
        raise DomainError("Solution HJ sans noyaux de transition (schéma explicite ?)")
    times = sol.times
    layers = np.asarray(sol.controls, dtype=float)
    masses = np.empty((times.size, len(m0.grid)))
    masses[0] = m0.weights
    running = np.empty(times.size - 1)
    for k, K in enumerate(sol.kernels):
        dt = times[k + 1] - times[k]
        m = masses[k]
        running[k] = dt * float(m @ spec(layers[k]))
        masses[k + 1] = _clean(K.T @ m, k)
    flux = layers * masses[:-1]
    return FlowResult(times, masses, m0.grid, flux, float(running.sum()), running, "mot")


# --- 2D -------------------------------------------------------------------

def dirac_2d(grid2, p, y):
    "Masse unité répartie bilinéairement autour de (p, y)."
    return np.asarray(grid2.interpolation_matrix([p], [y]).T.todense()).reshape(grid2.shape)


def evolve_2d(svm, alpha, m0, tg, grid2, G=None):
    """m_{k+1} = (I + dt (G + D_k))^T m_k, D_k dérive décentrée tau2 alpha d_y.

    L'énergie ½ sum dt sum m alpha² est accumulée pas à pas.
    """
    from hj_solver import generator_matrix

    if G is None:
        G, _ = generator_matrix(svm, grid2, "absorbing")
    shape = grid2.shape
    m0 = np.asarray(m0, dtype=float)
    if m0.shape != shape:
        raise GridError(f"Mesure initiale de forme {m0.shape}, grille {shape}")
    times = tg.times if hasattr(tg, "times") else np.asarray(tg)
    if isinstance(alpha, HjSolution) and alpha.values.shape[1:] != shape:
        raise GridError("Contrôle et grille incompatibles")
    P = grid2.prices()
    _, Y = grid2.mesh()
    if callable(alpha) and not isinstance(alpha, HjSolution):
        fn = alpha
        alpha = lambda t: fn(t, P, Y)
    layers = _control_layers(alpha, times, shape, "alpha")
    tau2 = np.broadcast_to(svm.tau2(P, Y), shape)
    hy = grid2.second.steps[None, :]
    diag = -G.diagonal().reshape(shape)
    GT = G.T.tocsr()

    masses = np.empty((times.size,) + shape)
    masses[0] = m0 / m0.sum()
    running = np.empty(times.size - 1)
    for k in range(times.size - 1):
        dt = times[k + 1] - times[k]
        m = masses[k]
        a = layers[k]
        c = tau2 * a
        up = np.zeros(shape)
        down = np.zeros(shape)
        up[:, :-1] = np.maximum(c[:, :-1], 0.0) / hy
        down[:, 1:] = np.maximum(-c[:, 1:], 0.0) / hy
        rate = float(np.max(diag + up + down))
        if dt * rate > 1.0 + CFL_SLACK:
            raise CflError(f"CFL violée au pas {k}", required_dt=1.0 / rate)
        running[k] = 0.5 * dt * float(np.sum(m * a**2))
        new = m + dt * (GT @ m.ravel()).reshape(shape)
        fu = dt * up * m
        fd = dt * down * m
        new -= fu + fd
        new[:, 1:] += fu[:, :-1]
        new[:, :-1] += fd[:, 1:]
        masses[k + 1] = _clean(new, k)
    flux = layers * masses[:-1]
    return FlowResult(times, masses, grid2, flux, float(running.sum()), running, "sb")


# --- Monte Carlo ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Trajectoires (X, Y) aux instants enregistrés et log-poids de Girsanov.

    En mode ``reference`` les chemins suivent P0 et exp(log_weight) = dP*/dP0 ;
    en mode ``tilted`` ils suivent P* et log_weight = log dP*/dP0 le long de P*.
    """

    times: np.ndarray
    record_index: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    log_weight: np.ndarray
    seed: int
    mode: str = "reference"
    hedge: np.ndarray | None = None

    @property
    def n_paths(self):
        return self.X.shape[0]

    def column(self, time_index):
        hits = np.nonzero(self.record_index == time_index)[0]
        if not hits.size:
            raise GridError(f"Instant {time_index} non enregistré")
        return int(hits[0])

    def weights(self):
        return np.exp(self.log_weight)

    def mean_weight(self):
        w = self.weights()
        return float(w.mean()), float(w.std(ddof=1) / np.sqrt(w.size)) if w.size > 1 else 0.0

    def entropy(self):
        """H(P*|P0) et son erreur type."""
        if self.mode == "tilted":
            sample = self.log_weight
        else:
            sample = self.weights() * self.log_weight
        se = float(sample.std(ddof=1) / np.sqrt(sample.size)) if sample.size > 1 else 0.0
        return float(sample.mean()), se

    def effective_sample_size(self):
        if self.mode == "tilted":
            return float(self.n_paths)
        w = self.weights()
        return float(w.sum() ** 2 / np.sum(w**2))

    def expectation(self, values):
        """Espérance sous P* (pondérée en mode reference) et erreur type."""
        values = np.asarray(values, dtype=float)
        sample = values if self.mode == "tilted" else values * self.weights()
        se = float(sample.std(ddof=1) / np.sqrt(sample.size)) if sample.size > 1 else 0.0
        return float(sample.mean()), se

    def histogram(self, time_index, grid, weighted=True):
        """Marginale de X sur les cellules de ``grid`` (milieux entre noeuds)."""
        x = self.X[:, self.column(time_index)]
        edges = 0.5 * (grid.nodes[1:] + grid.nodes[:-1])
        cells = np.searchsorted(edges, x)
        w = self.weights() if (weighted and self.mode == "reference") else np.ones(x.size)
        counts = np.bincount(cells, weights=w, minlength=len(grid))
        return GridMeasure(grid, counts / counts.sum())

    def summary(self):
        rows = []
        for col, k in enumerate(self.record_index):
            x = self.X[:, col]
            rows.append({"t": float(self.times[k]), "mean_X": float(x.mean()),
                         "se_X": float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0,
                         "mean_log_X": float(np.log(x).mean())})
        mean_w, se_w = self.mean_weight()
        ent, se_ent = self.entropy()
        return {"n_paths": int(self.n_paths), "seed": int(self.seed), "mode": self.mode,
                "moments": rows, "mean_weight": mean_w, "se_weight": se_w,
                "entropy": ent, "se_entropy": se_ent, "ess": self.effective_sample_size(),
                "finite_weights": bool(np.all(np.isfinite(self.log_weight)))}


def _alpha_field(alpha, times):
    """Contrôle en rétroaction alpha(k, x, y) au pas k ; une fonction est appelée en (t, x, y)."""
    if alpha is None:
        return None
    if isinstance(alpha, HjSolution):
        sol = alpha
        grid2 = sol.grid

        def field_at(k, x, y):
            first = x if grid2.coordinate == "x" else np.log(x)
            return sol.grid.interpolation_matrix(first, y) @ sol.controls[k].ravel()
        return field_at
    if callable(alpha):
        return lambda k, x, y: np.broadcast_to(alpha(times[k], x, y), x.shape)
    value = float(alpha)
    return lambda k, x, y: np.full(x.shape, value)


def _hedge_field(sol):
    """Delta = -sigma d_x u - tau1 d_y u interpolé à partir de la couche k+1."""
    grid2 = sol.grid
    first = grid2.first.nodes
    second = grid2.second.nodes
    grads = []
    for layer in sol.values[1:]:
        gx, gy = np.gradient(layer, first, second)
        grads.append((gx.ravel(), gy.ravel()))

    def hedge_at(k, x, y, svm):
        coord = x if grid2.coordinate == "x" else np.log(x)
        P = grid2.interpolation_matrix(coord, y)
        gx, gy = (P @ g for g in grads[k])
        if grid2.coordinate == "w":
            gx = gx / x
        _, _, t1, _ = svm.coefficients(x, y)
        return -svm.sigma(x, y) * gx - t1 * gy
    return hedge_at


def _simulate_chunk(svm, times, n, seed, chunk, alpha_at, hedge_at, mode, record, x0, y0):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, chunk])))
    logx = np.full(n, np.log(x0))
    y = np.full(n, float(y0))
    logw = np.zeros(n)
    hedge = np.zeros(n) if hedge_at is not None else None
    X = np.empty((n, record.size))
    Y = np.empty((n, record.size))
    col = 0
    if record[0] == 0:
        X[:, 0], Y[:, 0] = x0, y0
        col = 1
    for k in range(times.size - 1):
        dt = times[k + 1] - times[k]
        sq = np.sqrt(dt)
        z1 = rng.standard_normal(n)
        z2 = rng.standard_normal(n)
        x = np.exp(logx)
        st, b, t1, t2 = svm.coefficients(x, y)
        a = alpha_at(k, x, y) if alpha_at is not None else 0.0
        if hedge_at is not None:
            hedge += hedge_at(k, x, y, svm) * sq * z1
        if mode == "tilted":
            drift_y = b + t2 * a
            logw += a * sq * z2 + 0.5 * a**2 * dt
        else:
            drift_y = b
            logw += a * sq * z2 - 0.5 * a**2 * dt
        logx = logx - 0.5 * st**2 * dt + st * sq * z1
        y = y + drift_y * dt + t1 * sq * z1 + t2 * sq * z2
        if col < record.size and record[col] == k + 1:
            X[:, col], Y[:, col] = np.exp(logx), y
            col += 1
    return X, Y, logw, hedge


def simulate(svm, alpha, n_paths, tg, seed, mode="reference", record=None, hedge=None,
             chunk_size=8192, workers=4, x0=None, y0=None):
    """Euler-Maruyama de (log X, Y) sous P0 (``reference``) ou sous la dynamique
    contrôlée (``tilted``), par blocs de taille fixe.

    Chaque bloc tire ses normales d'un générateur Philox initialisé par
    SeedSequence([seed, indice du bloc]) : le résultat ne dépend pas du
    nombre de workers.
    """
    if n_paths < 1:
        raise DomainError("Au moins une trajectoire")
    if mode not in ("reference", "tilted"):
        raise DomainError(f"Mode de simulation inconnu: {mode}")
    times = tg.times if hasattr(tg, "times") else np.asarray(tg, dtype=float)
    last = times.size - 1
    if record is None:
        jump = getattr(tg, "jump_index", None)
        record = [0, last] if jump is None else [0, jump, last]
    record = np.unique(np.asarray(record, dtype=int))
    alpha_at = _alpha_field(alpha, times)
    hedge_at = _hedge_field(hedge) if hedge is not None else None
    x0 = svm.x0 if x0 is None else x0
    y0 = svm.y0 if y0 is None else y0

    sizes = [min(chunk_size, n_paths - start) for start in range(0, n_paths, chunk_size)]
    jobs = [(svm, times, size, seed, c, alpha_at, hedge_at, mode, record, x0, y0)
            for c, size in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(pool.map(lambda job: _simulate_chunk(*job), jobs))

    X = np.concatenate([p[0] for p in parts])
    Y = np.concatenate([p[1] for p in parts])
    logw = np.concatenate([p[2] for p in parts])
    hedge_int = np.concatenate([p[3] for p in parts]) if hedge_at is not None else None
    if not np.all(np.isfinite(logw)):
        logger.warning("Poids de Girsanov non finis sur %d trajectoires", int((~np.isfinite(logw)).sum()))
    return PathEnsemble(times, record, X, Y, logw, seed, mode, hedge_int)
