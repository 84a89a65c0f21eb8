"""Schémas explicites monotones, en remontant le temps, pour les équations de
Hamilton-Jacobi : MOT 1D avec saut en T1, Schrödinger 2D (x, y) et problème
post-T1 en coordonnée logarithmique w = log x.

Le Dirac en T1 est traité comme deux résolutions recollées :
u(T1-) = u1 + u(T1+).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import pandas as pd
import scipy.sparse as sparse

from errors import CflError, DomainSizeError, GridError, NumericalFailure
from grids import Grid1D, Grid2D, TimeGrid

logger = logging.getLogger(__name__)

CFL_SLACK = 1e-12
BOUNDARIES = ("linear", "absorbing")
SCHEMES = ("explicit", "envelope")
ENVELOPE_BISECTIONS = 40


@dataclass(frozen=True, eq=False)
class HjSolution:
    """u(t, .) à chaque noeud de temps ; ``values[jump_index]`` contient u(T1-)."""

    values: np.ndarray
    times: np.ndarray
    grid: object
    kind: str = "mot"
    after_jump: np.ndarray | None = None
    jump_index: int | None = None
    controls: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)
    kernels: tuple | None = field(default=None, repr=False)

    @property
    def initial(self):
        return self.values[0]

    @property
    def terminal(self):
        return self.values[-1]

    @property
    def before_jump(self):
        return None if self.jump_index is None else self.values[self.jump_index]

    def value_at(self, point, y=None, index=0):
        layer = self.values[index]
        if isinstance(self.grid, Grid2D):
            return self.grid.interpolate(layer, point, y)
        return float(np.interp(point, self.grid.nodes, layer))

    def to_frame(self):
        """Format long (t, x[, y], u)."""
        if isinstance(self.grid, Grid2D):
            P, Y = self.grid.mesh()
            first = "x" if self.grid.coordinate == "x" else "w"
            frames = [pd.DataFrame({"t": t, first: P.ravel(), "y": Y.ravel(), "u": layer.ravel()})
                      for t, layer in zip(self.times, self.values)]
        else:
            frames = [pd.DataFrame({"t": t, "x": self.grid.nodes, "u": layer})
                      for t, layer in zip(self.times, self.values)]
        return pd.concat(frames, ignore_index=True)

    def to_metadata(self):
        meta = {"kind": self.kind, "grid": self.grid.to_dict(), "times": self.times.tolist(),
                "jump_index": self.jump_index}
        meta.update(self.metadata)
        return meta


def _sup_ratio(values, *data):
    scale = sum(float(np.max(np.abs(d))) for d in data if d is not None)
    return float(np.max(np.abs(values))) / scale if scale > 0 else 0.0


def _as_nodal(u, n, name):
    u = np.asarray(u, dtype=float).ravel()
    if u.size != n:
        raise GridError(f"{name} a {u.size} valeurs pour {n} noeuds")
    if not np.all(np.isfinite(u)):
        raise NumericalFailure(f"{name} contient des valeurs non finies")
    return u


# --- MOT 1D ---------------------------------------------------------------

def _mot_step(h, grid, u, dt, boundary):
    a = 0.5 * grid.second_difference(u)
    ham = h(a)
    b = h.b_star(a)
    rate = h.b_bound(a[1:-1]) / (grid.h_plus * grid.h_minus)
    new = u - dt * ham
    if boundary == "absorbing":
        new[[0, -1]] = u[[0, -1]] + dt * float(h.lagrangian(0.0))
        b[[0, -1]] = 0.0
    return new, b, float(rate.max()) if rate.size else 0.0


# --- MOT 1D, schéma enveloppe ----------------------------------------------

@dataclass(frozen=True, eq=False)
class PairStencil:
    """Paires l <= i <= r : la loi à deux points sur (x_l, x_r) de moyenne x_i
    met le poids ``p_right`` en x_r et a la variance (x_i - x_l)(x_r - x_i).

    Les lignes courtes sont complétées par la paire triviale (i, i).
    """

    left: np.ndarray
    right: np.ndarray
    p_right: np.ndarray
    variance: np.ndarray

    def kernel(self, pick_lo, pick_hi, theta):
        "Noyau martingale : mélange des paires choisies, poids theta sur ``pick_hi``."
        n = self.left.shape[0]
        rows = np.arange(n)
        parts = []
        for pick, w in ((pick_lo, 1.0 - theta), (pick_hi, theta)):
            p = self.p_right[rows, pick]
            parts.append((self.left[rows, pick], w * (1.0 - p)))
            parts.append((self.right[rows, pick], w * p))
        cols = np.concatenate([c for c, _ in parts])
        data = np.concatenate([d for _, d in parts])
        return sparse.csr_matrix((data, (np.tile(rows, len(parts)), cols)), shape=(n, n))


@lru_cache(maxsize=16)
def pair_stencil(grid):
    x = grid.nodes
    n = x.size
    width = max((i + 1) * (n - i) for i in range(n))
    left = np.repeat(np.arange(n)[:, None], width, axis=1)
    right = left.copy()
    for i in range(n):
        l, r = np.meshgrid(np.arange(i + 1), np.arange(i, n), indexing="ij")
        left[i, :l.size] = l.ravel()
        right[i, :r.size] = r.ravel()
    xi = x[:, None]
    span = x[right] - x[left]
    p = np.divide(xi - x[left], span, out=np.zeros(span.shape), where=span > 0)
    variance = (xi - x[left]) * (x[right] - xi)
    for arr in (left, right, p, variance):
        arr.setflags(write=False)
    return PairStencil(left, right, p, variance)


def _mot_envelope_step(h, stencil, u, dt):
    """max_a [ min_paires (E u - a V) - dt H(a) ] par bissection sur la pente
    dt (-H'(a)) - V(a), décroissante en a. Toute valeur de a donne un minorant."""
    E = (1.0 - stencil.p_right) * u[stencil.left] + stencil.p_right * u[stencil.right]
    V = stencil.variance
    n = u.size
    rows = np.arange(n)
    lo = np.full(n, h.a_min)
    hi = np.full(n, h.a_max)
    for _ in range(ENVELOPE_BISECTIONS):
        mid = 0.5 * (lo + hi)
        pick = np.argmin(E - mid[:, None] * V, axis=1)
        up = dt * h.chord_rate(mid) >= V[rows, pick]
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)

    def phi(a):
        inner = E - a[:, None] * V
        pick = np.argmin(inner, axis=1)
        return inner[rows, pick] - dt * h(a), pick

    f_lo, k_lo = phi(lo)
    f_hi, k_hi = phi(hi)
    value = np.maximum(f_lo, f_hi)
    # l'optimum tombe souvent sur un noeud de la table
    seg = np.clip(np.searchsorted(h.a_grid, lo, side="right") - 1, 0, h.a_grid.size - 2)
    for node in (h.a_grid[seg], h.a_grid[seg + 1]):
        value = np.maximum(value, phi(node)[0])
    v_lo, v_hi = V[rows, k_lo], V[rows, k_hi]
    target = np.clip(dt * h.chord_rate(hi), v_lo, v_hi)
    spread = v_hi - v_lo
    theta = np.divide(target - v_lo, spread, out=np.zeros(n), where=spread > 0)
    b = ((1.0 - theta) * v_lo + theta * v_hi) / dt
    return value, b, stencil.kernel(k_lo, k_hi, theta)


def mot_step(h, grid, u, dt, boundary="absorbing", scheme="explicit"):
    "Un pas rétrograde isolé (sert au certificat de sur-solution)."
    if scheme == "envelope":
        return _mot_envelope_step(h, pair_stencil(grid), np.asarray(u, dtype=float), dt)[0]
    return _mot_step(h, grid, np.asarray(u, dtype=float), dt, boundary)[0]


def solve_hj_mot(h, u1, u2, grid, tg, boundary="linear", scheme="explicit"):
    """-du/dt + H(D²u/2) = 0 sur chaque tranche, u(T2) = u2, saut u1 en T1.

    ``explicit`` : différences finies sous CFL. ``envelope`` : dual exact du
    programme discret à transitions quelconques, sans CFL, bords absorbants.
    """
    if boundary not in BOUNDARIES:
        raise GridError(f"Condition au bord inconnue: {boundary}")
    if scheme not in SCHEMES:
        raise GridError(f"Schéma inconnu: {scheme}")
    n = len(grid)
    u2 = _as_nodal(u2, n, "u2")
    u1 = _as_nodal(u1, n, "u1") if tg.has_jump else None
    times = tg.times
    steps = times.size - 1
    values = np.empty((steps + 1, n))
    controls = np.empty((steps, n))
    kernels = [None] * steps if scheme == "envelope" else None
    stencil = pair_stencil(grid) if scheme == "envelope" else None
    values[-1] = u2
    after = None
    worst = 0.0
    for k in reversed(range(steps)):
        dt = times[k + 1] - times[k]
        if scheme == "envelope":
            values[k], controls[k], kernels[k] = _mot_envelope_step(h, stencil, values[k + 1], dt)
        else:
            values[k], controls[k], rate = _mot_step(h, grid, values[k + 1], dt, boundary)
            if dt * rate > 1.0 + CFL_SLACK:
                raise CflError(f"CFL violée au pas {k} : dt={dt:.3e} > {1.0 / rate:.3e}",
                               required_dt=1.0 / rate)
            worst = max(worst, dt * rate)
        if tg.jump_index == k:
            after = values[k].copy()
            values[k] = u1 + after
    if not np.all(np.isfinite(values)):
        raise NumericalFailure("Solution HJ non finie")
    meta = {"cfl": worst, "boundary": "absorbing" if scheme == "envelope" else boundary,
            "scheme": scheme, "sup_norm_ratio": _sup_ratio(values, u1, u2)}
    if after is not None:
        meta["jump_residual"] = float(np.max(np.abs(values[tg.jump_index] - u1 - after)))
    logger.debug("HJ MOT (%s) : %d pas, CFL max %.3f", scheme, steps, worst)
    return HjSolution(values, times, grid, "mot", after, tg.jump_index, controls, meta,
                      None if kernels is None else tuple(kernels))


def mot_time_grid(h, grid, t0, T1, T2, safety=0.9):
    """Grille en temps respectant la CFL pour toute pente de la table de H."""
    b = max(h.b_sup, 1e-12)
    dt = safety * float(np.min(grid.h_plus * grid.h_minus)) / b
    return TimeGrid.for_step(t0, T1, T2, dt)


# --- générateur 2D --------------------------------------------------------

def _padded_steps(g):
    h = g.steps
    minus = np.full(len(g), np.nan)
    plus = np.full(len(g), np.nan)
    minus[1:] = h
    plus[:-1] = h
    return minus, plus


def generator_matrix(svm, grid2, boundary="absorbing"):
    """Matrice creuse de L0 (ou L0_{w,y}) : différences centrées, dérive décentrée
    amont et stencil croisé à 7 points choisi selon le signe du coefficient.

    Chaque ligne est de somme nulle et G x = 0 en coordonnée x.
    """
    if boundary not in BOUNDARIES:
        raise GridError(f"Condition au bord inconnue: {boundary}")
    nx, ny = grid2.shape
    P = grid2.prices()
    _, Y = grid2.mesh()
    st, b, t1, t2 = svm.coefficients(P, Y)
    if grid2.coordinate == "x":
        A, C, d1 = 0.5 * (P * st) ** 2, P * st * t1, np.zeros(grid2.shape)
    else:
        A, C, d1 = 0.5 * st**2, st * t1, -0.5 * st**2
    B = 0.5 * (t1**2 + t2**2)

    idx = np.arange(grid2.size).reshape(grid2.shape)
    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    hxm, hxp = (arr[:, None] * np.ones((1, ny)) for arr in _padded_steps(grid2.first))
    hym, hyp = (np.ones((nx, 1)) * arr[None, :] for arr in _padded_steps(grid2.second))
    rows, cols, vals = [], [], []

    def add(mask, di, dj, weight):
        ii, jj = np.nonzero(mask & (weight != 0))
        w = weight[ii, jj]
        rows.extend([idx[ii, jj], idx[ii, jj]])
        cols.extend([idx[ii + di, jj + dj], idx[ii, jj]])
        vals.extend([w, -w])

    inner_x = (I > 0) & (I < nx - 1)
    inner_y = (J > 0) & (J < ny - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        add(inner_x, 1, 0, 2 * A / (hxp * (hxp + hxm)))
        add(inner_x, -1, 0, 2 * A / (hxm * (hxp + hxm)))
        add(inner_y, 0, 1, 2 * B / (hyp * (hyp + hym)))
        add(inner_y, 0, -1, 2 * B / (hym * (hyp + hym)))

        for drift, pos, last, hp, hm, step in ((d1, I, nx - 1, hxp, hxm, (1, 0)),
                                              (b, J, ny - 1, hyp, hym, (0, 1))):
            fwd = (drift > 0) & (pos < last)
            bwd = (drift < 0) & (pos > 0)
            if boundary == "linear":
                fwd |= (pos == 0) & (drift < 0)
                bwd |= (pos == last) & (drift > 0)
            add(fwd, step[0], step[1], drift / hp)
            add(bwd, -step[0], -step[1], -drift / hm)

        both = inner_x & inner_y
        w = np.abs(C) / (0.5 * (hxp + hxm) * (hyp + hym))
        add(both & (C > 0), 1, 1, w)
        add(both & (C > 0), -1, -1, w)
        add(both & (C < 0), 1, -1, w)
        add(both & (C < 0), -1, 1, w)
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            add(both, di, dj, -w)

        axis_x = 2 * A / (hxp * (hxp + hxm))
        axis_y = 2 * B / (hyp * (hyp + hym))
        monotone = bool(np.all(~both | ((axis_x >= w - 1e-14) & (axis_y >= w - 1e-14))))
    if not monotone:
        logger.warning("Stencil croisé non monotone : raffiner la grille en y ou réduire |tau1|")

    if rows:
        G = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(grid2.size, grid2.size)).tocsr()
    else:
        G = sparse.csr_matrix((grid2.size, grid2.size))
    return G, monotone


# --- balayage HJS ---------------------------------------------------------

def control_term(u, tau2, hy):
    """Terme -½ tau2² (d_y u)² décentré et contrôle alpha = -tau2 d_y u associé.

    Renvoie (terme, alpha, vitesse |c|/h_y) avec c = tau2 alpha la dérive de y.
    """
    du = np.diff(u, axis=1) / hy[None, :]
    pp = np.zeros_like(u)
    pm = np.zeros_like(u)
    pp[:, :-1] = du
    pm[:, 1:] = du
    t2sq = tau2**2
    forward = np.minimum(pp, 0.0)
    backward = np.maximum(pm, 0.0)
    vf = -0.5 * t2sq * forward**2
    vb = -0.5 * t2sq * backward**2
    use_f = vf <= vb
    ham = np.where(use_f, vf, vb)
    alpha = np.where(use_f, -tau2 * forward, -tau2 * backward)
    hp = np.append(hy, np.inf)[None, :]
    hm = np.insert(hy, 0, np.inf)[None, :]
    speed = np.abs(tau2 * alpha) / np.where(use_f, hp, hm)
    return ham, alpha, speed


def sweep_2d(G, grid2, tau2, terminal, times, jump_index=None, jump_values=None, quadratic=True):
    """Balayage explicite u_n = u + dt (G u - ½ tau2² (d_y u)²)."""
    shape = grid2.shape
    steps = times.size - 1
    values = np.empty((steps + 1,) + shape)
    controls = np.zeros((steps,) + shape)
    values[-1] = terminal
    diag = -G.diagonal().reshape(shape)
    hy = grid2.second.steps
    after = None
    worst = 0.0
    for k in reversed(range(steps)):
        dt = times[k + 1] - times[k]
        u = values[k + 1]
        gu = (G @ u.ravel()).reshape(shape)
        if quadratic:
            ham, alpha, speed = control_term(u, tau2, hy)
        else:
            ham, alpha, speed = 0.0, 0.0, 0.0
        rate = float(np.max(diag + speed))
        if dt * rate > 1.0 + CFL_SLACK:
            raise CflError(f"CFL violée au pas {k} : dt={dt:.3e} > {1.0 / rate:.3e}",
                           required_dt=1.0 / rate)
        worst = max(worst, dt * rate)
        values[k] = u + dt * (gu + ham)
        controls[k] = alpha
        if jump_index == k:
            after = values[k].copy()
            values[k] = values[k] + jump_values
        if not np.all(np.isfinite(values[k])):
            raise NumericalFailure(f"Solution HJS non finie au pas {k}")
    return values, after, controls, worst


def stable_dt_2d(G, grid2, tau2, grad_bound, safety=0.9):
    rate = float(np.max(-G.diagonal()))
    rate += float(np.max(tau2**2)) * grad_bound / float(np.min(grid2.second.steps))
    return safety / max(rate, 1e-12)


def _broadcast_x(u, grid2, name):
    u = _as_nodal(u, grid2.shape[0], name)
    return np.broadcast_to(u[:, None], grid2.shape).copy()


def solve_hj_sb(svm, u1, u2, grid2, tg, boundary="linear", G=None):
    """-du/dt - L0 u + ½ tau2² (d_y u)² = 0, saut u1(x) en T1, u(T2) = u2(x)."""
    if not isinstance(grid2, Grid2D) or grid2.coordinate != "x":
        raise GridError("solve_hj_sb attend une grille rectangulaire en (x, y)")
    if G is None:
        G, _ = generator_matrix(svm, grid2, boundary)
    P = grid2.prices()
    _, Y = grid2.mesh()
    tau2 = np.broadcast_to(svm.tau2(P, Y), grid2.shape)
    terminal = _broadcast_x(u2, grid2, "u2")
    jump = _broadcast_x(u1, grid2, "u1") if tg.has_jump else None
    values, after, controls, worst = sweep_2d(G, grid2, tau2, terminal, tg.times,
                                              tg.jump_index, jump)
    meta = {"cfl": worst, "boundary": boundary,
            "sup_norm_ratio": _sup_ratio(values, jump, terminal)}
    if after is not None:
        meta["jump_residual"] = float(np.max(np.abs(values[tg.jump_index] - jump - after)))
    return HjSolution(values, tg.times, grid2, "sb", after, tg.jump_index, controls, meta)


def _post_times(tg):
    return tg.times[tg.jump_index:] if tg.has_jump else tg.times


def _terminal_in_w(u2, wgrid):
    w = wgrid.nodes
    if callable(u2):
        return np.asarray(u2(np.exp(w)), dtype=float)
    return _as_nodal(u2, len(wgrid), "u2")


def solve_hj_log(svm, terminal, grid2, times, boundary="linear", quadratic=True, G=None):
    """Balayage en coordonnée w sans saut ; ``terminal`` est un tableau (nw, ny)."""
    if grid2.coordinate != "w":
        raise GridError("Grille en coordonnée logarithmique attendue")
    if G is None:
        G, _ = generator_matrix(svm, grid2, boundary)
    P = grid2.prices()
    _, Y = grid2.mesh()
    tau2 = np.broadcast_to(svm.tau2(P, Y), grid2.shape)
    terminal = np.broadcast_to(np.asarray(terminal, dtype=float), grid2.shape)
    values, _, controls, worst = sweep_2d(G, grid2, tau2, terminal, np.asarray(times), quadratic=quadratic)
    kind = "log" if quadratic else "linear"
    return HjSolution(values, np.asarray(times), grid2, kind, controls=controls,
                      metadata={"cfl": worst, "boundary": boundary})


def solve_hj_vix_post(svm, u2, delta, wgrid, ygrid, tg, boundary="linear", check_domain=False,
                      domain_tol=1e-3, G=None):
    """Problème post-T1 paramétré par delta : v(T2, w, y) = u2(e^w) - delta w."""
    grid2 = Grid2D(wgrid, ygrid, "w")
    times = _post_times(tg)
    u2w = _terminal_in_w(u2, wgrid)
    terminal = (u2w - delta * wgrid.nodes)[:, None] * np.ones((1, len(ygrid)))
    sol = solve_hj_log(svm, terminal, grid2, times, boundary, G=G)
    growth = float(np.max(np.abs(sol.initial) / (1.0 + np.abs(wgrid.nodes))[:, None]))
    sol.metadata.update(delta=float(delta), growth_C=growth)

    if check_domain:
        wide = wgrid.doubled()
        wide_u2 = u2 if callable(u2) else np.interp(wide.nodes, wgrid.nodes, u2w)
        wide_sol = solve_hj_vix_post(svm, wide_u2, delta, wide, ygrid, tg, boundary)
        centre = 0.5 * (wgrid.lo + wgrid.hi)
        quarter = 0.25 * (wgrid.hi - wgrid.lo)
        region = np.abs(wgrid.nodes - centre) <= quarter + 1e-12
        coarse = sol.initial[region]
        fine = np.stack([np.interp(wgrid.nodes[region], wide.nodes, wide_sol.initial[:, j])
                         for j in range(len(ygrid))], axis=1)
        gap = float(np.max(np.abs(coarse - fine)))
        sol.metadata["domain_gap"] = gap
        if gap > domain_tol * (1.0 + float(np.max(np.abs(coarse)))):
            raise DomainSizeError(
                f"Le doublement du domaine en w modifie la solution de {gap:.3e} : élargir la grille")
    return sol


def stable_time_grid_2d(svm, grid2, t0, T1, T2, grad_bound, boundary="linear", safety=0.9):
    """Grille en temps et générateur assemblé pour un balayage 2D stable."""
    G, monotone = generator_matrix(svm, grid2, boundary)
    P = grid2.prices()
    _, Y = grid2.mesh()
    tau2 = np.broadcast_to(svm.tau2(P, Y), grid2.shape)
    dt = stable_dt_2d(G, grid2, tau2, grad_bound, safety)
    return TimeGrid.for_step(t0, T1, T2, dt), G
