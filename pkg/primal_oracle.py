"""Oracles primaux de petite taille pour certifier les écarts de dualité.

* transport martingale discret : programme linéaire (forme perspective de L
  linéarisée par morceaux), résolu par un simplexe dense à deux phases sur
  les petites grilles, par HiGHS (creux) au-delà ;
* pont de Schrödinger sur un arbre de chemins : entropie relative minimale
  sous contraintes linéaires, par le dual exponentiel ;
* contrainte VIX' (ordre convexe bas) par point fixe sur V.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse
from scipy.optimize import linprog, minimize
from scipy.special import logsumexp

from errors import ConvergenceError, DomainError, GridError, InfeasibleError, NumericalFailure
from grids import Grid1D, TimeGrid
from measures import GridMeasure

logger = logging.getLogger(__name__)

DEGENERATE_SWITCH = 50
DENSE_MAX_NODES = 15
MAX_ORACLE_NODES = 81
MAX_ORACLE_STEPS = 4
MAX_TREE_DEPTH = 6
PHASE_ONE_MAX_PATHS = 2000


# --- simplexe -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LpResult:
    x: np.ndarray
    value: float
    duals: np.ndarray
    reduced_costs: np.ndarray
    basis: np.ndarray
    iterations: int
    certified: bool
    complementarity: float

    def debug_dump(self):
        "Base, coûts réduits et multiplicateurs (sortie de diagnostic)."
        return {"basis": self.basis.tolist(), "reduced_costs": self.reduced_costs.tolist(),
                "duals": self.duals.tolist(), "iterations": self.iterations}


def _pivot(T, basis, r, j):
    T[r] /= T[r, j]
    col = T[:, j].copy()
    col[r] = 0.0
    T -= np.outer(col, T[r])
    basis[r] = j


def _run(T, basis, ncols, tol, max_iter):
    """Boucle du simplexe sur le tableau T (dernière ligne : coûts réduits).

    Règle de Dantzig, puis règle de Bland après une série de pivots dégénérés.
    """
    m = T.shape[0] - 1
    degenerate = 0
    for it in range(max_iter):
        rc = T[-1, :ncols]
        if degenerate >= DEGENERATE_SWITCH:
            candidates = np.nonzero(rc < -tol)[0]
            if not candidates.size:
                return it
            j = int(candidates[0])
        else:
            j = int(np.argmin(rc))
            if rc[j] >= -tol:
                return it
        col = T[:m, j]
        rows = np.nonzero(col > tol)[0]
        if not rows.size:
            raise NumericalFailure("Programme linéaire non borné")
        ratios = T[rows, -1] / col[rows]
        best = ratios.min()
        ties = rows[ratios <= best + tol * (1.0 + abs(best))]
        r = int(ties[np.argmin(basis[ties])])
        degenerate = degenerate + 1 if best <= tol else 0
        _pivot(T, basis, r, j)
    raise ConvergenceError(f"Simplexe non convergé après {max_iter} pivots")


def simplex(c, A, b, tol=1e-9, max_iter=100_000, labels=None):
    """min c.x sous A x = b, x >= 0, par la méthode des deux phases.

    En cas d'infaisabilité, InfeasibleError porte les contraintes dont la
    variable artificielle reste positive.
    """
    c = np.asarray(c, dtype=float)
    A = np.array(A, dtype=float)
    b = np.array(b, dtype=float)
    m, n = A.shape
    flip = b < 0
    A[flip] *= -1.0
    b[flip] *= -1.0

    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :n] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = np.arange(n, n + m)
    iters = _run(T, basis, n + m, tol, max_iter)

    phase_one = -T[-1, -1]
    if phase_one > tol * (1.0 + b.sum()):
        stuck = [int(r) for r in range(m) if basis[r] >= n and T[r, -1] > tol]
        names = [labels[r] if labels else r for r in stuck]
        raise InfeasibleError(f"Programme infaisable (phase 1 : {phase_one:.3e})",
                              report={"phase_one": float(phase_one), "constraints": names})

    keep = np.ones(m, dtype=bool)
    for r in range(m):
        if basis[r] >= n:
            cols = np.nonzero(np.abs(T[r, :n]) > tol)[0]
            if cols.size:
                _pivot(T, basis, r, int(cols[0]))
            else:
                keep[r] = False
    rows = np.nonzero(keep)[0]
    T = np.vstack([T[rows][:, list(range(n)) + [n + m]], np.zeros((1, n + 1))])
    basis = basis[rows]
    A_kept = A[rows]

    cB = c[basis]
    T[-1, :n] = c - cB @ T[:-1, :n]
    T[-1, -1] = -cB @ T[:-1, -1]
    iters += _run(T, basis, n, tol, max_iter)

    x = np.zeros(n)
    x[basis] = T[:-1, -1]
    x = np.maximum(x, 0.0)
    y_kept = np.linalg.lstsq(A_kept[:, basis].T, c[basis], rcond=None)[0]
    rc = c - A_kept.T @ y_kept
    duals = np.zeros(m)
    duals[rows] = y_kept
    duals[flip] *= -1.0
    scale = 1.0 + float(np.abs(c).max())
    certified = bool(rc.min() >= -tol * scale * 10)
    comp = float(np.max(np.abs(x * rc))) if n else 0.0
    return LpResult(x, float(c @ x), duals, rc, basis, iters, certified, comp)


def highs(c, A, b, tol=1e-9):
    """min c.x sous A x = b, x >= 0 avec ``linprog(method="highs")`` ; A peut être creuse.

    Même contrat que ``simplex`` : InfeasibleError si le programme est infaisable.
    """
    c = np.asarray(c, dtype=float)
    b = np.asarray(b, dtype=float)
    ftol = max(tol, 1e-10)
    res = linprog(c, A_eq=A, b_eq=b, bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": ftol, "dual_feasibility_tolerance": ftol})
    if res.status == 2:
        raise InfeasibleError(f"Programme infaisable (HiGHS : {res.message})",
                              report={"status": int(res.status), "message": res.message})
    if res.status == 3:
        raise NumericalFailure("Programme linéaire non borné")
    if res.status != 0:
        raise ConvergenceError(f"HiGHS non convergé : {res.message}")
    x = np.maximum(res.x, 0.0)
    rc = np.asarray(res.lower.marginals, dtype=float)
    duals = np.asarray(res.eqlin.marginals, dtype=float)
    scale = 1.0 + float(np.abs(c).max())
    certified = bool(rc.min() >= -tol * scale * 10) if rc.size else True
    comp = float(np.max(np.abs(x * rc))) if rc.size else 0.0
    return LpResult(x, float(res.fun), duals, rc, np.nonzero(x > tol)[0], int(res.nit), certified, comp)


# --- transport martingale discret -------------------------------------------

@dataclass(frozen=True, eq=False)
class DiscreteMotInstance:
    """Grille d'au plus 81 noeuds, au plus 4 pas par tranche, points de
    rupture de la linéarisation de L."""

    grid: Grid1D
    tg: TimeGrid
    mu0: GridMeasure
    mu1: GridMeasure | None
    mu2: GridMeasure
    lagrangian: object = field(repr=False)
    breakpoints: np.ndarray = field(repr=False)
    transitions: str = "neighbor"

    def __post_init__(self):
        if len(self.grid) > MAX_ORACLE_NODES:
            raise GridError(f"Oracle limité à {MAX_ORACLE_NODES} noeuds ({len(self.grid)} demandés)")
        if max(self.tg.n1, self.tg.n2) > MAX_ORACLE_STEPS:
            raise GridError(f"Oracle limité à {MAX_ORACLE_STEPS} pas de temps par tranche")
        if self.transitions not in ("neighbor", "full"):
            raise DomainError(f"Mode de transitions inconnu: {self.transitions}")
        bp = np.asarray(self.breakpoints, dtype=float)
        if bp[0] != 0.0 or np.any(np.diff(bp) <= 0):
            raise GridError("Points de rupture croissants depuis 0 attendus")


def matched_instance(mot, segments=64, b_top=None):
    """Oracle apparié à une instance de mot_dual : mêmes grilles, points de rupture
    extraits de la grille en b du hamiltonien (sous-ensemble de cette grille).

    Transitions aux voisins pour le schéma explicite, quelconques pour le schéma
    enveloppe. ``b_top`` borne la plage linéarisée (au moins ``segments`` segments
    si la grille en b le permet).
    """
    b_grid = mot.h.b_grid
    transitions = "full" if getattr(mot, "scheme", "explicit") == "envelope" else "neighbor"
    if b_top is None:
        if (b_grid.size - 1) % segments:
            raise GridError(f"n_b - 1 = {b_grid.size - 1} n'est pas multiple de {segments}")
        stride = (b_grid.size - 1) // segments
        idx = np.arange(0, b_grid.size, stride)
    else:
        top = min(max(int(np.searchsorted(b_grid, b_top)), 1), b_grid.size - 1)
        stride = max(1, math.ceil(top / segments))
        idx = np.unique(np.minimum(np.arange(0, top + stride, stride), b_grid.size - 1))
    return DiscreteMotInstance(mot.grid, mot.tg, mot.mu0, mot.mu1, mot.mu2, mot.h.lagrangian,
                               b_grid[idx].copy(), transitions)


def matched_oracle(mot, b_observed, segments=64, tol=1e-9, factor=2.0):
    """Oracle apparié résolu. Schéma enveloppe : L linéarisée sur [0, factor b_observed],
    puis sur toute la table si ce programme restreint est infaisable.

    Renvoie (instance discrète, résultat).
    """
    if getattr(mot, "scheme", "explicit") != "envelope":
        inst = matched_instance(mot, segments)
        return inst, solve_discrete_mot(inst, tol)
    b_top = factor * b_observed
    inst = matched_instance(mot, segments, b_top)
    try:
        return inst, solve_discrete_mot(inst, tol)
    except InfeasibleError:
        logger.warning("Oracle infaisable avec b <= %.4g : linéarisation sur toute la table", b_top)
    inst = matched_instance(mot, segments, float(mot.h.b_grid[-1]))
    return inst, solve_discrete_mot(inst, tol)


class _Program:
    "Accumulateur de variables et de contraintes d'égalité."

    def __init__(self):
        self.n = 0
        self.cost = []
        self.rows = []
        self.rhs = []
        self.labels = []

    def variables(self, shape, cost=0.0):
        count = int(np.prod(shape))
        idx = np.arange(self.n, self.n + count).reshape(shape)
        self.n += count
        self.cost.append(np.broadcast_to(np.asarray(cost, dtype=float), shape).ravel())
        return idx

    def equal(self, idx, coef, rhs, label):
        self.rows.append((np.atleast_1d(idx).ravel(), np.atleast_1d(np.asarray(coef, dtype=float)).ravel()))
        self.rhs.append(float(rhs))
        self.labels.append(label)

    def matrix(self):
        "Matrice creuse des contraintes (coefficients répétés sommés)."
        ri = np.concatenate([np.full(idx.size, r) for r, (idx, _) in enumerate(self.rows)])
        ci = np.concatenate([idx for idx, _ in self.rows])
        data = np.concatenate([np.broadcast_to(coef, idx.shape) for idx, coef in self.rows])
        return sparse.coo_matrix((data, (ri, ci)), shape=(len(self.rows), self.n)).tocsr()

    def solve(self, tol, dense=True):
        A = self.matrix()
        c, b = np.concatenate(self.cost), np.array(self.rhs)
        if dense:
            return simplex(c, A.toarray(), b, tol, labels=self.labels)
        return highs(c, A, b, tol)


@dataclass(frozen=True, eq=False)
class MotOracleResult:
    value: float
    masses: np.ndarray
    diffusion: np.ndarray
    lp: LpResult = field(repr=False)

    @property
    def certified(self):
        return self.lp.certified

    def to_dict(self):
        return {"value": self.value, "certified": self.certified,
                "iterations": self.lp.iterations, "complementarity": self.lp.complementarity}


def _pins(inst):
    pins = {0: inst.mu0, inst.tg.n_steps: inst.mu2}
    if inst.tg.has_jump and inst.mu1 is not None:
        pins[inst.tg.jump_index] = inst.mu1
    return pins


def solve_discrete_mot(inst, tol=1e-9):
    """Valeur optimale du programme discret et flot (m, b) associé."""
    x = inst.grid.nodes
    n = x.size
    steps = inst.tg.n_steps
    dt = inst.tg.dt
    bp = np.asarray(inst.breakpoints, dtype=float)
    Lb = np.asarray(inst.lagrangian(bp), dtype=float)
    L0 = float(inst.lagrangian(0.0))
    prog = _Program()
    m = prog.variables((steps + 1, n))

    for k, mu in _pins(inst).items():
        for i in range(n):
            prog.equal(m[k, i], 1.0, mu.weights[i], f"marge t{k} x{i}")

    if inst.transitions == "neighbor":
        hp, hm = inst.grid.h_plus, inst.grid.h_minus
        right = 1.0 / (hp * (hp + hm))
        left = 1.0 / (hm * (hp + hm))
        lam = [prog.variables((n - 2, bp.size), cost=dt[k] * Lb[None, :]) for k in range(steps)]
        ends = [prog.variables(2, cost=dt[k] * L0) for k in range(steps)]
        for k in range(steps):
            lk = lam[k]
            for i in range(1, n - 1):
                prog.equal(np.concatenate([lk[i - 1], [m[k, i]]]),
                           np.concatenate([np.ones(bp.size), [-1.0]]), 0.0, f"perspective t{k} x{i}")
            for e, i in enumerate((0, n - 1)):
                prog.equal([ends[k][e], m[k, i]], [1.0, -1.0], 0.0, f"bord t{k} x{i}")
            for i in range(n):
                idx, coef = [m[k + 1, i], m[k, i]], [-1.0, 1.0]
                if 0 < i < n - 1:
                    idx.append(lk[i - 1])
                    coef.append(-dt[k] * bp * (right[i - 1] + left[i - 1]))
                if 1 < i:
                    idx.append(lk[i - 2])
                    coef.append(dt[k] * bp * right[i - 2])
                if i < n - 2:
                    idx.append(lk[i])
                    coef.append(dt[k] * bp * left[i])
                prog.equal(np.concatenate([np.atleast_1d(v).ravel() for v in idx]),
                           np.concatenate([np.atleast_1d(v).ravel() for v in coef]), 0.0,
                           f"transport t{k} x{i}")
    else:
        pi = [prog.variables((n, n)) for _ in range(steps)]
        lam = [prog.variables((n, bp.size), cost=dt[k] * Lb[None, :]) for k in range(steps)]
        jumps = x[None, :] - x[:, None]
        for k in range(steps):
            for i in range(n):
                prog.equal(np.concatenate([pi[k][i], [m[k, i]]]),
                           np.concatenate([np.ones(n), [-1.0]]), 0.0, f"départ t{k} x{i}")
                prog.equal(np.concatenate([pi[k][:, i], [m[k + 1, i]]]),
                           np.concatenate([np.ones(n), [-1.0]]), 0.0, f"arrivée t{k + 1} x{i}")
                prog.equal(pi[k][i], jumps[i], 0.0, f"martingale t{k} x{i}")
                prog.equal(np.concatenate([lam[k][i], [m[k, i]]]),
                           np.concatenate([np.ones(bp.size), [-1.0]]), 0.0, f"perspective t{k} x{i}")
                prog.equal(np.concatenate([lam[k][i], pi[k][i]]),
                           np.concatenate([dt[k] * bp, -jumps[i] ** 2]), 0.0, f"variance t{k} x{i}")

    res = prog.solve(tol, dense=n <= DENSE_MAX_NODES)
    masses = res.x[m]
    diffusion = np.zeros((steps, n))
    for k in range(steps):
        weights = res.x[lam[k]]
        mass = weights.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            rows = np.where(mass > 0, weights @ bp / mass, 0.0)
        if inst.transitions == "neighbor":
            diffusion[k, 1:-1] = rows
        else:
            diffusion[k] = rows
    logger.info("Oracle MOT (%s, %d noeuds) : valeur %.10g en %d itérations, certifié=%s",
                inst.transitions, n, res.value, res.iterations, res.certified)
    return MotOracleResult(res.value, masses, diffusion, res)


def refine_discrete_mot(inst, tol=1e-7, max_segments=1024):
    """Double le nombre de segments de L jusqu'à une variation de valeur < tol.

    Les points de rupture restent sur [0, max] : seule la résolution change.
    """
    result = solve_discrete_mot(inst)
    segments = inst.breakpoints.size - 1
    while segments * 2 <= max_segments:
        segments *= 2
        finer = DiscreteMotInstance(inst.grid, inst.tg, inst.mu0, inst.mu1, inst.mu2, inst.lagrangian,
                                    np.linspace(0.0, inst.breakpoints[-1], segments + 1), inst.transitions)
        nxt = solve_discrete_mot(finer)
        change = abs(nxt.value - result.value)
        result = nxt
        if change < tol:
            return result, segments
    logger.warning("Raffinement de L arrêté à %d segments", segments)
    return result, segments


# --- arbre de chemins ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathTree:
    """Arbre enraciné des états (X, Y) ; ``parent[l]`` et ``prob[l]`` décrivent le
    passage du niveau l-1 au niveau l."""

    times: np.ndarray
    X: list = field(repr=False)
    Y: list = field(repr=False)
    parent: list = field(repr=False)
    prob: list = field(repr=False)
    t1_level: int | None = None

    def __post_init__(self):
        if self.depth > MAX_TREE_DEPTH:
            raise GridError(f"Profondeur {self.depth} > {MAX_TREE_DEPTH}")
        for level in range(1, self.depth + 1):
            sums = np.bincount(self.parent[level], weights=self.prob[level],
                               minlength=self.X[level - 1].size)
            if not np.allclose(sums, 1.0, atol=1e-12):
                raise GridError(f"Probabilités de transition non normalisées au niveau {level}")

    @property
    def depth(self):
        return len(self.X) - 1

    @property
    def n_paths(self):
        return self.X[-1].size

    def ancestors(self, level):
        "Indice au niveau ``level`` de l'ancêtre de chaque feuille."
        idx = np.arange(self.n_paths)
        for lv in range(self.depth, level, -1):
            idx = self.parent[lv][idx]
        return idx

    def path_values(self, level):
        return self.X[level][self.ancestors(level)]

    def p0(self):
        p = np.ones(self.n_paths)
        idx = np.arange(self.n_paths)
        for lv in range(self.depth, 0, -1):
            p *= self.prob[lv][idx]
            idx = self.parent[lv][idx]
        return p

    def node_masses(self, p, level):
        return np.bincount(self.ancestors(level), weights=p, minlength=self.X[level].size)


def build_tree(svm, t0, T1, T2, steps1, steps2):
    """Euler trinomial en W (±sqrt(3 dt), 0 ; 1/6, 2/3, 1/6) et binaire en W_perp :
    6 enfants par noeud, X martingale exacte sur l'arbre."""
    if steps1 + steps2 > MAX_TREE_DEPTH:
        raise GridError(f"Profondeur {steps1 + steps2} > {MAX_TREE_DEPTH}")
    if t0 < T1:
        times = np.concatenate([np.linspace(t0, T1, steps1 + 1), np.linspace(T1, T2, steps2 + 1)[1:]])
    else:
        steps1 = 0
        times = np.linspace(t0, T2, steps2 + 1)
    dw = np.array([-math.sqrt(3.0), 0.0, math.sqrt(3.0)])
    pw = np.array([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0])
    dp = np.array([-1.0, 1.0])
    z1 = np.repeat(dw, 2)
    z2 = np.tile(dp, 3)
    pr = np.repeat(pw, 2) * 0.5

    X = [np.array([float(svm.x0)])]
    Y = [np.array([float(svm.y0)])]
    parent, prob = [None], [None]
    for k in range(times.size - 1):
        dt = times[k + 1] - times[k]
        sq = math.sqrt(dt)
        x, y = X[-1], Y[-1]
        st, b, t1, t2 = svm.coefficients(x, y)
        if np.any(st * math.sqrt(3.0) * sq >= 1.0):
            raise GridError("Pas trop grand : X deviendrait négatif sur l'arbre")
        X.append((x[:, None] * (1.0 + st[:, None] * sq * z1[None, :])).ravel())
        Y.append((y[:, None] + b[:, None] * dt + t1[:, None] * sq * z1[None, :]
                  + t2[:, None] * sq * z2[None, :]).ravel())
        parent.append(np.repeat(np.arange(x.size), 6))
        prob.append(np.tile(pr, x.size))
    return PathTree(times, X, Y, parent, prob, steps1 if t0 < T1 else None)


@dataclass(frozen=True, eq=False)
class EntropyResult:
    p: np.ndarray
    value: float
    dual_value: float
    multipliers: np.ndarray = field(repr=False)
    kkt_residual: float = 0.0
    converged: bool = True
    fixed_point: dict = field(default_factory=dict)
    V: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self):
        return {"value": self.value, "dual_value": self.dual_value,
                "kkt_residual": self.kkt_residual, "converged": self.converged,
                "fixed_point": self.fixed_point}


def _linear_constraints(tree, mu1, mu2, martingale):
    blocks, targets = [], []
    for level, mu in ((tree.t1_level, mu1), (tree.depth, mu2)):
        if mu is None or level is None:
            continue
        blocks.append(mu.grid.interpolation_matrix(tree.path_values(level)).T.tocsr())
        targets.append(mu.weights)
    if martingale:
        for level in range(tree.depth):
            node = tree.ancestors(level)
            step = tree.path_values(level + 1) - tree.X[level][node]
            blocks.append(sparse.csr_matrix((step, (node, np.arange(tree.n_paths))),
                                            shape=(tree.X[level].size, tree.n_paths)))
            targets.append(np.zeros(tree.X[level].size))
    if not blocks:
        return sparse.csr_matrix((0, tree.n_paths)), np.zeros(0)
    return sparse.vstack(blocks).tocsr(), np.concatenate(targets)


def conditional_v(tree, p):
    """V = E_p[-log X_T2 + log X_T1 | noeud en T1], recopié sur chaque chemin."""
    if tree.t1_level is None:
        raise DomainError("Arbre sans niveau T1")
    anc = tree.ancestors(tree.t1_level)
    log_ret = -np.log(tree.X[-1]) + np.log(tree.path_values(tree.t1_level))
    mass = np.bincount(anc, weights=p, minlength=tree.X[tree.t1_level].size)
    num = np.bincount(anc, weights=p * log_ret, minlength=mass.size)
    node_v = np.where(mass > 0, num / np.where(mass > 0, mass, 1.0), 0.0)
    return node_v[anc]


def _vix_constraints(V, mu3):
    "Lignes (calls puis puts) de l'ordre convexe bas : E_p[a] <= b."
    K = mu3.nodes[mu3.nodes >= 0]
    calls = np.maximum(V[None, :] - K[:, None], 0.0)
    puts = np.maximum(K[:, None] - V[None, :], 0.0)
    return np.vstack([calls, puts]), np.concatenate([mu3.call_prices(K), mu3.put_prices(K)])


def _phase_one(A, b):
    "Faisabilité de {p >= 0, sum p = 1, A p = b} par la phase 1 du simplexe."
    dense = np.vstack([np.ones((1, A.shape[1])), A.toarray()])
    simplex(np.zeros(A.shape[1]), dense, np.concatenate([[1.0], b]))


def _newton(A, b, logp0, tol, max_iter):
    """Ascension de Newton amortie sur D(l) = l.b - log sum p0 exp(A^T l)."""
    lam = np.zeros(A.shape[0])

    def dual(l):
        return float(l @ b - logsumexp(logp0 + A.T @ l))

    value = dual(lam)
    for it in range(max_iter):
        logits = logp0 + A.T @ lam
        p = np.exp(logits - logsumexp(logits))
        mean = A @ p
        grad = b - mean
        if np.max(np.abs(grad), initial=0.0) <= tol:
            return lam, p, True
        Ap = A.multiply(np.sqrt(p)[None, :]).toarray() if sparse.issparse(A) else A * np.sqrt(p)
        cov = Ap @ Ap.T - np.outer(mean, mean)
        step = np.linalg.lstsq(cov, grad, rcond=1e-12)[0]
        slope = float(grad @ step)
        if slope <= 0:
            step, slope = grad, float(grad @ grad)
        t = 1.0
        for _ in range(60):
            trial = dual(lam + t * step)
            if trial >= value + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            return lam, p, False
        lam = lam + t * step
        value = trial
        if np.max(np.abs(lam)) > 1e8:
            raise InfeasibleError("Multiplicateurs divergents : contraintes incompatibles sur l'arbre",
                                  report={"kkt_residual": float(np.max(np.abs(grad)))})
    logits = logp0 + A.T @ lam
    return lam, np.exp(logits - logsumexp(logits)), False


def _bounded_dual(A, b, n_eq, logp0, tol):
    """Dual avec contraintes d'inégalité (multiplicateurs <= 0) par L-BFGS-B."""
    A = A.toarray() if sparse.issparse(A) else A

    def negdual(l):
        logits = logp0 + A.T @ l
        lz = logsumexp(logits)
        p = np.exp(logits - lz)
        return -(l @ b - lz), -(b - A @ p)

    bounds = [(None, None)] * n_eq + [(None, 0.0)] * (A.shape[0] - n_eq)
    res = minimize(negdual, np.zeros(A.shape[0]), jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": 10000, "maxfun": 20000, "maxcor": 30, "gtol": tol, "ftol": 1e-16})
    logits = logp0 + A.T @ res.x
    return res.x, np.exp(logits - logsumexp(logits)), bool(res.success)


def _finish(A, b, n_eq, lam, p, logp0, converged, fixed_point=None, V=None):
    with np.errstate(divide="ignore", invalid="ignore"):
        value = float(np.sum(np.where(p > 0, p * (np.log(p) - logp0), 0.0)))
    dual_value = float(lam @ b - logsumexp(logp0 + (A.T @ lam)))
    gap = A @ p - b
    kkt = max(float(np.max(np.abs(gap[:n_eq]), initial=0.0)),
              float(np.max(np.maximum(gap[n_eq:], 0.0), initial=0.0)))
    return EntropyResult(p, value, dual_value, lam, kkt, converged, fixed_point or {}, V)


def solve_discrete_sb(tree, mu1, mu2, mu3=None, martingale=True, tol=1e-10, max_iter=200,
                      fixed_point_iters=50):
    """min sum p log(p/p0) sous marges (chapeaux) en T1 et T2, martingale à chaque
    noeud et, si ``mu3`` est fourni, V <=_{c,l} mu3 par point fixe sur V."""
    p0 = tree.p0()
    if np.any(p0 <= 0):
        raise DomainError("Probabilités de référence nulles sur l'arbre")
    logp0 = np.log(p0)
    A, b = _linear_constraints(tree, mu1, mu2, martingale)
    n_eq = A.shape[0]
    if tree.n_paths <= PHASE_ONE_MAX_PATHS and n_eq:
        _phase_one(A, b)

    if n_eq:
        lam, p, ok = _newton(A, b, logp0, tol, max_iter)
    else:
        lam, p, ok = np.zeros(0), p0 / p0.sum(), True
    if mu3 is None:
        return _finish(A, b, n_eq, lam, p, logp0, ok)

    V = conditional_v(tree, p)
    # contraintes de la dernière résolution, pour la valeur duale
    used_A, used_b = A, b
    history = []
    done = False
    for it in range(fixed_point_iters):
        Av, bv = _vix_constraints(V, mu3)
        full_A = sparse.vstack([A, sparse.csr_matrix(Av)]).tocsr() if n_eq else sparse.csr_matrix(Av)
        full_b = np.concatenate([b, bv])
        lam, p, ok = _bounded_dual(full_A, full_b, n_eq, logp0, tol)
        used_A, used_b = full_A, full_b
        V_new = conditional_v(tree, p)
        change = float(np.max(np.abs(V_new - V)))
        history.append(change)
        V = V_new
        if change < 1e-8:
            done = True
            break
    if not done:
        logger.warning("Point fixe VIX non convergé (dernier écart %.3e) : valeur majorante seulement",
                       history[-1] if history else float("nan"))
    fp = {"iterations": len(history), "last_change": history[-1] if history else 0.0, "converged": done}
    return _finish(used_A, used_b, n_eq, lam, p, logp0, ok and done, fp, V)


def check_attainment(result, tree, mu1, mu2, mu3=None, tol=1e-8):
    """Martingale, marges et ordre convexe bas de la mesure trouvée."""
    p = result.p
    report = {}
    worst = 0.0
    for level in range(tree.depth):
        node = tree.ancestors(level)
        step = tree.path_values(level + 1) - tree.X[level][node]
        drift = np.bincount(node, weights=p * step, minlength=tree.X[level].size)
        worst = max(worst, float(np.max(np.abs(drift))))
    report["martingale"] = {"residual": worst, "pass": worst <= tol}
    for name, level, mu in (("T1", tree.t1_level, mu1), ("T2", tree.depth, mu2)):
        if mu is None or level is None:
            continue
        law = mu.grid.interpolation_matrix(tree.path_values(level)).T @ p
        gap = float(np.max(np.abs(law - mu.weights)))
        report[f"marginal_{name}"] = {"residual": gap, "pass": gap <= tol}
    if mu3 is not None:
        Av, bv = _vix_constraints(conditional_v(tree, p), mu3)
        excess = float(np.max(np.maximum(Av @ p - bv, 0.0), initial=0.0))
        report["convex_lower"] = {"residual": excess, "pass": excess <= tol}
    report["passed"] = all(v["pass"] for v in report.values())
    return report
