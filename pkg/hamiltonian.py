"""Coût L(b) de la diffusion et hamiltonien H(a) = sup_{b>=0} {-a b - L(b)}.

H est tabulé par maximisation brute sur une grille en b. Entre deux noeuds
de la table, H et b* sont interpolés linéairement : la corde d'une fonction
convexe est au-dessus de la fonction, ce qui garde la dualité faible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd

from errors import DomainError, GridError, InsufficientDataError, TableRangeError, TruncationError

logger = logging.getLogger(__name__)

CATALOG = ("quadratic", "power", "entropic_like", "uniformly_elliptic")
CONVEXITY_TOL = 1e-10
CHUNK = 256


@dataclass(frozen=True)
class LagrangianSpec:
    evaluator: Callable = field(repr=False)
    name: str = "custom"
    p: float = 2.0
    C: float = float("nan")
    C_prime: float = float("nan")
    convex: bool = True

    def __call__(self, b):
        b = np.asarray(b, dtype=float)
        if np.any(b < 0):
            raise DomainError(f"L n'est définie que pour b >= 0 (reçu {b.min()})")
        return np.asarray(self.evaluator(b), dtype=float)


def _entropic(b):
    with np.errstate(divide="ignore", invalid="ignore"):
        blogb = np.where(b > 0, b * np.log(np.where(b > 0, b, 1.0)), 0.0)
    return blogb - b + 1.0


def _tabulated(path):
    df = pd.read_csv(path, encoding="utf-8")
    missing = [col for col in ("b", "L") if col not in df.columns]
    if missing:
        raise InsufficientDataError(f"Colonnes manquantes: {', '.join(missing)}")
    df = df.sort_values("b")
    bs = df["b"].to_numpy(float)
    ls = df["L"].to_numpy(float)
    if bs.size < 2 or bs[0] != 0.0:
        raise InsufficientDataError("La table de L doit commencer en b = 0 avec au moins 2 points")
    last_slope = (ls[-1] - ls[-2]) / (bs[-1] - bs[-2])

    def evaluator(b):
        inside = np.interp(b, bs, ls)
        return np.where(b > bs[-1], ls[-1] + last_slope * (b - bs[-1]), inside)

    return evaluator


def estimate_coercivity(evaluator, b_max, p=2.0, n=1001):
    """Constantes (p, C, C') de L(b) >= C b^p - C' estimées sur [0, b_max]."""
    b = np.linspace(0.0, b_max, n)
    lb = evaluator(b)
    tail = b >= b_max / 2
    C = float(np.min(lb[tail] / b[tail] ** p))
    if C <= 0:
        return p, C, float("nan")
    return p, C, float(max(np.max(C * b**p - lb), 0.0))


def midpoint_convex(evaluator, b_max, n_triples=2000, seed=0):
    rng = np.random.default_rng(seed)
    b1 = rng.uniform(0.0, b_max, n_triples)
    b2 = rng.uniform(0.0, b_max, n_triples)
    l1, l2, lm = evaluator(b1), evaluator(b2), evaluator(0.5 * (b1 + b2))
    slack = 0.5 * (l1 + l2) - lm
    return bool(np.all(slack >= -CONVEXITY_TOL * (1.0 + np.abs(lm))))


def make_lagrangian(name, gamma=1.0, power=2.0, ellipticity=0.5, csv=None, b_max=10.0,
                    evaluator=None, p=None):
    """Construit un coût du catalogue (ou un coût fourni) et son certificat."""
    if evaluator is not None:
        fn, declared = evaluator, p if p is not None else 2.0
    elif name == "quadratic":
        if gamma <= 0:
            raise DomainError("gamma doit être strictement positif")
        fn, declared = (lambda b: b**2 / gamma), 2.0
    elif name == "power":
        if power < 1:
            raise DomainError(f"Exposant {power} < 1 : coût non convexe")
        fn, declared = (lambda b: b**power / power), float(power)
    elif name == "entropic_like":
        fn, declared = _entropic, 1.0
    elif name == "uniformly_elliptic":
        fn, declared = (lambda b: 0.5 * b**2 - ellipticity * b), 2.0
    elif name == "custom":
        if csv is None:
            raise DomainError("Coût 'custom' sans fichier CSV b,L")
        fn, declared = _tabulated(csv), 2.0
    else:
        raise DomainError(f"Coût inconnu: {name} (catalogue: {', '.join(CATALOG)}, custom)")

    if not midpoint_convex(fn, b_max):
        raise DomainError(f"Le coût {name} n'est pas convexe sur [0, {b_max}]")
    p_, C, C_prime = estimate_coercivity(fn, b_max, declared)
    if declared < 2 or C <= 0:
        logger.warning("Coût %s non 2-coercif (p=%s, C=%.3g) : hypothèse (A1) non vérifiée",
                       name, declared, C)
    return LagrangianSpec(fn, name, p_, C, C_prime, True)


@dataclass(frozen=True, eq=False)
class Hamiltonian:
    a_grid: np.ndarray
    values: np.ndarray
    argmax: np.ndarray
    b_grid: np.ndarray = field(repr=False)
    lagrangian: LagrangianSpec = field(repr=False)
    capped: bool = False

    @property
    def a_min(self):
        return float(self.a_grid[0])

    @property
    def a_max(self):
        return float(self.a_grid[-1])

    @property
    def b_sup(self):
        return float(self.argmax.max())

    def _checked(self, a):
        a = np.asarray(a, dtype=float)
        slack = 1e-12 * max(1.0, abs(self.a_min), abs(self.a_max))
        if a.size and (a.min() < self.a_min - slack or a.max() > self.a_max + slack):
            raise TableRangeError(
                f"a hors de la table [{self.a_min:.4g}, {self.a_max:.4g}] "
                f"(min {a.min():.4g}, max {a.max():.4g})")
        return a

    def __call__(self, a):
        return np.interp(self._checked(a), self.a_grid, self.values)

    def b_star(self, a):
        return np.interp(self._checked(a), self.a_grid, self.argmax)

    def b_bound(self, a):
        "Plus grande pente de la table sur le segment contenant a (sert à la CFL)."
        a = self._checked(a)
        idx = np.clip(np.searchsorted(self.a_grid, a, side="right") - 1, 0, self.a_grid.size - 2)
        return self.argmax[idx]

    def chord_rate(self, a):
        "-H' de l'interpolant linéaire sur le segment contenant a (pente à droite)."
        a = self._checked(a)
        idx = np.clip(np.searchsorted(self.a_grid, a, side="right") - 1, 0, self.a_grid.size - 2)
        return -(self.values[idx + 1] - self.values[idx]) / (self.a_grid[idx + 1] - self.a_grid[idx])

    def refined(self):
        a = self.a_grid
        fine_a = np.empty(2 * a.size - 1)
        fine_a[0::2] = a
        fine_a[1::2] = 0.5 * (a[1:] + a[:-1])
        return legendre(self.lagrangian, fine_a, float(self.b_grid[-1]), 2 * self.b_grid.size - 1,
                        capped=self.capped)

    def to_frame(self):
        return pd.DataFrame({"a": self.a_grid, "H": self.values, "b_star": self.argmax})


def legendre(spec, a_grid, b_max, n_b=4001, capped=False):
    """Table de H(a) = max_k {-a b_k - L(b_k)} sur b_k = linspace(0, b_max, n_b).

    Les ex aequo sont départagés par le plus petit b. En mode ``capped`` la
    grille en b est une contrainte (b <= b_max) et non une troncature.
    """
    a = np.asarray(a_grid, dtype=float).ravel()
    if a.size < 3 or np.any(np.diff(a) <= 0):
        raise GridError("La grille en a doit avoir au moins 3 noeuds croissants")
    if b_max <= 0 or n_b < 2:
        raise GridError(f"Grille en b invalide (b_max={b_max}, n_b={n_b})")
    b = np.linspace(0.0, b_max, int(n_b))
    lb = spec(b)
    values = np.empty(a.size)
    idx = np.empty(a.size, dtype=int)
    for start in range(0, a.size, CHUNK):
        block = -np.outer(a[start:start + CHUNK], b) - lb
        k = block.argmax(axis=1)
        idx[start:start + CHUNK] = k
        values[start:start + CHUNK] = block[np.arange(k.size), k]

    if not capped and np.any(idx == b.size - 1):
        worst = float(a[idx == b.size - 1].min())
        raise TruncationError(
            f"b* atteint b_max={b_max} pour a={worst:.4g} : essayer b_max={2 * b_max}",
            suggested_b_max=2.0 * b_max)

    scale = 1e-12 * max(1.0, float(np.abs(values).max()))
    if np.any(np.diff(values) > scale):
        logger.warning("Table de H non décroissante à %.3g près", float(np.diff(values).max()))
    for arr in (a, values, b, idx):
        arr.setflags(write=False)
    return Hamiltonian(a, values, b[idx], b, spec, capped)


def h_prime(h, a):
    """H'(a) = -b*(a), lu sur l'argmax stocké."""
    return -h.b_star(a)


def _max_slope_jump(a, values):
    slopes = np.diff(values) / np.diff(a)
    if slopes.size < 2:
        return 0.0
    return float(np.abs(np.diff(slopes)).max())


def check_a2(h):
    """Test numérique de régularité C^1 : le saut de pente doit diminuer de moitié
    (à un facteur 1.5 près) quand on raffine la table."""
    coarse = _max_slope_jump(h.a_grid, h.values)
    if coarse <= 1e-12:
        return True
    fine_table = h.refined()
    fine = _max_slope_jump(fine_table.a_grid, fine_table.values)
    logger.debug("Saut de pente maximal: %.4g -> %.4g", coarse, fine)
    return fine <= 0.75 * coarse


def fenchel_young_gap(h, b=None):
    """min sur (a, b) de H(a) + a b + L(b) ; positif à l'arrondi près."""
    b = h.b_grid if b is None else np.asarray(b, dtype=float)
    lb = h.lagrangian(b)
    worst = np.inf
    for start in range(0, h.a_grid.size, CHUNK):
        a = h.a_grid[start:start + CHUNK]
        block = h.values[start:start + CHUNK, None] + np.outer(a, b) + lb
        worst = min(worst, float(block.min()))
    return worst


def double_transform(h, b):
    """sup_a {-a b - H(a)} sur la table : retrouve L(b) si L est convexe."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    out = np.empty(b.size)
    for start in range(0, b.size, CHUNK):
        block = -np.outer(b[start:start + CHUNK], h.a_grid) - h.values
        out[start:start + CHUNK] = block.max(axis=1)
    return out


def hamiltonian_from_settings(settings, a_max, b_max=None, n_b=None, capped=None):
    """H sur [-a_max, a_max] avec les paramètres de coût de la configuration."""
    b_max = settings.b_max if b_max is None else b_max
    if b_max is None or b_max <= 0:
        raise GridError("b_max doit être fourni (configuration ou borne CFL)")
    spec = make_lagrangian(settings.lagrangian, settings.gamma, settings.power,
                           settings.ellipticity, settings.lagrangian_csv, b_max=b_max)
    a_grid = np.linspace(-a_max, a_max, settings.n_a)
    return legendre(spec, a_grid, b_max, n_b or settings.n_b,
                    capped=settings.capped if capped is None else capped)
