"""Grilles d'espace et de temps, matrices d'interpolation linéaire."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse

from errors import GridError


def _frozen(values):
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Grid1D:
    """Noeuds strictement croissants (prix ou log-prix), pas éventuellement non uniforme."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = _frozen(np.ravel(self.nodes))
        if nodes.size < 3:
            raise GridError(f"Une grille demande au moins 3 noeuds (reçu {nodes.size})")
        if not np.all(np.isfinite(nodes)):
            raise GridError("Noeuds de grille non finis")
        if np.any(np.diff(nodes) <= 0):
            raise GridError("Les noeuds doivent être strictement croissants")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, lo, hi, n):
        return cls(np.linspace(lo, hi, int(n)))

    def __len__(self):
        return self.nodes.size

    @property
    def lo(self):
        return float(self.nodes[0])

    @property
    def hi(self):
        return float(self.nodes[-1])

    @property
    def steps(self):
        return np.diff(self.nodes)

    @property
    def is_uniform(self):
        h = self.steps
        return bool(np.allclose(h, h[0], rtol=1e-9, atol=0.0))

    @property
    def h_minus(self):
        "Pas à gauche des noeuds intérieurs."
        return self.steps[:-1]

    @property
    def h_plus(self):
        "Pas à droite des noeuds intérieurs."
        return self.steps[1:]

    def second_difference(self, u, axis=0):
        """D²u aux noeuds intérieurs, zéro aux extrémités (extrapolation linéaire)."""
        u = np.asarray(u, dtype=float)
        u = np.moveaxis(u, axis, 0)
        shape = (-1,) + (1,) * (u.ndim - 1)
        hm = self.h_minus.reshape(shape)
        hp = self.h_plus.reshape(shape)
        d2 = np.zeros_like(u)
        d2[1:-1] = 2.0 * ((u[2:] - u[1:-1]) / hp - (u[1:-1] - u[:-2]) / hm) / (hp + hm)
        return np.moveaxis(d2, 0, axis)

    def brackets(self, points):
        "Indice du noeud à gauche et poids du noeud à droite (points ramenés dans [lo, hi])."
        pts = np.clip(np.ravel(np.asarray(points, dtype=float)), self.lo, self.hi)
        idx = np.clip(np.searchsorted(self.nodes, pts, side="right") - 1, 0, len(self) - 2)
        left = self.nodes[idx]
        return idx, (pts - left) / (self.nodes[idx + 1] - left)

    def interpolation_matrix(self, points):
        """Matrice creuse P telle que P @ f donne l'interpolée linéaire de f aux points.

        Extrapolation plate hors de [lo, hi]. La transposée répartit une masse
        ponctuelle sur les deux noeuds voisins en conservant la moyenne.
        """
        idx, theta = self.brackets(points)
        rows = np.repeat(np.arange(idx.size), 2)
        cols = np.column_stack([idx, idx + 1]).ravel()
        vals = np.column_stack([1.0 - theta, theta]).ravel()
        return sparse.csr_matrix((vals, (rows, cols)), shape=(idx.size, len(self)))

    def interpolate(self, values, points):
        return np.interp(np.asarray(points, dtype=float), self.nodes, np.asarray(values, dtype=float))

    def doubled(self):
        "Même pas, domaine deux fois plus large autour du centre."
        if not self.is_uniform:
            raise GridError("Le doublement du domaine demande une grille uniforme")
        h = self.steps[0]
        n = len(self)
        extra = (n - 1) // 2
        lo = self.lo - extra * h
        return Grid1D(lo + h * np.arange(n + 2 * extra))

    def refined(self, factor=2):
        "Même domaine, pas divisé par ``factor``."
        fine = [np.linspace(a, b, factor + 1)[:-1] for a, b in zip(self.nodes[:-1], self.nodes[1:])]
        return Grid1D(np.concatenate(fine + [self.nodes[-1:]]))

    def to_dict(self):
        return {"nodes": self.nodes.tolist()}


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Grille de temps t0 <= T1 < T2 dont T1 est un noeud.

    Si t0 > T1 la contrainte intermédiaire disparaît : seule la tranche
    [t0, T2] est discrétisée et ``jump_index`` vaut None.
    """

    t0: float
    T1: float
    T2: float
    n1: int
    n2: int
    times: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.T1 < self.T2:
            raise GridError(f"Il faut T1 < T2 (T1={self.T1}, T2={self.T2})")
        if self.t0 > self.T2:
            raise GridError(f"t0={self.t0} au-delà de T2={self.T2}")
        if self.n2 < 1:
            raise GridError("Au moins un pas de temps sur [T1, T2]")
        if self.t0 <= self.T1:
            if self.t0 < self.T1 and self.n1 < 1:
                raise GridError("Au moins un pas de temps sur [t0, T1]")
            n1 = self.n1 if self.t0 < self.T1 else 0
            object.__setattr__(self, "n1", int(n1))
            first = np.linspace(self.t0, self.T1, n1 + 1)
            second = np.linspace(self.T1, self.T2, self.n2 + 1)[1:]
            times = np.concatenate([first, second])
        else:
            object.__setattr__(self, "n1", 0)
            times = np.linspace(self.t0, self.T2, self.n2 + 1)
        object.__setattr__(self, "times", _frozen(times))

    @classmethod
    def for_step(cls, t0, T1, T2, dt_max):
        """Plus petite grille dont les pas ne dépassent pas ``dt_max``."""
        if dt_max <= 0 or not math.isfinite(dt_max):
            raise GridError(f"Pas de temps maximal invalide : {dt_max}")
        n1 = max(1, math.ceil((T1 - t0) / dt_max - 1e-12)) if t0 < T1 else 0
        start = max(t0, T1)
        n2 = max(1, math.ceil((T2 - start) / dt_max - 1e-12))
        return cls(t0, T1, T2, n1, n2)

    @property
    def has_jump(self):
        return self.t0 <= self.T1

    @property
    def jump_index(self):
        return self.n1 if self.has_jump else None

    @property
    def n_steps(self):
        return self.times.size - 1

    @property
    def dt(self):
        return np.diff(self.times)

    @property
    def t2_index(self):
        return self.n_steps

    def refined(self, factor=2):
        return TimeGrid(self.t0, self.T1, self.T2, self.n1 * factor, self.n2 * factor)

    def to_dict(self):
        return {"t0": self.t0, "T1": self.T1, "T2": self.T2, "n1": self.n1, "n2": self.n2}


@dataclass(frozen=True, eq=False)
class Grid2D:
    """Grille produit (x, y) ou (w = log x, y), indices 'ij'."""

    first: Grid1D
    second: Grid1D
    coordinate: str = "x"

    def __post_init__(self):
        if self.coordinate not in ("x", "w"):
            raise GridError(f"Coordonnée inconnue: {self.coordinate}")
        if self.coordinate == "x" and self.first.lo <= 0:
            raise GridError("La grille en x doit être strictement positive")

    @property
    def shape(self):
        return (len(self.first), len(self.second))

    @property
    def size(self):
        return len(self.first) * len(self.second)

    def mesh(self):
        return np.meshgrid(self.first.nodes, self.second.nodes, indexing="ij")

    def prices(self):
        "Prix x aux noeuds (exp(w) en coordonnée log)."
        p = self.first.nodes if self.coordinate == "x" else np.exp(self.first.nodes)
        return np.broadcast_to(p[:, None], self.shape)

    def with_first(self, first):
        return Grid2D(first, self.second, self.coordinate)

    def interpolation_matrix(self, first_points, second_points):
        """Poids bilinéaires des points (p, y) ; la transposée répartit une masse."""
        i, ti = self.first.brackets(first_points)
        j, tj = self.second.brackets(second_points)
        if i.size != j.size:
            raise GridError("Coordonnées de tailles différentes")
        ny = len(self.second)
        rows = np.repeat(np.arange(i.size), 4)
        cols = np.column_stack([i * ny + j, i * ny + j + 1, (i + 1) * ny + j, (i + 1) * ny + j + 1]).ravel()
        vals = np.column_stack([(1 - ti) * (1 - tj), (1 - ti) * tj, ti * (1 - tj), ti * tj]).ravel()
        return sparse.csr_matrix((vals, (rows, cols)), shape=(i.size, self.size))

    def interpolate(self, values, p, y):
        return float(self.interpolation_matrix([p], [y]) @ np.asarray(values, dtype=float).ravel())

    def to_dict(self):
        return {"first": self.first.nodes.tolist(), "second": self.second.nodes.tolist(),
                "coordinate": self.coordinate}
