"""Mesures de probabilité discrètes sur grille, ordre convexe, distance W2,
ingestion des marges depuis des prix de calls (Breeden-Litzenberger)."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import norm

from errors import ArbitrageError, DomainError, InsufficientDataError
from grids import Grid1D

logger = logging.getLogger(__name__)

ORDER_TOL = 1e-10
MEAN_TOL = 1e-10
ARBITRAGE_TOL = 1e-8
MASS_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Mesure atomique sur les noeuds d'une grille."""

    grid: Grid1D
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        if w.size != len(self.grid):
            raise DomainError(f"{w.size} poids pour {len(self.grid)} noeuds")
        if not np.all(np.isfinite(w)):
            raise DomainError("Poids non finis")
        if np.any(w < 0):
            raise DomainError(f"Poids négatif : {w.min():.3e}")
        total = w.sum()
        if abs(total - 1.0) > MASS_TOL:
            raise DomainError(f"La masse totale vaut {total:.12f} au lieu de 1")
        w = w / total
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    # constructeurs

    @classmethod
    def from_atoms(cls, grid, atoms, weights=None):
        """Répartit chaque atome sur ses deux noeuds voisins (moyenne conservée)."""
        atoms = np.atleast_1d(np.asarray(atoms, dtype=float))
        if weights is None:
            weights = np.full(atoms.size, 1.0 / atoms.size)
        weights = np.asarray(weights, dtype=float)
        outside = (atoms < grid.lo) | (atoms > grid.hi)
        if np.any(outside):
            logger.warning("%d atome(s) hors grille ramenés au bord", int(outside.sum()))
        w = grid.interpolation_matrix(atoms).T @ weights
        return cls(grid, w / w.sum())

    @classmethod
    def dirac(cls, grid, x):
        return cls.from_atoms(grid, [x])

    @classmethod
    def discretized_normal(cls, grid, mean=0.0, var=1.0):
        "Masses des cellules (milieux entre noeuds) d'une loi normale."
        edges = np.concatenate([[-np.inf], 0.5 * (grid.nodes[1:] + grid.nodes[:-1]), [np.inf]])
        w = np.diff(norm.cdf(edges, loc=mean, scale=np.sqrt(var)))
        return cls(grid, w / w.sum())

    @classmethod
    def from_dict(cls, data, grid=None):
        if "nodes" in data:
            own = Grid1D(data["nodes"])
            measure = cls(own, data["weights"])
            return measure if grid is None else measure.project(grid)
        if grid is None:
            raise DomainError("Atomes fournis sans grille de projection")
        return cls.from_atoms(grid, data["atoms"], data.get("weights"))

    @classmethod
    def from_json(cls, path, grid=None):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), grid)

    # moments et prix

    @property
    def nodes(self):
        return self.grid.nodes

    @property
    def support(self):
        return self.nodes[self.weights > 0]

    def mean(self):
        return float(self.weights @ self.nodes)

    def second_moment(self):
        return float(self.weights @ self.nodes**2)

    def variance(self):
        m = self.mean()
        return float(self.weights @ (self.nodes - m) ** 2)

    def expect(self, values):
        return float(self.weights @ np.asarray(values, dtype=float))

    def call_prices(self, strikes):
        k = np.asarray(strikes, dtype=float)
        return np.maximum(self.nodes[None, :] - k[:, None], 0.0) @ self.weights

    def put_prices(self, strikes):
        k = np.asarray(strikes, dtype=float)
        return np.maximum(k[:, None] - self.nodes[None, :], 0.0) @ self.weights

    def project(self, grid):
        if grid is self.grid:
            return self
        return GridMeasure.from_atoms(grid, self.nodes, self.weights)

    def to_dict(self):
        return {"nodes": self.nodes.tolist(), "weights": self.weights.tolist()}

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")


@dataclass(frozen=True)
class OrderReport:
    holds: bool
    violation: float
    mean_gap: float
    strike: float | None = None

    def __bool__(self):
        return self.holds

    def to_dict(self):
        return {"holds": self.holds, "violation": self.violation,
                "mean_gap": self.mean_gap, "strike": self.strike}


def convex_order(mu, nu, tol=ORDER_TOL, mean_tol=MEAN_TOL):
    """mu <=_c nu : calls sur l'union des grilles et égalité des moyennes."""
    strikes = np.union1d(mu.nodes, nu.nodes)
    gaps = mu.call_prices(strikes) - nu.call_prices(strikes)
    worst = int(np.argmax(gaps))
    violation = max(float(gaps[worst]), 0.0)
    mean_gap = abs(mu.mean() - nu.mean())
    holds = violation <= tol and mean_gap <= mean_tol
    return OrderReport(holds, violation, mean_gap, float(strikes[worst]) if violation > 0 else None)


def convex_order_lower(mu, nu, tol=ORDER_TOL):
    """mu <=_{c,l} nu sur [0, +inf) : calls et puts de strikes positifs, sans moyenne."""
    for name, m in (("mu", mu), ("nu", nu)):
        if np.any(m.support < 0):
            raise DomainError(f"Support de {name} non inclus dans [0, +inf)")
    strikes = np.union1d(mu.nodes, nu.nodes)
    strikes = strikes[strikes >= 0]
    gaps = np.concatenate([mu.call_prices(strikes) - nu.call_prices(strikes),
                           mu.put_prices(strikes) - nu.put_prices(strikes)])
    worst = int(np.argmax(gaps))
    violation = max(float(gaps[worst]), 0.0)
    strike = float(strikes[worst % strikes.size]) if violation > 0 else None
    return OrderReport(violation <= tol, violation, abs(mu.mean() - nu.mean()), strike)


def wasserstein2(mu, nu):
    """Distance W2 en dimension 1 par couplage des quantiles."""
    cmu = np.cumsum(mu.weights)
    cnu = np.cumsum(nu.weights)
    levels = np.union1d(cmu, cnu)
    levels = levels[(levels > 0) & (levels <= 1.0 + 1e-15)]
    levels = np.concatenate([[0.0], np.minimum(levels, 1.0)])
    dp = np.diff(levels)
    mid = 0.5 * (levels[1:] + levels[:-1])
    keep = dp > 1e-15
    qmu = mu.nodes[np.minimum(np.searchsorted(cmu, mid[keep]), len(mu.nodes) - 1)]
    qnu = nu.nodes[np.minimum(np.searchsorted(cnu, mid[keep]), len(nu.nodes) - 1)]
    return float(np.sqrt(np.sum(dp[keep] * (qmu - qnu) ** 2)))


@dataclass(frozen=True, eq=False)
class CallCurve:
    maturity: float
    strikes: np.ndarray
    prices: np.ndarray
    forward: float | None = None

    def __post_init__(self):
        k = np.asarray(self.strikes, dtype=float).ravel()
        c = np.asarray(self.prices, dtype=float).ravel()
        if k.size != c.size:
            raise InsufficientDataError("Strikes et prix de tailles différentes")
        if k.size < 3:
            raise InsufficientDataError(
                f"Au moins 3 strikes sont nécessaires pour une différence seconde (reçu {k.size})")
        if np.any(np.diff(k) <= 0):
            raise InsufficientDataError("Strikes non strictement croissants")
        object.__setattr__(self, "strikes", k)
        object.__setattr__(self, "prices", c)

    @classmethod
    def from_frame(cls, df, maturity, forward=None):
        missing = [col for col in ("strike", "price") if col not in df.columns]
        if missing:
            raise InsufficientDataError(f"Colonnes manquantes: {', '.join(missing)}")
        df = df.sort_values("strike")
        return cls(maturity, df["strike"].to_numpy(float), df["price"].to_numpy(float), forward)

    @classmethod
    def from_file(cls, path, maturity, forward=None):
        path = str(path)
        if path.endswith((".xlsx", ".xls")):
            df = pd.read_excel(path)
        else:
            df = pd.read_csv(path, encoding="utf-8")
        return cls.from_frame(df, maturity, forward)

    def slopes(self):
        return np.diff(self.prices) / np.diff(self.strikes)

    def check_arbitrage(self, tol=ARBITRAGE_TOL):
        """Lève ArbitrageError au premier strike fautif."""
        k, c, s = self.strikes, self.prices, self.slopes()
        if np.any(c < -tol):
            j = int(np.argmin(c))
            raise ArbitrageError(f"Prix négatif au strike {k[j]}", strike=float(k[j]))
        bad = np.nonzero(s > tol)[0]
        if bad.size:
            j = int(bad[0]) + 1
            raise ArbitrageError(f"Prix croissant en strike au strike {k[j]}", strike=float(k[j]))
        bad = np.nonzero(np.diff(s) < -tol)[0]
        if bad.size:
            j = int(bad[0]) + 1
            raise ArbitrageError(f"Prix non convexe au strike {k[j]}", strike=float(k[j]))
        if s[0] < -1.0 - tol:
            raise ArbitrageError(f"Pente inférieure à -1 au strike {k[0]}", strike=float(k[0]))
        if self.forward is not None:
            intrinsic = np.maximum(self.forward - k, 0.0)
            bad = np.nonzero(c < intrinsic - tol)[0]
            if bad.size:
                j = int(bad[0])
                raise ArbitrageError(f"Prix sous la valeur intrinsèque au strike {k[j]}",
                                     strike=float(k[j]))

    def to_frame(self):
        return pd.DataFrame({"strike": self.strikes, "price": self.prices})


def black_scholes_call(forward, strikes, sigma, maturity):
    """Prix forward (non actualisés) de calls Black-Scholes."""
    k = np.asarray(strikes, dtype=float)
    sd = sigma * np.sqrt(maturity)
    if sd <= 0:
        return np.maximum(forward - k, 0.0)
    with np.errstate(divide="ignore"):
        d1 = (np.log(forward / k) + 0.5 * sd**2) / sd
    d2 = d1 - sd
    return forward * norm.cdf(d1) - k * norm.cdf(d2)


def synthesize_calls(measure, strikes, maturity=1.0):
    return CallCurve(maturity, np.asarray(strikes, dtype=float), measure.call_prices(strikes),
                     forward=measure.mean())


def breeden_litzenberger(curve, grid):
    """Loi de X_T à partir des prix de calls : différence seconde en strike.

    La masse de queue gauche est placée au premier strike, celle de droite au
    barycentre de la queue (au-delà du dernier strike) pour conserver la moyenne.
    """
    curve.check_arbitrage()
    k, c, s = curve.strikes, curve.prices, curve.slopes()
    masses = np.empty(k.size)
    masses[0] = 1.0 + s[0]
    masses[1:-1] = np.diff(s)
    masses[-1] = 0.0
    atoms = k.copy()
    tail = -s[-1]
    extra_atom = []
    if tail > ARBITRAGE_TOL:
        extra_atom = [(k[-1] + c[-1] / tail, tail)]
    elif c[-1] > ARBITRAGE_TOL:
        logger.warning("Prix résiduel %.3e au dernier strike sans pente : masse ignorée", c[-1])
    masses = np.where(masses < 0, 0.0, masses)
    if extra_atom:
        atoms = np.append(atoms, extra_atom[0][0])
        masses = np.append(masses, extra_atom[0][1])
    masses = masses / masses.sum()
    return GridMeasure.from_atoms(grid, atoms, masses)
