"""Modèles à volatilité stochastique dX = X sigma~(Y) dW, dY = b dt + tau1 dW + tau2 dW_perp.

Catalogue Heston / SABR tronqués et vérification échantillonnée des
hypothèses (A3) et (A4).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from errors import DomainError

logger = logging.getLogger(__name__)

REFINE_LEVELS = 4
BLOWUP_RATIO = 1.5


def _const(value):
    return lambda x, y: np.full(np.broadcast(np.asarray(x), np.asarray(y)).shape, float(value))


@dataclass(frozen=True)
class SvmSpec:
    sigma_tilde: Callable = field(repr=False)
    drift: Callable = field(repr=False)
    tau1: Callable = field(repr=False)
    tau2: Callable = field(repr=False)
    truncation: tuple = (-math.inf, math.inf)
    x0: float = 1.0
    y0: float = 0.0
    name: str = "custom"
    constant_tau2: bool = False

    def __post_init__(self):
        if not self.x0 > 0:
            raise DomainError(f"X_t0 doit être > 0 (reçu {self.x0})")

    def clamp(self, y):
        lo, hi = self.truncation
        return np.clip(np.asarray(y, dtype=float), lo, hi)

    def sigma(self, x, y):
        return np.asarray(x, dtype=float) * self.sigma_tilde(y)

    def coefficients(self, x, y):
        "(sigma~, b, tau1, tau2) évalués et diffusés sur (x, y)."
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast(x, y).shape
        return tuple(np.broadcast_to(np.asarray(v, dtype=float), shape) for v in (
            self.sigma_tilde(y), self.drift(x, y), self.tau1(x, y), self.tau2(x, y)))

    def sigma_tilde_max(self, y_nodes):
        return float(np.max(np.abs(self.sigma_tilde(np.asarray(y_nodes, dtype=float)))))


def make_heston(kappa, theta, xi, rho, truncation=(0.001, 4.0), x0=1.0, y0=None):
    """Heston : b = kappa(theta - y), tau1 = rho xi sqrt(Id), tau2 = xi sqrt(1-rho^2) sqrt(Id)."""
    if not -1.0 < rho < 1.0:
        raise DomainError(f"rho doit être dans (-1, 1) (reçu {rho})")
    if min(kappa, theta, xi) <= 0:
        raise DomainError("kappa, theta et xi doivent être strictement positifs")
    lo, hi = truncation
    if lo <= 0 or hi <= lo:
        raise DomainError(f"Troncature invalide [{lo}, {hi}] : il faut 0 < y_lo < y_hi")
    root = lambda y: np.sqrt(np.clip(np.asarray(y, dtype=float), lo, hi))
    perp = xi * math.sqrt(1.0 - rho**2)
    return SvmSpec(
        sigma_tilde=root,
        drift=lambda x, y: kappa * (theta - np.asarray(y, dtype=float)) + 0.0 * np.asarray(x),
        tau1=lambda x, y: rho * xi * root(y) + 0.0 * np.asarray(x),
        tau2=lambda x, y: perp * root(y) + 0.0 * np.asarray(x),
        truncation=(lo, hi), x0=x0, y0=theta if y0 is None else y0, name="heston",
    )


def make_sabr(tau2_const, truncation=(-3.0, 3.0), x0=1.0, y0=0.0):
    """SABR : sigma~ = exp(Id) tronquée, tau1 = 0, tau2 constant, b = -tau2^2/2."""
    lo, hi = truncation
    if hi <= lo:
        raise DomainError(f"Troncature invalide [{lo}, {hi}]")
    if tau2_const == 0:
        logger.warning("tau2 nul pour SABR : lambda0 infini, le tilt n'agit plus")
    return SvmSpec(
        sigma_tilde=lambda y: np.exp(np.clip(np.asarray(y, dtype=float), lo, hi)),
        drift=_const(-0.5 * tau2_const**2),
        tau1=_const(0.0),
        tau2=_const(tau2_const),
        truncation=(lo, hi), x0=x0, y0=y0, name="sabr", constant_tau2=True,
    )


def make_constant(sigma_tilde, drift=0.0, tau1=0.0, tau2=0.0, x0=1.0, y0=0.0):
    return SvmSpec(
        sigma_tilde=lambda y: np.full(np.shape(y), float(sigma_tilde)),
        drift=_const(drift), tau1=_const(tau1), tau2=_const(tau2),
        x0=x0, y0=y0, name="constant", constant_tau2=True,
    )


def make_tabulated(y_nodes, sigma_tilde, drift, tau1, tau2, x0=1.0, y0=0.0):
    """Coefficients donnés aux noeuds en y, interpolés linéairement (plats aux bords)."""
    ys = np.asarray(y_nodes, dtype=float)
    tables = [np.broadcast_to(np.asarray(v, dtype=float), ys.shape) for v in (sigma_tilde, drift, tau1, tau2)]
    interp = [lambda y, t=t: np.interp(np.asarray(y, dtype=float), ys, t) for t in tables]
    constant = bool(np.all(tables[3] == tables[3][0]))
    return SvmSpec(
        sigma_tilde=interp[0],
        drift=lambda x, y: interp[1](y) + 0.0 * np.asarray(x),
        tau1=lambda x, y: interp[2](y) + 0.0 * np.asarray(x),
        tau2=lambda x, y: interp[3](y) + 0.0 * np.asarray(x),
        truncation=(float(ys[0]), float(ys[-1])), x0=x0, y0=y0, name="custom-tabulated",
        constant_tau2=constant,
    )


def model_from_config(conf):
    """Modèle décrit par un dictionnaire JSON avec le discriminant ``model``."""
    kind = conf.get("model")
    trunc = tuple(conf["truncation"]) if "truncation" in conf else None
    common = {"x0": conf.get("X0", conf.get("x0", 1.0))}
    if kind == "heston":
        return make_heston(conf["kappa"], conf["theta"], conf["xi"], conf["rho"],
                           trunc or (0.001, 4.0), y0=conf.get("Y0", conf.get("y0")), **common)
    if kind == "sabr":
        return make_sabr(conf["tau2"], trunc or (-3.0, 3.0), y0=conf.get("Y0", conf.get("y0", 0.0)), **common)
    if kind == "custom-tabulated":
        return make_tabulated(conf["y"], conf["sigma_tilde"], conf["b"], conf["tau1"], conf["tau2"],
                              y0=conf.get("Y0", conf.get("y0", 0.0)), **common)
    if kind == "constant":
        return make_constant(conf["sigma_tilde"], conf.get("b", 0.0), conf.get("tau1", 0.0),
                             conf.get("tau2", 0.0), y0=conf.get("Y0", conf.get("y0", 0.0)), **common)
    raise DomainError(f"Modèle inconnu: {kind!r} (heston, sabr, custom-tabulated, constant)")


def _lipschitz(fn, x, y):
    """Plus grand quotient de différences dans les deux directions."""
    X, Y = np.meshgrid(x, y, indexing="ij")
    f = np.broadcast_to(fn(X, Y), X.shape)
    quotients = [0.0]
    if y.size > 1:
        quotients.append(np.max(np.abs(np.diff(f, axis=1)) / np.diff(y)[None, :]))
    if x.size > 1:
        quotients.append(np.max(np.abs(np.diff(f, axis=0)) / np.diff(x)[:, None]))
    return float(max(quotients))


def _refined(nodes, factor):
    if nodes.size < 2:
        return nodes
    return np.linspace(nodes[0], nodes[-1], (nodes.size - 1) * factor + 1)


def _lipschitz_with_blowup(fn, x, y):
    """Estimation sur des échantillons raffinés ; renvoie (constante, explose?)."""
    estimates = [_lipschitz(fn, _refined(x, 4**k), _refined(y, 4**k)) for k in range(REFINE_LEVELS + 1)]
    last, before = estimates[-1], estimates[-2]
    blowup = last > BLOWUP_RATIO * before + 1e-12
    return estimates[0], blowup


def check_assumptions(spec, which="A3", y_sample=None, x_sample=None):
    """Rapport des constantes estimées et du verdict par clause."""
    if y_sample is None:
        lo, hi = spec.truncation
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise DomainError("Échantillon en y requis pour un modèle non tronqué")
        y_sample = np.linspace(lo, hi, 101)
    y = np.asarray(y_sample, dtype=float)
    x = np.asarray(x_sample if x_sample is not None else [spec.x0], dtype=float)
    report = {"which": which, "model": spec.name, "lipschitz": {}, "clauses": {}}

    if which == "A3":
        funcs = {
            "sigma_tilde": lambda X, Y: spec.sigma_tilde(Y),
            "b": spec.drift, "tau1": spec.tau1, "tau2": spec.tau2,
        }
        for name, fn in funcs.items():
            lip, blowup = _lipschitz_with_blowup(fn, x, y)
            report["lipschitz"][name] = lip
            report["clauses"][f"lipschitz_{name}"] = not blowup
        X, Y = np.meshgrid(x, y, indexing="ij")
        _, b, t1, t2 = spec.coefficients(X, Y)
        if y.size > 1:
            db = np.abs(np.diff(b, axis=1)) / np.diff(y)[None, :]
            dt2 = np.abs(np.diff(t2, axis=1)) / np.diff(y)[None, :]
            denom = np.minimum(np.abs(t2[:, 1:]), np.abs(t2[:, :-1]))
            num = db + dt2
        else:
            num, denom = np.zeros(1), np.abs(t2).ravel()
        if np.any(denom == 0):
            lam0 = math.inf
        else:
            lam0 = float(np.max(num / denom))
        growth = float(np.max((np.abs(t1) + np.abs(t2) + np.abs(b)) / (1.0 + np.abs(Y))))
        report.update(lambda0=lam0, growth_C=growth)
        report["clauses"]["ratio_lambda0"] = math.isfinite(lam0)
        report["clauses"]["linear_growth"] = math.isfinite(growth)
        if not math.isfinite(lam0):
            logger.warning("lambda0 infini pour %s : tau2 s'annule sur l'échantillon", spec.name)
    elif which == "A4":
        width = y[-1] - y[0]
        wide = np.linspace(y[0] - width / 2, y[-1] + width / 2, 2 * y.size - 1)
        bound = spec.sigma_tilde_max(y)
        bound_wide = spec.sigma_tilde_max(wide)
        report["sigma_tilde_bound"] = bound
        report["clauses"]["sigma_tilde_bounded"] = bool(
            math.isfinite(bound) and bound_wide <= bound * (1.0 + 1e-9) + 1e-12)
        w = np.log(x) if x.size > 1 else np.array([math.log(spec.x0)])
        lip, blowup = _lipschitz_with_blowup(lambda W, Y: spec.drift(np.exp(W), Y), w, y)
        report["lipschitz"]["b_exp"] = lip
        report["clauses"]["b_exp_lipschitz"] = not blowup
    else:
        raise DomainError(f"Hypothèse inconnue: {which} (A3 ou A4)")

    report["passed"] = all(report["clauses"].values())
    return report
