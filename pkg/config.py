"""Paramètres numériques par défaut et chargement des instances JSON."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from errors import CalibrationError, DomainError

logger = logging.getLogger(__name__)

KINDS = ("mot", "sb", "vix")


@dataclass
class Settings:
    # mesures
    order_tol: float = 1e-10
    mean_tol: float = 1e-10

    # hamiltonien
    lagrangian: str = "quadratic"
    gamma: float = 1.0
    power: float = 2.0
    ellipticity: float = 0.5
    lagrangian_csv: str | None = None
    b_max: float | None = None
    n_b: int = 4001
    a_max: float | None = None
    n_a: int = 2001

    # grilles et schémas explicites
    x_lo: float = -3.0
    x_hi: float = 3.0
    n_x: int = 41
    y_lo: float = 0.01
    y_hi: float = 0.2
    n_y: int = 11
    n_w: int = 41
    w_width: float = 2.0
    cfl_safety: float = 0.9
    steps_t1: int = 4
    steps_t2: int = 4
    boundary: str = "absorbing"
    capped: bool = False
    mot_scheme: str = "envelope"

    # montée duale
    ascent: str = "lbfgs"
    step: float = 0.5
    max_iters: int = 500
    tol: float = 1e-6
    potential_bound: float = 10.0
    lipschitz_bound: float = 10.0
    max_halvings: int = 30
    plateau_patience: int = 25

    # vix
    delta_max: float = 5.0
    n_delta: int = 101
    n_v: int = 201
    v_factor: float = 1.05
    u3_slope_bound: float = 10.0

    # oracle primal
    lp_segments: int = 64
    lp_tol: float = 1e-9
    tree_depth: int = 4
    fixed_point_iters: int = 50

    # monte carlo
    n_paths: int = 100_000
    chunk_size: int = 8192
    workers: int = 4
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def load_config(path=None, overrides=None):
    """Défauts, puis fichier JSON, puis surcharges (les valeurs None sont ignorées)."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(json.load(fh))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(Settings)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CalibrationError(f"Clés de configuration inconnues: {', '.join(unknown)}")
    settings = Settings(**values)
    for name in ("order_tol", "mean_tol", "tol", "lp_tol", "step"):
        if getattr(settings, name) <= 0:
            raise CalibrationError(f"La tolérance {name} doit être strictement positive")
    if settings.boundary not in ("linear", "absorbing"):
        raise CalibrationError(f"Condition au bord inconnue: {settings.boundary}")
    if settings.mot_scheme not in ("envelope", "explicit"):
        raise CalibrationError(f"Schéma MOT inconnu: {settings.mot_scheme}")
    if settings.ascent not in ("lbfgs", "supergradient"):
        raise CalibrationError(f"Méthode de montée inconnue: {settings.ascent}")
    logger.debug("Configuration chargée: %s", settings)
    return settings


def load_instance(path):
    """Instance JSON avec un champ ``kind`` parmi mot, sb, vix."""
    path = Path(path)
    if not path.exists():
        raise DomainError(f"Fichier d'instance introuvable: {path}")
    with open(path, encoding="utf-8") as fh:
        instance = json.load(fh)
    validate_instance(instance)
    return instance


def validate_instance(instance):
    kind = instance.get("kind")
    if kind not in KINDS:
        raise DomainError(f"Type d'instance invalide: {kind!r} (attendu: {', '.join(KINDS)})")
    required = {
        "mot": ["mu0", "mu1", "mu2", "T0", "T1", "T2"],
        "sb": ["model", "mu1", "mu2", "t0", "T1", "T2", "X0", "Y0"],
        "vix": ["model", "mu1", "mu2", "mu3", "t0", "T1", "T2", "X0", "Y0"],
    }[kind]
    missing = [key for key in required if key not in instance]
    if missing:
        raise DomainError(f"Colonnes manquantes: {', '.join(missing)}")
    return instance
