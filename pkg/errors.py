"""Exceptions du moteur de calibration.

Toutes dérivent de ValueError pour que les appelants existants
(``except ValueError as e``) continuent de fonctionner.
"""


class CalibrationError(ValueError):
    "Erreur générique du moteur."
    exit_code = 4


class DomainError(CalibrationError):
    "Argument hors du domaine de définition (support négatif, b < 0, V < 0...)."


class InsufficientDataError(CalibrationError):
    "Pas assez de points pour l'opération demandée."


class ArbitrageError(CalibrationError):
    "Courbe de calls avec arbitrage statique."

    def __init__(self, message, strike=None):
        super().__init__(message)
        self.strike = strike


class TruncationError(CalibrationError):
    "Grille en b trop courte pour la transformée de Legendre."

    def __init__(self, message, suggested_b_max=None):
        super().__init__(message)
        self.suggested_b_max = suggested_b_max


class TableRangeError(CalibrationError):
    "Argument en dehors de la table du hamiltonien."


class CflError(CalibrationError):
    "Condition CFL violée par le schéma explicite."

    def __init__(self, message, required_dt=None):
        super().__init__(message)
        self.required_dt = required_dt


class GridError(CalibrationError):
    "Grille invalide ou incompatible."


class DomainSizeError(CalibrationError):
    "Domaine tronqué trop petit : le test de doublement échoue."


class HypothesisError(CalibrationError):
    "Hypothèse du théorème non satisfaite pour la méthode demandée."


class NumericalFailure(CalibrationError):
    "Valeurs non finies ou masses négatives."


class ConvergenceError(CalibrationError):
    "Boucle itérative non convergée."


class InfeasibleError(CalibrationError):
    "Marges incompatibles (ordre convexe, moyennes, programme infaisable)."
    exit_code = 3

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}
