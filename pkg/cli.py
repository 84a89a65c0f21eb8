"""Chaîne batch : ingestion des prix de calls, calibration, vérification des
écarts de dualité, simulation et contrôle de l'ordre convexe.

Codes de sortie : 0 succès, 2 plateau ou écart non certifié, 3 marges
incompatibles, 4 échec numérique.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from config import load_config, load_instance
from errors import CalibrationError, InfeasibleError
from fokker_planck import dirac_2d, evolve_2d, simulate
from grids import Grid1D
from hj_solver import solve_hj_sb
from measures import CallCurve, GridMeasure, breeden_litzenberger, convex_order
from mot_dual import (DualState, ascend, certify_supersolution, envelope_residual, instance_from_dict,
                      observed_rate)
from primal_oracle import build_tree, matched_oracle, solve_discrete_sb
from sb_dual import SbDualState, jump_consistency, optimal_density_report, sb_ascend, sb_instance_from_dict
from vix import (VixState, default_strikes, post_t1_family, reference_v_samples, vix_ascend,
                 vix_instance_from_dict, vix_put_bound)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_PLATEAU, EXIT_INFEASIBLE, EXIT_FAILURE = 0, 2, 3, 4
OPTIONAL_NUMBER = (int, float, type(None))
VERIFY_TOL = 1e-6

REPORT_SCHEMAS = {
    "ingest": {"command": str, "measures": list, "order": list, "passed": bool},
    "calibrate": {"command": str, "kind": str, "status": str, "dual_value": OPTIONAL_NUMBER,
                  "residual_norms": dict, "iterations": int, "seed": int, "potentials": dict},
    "verify": {"command": str, "kind": str, "dual": OPTIONAL_NUMBER, "primal": OPTIONAL_NUMBER,
               "gap": OPTIONAL_NUMBER, "relative_gap": OPTIONAL_NUMBER, "pass": bool, "seed": int},
    "simulate": {"command": str, "kind": str, "n_paths": int, "seed": int, "summary": dict},
    "check-order": {"command": str, "pairs": list, "passed": bool},
    "error": {"command": str, "error": str, "exit_code": int, "report": dict},
}


# --- sorties ----------------------------------------------------------------

def _plain(obj):
    "Types natifs JSON ; NaN et infinis deviennent null."
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def check_schema(report, command):
    """Clés obligatoires et types du rapport ``command`` ; CalibrationError sinon."""
    schema = REPORT_SCHEMAS[command]
    missing = [k for k in schema if k not in report]
    if missing:
        raise CalibrationError(f"Rapport {command} incomplet : {', '.join(missing)}")
    for key, kind in schema.items():
        if not isinstance(report[key], kind):
            raise CalibrationError(f"Rapport {command} : {key} de type {type(report[key]).__name__}")


def write_report(report, out_dir, name, command):
    report = _plain(report)
    check_schema(report, command)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    text = json.dumps(report, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    path.write_text(text, encoding="utf-8")
    logger.info("Rapport écrit : %s", path)
    return path


def write_frame(df, out_dir, name):
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    df.to_csv(path, index=False, float_format="%.12g")
    return path


def _marginal_frame(grid_nodes, flow_marginals, targets):
    data = {"node": grid_nodes}
    for label, mass in flow_marginals.items():
        data[f"mass_{label}"] = mass
    for label, mu in targets.items():
        if mu is not None:
            data[f"target_{label}"] = mu.weights
    return pd.DataFrame(data)


# --- commandes ---------------------------------------------------------------

def _parse_curve(item):
    if ":" not in item:
        raise CalibrationError(f"Format attendu maturité:fichier (reçu {item!r})")
    maturity, path = item.split(":", 1)
    if not Path(path).exists():
        raise CalibrationError(f"Fichier de prix introuvable : {path}")
    return float(maturity), path


def cmd_ingest(args, settings):
    """Une loi par maturité (Breeden-Litzenberger) et ordre convexe entre maturités."""
    grid = Grid1D.uniform(settings.x_lo, settings.x_hi, settings.n_x)
    out = Path(args.out)
    curves = sorted((_parse_curve(item) for item in args.calls), key=lambda c: c[0])
    measures, files = [], []
    for maturity, path in curves:
        curve = CallCurve.from_file(path, maturity, args.forward)
        mu = breeden_litzenberger(curve, grid)
        name = f"mu_T{maturity:g}.json"
        out.mkdir(parents=True, exist_ok=True)
        mu.to_json(out / name)
        measures.append(mu)
        files.append({"maturity": maturity, "file": name, "mean": mu.mean(), "variance": mu.variance()})
    pairs = []
    for (t_a, _), (t_b, _), mu, nu in zip(curves, curves[1:], measures, measures[1:]):
        rep = convex_order(mu, nu, settings.order_tol, settings.mean_tol)
        pairs.append({"pair": [t_a, t_b], **rep.to_dict()})
    report = {"command": "ingest", "measures": files, "order": pairs,
              "passed": all(p["holds"] for p in pairs)}
    write_report(report, out, "ingest.json", "ingest")
    return EXIT_OK if report["passed"] else EXIT_INFEASIBLE


def _calibrate_mot(conf, settings, out):
    inst = instance_from_dict(conf, settings)
    state = ascend(DualState.zeros(inst.grid), inst, settings)
    ok, worst, where = certify_supersolution(state.solution, inst.h)
    report = state.to_dict()
    report["certificate"] = {"supersolution": ok, "violation": worst,
                             "where": list(where) if where else None,
                             "envelope_residual": envelope_residual(state.solution, state.flow,
                                                                    state.u1, state.u2, inst.mu0),
                             "cost": state.flow.cost}
    write_frame(state.trace_frame(), out, "trace.csv")
    marg = {"T2": state.flow.masses[-1]}
    if inst.tg.has_jump:
        marg["T1"] = state.flow.masses[inst.tg.jump_index]
    write_frame(_marginal_frame(inst.grid.nodes, marg, {"T1": inst.mu1, "T2": inst.mu2}), out,
                "marginals.csv")
    return state.status, report


def _calibrate_sb(conf, settings, out):
    inst = sb_instance_from_dict(conf, settings)
    state = sb_ascend(SbDualState.zeros(inst.grid2.first), inst, settings)
    report = state.to_dict()
    report["jump_consistency"] = jump_consistency(state.solution)
    report["x_means"] = state.flow.x_means()
    write_frame(state.trace_frame(), out, "trace.csv")
    marg = {"T2": state.flow.masses[-1].sum(axis=1)}
    if inst.tg.has_jump:
        marg["T1"] = state.flow.masses[inst.tg.jump_index].sum(axis=1)
    write_frame(_marginal_frame(inst.grid2.first.nodes, marg, {"T1": inst.mu1, "T2": inst.mu2}), out,
                "marginals.csv")
    return state.status, report


def _calibrate_vix(conf, settings, out):
    inst = vix_instance_from_dict(conf, settings)
    state = vix_ascend(VixState.zeros(inst), inst, settings)
    report = state.to_dict()
    report["phi_bounds_check"] = state.diagnostics.get("phi_bounds", {})
    fam = post_t1_family(inst, state.u2)
    V = reference_v_samples(inst, fam, settings.n_paths, settings.seed, settings.chunk_size, settings.workers)
    strikes = default_strikes(inst.mu3, inst.tg.T1, inst.tg.T2)
    report["put_bound_table"] = vix_put_bound(inst.mu3, V, strikes, inst.tg.T1, inst.tg.T2)
    write_frame(state.trace_frame(), out, "trace.csv")
    write_frame(state.phi.to_frame(), out, "phi.csv")
    return state.status, report


def cmd_calibrate(args, settings):
    conf = load_instance(args.instance)
    kind = conf["kind"]
    out = Path(args.out)
    runner = {"mot": _calibrate_mot, "sb": _calibrate_sb, "vix": _calibrate_vix}[kind]
    status, report = runner(conf, settings, out)
    report.update(command="calibrate", kind=kind, seed=settings.seed)
    write_report(report, out, "result.json", "calibrate")
    if status == "plateau":
        logger.warning("Plateau : résidus non nuls, contraintes peut-être non admissibles")
    return EXIT_OK if status == "converged" else EXIT_PLATEAU


def _gap(dual, primal):
    gap = primal - dual
    rel = abs(gap) / abs(primal) if abs(primal) > 1e-12 else abs(gap)
    return gap, rel


def _verify_mot(conf, settings, args):
    n_b = None
    if settings.mot_scheme == "explicit":
        # transitions aux voisins : table plafonnée à la CFL, points de rupture sur sa grille
        settings = replace(settings, capped=True)
        n_b = settings.lp_segments * max(1, (settings.n_b - 1) // settings.lp_segments) + 1
    inst = instance_from_dict(conf, settings, n_b=n_b)
    state = ascend(DualState.zeros(inst.grid), inst, settings)
    oracle, result = matched_oracle(inst, observed_rate(state), settings.lp_segments, settings.lp_tol)
    gap, rel = _gap(state.dual_value, result.value)
    report = {"dual": state.dual_value, "primal": result.value, "gap": gap, "relative_gap": rel,
              "pass": bool(state.dual_value <= result.value + VERIFY_TOL and (abs(gap) <= 1e-9 or rel <= 0.05)),
              "status": state.status, "oracle": result.to_dict(), "transitions": oracle.transitions,
              "scheme": inst.scheme, "b_top": float(oracle.breakpoints[-1])}
    if args.lp_debug:
        report["lp_debug"] = result.lp.debug_dump()
    return report


def _tree_targets(tree, level, mu, n=5):
    "Marge projetée (linéairement, moyenne conservée) sur une grille grossière couvrant l'arbre."
    xs = tree.X[level]
    if mu is None or level is None:
        return None
    return mu.project(Grid1D.uniform(float(xs.min()), float(xs.max()), n))


def _tree(inst, settings):
    tg = inst.tg
    d1 = settings.tree_depth // 2 if tg.t0 < tg.T1 else 0
    return build_tree(inst.svm, tg.t0, tg.T1, tg.T2, d1, settings.tree_depth - d1)


def _verify_sb(conf, settings, args):
    inst = sb_instance_from_dict(conf, settings)
    tree = _tree(inst, settings)
    mu1 = _tree_targets(tree, tree.t1_level, inst.mu1)
    mu2 = _tree_targets(tree, tree.depth, inst.mu2)
    result = solve_discrete_sb(tree, mu1, mu2)
    state = sb_ascend(SbDualState.zeros(inst.grid2.first), inst, settings)
    gap, rel = _gap(state.dual_value, result.value)
    return {"dual": state.dual_value, "primal": result.value, "gap": gap, "relative_gap": rel,
            "pass": bool(state.dual_value <= result.value * 1.10 + VERIFY_TOL and rel <= 0.10),
            "status": state.status, "oracle": result.to_dict()}


def _verify_vix(conf, settings, args):
    inst = vix_instance_from_dict(conf, settings)
    tree = _tree(inst, settings)
    mu1 = _tree_targets(tree, tree.t1_level, inst.mu1)
    mu2 = _tree_targets(tree, tree.depth, inst.mu2)
    result = solve_discrete_sb(tree, mu1, mu2, inst.mu3, fixed_point_iters=settings.fixed_point_iters)
    state = vix_ascend(VixState.zeros(inst), inst, settings)
    gap, rel = _gap(state.dual_value, result.value)
    return {"dual": state.dual_value, "primal": result.value, "gap": gap, "relative_gap": rel,
            "pass": bool(result.converged and state.dual_value <= result.value * 1.10 + VERIFY_TOL),
            "status": state.status, "oracle": result.to_dict()}


def cmd_verify(args, settings):
    conf = load_instance(args.instance)
    kind = conf["kind"]
    out = Path(args.out)
    runner = {"mot": _verify_mot, "sb": _verify_sb, "vix": _verify_vix}[kind]
    try:
        report = runner(conf, settings, args)
        code = EXIT_OK if report["pass"] else EXIT_PLATEAU
    except InfeasibleError as exc:
        logger.error("Oracle infaisable : %s", exc)
        report = {"dual": None, "primal": None, "gap": None, "relative_gap": None, "pass": False,
                  "certificate": exc.report, "error": str(exc)}
        code = EXIT_INFEASIBLE
    report.update(command="verify", kind=kind, seed=settings.seed)
    write_report(report, out, "verify.json", "verify")
    return code


def cmd_simulate(args, settings):
    """Trajectoires sous P0, ou sous P* si des potentiels calibrés (rapport sb) sont fournis."""
    conf = load_instance(args.instance)
    kind = conf["kind"]
    if kind == "mot":
        raise CalibrationError("La simulation demande un modèle à volatilité stochastique (sb ou vix)")
    inst = (sb_instance_from_dict if kind == "sb" else vix_instance_from_dict)(conf, settings)
    out = Path(args.out)
    if args.potentials:
        if kind != "sb":
            raise CalibrationError("Potentiels calibrés acceptés pour sb uniquement")
        with open(args.potentials, encoding="utf-8") as fh:
            pots = json.load(fh)["potentials"]
        u1, u2 = np.asarray(pots["u1"]), np.asarray(pots["u2"])
        sol = solve_hj_sb(inst.svm, u1, u2, inst.grid2, inst.tg, inst.boundary, inst.G)
        m0 = dirac_2d(inst.grid2, inst.x0, inst.y0)
        flow = evolve_2d(inst.svm, sol, m0, inst.tg, inst.grid2, inst.G)
        summary = optimal_density_report(sol, inst.svm, inst.tg, settings.n_paths, settings.seed,
                                         u1, u2, flow.cost, settings.chunk_size, settings.workers)
        paths = simulate(inst.svm, sol, settings.n_paths, inst.tg, settings.seed, "tilted",
                         chunk_size=settings.chunk_size, workers=settings.workers)
    else:
        paths = simulate(inst.svm, None, settings.n_paths, inst.tg, settings.seed,
                         chunk_size=settings.chunk_size, workers=settings.workers)
        summary = paths.summary()
    xgrid = inst.grid2.first if kind == "sb" else inst.xgrid
    frames = [pd.DataFrame({"t": paths.times[k], "node": xgrid.nodes,
                            "mass": paths.histogram(k, xgrid).weights}) for k in paths.record_index]
    write_frame(pd.concat(frames, ignore_index=True), out, "histograms.csv")
    report = {"command": "simulate", "kind": kind, "n_paths": settings.n_paths, "seed": settings.seed,
              "summary": summary}
    write_report(report, out, "simulate.json", "simulate")
    return EXIT_OK


def cmd_check_order(args, settings):
    measures = [GridMeasure.from_json(p) for p in args.measures]
    nodes = np.unique(np.concatenate([mu.nodes for mu in measures]))
    grid = Grid1D(nodes)
    measures = [mu.project(grid) for mu in measures]
    pairs = []
    for (a, mu), (b, nu) in zip(zip(args.measures, measures), zip(args.measures[1:], measures[1:])):
        rep = convex_order(mu, nu, settings.order_tol, settings.mean_tol)
        pairs.append({"pair": [Path(a).name, Path(b).name], **rep.to_dict()})
    report = {"command": "check-order", "pairs": pairs, "passed": all(p["holds"] for p in pairs)}
    write_report(report, Path(args.out), "order.json", "check-order")
    return EXIT_OK if report["passed"] else EXIT_INFEASIBLE


COMMANDS = {"ingest": cmd_ingest, "calibrate": cmd_calibrate, "verify": cmd_verify,
            "simulate": cmd_simulate, "check-order": cmd_check_order}


def build_parser():
    ap = argparse.ArgumentParser(prog="cli.py", description="Calibration MOT / pont de Schrödinger / VIX")
    ap.add_argument("-d", "--debug", action="store_true", help="journal au niveau DEBUG")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="fichier JSON de configuration")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=str, default="resultats", help="répertoire de sortie")
    common.add_argument("--tol", type=float, default=None)
    common.add_argument("--max-iters", type=int, default=None)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="prix de calls -> lois marginales")
    p.add_argument("--calls", nargs="+", required=True, help="maturité:fichier.csv (colonnes strike, price)")
    p.add_argument("--forward", type=float, default=None)
    for name in ("calibrate", "verify", "simulate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--instance", type=str, required=True)
        if name == "verify":
            p.add_argument("--lp-debug", action="store_true", help="base et coûts réduits dans le rapport")
        if name == "simulate":
            p.add_argument("--potentials", type=str, default=None, help="result.json d'une calibration sb")
    p = sub.add_parser("check-order", parents=[common])
    p.add_argument("--measures", nargs="+", required=True, help="fichiers GridMeasure JSON dans l'ordre")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.debug else logging.INFO)
    out = Path(args.out)
    try:
        settings = load_config(args.config, {"seed": args.seed, "tol": args.tol, "max_iters": args.max_iters})
        return COMMANDS[args.command](args, settings)
    except InfeasibleError as exc:
        logger.error("%s", exc)
        code, message, report = EXIT_INFEASIBLE, str(exc), exc.report
    except CalibrationError as exc:
        logger.error("%s", exc)
        code, message = EXIT_FAILURE, str(exc)
        report = {k: v for k, v in vars(exc).items() if not k.startswith("_")}
    except Exception as exc:
        logger.exception("Erreur inattendue")
        code, message, report = EXIT_FAILURE, str(exc), {}
    write_report({"command": args.command, "error": message, "exit_code": code, "report": report},
                 out, "error.json", "error")
    return code


if __name__ == "__main__":
    sys.exit(main())
