"""Tableaux, exports Excel / PDF et figures à partir des rapports JSON et des
traces CSV écrits par cli.py."""

import json
import logging
from datetime import datetime
from io import BytesIO

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns
from fpdf import FPDF
from fpdf.enums import XPos, YPos

logger = logging.getLogger(__name__)

KEY_FIELDS = [
    ("dual_value", "Valeur duale"),
    ("entropy", "Entropie relative"),
    ("status", "Statut"),
    ("iterations", "Itérations"),
    ("dual", "Valeur duale"),
    ("primal", "Valeur primale (oracle)"),
    ("gap", "Écart"),
    ("relative_gap", "Écart relatif"),
    ("pass", "Certifié"),
    ("seed", "Graine"),
]


def load_report(source):
    """Rapport JSON depuis un chemin ou un fichier téléversé."""
    if hasattr(source, "read"):
        raw = source.read()
        return json.loads(raw.decode("utf-8") if isinstance(raw, bytes) else raw)
    with open(source, encoding="utf-8") as fh:
        return json.load(fh)


def summary_frame(report):
    rows = [(label, report[key]) for key, label in KEY_FIELDS if key in report]
    for name, value in (report.get("residual_norms") or {}).items():
        rows.append((f"Résidu {name}", value))
    return pd.DataFrame(rows, columns=["Statistique", "Valeur"])


def potentials_frame(report):
    pots = report.get("potentials") or {}
    if not pots:
        return pd.DataFrame()
    size = max(len(v) for v in pots.values())
    return pd.DataFrame({k: pd.Series(v, dtype=float) for k, v in pots.items()}).reindex(range(size))


def put_bound_frame(report):
    table = report.get("put_bound_table") or {}
    return pd.DataFrame(table.get("rows", []))


def order_frame(report):
    return pd.DataFrame([{**p, "pair": " / ".join(map(str, p["pair"]))} for p in report.get("pairs", report.get("order", []))])


def to_excel(sheets):
    """Classeur xlsxwriter, une feuille par DataFrame non vide."""
    output = BytesIO()
    with pd.ExcelWriter(output, engine="xlsxwriter") as writer:
        for name, df in sheets.items():
            if df is not None and not df.empty:
                df.to_excel(writer, sheet_name=name[:31], index=False)
    return output.getvalue()


def _latin1(text):
    return str(text).encode("latin-1", "replace").decode("latin-1")


def create_pdf_report(report, comment=""):
    """Rapport PDF d'une page : statistiques clés, résidus et commentaire."""
    pdf = FPDF()
    pdf.add_page()
    pdf.set_font("Helvetica", "B", 16)
    title = {"calibrate": "Rapport de calibration", "verify": "Certificat d'écart de dualité",
             "simulate": "Rapport de simulation"}.get(report.get("command"), "Rapport")
    pdf.cell(0, 10, _latin1(f"{title} ({report.get('kind', '-')})"), new_x=XPos.LMARGIN,
             new_y=YPos.NEXT, align="C")
    pdf.set_font("Helvetica", size=10)
    pdf.cell(0, 8, _latin1(f"Généré le {datetime.now().strftime('%d/%m/%Y %H:%M')}"),
             new_x=XPos.LMARGIN, new_y=YPos.NEXT, align="C")
    pdf.ln(8)

    pdf.set_font("Helvetica", "B", 13)
    pdf.cell(0, 10, _latin1("Statistiques clés"), new_x=XPos.LMARGIN, new_y=YPos.NEXT)
    pdf.set_font("Helvetica", size=10)
    for _, row in summary_frame(report).iterrows():
        value = row["Valeur"]
        text = f"{value:.8g}" if isinstance(value, float) else str(value)
        pdf.cell(70, 8, _latin1(row["Statistique"]), border=1)
        pdf.cell(80, 8, _latin1(text), border=1, new_x=XPos.LMARGIN, new_y=YPos.NEXT)

    puts = put_bound_frame(report)
    if not puts.empty:
        pdf.ln(6)
        pdf.set_font("Helvetica", "B", 13)
        pdf.cell(0, 10, _latin1("Borne sur les puts VIX"), new_x=XPos.LMARGIN, new_y=YPos.NEXT)
        pdf.set_font("Helvetica", size=9)
        for _, row in puts.iterrows():
            pdf.cell(0, 6, _latin1(f"K={row['strike']:.3f}  prix={row['price']:.5f}  "
                                   f"borne={row['bound']:.5f}  {'ok' if row['pass'] else 'ÉCHEC'}"),
                     new_x=XPos.LMARGIN, new_y=YPos.NEXT)
    if comment:
        pdf.ln(6)
        pdf.set_font("Helvetica", "B", 13)
        pdf.cell(0, 10, _latin1("Commentaire"), new_x=XPos.LMARGIN, new_y=YPos.NEXT)
        pdf.set_font("Helvetica", size=10)
        pdf.multi_cell(0, 6, _latin1(comment))
    return bytes(pdf.output())


# --- figures ------------------------------------------------------------------

def plot_trace(trace):
    """Valeur duale et résidus au fil des itérations."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(12, 4))
    sns.lineplot(data=trace, x="iteration", y="value", ax=ax1)
    ax1.set_title("Valeur duale")
    cols = [c for c in trace.columns if c.startswith("residual")]
    long = trace.melt(id_vars="iteration", value_vars=cols, var_name="résidu", value_name="norme")
    sns.lineplot(data=long, x="iteration", y="norme", hue="résidu", ax=ax2)
    ax2.set_yscale("log")
    ax2.set_title("Résidus de marges")
    fig.tight_layout()
    return fig


def plot_marginals(marginals):
    """Marges du flot optimal contre les cibles (colonnes mass_* et target_*)."""
    fig, ax = plt.subplots(figsize=(10, 4))
    for col in marginals.columns:
        if col.startswith(("mass_", "target_")):
            style = "--" if col.startswith("target_") else "-"
            ax.plot(marginals["node"], marginals[col], style, label=col)
    ax.set_xlabel("x")
    ax.legend()
    return fig


def plot_phi(phi):
    "Carte de chaleur de Phi(w, y)."
    table = phi.pivot(index="y", columns="w", values="phi")
    fig, ax = plt.subplots(figsize=(10, 5))
    sns.heatmap(table, cmap="viridis", ax=ax, xticklabels=8, yticklabels=4)
    ax.set_title("Phi(w, y)")
    return fig


def plot_histograms(histograms):
    fig, ax = plt.subplots(figsize=(10, 4))
    sns.lineplot(data=histograms, x="node", y="mass", hue="t", ax=ax, palette="flare")
    ax.set_title("Marges simulées de X")
    return fig
