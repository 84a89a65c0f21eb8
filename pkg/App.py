import logging

import pandas as pd
import streamlit as st

from rapports import (create_pdf_report, load_report, order_frame, plot_histograms, plot_marginals,
                      plot_phi, plot_trace, potentials_frame, put_bound_frame, summary_frame, to_excel)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

st.set_page_config(page_title="Visualisateur de calibration", layout="wide")

st.title("📊 Résultats de calibration MOT / Schrödinger / VIX")


@st.cache_data
def load_csv(uploaded_file=None):
    if uploaded_file is not None:
        try:
            return pd.read_csv(uploaded_file)
        except Exception as e:
            st.error(f"Erreur de chargement: {e}")
            return pd.DataFrame()
    return pd.DataFrame()


with st.sidebar:
    st.header("📂 Fichiers")
    report_file = st.file_uploader("Rapport JSON (result, verify, simulate)", type=["json"])
    trace_file = st.file_uploader("Trace de montée (trace.csv)", type=["csv"])
    marginals_file = st.file_uploader("Marges (marginals.csv)", type=["csv"])
    phi_file = st.file_uploader("Table Phi (phi.csv)", type=["csv"])
    hist_file = st.file_uploader("Histogrammes simulés (histograms.csv)", type=["csv"])
    comment = st.text_area("Commentaire")

report = {}
if report_file is not None:
    try:
        report = load_report(report_file)
    except ValueError as e:
        st.error(f"Rapport illisible: {e}")

trace = load_csv(trace_file)
marginals = load_csv(marginals_file)
phi = load_csv(phi_file)
histograms = load_csv(hist_file)

if report:
    st.header("🔍 Indicateurs Clés")
    summary = summary_frame(report)
    cols = st.columns(4)
    for i, (_, row) in enumerate(summary.iterrows()):
        value = row["Valeur"]
        with cols[i % 4]:
            st.metric(row["Statistique"], f"{value:.6g}" if isinstance(value, float) else str(value))
    if "error" in report:
        st.error(f"Échec (code {report.get('exit_code')}): {report['error']}")
    puts = put_bound_frame(report)
    if not puts.empty:
        st.subheader("Borne sur les puts VIX")
        st.dataframe(puts, use_container_width=True)
    order = order_frame(report) if ("pairs" in report or "order" in report) else pd.DataFrame()
    if not order.empty:
        st.subheader("Ordre convexe")
        st.dataframe(order, use_container_width=True)
    with st.expander("Rapport complet", expanded=False):
        st.json(report)

if not trace.empty:
    st.header("📈 Montée duale")
    last = int(trace["iteration"].max())
    lo, hi = st.slider("Itérations", 0, max(last, 1), (0, max(last, 1)))
    window = trace[(trace["iteration"] >= lo) & (trace["iteration"] <= hi)]
    st.pyplot(plot_trace(window))
    st.dataframe(window.describe(), use_container_width=True)

col1, col2 = st.columns(2)
with col1:
    if not marginals.empty:
        st.subheader("Marges")
        st.pyplot(plot_marginals(marginals))
with col2:
    if not phi.empty:
        st.subheader("Phi")
        st.pyplot(plot_phi(phi))
if not histograms.empty:
    st.subheader("Simulation")
    st.pyplot(plot_histograms(histograms))

st.header("💾 Export")
if report or not trace.empty:
    sheets = {"Résumé": summary_frame(report) if report else pd.DataFrame(),
              "Potentiels": potentials_frame(report) if report else pd.DataFrame(),
              "Puts VIX": put_bound_frame(report) if report else pd.DataFrame(),
              "Trace": trace, "Marges": marginals, "Phi": phi}
    st.download_button(
        label="📤 Télécharger en Excel",
        data=to_excel(sheets),
        file_name="resultats_calibration.xlsx",
        mime="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet"
    )
    if report and st.button("Générer le rapport PDF"):
        st.download_button(
            label="Télécharger PDF",
            data=create_pdf_report(report, comment),
            file_name="rapport_calibration.pdf",
            mime="application/pdf"
        )
else:
    st.info("Importer un rapport ou une trace pour commencer.")
