import streamlit as st

from analysis_tools import run_sweep
from available_measures import methods_to_names, names_to_measures
from helper_texts import compression_page_helpers, helper_content
from plotting_utils import plot_metric_vs_ratio

st.set_page_config(page_title="Compression", page_icon="🧩", layout="wide")

col1, _, col3 = st.columns([1, 7, 3])
with col1:
    st.page_link("Home.py", label="← Back to Home")
with col3:
    if "show_help_comp_1" not in st.session_state:
        st.session_state.show_help_comp_1 = False

    if st.button("🛈\nHow to use this tool", type="secondary", key="help_button_1"):
        st.session_state.show_help_comp_1 = not st.session_state.show_help_comp_1

st.markdown(
    """
    <div style="background-color: rgba(255,165,0,0.1); padding: 0.5rem; border-radius: 0.5rem; margin-bottom: 1rem;">
        <h2 style="margin: 0;">Compression</h2>
    </div>
""",
    unsafe_allow_html=True,
)

if st.session_state.show_help_comp_1:
    st.markdown(
        helper_content.format(text=compression_page_helpers["help_1"]),
        unsafe_allow_html=True,
    )

if "model" not in st.session_state:
    st.warning("Train a model on the Layer Similarity page first.")
    st.stop()

ckpt = st.session_state.model
n_layers = ckpt.config.n_layers

col1, col2, col3 = st.columns(3)
with col1:
    methods = st.multiselect(
        "Methods",
        list(methods_to_names.keys()),
        default=["mka", "reverse"],
        format_func=lambda m: methods_to_names[m],
    )
with col2:
    ratios = st.multiselect(
        "Layers removed",
        list(range(n_layers)),
        default=list(range(min(n_layers, 3))),
        format_func=lambda r: f"{r} of {n_layers}",
    )
with col3:
    measure = names_to_measures[st.selectbox("Measure", list(names_to_measures.keys()))]
    metric = st.radio(
        "Plot", ["next_token_accuracy", "cross_entropy"],
        format_func=lambda m: "Accuracy" if m == "next_token_accuracy" else "Cross-entropy",
    )

if st.button("Run sweep", type="primary", disabled=not (methods and ratios)):
    progress_bar = st.progress(0)
    status_text = st.empty()

    def update(fraction, text):
        progress_bar.progress(fraction)
        status_text.text(f"Compressing... {text}")

    try:
        st.session_state.sweep = run_sweep(
            ckpt,
            st.session_state.task,
            methods,
            [r / n_layers for r in sorted(ratios)],
            n_batches=5,
            progress_callback=update,
            measure=measure,
        )
    finally:
        progress_bar.empty()
        status_text.empty()

if "sweep" in st.session_state:
    table = st.session_state.sweep
    st.plotly_chart(plot_metric_vs_ratio(table, metric), use_container_width=True)
    failed = table[table["error"] != ""]
    if len(failed):
        st.warning(f"{len(failed)} combinations failed; see the error column.")
    st.dataframe(table)
