import streamlit as st

from analysis_tools import layer_similarity
from available_measures import names_to_measures, names_to_tasks
from errors import LayerfuseError
from helper_texts import helper_content, measure_info, similarity_page_helpers
from manifold import ManifoldConfig
from model_runtime import ModelConfig, ToyTask, plant_redundancy, train_toy_with_history
from plotting_utils import (
    plot_eigenvalue_spectra,
    plot_similarity_heatmap,
    plot_training_curve,
)
from similarity import most_similar_adjacent_pair

st.set_page_config(page_title="Layer Similarity", page_icon="🧩", layout="wide")

col1, _, col3 = st.columns([1, 7, 3])
with col1:
    st.page_link("Home.py", label="← Back to Home")
with col3:
    if "show_help_sim_1" not in st.session_state:
        st.session_state.show_help_sim_1 = False

    if st.button("🛈\nHow to use this tool", type="secondary", key="help_button_1"):
        st.session_state.show_help_sim_1 = not st.session_state.show_help_sim_1

st.markdown(
    """
    <div style="background-color: rgba(255,165,0,0.1); padding: 0.5rem; border-radius: 0.5rem; margin-bottom: 1rem;">
        <h2 style="margin: 0;">Layer Similarity</h2>
    </div>
""",
    unsafe_allow_html=True,
)

if st.session_state.show_help_sim_1:
    st.markdown(
        helper_content.format(text=similarity_page_helpers["help_1"]),
        unsafe_allow_html=True,
    )

st.markdown("🧠 **Model and task:**")
col1, col2, col3, col4 = st.columns(4)
with col1:
    n_layers = st.number_input("Layers", min_value=2, max_value=16, value=4)
    d_model = st.selectbox("d_model", [16, 32, 64], index=1)
with col2:
    task_display = st.selectbox("Task", list(names_to_tasks.keys()))
    steps = st.number_input("Training steps", min_value=0, max_value=5000, value=200, step=50)
with col3:
    seed = st.number_input("Seed", min_value=0, value=0)
    lr = st.number_input("Learning rate", min_value=1e-4, max_value=1.0, value=3e-3, format="%.4f")
with col4:
    plant = st.checkbox("Plant a redundant layer")
    plant_position = st.number_input(
        "Insert after block", min_value=1, max_value=int(n_layers), value=1, disabled=not plant
    )
    epsilon = st.number_input("Epsilon", min_value=0.0, value=1e-3, format="%.4f", disabled=not plant)

if st.button("Train model", type="primary"):
    config = ModelConfig(
        vocab_size=16,
        d_model=int(d_model),
        n_layers=int(n_layers),
        n_heads=4,
        d_ff=4 * int(d_model),
        seed=int(seed),
        init_scale=0.2,
    )
    task = ToyTask(kind=names_to_tasks[task_display], vocab_size=16, seed=int(seed))
    progress_bar = st.progress(0)
    status_text = st.empty()
    try:
        status_text.text("Training...")
        ckpt, losses = train_toy_with_history(config, task, steps=int(steps), learning_rate=lr)
        progress_bar.progress(1.0)
        if plant:
            ckpt = plant_redundancy(ckpt, int(plant_position), float(epsilon))
        st.session_state.model = ckpt
        st.session_state.task = task
        st.session_state.losses = losses
        st.session_state.planted = int(plant_position) + 1 if plant else None
        st.session_state.pop("similarity", None)
    except LayerfuseError as e:
        st.error(str(e), icon="🚨")
    finally:
        progress_bar.empty()
        status_text.empty()

if "model" not in st.session_state:
    st.stop()

if st.session_state.losses:
    st.plotly_chart(plot_training_curve(st.session_state.losses), use_container_width=True)
if st.session_state.planted:
    st.info(f"Planted near-identity block is layer {st.session_state.planted}.")

st.markdown("📐 **Similarity settings:**")
col1, col2, col3, col4 = st.columns(4)
with col1:
    measure_display = st.selectbox("Measure", list(names_to_measures.keys()))
    measure = names_to_measures[measure_display]
with col2:
    embed_dim = st.number_input("Embedding dimension k", min_value=1, max_value=32, value=8)
with col3:
    diffusion_time = st.number_input("Diffusion time t", min_value=0.0, value=1.0, step=0.5)
with col4:
    n_inputs = st.number_input("Capture inputs", min_value=32, max_value=1024, value=128)

with st.expander("About this measure"):
    st.markdown(measure_info[measure])

if st.button("Compute similarity", type="primary"):
    with st.spinner("Capturing activations and embedding layers..."):
        try:
            matrix, embeddings = layer_similarity(
                st.session_state.model,
                st.session_state.task,
                n_inputs=int(n_inputs),
                manifold_config=ManifoldConfig(
                    embed_dim=int(embed_dim), diffusion_time=float(diffusion_time)
                ),
                measure=measure,
            )
            st.session_state.similarity = (matrix, embeddings)
        except LayerfuseError as e:
            st.error(str(e), icon="🚨")

if "similarity" in st.session_state:
    matrix, embeddings = st.session_state.similarity
    pair, score = most_similar_adjacent_pair(matrix)
    col1, col2 = st.columns([3, 2])
    with col1:
        st.plotly_chart(plot_similarity_heatmap(matrix, highlight=pair), use_container_width=True)
    with col2:
        st.metric("First merge candidate", f"{pair[0]} + {pair[1]}", f"score {score:.3f}")
        st.plotly_chart(plot_eigenvalue_spectra(embeddings), use_container_width=True)
    st.dataframe(matrix.to_frame().round(3))
