import streamlit as st
from helper_texts import homepage_helpers

st.set_page_config(page_title="Layer Merging Explorer", page_icon="🧩", layout="wide")

# Page links and the two summary boxes under them
st.markdown(
    """
<style>
    .stPageLink {
        background-color: rgba(70,130,180,0.12);
        border-radius: 8px;
    }

    .page-summary {
        border-left: 3px solid rgba(70,130,180,0.6);
        padding: 6px 10px;
        background-color: rgba(70,130,180,0.05);
    }
</style>
""",
    unsafe_allow_html=True,
)

col1, col2 = st.columns([6, 2.5])
with col1:
    st.title("Layer Merging Explorer")
with col2:
    with st.expander("⚙️ Model settings"):
        st.write(homepage_helpers["model_settings"])
        if "model" in st.session_state:
            cfg = st.session_state.model.config
            st.success(f"Loaded: {cfg.n_layers} layers, d_model={cfg.d_model}")
        else:
            st.info("No model trained yet.")

st.write(homepage_helpers["welcome_message"])

st.markdown("<br>", unsafe_allow_html=True)

col1, col2 = st.columns(2, gap="large")

with col1:
    st.page_link(
        "pages/01_Layer_Similarity.py",
        label="**Layer Similarity**",
        use_container_width=True,
    )
    st.markdown(homepage_helpers["similarity_help"], unsafe_allow_html=True)

with col2:
    st.page_link(
        "pages/02_Compression.py", label="**Compression**", use_container_width=True
    )
    st.markdown(homepage_helpers["compression_help"], unsafe_allow_html=True)

st.divider()

st.write(homepage_helpers["intro_text"])
st.write(homepage_helpers["similarity_text"])
st.write(homepage_helpers["compression_text"])
st.divider()

if "show_tech_info" not in st.session_state:
    st.session_state.show_tech_info = False

if st.button("Show technical info"):
    st.session_state.show_tech_info = not st.session_state.show_tech_info

if st.session_state.show_tech_info:
    st.write(homepage_helpers["technical_text"])
