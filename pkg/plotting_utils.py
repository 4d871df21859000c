import plotly.graph_objects as go

from available_measures import measures_to_names, methods_to_names


def plot_similarity_heatmap(matrix, highlight=None, title=None) -> go.Figure:
    """
    Heatmap of a layer similarity matrix.

    Args:
        matrix: SimilarityMatrix
        highlight: optional (layer id, layer id) pair to outline
        title: figure title, defaults to the measure name

    Returns:
        Plotly figure object
    """
    labels = [str(i) for i in matrix.layer_ids]
    fig = go.Figure(
        go.Heatmap(
            z=matrix.values,
            x=labels,
            y=labels,
            zmin=0.0,
            zmax=1.0,
            colorscale="Viridis",
            hovertemplate="layers %{y} / %{x}: %{z:.3f}<extra></extra>",
        )
    )
    if highlight is not None:
        for a, b in (highlight, highlight[::-1]):
            fig.add_shape(
                type="rect",
                x0=labels.index(str(b)) - 0.5,
                x1=labels.index(str(b)) + 0.5,
                y0=labels.index(str(a)) - 0.5,
                y1=labels.index(str(a)) + 0.5,
                line=dict(color="#ff7f0e", width=3),
            )
    fig.update_layout(
        title=dict(text=title or measures_to_names.get(matrix.measure, matrix.measure), x=0.5,
                   xanchor="center"),
        xaxis_title="Layer",
        yaxis_title="Layer",
        yaxis=dict(autorange="reversed", scaleanchor="x"),
        height=600,
    )
    return fig


def plot_metric_vs_ratio(df, metric="next_token_accuracy") -> go.Figure:
    """
    One line per method of a sweep table: metric against achieved compression ratio.

    Rows that failed (NaN metric) are left out.
    """
    fig = go.Figure()
    ok = df.dropna(subset=[metric, "compression_ratio"])
    for method, group in ok.groupby("method", sort=False):
        group = group.sort_values("compression_ratio")
        fig.add_trace(
            go.Scatter(
                x=100 * group["compression_ratio"],
                y=group[metric],
                mode="lines+markers",
                name=methods_to_names.get(method, method),
            )
        )
    label = "Accuracy" if metric == "next_token_accuracy" else "Cross-entropy"
    fig.update_layout(
        title=dict(text=f"{label} vs Compression Ratio", x=0.5, xanchor="center"),
        xaxis_title="Compression ratio (%)",
        yaxis_title=label,
        hovermode="x unified",
    )
    return fig


def plot_training_curve(losses) -> go.Figure:
    fig = go.Figure(go.Scatter(x=list(range(len(losses))), y=list(losses), mode="lines"))
    fig.update_layout(
        title=dict(text="Training loss", x=0.5, xanchor="center"),
        xaxis_title="Step",
        yaxis_title="Cross-entropy",
        showlegend=False,
        height=300,
    )
    return fig


def plot_eigenvalue_spectra(embeddings) -> go.Figure:
    """Nontrivial diffusion eigenvalues used by each layer's embedding."""
    fig = go.Figure()
    for emb in embeddings:
        fig.add_trace(
            go.Scatter(
                x=list(range(2, len(emb.eigenvalues_used) + 2)),
                y=emb.eigenvalues_used,
                mode="lines+markers",
                name=f"Layer {emb.layer_index}",
            )
        )
    fig.update_layout(
        title=dict(text="Diffusion spectrum", x=0.5, xanchor="center"),
        xaxis_title="Eigenvalue index",
        yaxis_title="Eigenvalue",
    )
    return fig
