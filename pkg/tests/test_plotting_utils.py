import numpy as np
import pandas as pd

from manifold import DiffusionEmbedding
from plotting_utils import (
    plot_eigenvalue_spectra,
    plot_metric_vs_ratio,
    plot_similarity_heatmap,
    plot_training_curve,
)
from similarity import SimilarityMatrix


def test_heatmap_highlights_pair():
    matrix = SimilarityMatrix(np.array([[1, 0.4, 0.1], [0.4, 1, 0.8], [0.1, 0.8, 1]]), "nmi",
                              (1, 2, 3))
    fig = plot_similarity_heatmap(matrix, highlight=(2, 3))
    assert fig.layout.title.text == "Normalised mutual information"
    assert list(fig.data[0].x) == ["1", "2", "3"]
    assert len(fig.layout.shapes) == 2
    assert fig.layout.shapes[0].x0 == 1.5


def test_metric_vs_ratio_skips_failed_rows():
    df = pd.DataFrame(
        {
            "method": ["reverse", "reverse", "mka", "bogus"],
            "compression_ratio": [0.5, 0.0, 0.25, np.nan],
            "next_token_accuracy": [0.2, 0.4, 0.3, np.nan],
        }
    )
    fig = plot_metric_vs_ratio(df)
    assert [t.name for t in fig.data] == ["Reverse pruning", "Manifold alignment merging (iterative)"]
    assert list(fig.data[0].x) == [0.0, 50.0]
    assert fig.layout.yaxis.title.text == "Accuracy"


def test_training_curve():
    fig = plot_training_curve([2.7, 2.5, 2.1])
    assert list(fig.data[0].y) == [2.7, 2.5, 2.1]


def test_eigenvalue_spectra():
    embs = [DiffusionEmbedding(i, np.zeros((5, 3)), np.array([0.9, 0.5, 0.1]), 1.0) for i in (1, 2)]
    fig = plot_eigenvalue_spectra(embs)
    assert [t.name for t in fig.data] == ["Layer 1", "Layer 2"]
    assert list(fig.data[0].x) == [2, 3, 4]
