"""Layer-by-layer similarity matrices over diffusion embeddings."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import scipy.linalg

from errors import ExhaustedError, InvalidInputError
from infotheory import CovarianceBundle, nmi_diagnostics, ridge_for
from linalg_core import as_dense, covariance
from utils import atomic_write_text

logger = logging.getLogger(__name__)

MEASURES = ("nmi", "cosine", "euclidean-rbf", "mahalanobis-rbf")
CANDIDATE_MODES = ("adjacent",)


@dataclass(frozen=True)
class SimilarityParams:
    """ridge: covariance ridge for nmi and the pooled Mahalanobis metric (None = 1e-6 trace/d)."""

    ridge: Optional[float] = None

    def __post_init__(self):
        if self.ridge is not None and self.ridge < 0:
            raise InvalidInputError(f"ridge must be >= 0, got {self.ridge}")


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    measure: str
    layer_ids: tuple
    params: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.values.shape[0]

    def index_of(self, layer_id):
        try:
            return self.layer_ids.index(layer_id)
        except ValueError:
            raise InvalidInputError(f"layer {layer_id} is not in this matrix ({self.layer_ids})")

    def score(self, a, b):
        return float(self.values[self.index_of(a), self.index_of(b)])

    def to_frame(self):
        ids = list(self.layer_ids)
        return pd.DataFrame(self.values, index=pd.Index(ids, name="layer"), columns=ids)

    def to_csv(self, path):
        atomic_write_text(path, self.to_frame().to_csv(float_format="%.6f", lineterminator="\n"))

    @classmethod
    def from_csv(cls, path, measure="nmi"):
        df = pd.read_csv(path, index_col=0)
        ids = tuple(int(i) for i in df.index)
        if tuple(int(c) for c in df.columns) != ids:
            raise InvalidInputError(f"{path}: header row and column disagree")
        return cls(df.to_numpy(dtype=np.float64), measure, ids)

    def to_pgm(self, path):
        """Plain (P2) greyscale image, one pixel per entry, 0..255 for similarity 0..1."""
        pixels = np.rint(np.clip(self.values, 0.0, 1.0) * 255).astype(int)
        lines = ["P2", f"{self.size} {self.size}", "255"]
        lines += [" ".join(str(p) for p in row) for row in pixels]
        atomic_write_text(path, "\n".join(lines) + "\n")

    def off_diagonal_max(self):
        masked = self.values.copy()
        np.fill_diagonal(masked, -np.inf)
        i, j = np.unravel_index(int(np.argmax(masked)), masked.shape)
        return (self.layer_ids[min(i, j)], self.layer_ids[max(i, j)]), float(masked[i, j])


def _coords(embedding):
    return as_dense(embedding.coords if hasattr(embedding, "coords") else embedding, "embedding")


def _cosine(x, y):
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    denom = nx * ny
    dots = np.einsum("ij,ij->i", x, y)
    cos = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    # two zero rows are treated as identical
    cos = np.where((nx == 0) & (ny == 0), 1.0, cos)
    return float((np.clip(cos.mean(), -1.0, 1.0) + 1.0) / 2.0)


def _rbf_from_distances(dist, pairs):
    """exp(-d / m) with m the median of the off-diagonal mean squared distances."""
    scale = float(np.median([dist[i, j] for i, j in pairs]))
    if scale <= 0.0:
        return np.where(dist > 0, 0.0, 1.0)
    return np.exp(-dist / scale)


def _pooled_precision(coords, ridge):
    pooled = np.mean([covariance(c) for c in coords], axis=0)
    if ridge is None:
        ridge = ridge_for(pooled)
    shifted = pooled + ridge * np.eye(pooled.shape[0])
    try:
        factor = scipy.linalg.cho_factor(shifted, lower=True)
    except np.linalg.LinAlgError:
        raise InvalidInputError("pooled embedding covariance is singular; pass a positive ridge")
    return factor


def build_similarity_matrix(embeddings, measure="nmi", params: SimilarityParams = None,
                            layer_ids=None) -> SimilarityMatrix:
    """
    Pairwise similarity of per-layer embeddings.

    Args:
        embeddings: list of DiffusionEmbedding (or N x k arrays), all the same shape
        measure: one of MEASURES
        params: SimilarityParams
        layer_ids: labels for the rows; defaults to each embedding's layer_index

    Returns:
        SimilarityMatrix: symmetric, values in [0, 1], unit diagonal
    """
    if measure not in MEASURES:
        raise InvalidInputError(f"Unknown similarity measure {measure!r}; expected {MEASURES}")
    params = params or SimilarityParams()
    embeddings = list(embeddings)
    n_layers = len(embeddings)
    if n_layers < 2:
        raise InvalidInputError(f"need at least 2 layers, got {n_layers}")
    coords = [_coords(e) for e in embeddings]
    if any(c.shape != coords[0].shape for c in coords):
        raise InvalidInputError(
            f"embeddings must share N and k, got shapes {sorted({c.shape for c in coords})}"
        )
    if layer_ids is None:
        layer_ids = [getattr(e, "layer_index", i) for i, e in enumerate(embeddings)]
    layer_ids = tuple(int(i) for i in layer_ids)
    if len(layer_ids) != n_layers:
        raise InvalidInputError("layer_ids must have one entry per embedding")

    pairs = [(i, j) for i in range(n_layers) for j in range(i + 1, n_layers)]
    values = np.eye(n_layers)
    diagnostics = {}

    if measure == "nmi":
        n, k = coords[0].shape
        if n < 4 * k:
            logger.warning("Only %d samples for %d-dimensional embeddings; NMI will be noisy", n, k)
        mi_raw = np.full((n_layers, n_layers), np.nan)
        fallback = np.zeros((n_layers, n_layers), dtype=bool)
        for i, j in pairs:
            bundle = CovarianceBundle.from_samples(coords[i], coords[j], warn=False)
            diag = nmi_diagnostics(bundle, params.ridge)
            values[i, j] = values[j, i] = diag.score
            mi_raw[i, j] = mi_raw[j, i] = diag.mi_raw
            fallback[i, j] = fallback[j, i] = diag.fallback
        n_fallback = int(np.triu(fallback, 1).sum())
        if n_fallback:
            logger.warning(
                "%d of %d layer pairs have non-positive entropy; scored with I/(I+1)",
                n_fallback,
                len(pairs),
            )
        diagnostics = {"mi_raw": mi_raw, "fallback": fallback}
    elif measure == "cosine":
        for i, j in pairs:
            values[i, j] = values[j, i] = _cosine(coords[i], coords[j])
    else:
        dist = np.zeros((n_layers, n_layers))
        if measure == "mahalanobis-rbf":
            factor = _pooled_precision(coords, params.ridge)
        for i, j in pairs:
            delta = coords[i] - coords[j]
            if measure == "euclidean-rbf":
                d = float(np.mean(np.sum(delta**2, axis=1)))
            else:
                d = float(np.mean(np.sum(delta * scipy.linalg.cho_solve(factor, delta.T).T, axis=1)))
            dist[i, j] = dist[j, i] = max(d, 0.0)
        values = _rbf_from_distances(dist, pairs)
        np.fill_diagonal(values, 1.0)

    values = np.clip(values, 0.0, 1.0)
    return SimilarityMatrix(
        values,
        measure,
        layer_ids,
        params={"ridge": params.ridge, "n_samples": coords[0].shape[0], "k": coords[0].shape[1]},
        diagnostics=diagnostics,
    )


def most_similar_adjacent_pair(s: SimilarityMatrix, active=None, exclude=()):
    """
    Most similar pair of depth-adjacent live layers.

    Args:
        s: SimilarityMatrix whose layer_ids cover every active layer
        active: live layer ids in depth order; defaults to s.layer_ids
        exclude: ids that may not take part in a merge (consumed in non-iterative mode)

    Returns:
        tuple: ((lower id, upper id), score); ties go to the deepest pair

    Raises:
        ExhaustedError: no admissible pair remains
    """
    active = list(s.layer_ids if active is None else active)
    if len(active) < 2:
        raise ExhaustedError(f"need at least 2 active layers, got {len(active)}")
    best, best_score = None, -np.inf
    for a, b in zip(active[:-1], active[1:]):
        if a in exclude or b in exclude:
            continue
        score = s.score(a, b)
        if score >= best_score:
            best, best_score = (a, b), score
    if best is None:
        raise ExhaustedError("every adjacent pair involves an already merged layer")
    return best, float(best_score)


def check_candidate_mode(mode):
    if mode not in CANDIDATE_MODES:
        raise InvalidInputError(
            f"candidate mode {mode!r} is not supported: a merged block needs a defined position "
            "in the stack, so only depth-adjacent pairs can be merged"
        )
    return mode


def save_similarity(s: SimilarityMatrix, out_dir, stem="similarity"):
    out_dir = Path(out_dir)
    s.to_csv(out_dir / f"{stem}.csv")
    s.to_pgm(out_dir / f"{stem}.pgm")
    return out_dir / f"{stem}.csv", out_dir / f"{stem}.pgm"
