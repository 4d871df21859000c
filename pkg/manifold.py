"""Diffusion-map embedding of a layer's activation cloud."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from errors import DegenerateAffinityError, DegenerateDataError, InvalidInputError
from linalg_core import as_dense, pairwise_sqdist, sym_eig, symmetrize, require_symmetric
from model_runtime import ActivationMatrix, save_container
from utils import thread_count

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ManifoldConfig:
    """
    sigma: kernel bandwidth; None selects sigma^2 = median pairwise squared distance.
    embed_dim: number of nontrivial diffusion coordinates kept (k).
    diffusion_time: power t applied to the eigenvalues.
    """

    sigma: Optional[float] = None
    embed_dim: int = 8
    diffusion_time: float = 1.0

    def __post_init__(self):
        if self.sigma is not None and not self.sigma > 0:
            raise InvalidInputError(f"fixed sigma must be > 0, got {self.sigma}")
        if self.embed_dim < 1:
            raise InvalidInputError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if not self.diffusion_time >= 0:
            raise InvalidInputError(f"diffusion_time must be >= 0, got {self.diffusion_time}")

    @property
    def sigma_mode(self):
        return "auto-median" if self.sigma is None else "fixed"

    def to_dict(self):
        return {
            "sigma_mode": self.sigma_mode,
            "sigma": self.sigma,
            "embed_dim": self.embed_dim,
            "diffusion_time": self.diffusion_time,
        }


@dataclass
class DiffusionOperatorBundle:
    affinity: np.ndarray
    degrees: np.ndarray
    eigenvalues: np.ndarray  # descending, shared by P and its symmetric conjugate
    eigenvectors: np.ndarray  # unit-norm right eigenvectors of P, as columns

    @property
    def n_points(self):
        return self.affinity.shape[0]

    def operator(self):
        """The row-stochastic diffusion operator P = D^-1 W."""
        return self.affinity / self.degrees[:, None]


@dataclass
class DiffusionEmbedding:
    layer_index: int
    coords: np.ndarray
    eigenvalues_used: np.ndarray
    time: float
    sigma: Optional[float] = None

    @property
    def n_points(self):
        return self.coords.shape[0]

    @property
    def dim(self):
        return self.coords.shape[1]


def _activation_data(acts):
    data = acts.data if isinstance(acts, ActivationMatrix) else acts
    return as_dense(data, "activations")


def build_affinity(acts, config: ManifoldConfig):
    """
    Gaussian affinity W_ij = exp(-||h_i - h_j||^2 / sigma^2) of mean-centred activations.

    Args:
        acts: ActivationMatrix or N x d array
        config: ManifoldConfig

    Returns:
        tuple: (W as an N x N array, sigma actually used)

    Raises:
        DegenerateDataError: all points coincide and sigma is automatic
    """
    x = _activation_data(acts)
    if x.shape[0] < 2:
        raise InvalidInputError(f"need at least 2 inputs, got {x.shape[0]}")
    x = x - x.mean(axis=0)
    sqdist = pairwise_sqdist(x)
    if config.sigma is None:
        iu = np.triu_indices(x.shape[0], k=1)
        sigma_sq = float(np.median(sqdist[iu]))
        if sigma_sq <= 0.0:
            raise DegenerateDataError(
                "median pairwise distance is zero (identical activations); "
                "pass a fixed sigma to embed this layer"
            )
        sigma = float(np.sqrt(sigma_sq))
    else:
        sigma = float(config.sigma)
        sigma_sq = sigma * sigma
    w = np.exp(-sqdist / sigma_sq)
    np.fill_diagonal(w, 1.0)
    return w, sigma


def _fix_signs(vectors):
    rows = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[rows, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def diffusion_decompose(w) -> DiffusionOperatorBundle:
    """
    Spectrum of P = D^-1 W via its symmetric conjugate D^-1/2 W D^-1/2.

    Eigenvectors psi of the conjugate map to right eigenvectors of P as phi = D^-1/2 psi; each
    phi is rescaled to unit norm and its largest-magnitude component made positive.
    """
    w = as_dense(w, "W")
    if w.shape[0] != w.shape[1]:
        raise InvalidInputError(f"W must be square, got shape {w.shape}")
    require_symmetric(w, "W")
    if np.any(w < 0):
        raise InvalidInputError("affinity entries must be non-negative")
    degrees = w.sum(axis=1)
    if np.any(degrees <= 0):
        bad = int(np.argmin(degrees))
        raise DegenerateAffinityError(f"affinity row {bad} has non-positive sum {degrees[bad]:g}")
    inv_sqrt = 1.0 / np.sqrt(degrees)
    conjugate = symmetrize(w * inv_sqrt[:, None] * inv_sqrt[None, :])
    values, psi = sym_eig(conjugate)
    phi = psi * inv_sqrt[:, None]
    phi = phi / np.linalg.norm(phi, axis=0)
    return DiffusionOperatorBundle(w, degrees, values, _fix_signs(phi))


def _check_k(bundle, k):
    n = bundle.n_points
    if k < 1 or k > n - 1:
        raise InvalidInputError(f"embed_dim must be in [1, {n - 1}] for {n} points, got {k}")


def _time_factors(eigenvalues, t):
    if t == 0:
        return np.ones_like(eigenvalues)
    # negative eigenvalues keep their sign for fractional t
    return np.copysign(np.abs(eigenvalues) ** t, eigenvalues)


def diffusion_map(bundle: DiffusionOperatorBundle, k, t, layer_index=0, sigma=None):
    """Coordinates lambda_j^t * phi_j for j = 2..k+1; the trivial eigenpair is omitted."""
    _check_k(bundle, k)
    if not t >= 0:
        raise InvalidInputError(f"diffusion time must be >= 0, got {t}")
    lam = bundle.eigenvalues[1 : k + 1]
    coords = bundle.eigenvectors[:, 1 : k + 1] * _time_factors(lam, t)
    return DiffusionEmbedding(layer_index, coords, lam.copy(), float(t), sigma)


def diffusion_distance(bundle: DiffusionOperatorBundle, i, j, k, t):
    n = bundle.n_points
    for idx in (i, j):
        if not 0 <= idx < n:
            raise InvalidInputError(f"point index {idx} out of range [0, {n})")
    _check_k(bundle, k)
    lam = bundle.eigenvalues[1 : k + 1]
    diff = bundle.eigenvectors[i, 1 : k + 1] - bundle.eigenvectors[j, 1 : k + 1]
    return float(np.sqrt(np.sum((_time_factors(lam, t) * diff) ** 2)))


def embed_layer(acts: ActivationMatrix, config: ManifoldConfig) -> DiffusionEmbedding:
    w, sigma = build_affinity(acts, config)
    bundle = diffusion_decompose(w)
    emb = diffusion_map(
        bundle, config.embed_dim, config.diffusion_time, layer_index=acts.layer_index, sigma=sigma
    )
    logger.debug(
        "Layer %d: sigma=%.4g, lambda_2=%.4f", acts.layer_index, sigma, bundle.eigenvalues[1]
    )
    return emb


def embed_layers(activations, config: ManifoldConfig, workers=None):
    """
    Embed several layers; results keep the input order.

    Args:
        activations: list of ActivationMatrix
        config: ManifoldConfig
        workers: pool size, defaults to the LAYERFUSE_THREADS cap
    """
    activations = list(activations)
    workers = workers or thread_count()
    if workers == 1 or len(activations) < 2:
        return [embed_layer(a, config) for a in activations]
    with ThreadPoolExecutor(max_workers=min(workers, len(activations))) as pool:
        return list(pool.map(lambda a: embed_layer(a, config), activations))


def save_embeddings(path, embeddings, config: ManifoldConfig):
    tensors = {f"layer.{e.layer_index}.embedding": e.coords for e in embeddings}
    meta = {
        "kind": "embeddings",
        "k": config.embed_dim,
        "t": config.diffusion_time,
        "sigma_mode": config.sigma_mode,
        "sigma": {str(e.layer_index): e.sigma for e in embeddings},
        "eigenvalues": {str(e.layer_index): e.eigenvalues_used.tolist() for e in embeddings},
    }
    save_container(path, tensors, meta)
