"""Gaussian entropy, mutual information and the information-bottleneck merge objective."""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg

from errors import InvalidInputError, MissingTargetError, SingularMatrixError
from linalg_core import as_dense, cholesky_logdet, covariance, cross_covariance, symmetrize

logger = logging.getLogger(__name__)

DEFAULT_RIDGE_FACTOR = 1e-6
LOG_2PI_E = math.log(2.0 * math.pi * math.e)
ALPHA_MODES = ("nmi-heuristic", "grid-search", "fixed")
TARGET_MODES = ("final-layer-embedding", "task-labels")


def ridge_for(*matrices):
    """Default ridge 1e-6 * trace / dim pooled over the given square matrices."""
    dim = sum(m.shape[0] for m in matrices)
    if dim == 0:
        return 0.0
    return DEFAULT_RIDGE_FACTOR * abs(sum(float(np.trace(m)) for m in matrices)) / dim


@dataclass
class CovarianceBundle:
    sigma_l: np.ndarray
    sigma_m: np.ndarray
    cross: np.ndarray  # Sigma_lm, shape d_l x d_m
    n_samples: Optional[int] = None

    def __post_init__(self):
        self.sigma_l = as_dense(self.sigma_l, "Sigma_l")
        self.sigma_m = as_dense(self.sigma_m, "Sigma_m")
        self.cross = as_dense(self.cross, "Sigma_lm")
        dl, dm = self.sigma_l.shape[0], self.sigma_m.shape[0]
        if self.sigma_l.shape != (dl, dl) or self.sigma_m.shape != (dm, dm):
            raise InvalidInputError("marginal covariances must be square")
        if self.cross.shape != (dl, dm):
            raise InvalidInputError(
                f"cross covariance must be {dl} x {dm}, got {self.cross.shape}"
            )

    @property
    def joint(self):
        return np.block([[self.sigma_l, self.cross], [self.cross.T, self.sigma_m]])

    @classmethod
    def from_samples(cls, x, y, warn=True):
        """
        Covariances of paired embedding samples.

        Args:
            x: N x d_l samples of the first variable
            y: N x d_m samples of the second variable
            warn: log a warning when N < 2 (d_l + d_m)
        """
        x = as_dense(x, "X")
        y = as_dense(y, "Y")
        n = x.shape[0]
        if warn and n < 2 * (x.shape[1] + y.shape[1]):
            logger.warning(
                "Only %d samples for a %d-dimensional joint covariance", n, x.shape[1] + y.shape[1]
            )
        return cls(covariance(x), covariance(y), cross_covariance(x, y), n)

    @classmethod
    def from_blocks(cls, sigma_l, sigma_m, cross, n_samples=None):
        return cls(sigma_l, sigma_m, cross, n_samples)

    def swapped(self):
        return CovarianceBundle(self.sigma_m, self.sigma_l, self.cross.T, self.n_samples)

    def default_ridge(self):
        return ridge_for(self.sigma_l, self.sigma_m)


@dataclass
class TargetCovariances:
    """Covariance of the target Y and its cross covariances with both layer embeddings."""

    sigma_y: np.ndarray
    cross_ly: np.ndarray
    cross_my: np.ndarray

    def __post_init__(self):
        self.sigma_y = as_dense(self.sigma_y, "Sigma_Y")
        self.cross_ly = as_dense(self.cross_ly, "Sigma_lY")
        self.cross_my = as_dense(self.cross_my, "Sigma_mY")
        q = self.sigma_y.shape[0]
        if self.sigma_y.shape != (q, q):
            raise InvalidInputError("Sigma_Y must be square")
        if self.cross_ly.shape[1] != q or self.cross_my.shape[1] != q:
            raise InvalidInputError("cross covariances with Y must have one column per target dim")

    @classmethod
    def from_samples(cls, x_l, x_m, y):
        return cls(covariance(y), cross_covariance(x_l, y), cross_covariance(x_m, y))

    def default_ridge(self):
        return ridge_for(self.sigma_y)


class IBEvaluation(NamedTuple):
    alpha: float
    objective: float
    logdet_merged: float
    logdet_conditional: float

    def to_dict(self):
        return self._asdict()


class NMIDiagnostics(NamedTuple):
    score: float
    mi: float  # clamped at 0
    mi_raw: float
    entropy_l: float
    entropy_m: float
    fallback: bool  # True when an entropy was <= 0 and I / (I + 1) was used


@dataclass(frozen=True)
class IBConfig:
    beta: float = 1.0
    target_mode: str = "final-layer-embedding"
    alpha_mode: str = "nmi-heuristic"
    grid_steps: int = 101
    fixed_alpha: float = 0.5

    def __post_init__(self):
        if not self.beta > 0:
            raise InvalidInputError(f"beta must be > 0, got {self.beta}")
        if self.target_mode not in TARGET_MODES:
            raise InvalidInputError(f"target_mode must be one of {TARGET_MODES}")
        if self.alpha_mode not in ALPHA_MODES:
            raise InvalidInputError(f"alpha_mode must be one of {ALPHA_MODES}")
        if self.grid_steps < 2:
            raise InvalidInputError(f"grid_steps must be >= 2, got {self.grid_steps}")
        if not 0.0 <= self.fixed_alpha <= 1.0:
            raise InvalidInputError(f"fixed alpha must lie in [0, 1], got {self.fixed_alpha}")


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha}")


def gaussian_entropy(sigma, ridge=None):
    """
    Differential entropy of N(0, Sigma) in nats: 0.5 * (d ln(2 pi e) + ln|Sigma + ridge I|).

    The result may be negative.
    """
    sigma = as_dense(sigma, "Sigma")
    if ridge is None:
        ridge = ridge_for(sigma)
    d = sigma.shape[0]
    return 0.5 * (d * LOG_2PI_E + cholesky_logdet(sigma, ridge))


def _mi_parts(bundle, ridge):
    if ridge is None:
        ridge = bundle.default_ridge()
    ld_l = cholesky_logdet(bundle.sigma_l, ridge)
    ld_m = cholesky_logdet(bundle.sigma_m, ridge)
    ld_joint = cholesky_logdet(bundle.joint, ridge)
    return 0.5 * (ld_l + ld_m - ld_joint), ridge


def gaussian_mi(bundle: CovarianceBundle, ridge=None):
    """Closed-form mutual information of jointly Gaussian embeddings, clamped below at 0."""
    mi, _ = _mi_parts(bundle, ridge)
    return max(mi, 0.0)


def nmi_diagnostics(bundle: CovarianceBundle, ridge=None) -> NMIDiagnostics:
    mi_raw, ridge = _mi_parts(bundle, ridge)
    mi = max(mi_raw, 0.0)
    h_l = gaussian_entropy(bundle.sigma_l, ridge)
    h_m = gaussian_entropy(bundle.sigma_m, ridge)
    if h_l > 0 and h_m > 0:
        score = min(max(mi / math.sqrt(h_l * h_m), 0.0), 1.0)
        fallback = False
    else:
        score = mi / (mi + 1.0)
        fallback = True
    return NMIDiagnostics(score, mi, mi_raw, h_l, h_m, fallback)


def nmi(bundle: CovarianceBundle, ridge=None):
    """
    Normalised mutual information I / sqrt(H_l H_m) in [0, 1].

    Differential entropies can be non-positive; then the score falls back to I / (I + 1).
    """
    return nmi_diagnostics(bundle, ridge).score


def merged_covariance(bundle: CovarianceBundle, alpha):
    _check_alpha(alpha)
    cross_sym = bundle.cross + bundle.cross.T
    return (
        alpha**2 * bundle.sigma_l
        + (1.0 - alpha) ** 2 * bundle.sigma_m
        + alpha * (1.0 - alpha) * cross_sym
    )


def _cho(matrix, ridge, name):
    shifted = matrix + ridge * np.eye(matrix.shape[0]) if ridge else matrix
    try:
        return scipy.linalg.cho_factor(shifted, lower=True)
    except np.linalg.LinAlgError as e:
        raise SingularMatrixError(f"{name} + {ridge:g}*I is not positive definite: {e}")


def conditional_covariance(sigma_c, sigma_cy, sigma_y, ridge=0.0):
    """Schur complement Sigma_c - Sigma_cY (Sigma_Y + ridge I)^-1 Sigma_Yc, symmetrised."""
    sigma_c = as_dense(sigma_c, "Sigma_c")
    sigma_cy = as_dense(sigma_cy, "Sigma_cY")
    sigma_y = as_dense(sigma_y, "Sigma_Y")
    if sigma_cy.shape != (sigma_c.shape[0], sigma_y.shape[0]):
        raise InvalidInputError(
            f"Sigma_cY shape {sigma_cy.shape} does not match Sigma_c {sigma_c.shape} "
            f"and Sigma_Y {sigma_y.shape}"
        )
    factor = _cho(sigma_y, ridge, "Sigma_Y")
    return symmetrize(sigma_c - sigma_cy @ scipy.linalg.cho_solve(factor, sigma_cy.T))


def _resolve_ridges(bundle, targets, ridge):
    if ridge is None:
        return bundle.default_ridge(), targets.default_ridge()
    return ridge, ridge


def _merged_cross(targets, alpha):
    return alpha * targets.cross_ly + (1.0 - alpha) * targets.cross_my


def ib_objective(bundle: CovarianceBundle, targets: TargetCovariances, alpha, beta, ridge=None):
    """
    L_IB = 0.5 * [(1 - beta) ln|Sigma_c| + beta ln|Sigma_c|Y|] for the merged embedding.

    Args:
        bundle: covariances of the two layer embeddings
        targets: covariances involving the target variable Y
        alpha: weight of the lower layer
        beta: trade-off, > 0
        ridge: diagonal shift for every log-determinant and the Sigma_Y inverse. None uses
            1e-6 * trace / dim, resolved once from the inputs so it does not vary with alpha.

    Returns:
        IBEvaluation
    """
    _check_alpha(alpha)
    if not beta > 0:
        raise InvalidInputError(f"beta must be > 0, got {beta}")
    ridge_c, ridge_y = _resolve_ridges(bundle, targets, ridge)
    sigma_c = merged_covariance(bundle, alpha)
    sigma_cond = conditional_covariance(
        sigma_c, _merged_cross(targets, alpha), targets.sigma_y, ridge_y
    )
    ld_c = cholesky_logdet(sigma_c, ridge_c)
    ld_cond = cholesky_logdet(sigma_cond, ridge_c)
    objective = 0.5 * ((1.0 - beta) * ld_c + beta * ld_cond)
    return IBEvaluation(float(alpha), objective, ld_c, ld_cond)


def _trace_solve(matrix, ridge, rhs, name):
    return float(np.trace(scipy.linalg.cho_solve(_cho(matrix, ridge, name), rhs)))


def ib_objective_gradient(bundle: CovarianceBundle, targets: TargetCovariances, alpha, beta,
                          ridge=None):
    """Analytic dL_IB/dalpha, consistent with `ib_objective` for the same ridge."""
    _check_alpha(alpha)
    if not beta > 0:
        raise InvalidInputError(f"beta must be > 0, got {beta}")
    ridge_c, ridge_y = _resolve_ridges(bundle, targets, ridge)
    sigma_c = merged_covariance(bundle, alpha)
    d_sigma_c = (
        2.0 * alpha * bundle.sigma_l
        - 2.0 * (1.0 - alpha) * bundle.sigma_m
        + (1.0 - 2.0 * alpha) * (bundle.cross + bundle.cross.T)
    )

    cross_cy = _merged_cross(targets, alpha)
    d_cross_cy = targets.cross_ly - targets.cross_my
    y_factor = _cho(targets.sigma_y, ridge_y, "Sigma_Y")
    k_cross = scipy.linalg.cho_solve(y_factor, cross_cy.T)  # Sigma_Y^-1 Sigma_Yc
    k_dcross = scipy.linalg.cho_solve(y_factor, d_cross_cy.T)
    sigma_cond = symmetrize(sigma_c - cross_cy @ k_cross)
    d_sigma_cond = d_sigma_c - d_cross_cy @ k_cross - cross_cy @ k_dcross

    g_c = _trace_solve(sigma_c, ridge_c, d_sigma_c, "Sigma_c")
    g_cond = _trace_solve(sigma_cond, ridge_c, d_sigma_cond, "Sigma_c|Y")
    return 0.5 * ((1.0 - beta) * g_c + beta * g_cond)


def select_alpha(similarity, config: IBConfig, bundle=None, targets=None, ridge=None):
    """
    Merge weight for the lower layer of a pair.

    Returns:
        tuple: (alpha, IBEvaluation of the chosen alpha for grid search, else None)

    Raises:
        MissingTargetError: grid search without covariances of the pair and the target
    """
    if config.alpha_mode == "fixed":
        return config.fixed_alpha, None
    if config.alpha_mode == "nmi-heuristic":
        return min(max(float(similarity), 0.0), 1.0), None
    if bundle is None or targets is None:
        raise MissingTargetError("grid-search alpha selection needs target covariances")
    evaluations = [
        ib_objective(bundle, targets, float(a), config.beta, ridge)
        for a in np.linspace(0.0, 1.0, config.grid_steps)
    ]
    # argmin keeps the first minimum, i.e. the smaller alpha on ties
    best = evaluations[int(np.argmin([e.objective for e in evaluations]))]
    return best.alpha, best


def target_from_labels(labels, vocab_size, k, seed=0):
    """
    Task-label target: one-hot next-token labels projected to k dims by a seeded Gaussian map.

    Returns:
        np.ndarray: N x k target samples
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise InvalidInputError("labels must be a non-empty 1-D array")
    if labels.min() < 0 or labels.max() >= vocab_size:
        raise InvalidInputError(f"labels must lie in [0, {vocab_size})")
    rng = np.random.default_rng([seed, vocab_size, k])
    projection = rng.standard_normal((vocab_size, k)) / math.sqrt(k)
    return projection[labels]
