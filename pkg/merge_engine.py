"""
Layer merging: the iterative similarity-driven merge loop, its baselines, compression-ratio
accounting, round-to-nearest quantisation and the second-order loss-impact bound.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch

from errors import ExhaustedError, InvalidInputError
from infotheory import (
    CovarianceBundle,
    IBConfig,
    TargetCovariances,
    select_alpha,
    target_from_labels,
)
from linalg_core import power_iteration_max_eig
from manifold import ManifoldConfig, embed_layers
from model_runtime import (
    LayerParams,
    ModelCheckpoint,
    TinyDecoder,
    ToyTask,
    capture_activations,
    evaluate,
    task_loss_fn,
)
from similarity import (
    SimilarityParams,
    build_similarity_matrix,
    check_candidate_mode,
    most_similar_adjacent_pair,
)
from utils import atomic_write_text, to_json_line

logger = logging.getLogger(__name__)

QUANT_BITS = (4, 8)
DEFAULT_BASE_BITS = 16
BOUND_RTOL = 1e-9


@dataclass(frozen=True)
class MergeConfig:
    """
    Exactly one stop criterion is set: `target_layers` (merge until that many blocks remain)
    or `threshold` (merge while the best adjacent pair scores at least tau).
    """

    target_layers: Optional[int] = None
    threshold: Optional[float] = None
    ib: IBConfig = field(default_factory=IBConfig)
    iterative: bool = True
    recompute_embeddings: bool = True
    seed: int = 0
    measure: str = "nmi"
    candidates: str = "adjacent"
    n_inputs: int = 128
    pool: str = "last"
    eval_batches: int = 0  # per-step evaluation; 0 disables

    def __post_init__(self):
        if (self.target_layers is None) == (self.threshold is None):
            raise InvalidInputError("set exactly one of target_layers and threshold")
        if self.target_layers is not None and self.target_layers < 1:
            raise InvalidInputError(f"target_layers must be >= 1, got {self.target_layers}")
        if self.threshold is not None and not 0.0 < self.threshold <= 1.0:
            raise InvalidInputError(f"threshold must lie in (0, 1], got {self.threshold}")
        check_candidate_mode(self.candidates)

    def to_dict(self):
        d = asdict(self)
        d["ib"] = asdict(self.ib)
        return d


@dataclass
class MergeStep:
    iteration: int
    pair: tuple  # original layer labels (lower, upper)
    positions: tuple  # 1-based stack positions fused
    similarity: Optional[float]
    alpha: float
    retained_after: int
    ib: Optional[dict] = None
    metrics: Optional[dict] = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["pair"] = tuple(d["pair"])
        d["positions"] = tuple(d["positions"])
        return cls(**d)


@dataclass
class MergeLog:
    config: dict = field(default_factory=dict)
    steps: List[MergeStep] = field(default_factory=list)
    similarity_matrices: list = field(default_factory=list)

    def to_jsonl(self):
        lines = [to_json_line({"config": self.config})]
        lines += [to_json_line(step.to_dict()) for step in self.steps]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text):
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows or "config" not in rows[0]:
            raise InvalidInputError("merge log must start with a config line")
        return cls(config=rows[0]["config"], steps=[MergeStep.from_dict(r) for r in rows[1:]])

    def save(self, path):
        atomic_write_text(path, self.to_jsonl())

    @classmethod
    def load(cls, path):
        return cls.from_jsonl(Path(path).read_text())


@dataclass
class CompressionReport:
    l_total: int
    l_retained: int
    q: float
    ratio: float

    @property
    def percent(self):
        return f"{100.0 * self.ratio:.2f}%"

    def to_dict(self):
        return {**asdict(self), "percent": self.percent}


@dataclass
class LossImpactReport:
    delta_theta_norm: float
    lambda_max: float
    bound: float
    observed_delta_loss: float
    bound_satisfied: bool

    def to_dict(self):
        return asdict(self)


def fuse_layers(theta_l: LayerParams, theta_m: LayerParams, alpha) -> LayerParams:
    """alpha * theta_l + (1 - alpha) * theta_m for every tensor, computed in float64."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha}")
    fused = {}
    for name, a in theta_l.tensors().items():
        b = getattr(theta_m, name)
        if a.shape != b.shape:
            raise InvalidInputError(f"cannot fuse {name}: shapes {a.shape} and {b.shape}")
        mixed = alpha * a.astype(np.float64) + (1.0 - alpha) * b.astype(np.float64)
        fused[name] = mixed.astype(np.float32)
    return LayerParams(**fused)


def _apply_merge(layers, position, alpha):
    """Fuse the blocks at 1-based `position` and `position + 1` in place of both."""
    i = position - 1
    if not 0 <= i < len(layers) - 1:
        raise InvalidInputError(f"cannot merge at position {position} of {len(layers)} layers")
    return layers[:i] + [fuse_layers(layers[i], layers[i + 1], alpha)] + layers[i + 2 :]


def replay_merge_log(ckpt: ModelCheckpoint, log: MergeLog) -> ModelCheckpoint:
    """Re-apply recorded merges to the original checkpoint."""
    layers = list(ckpt.layers)
    for step in log.steps:
        lower, upper = step.positions
        if upper != lower + 1:
            raise InvalidInputError(f"step {step.iteration} fuses non-adjacent positions")
        layers = _apply_merge(layers, lower, step.alpha)
    return ckpt.with_layers(layers)


def surviving_labels(log: MergeLog, n_layers):
    """Original layer label of every block in the compressed stack."""
    labels = list(range(1, n_layers + 1))
    for step in log.steps:
        labels.remove(step.pair[1])
    return labels


def _pair_covariances(embeddings, a, b, y_samples, warn=False):
    x_l, x_m = embeddings[a].coords, embeddings[b].coords
    bundle = CovarianceBundle.from_samples(x_l, x_m, warn=warn)
    return bundle, TargetCovariances.from_samples(x_l, x_m, y_samples)


def _target_samples(config, embeddings, labels, y_labels, ckpt, k):
    if config.ib.target_mode == "task-labels":
        return target_from_labels(y_labels, ckpt.config.vocab_size, k, config.seed)
    return embeddings[labels[-1]].coords


def mka_compress(ckpt: ModelCheckpoint, task: ToyTask, manifold_config: ManifoldConfig = None,
                 config: MergeConfig = None, similarity_params: SimilarityParams = None,
                 on_step: Callable = None):
    """
    Similarity-driven layer merging.

    Each round captures activations on the task's capture split, embeds every live block,
    scores depth-adjacent pairs and fuses the best one, weighting the lower block by alpha.
    The merged block takes the lower block's position and label.

    Args:
        ckpt: model to compress
        task: ToyTask supplying the capture inputs
        manifold_config: ManifoldConfig for the embeddings
        config: MergeConfig (stop criterion, alpha selection, iteration mode)
        similarity_params: SimilarityParams for the similarity measure
        on_step: optional callback receiving each MergeStep as it is made

    Returns:
        tuple: (compressed ModelCheckpoint, MergeLog)
    """
    manifold_config = manifold_config or ManifoldConfig()
    config = config or MergeConfig(target_layers=max(1, ckpt.config.n_layers - 1))
    similarity_params = similarity_params or SimilarityParams()
    n_layers = ckpt.config.n_layers
    if config.target_layers is not None and config.target_layers > n_layers:
        raise InvalidInputError(
            f"target_layers {config.target_layers} exceeds the model's {n_layers} layers"
        )
    min_inputs = max(2 * manifold_config.embed_dim + 2, 32)
    if config.n_inputs < min_inputs:
        raise InvalidInputError(f"need at least {min_inputs} capture inputs, got {config.n_inputs}")

    log = MergeLog(
        config={
            "method": "mka",
            "merge": config.to_dict(),
            "manifold": manifold_config.to_dict(),
            "ridge": similarity_params.ridge,
            "n_layers": n_layers,
        }
    )
    labels = list(range(1, n_layers + 1))
    layers = list(ckpt.layers)
    consumed = set()
    current = ckpt
    initial = None

    def done():
        if config.target_layers is not None:
            return len(layers) <= config.target_layers
        return len(labels) < 2

    while not done():
        if config.recompute_embeddings or initial is None:
            acts, y_labels = capture_activations(current, task, config.n_inputs, pool=config.pool)
            embedded = embed_layers(acts[1:], manifold_config)
            embeddings = dict(zip(labels, embedded))
            matrix = build_similarity_matrix(
                embedded, config.measure, similarity_params, layer_ids=labels
            )
            if initial is None:
                initial = (matrix, embeddings, y_labels)
            log.similarity_matrices.append(matrix)
        else:
            matrix, embeddings, y_labels = initial

        try:
            (a, b), score = most_similar_adjacent_pair(matrix, labels, exclude=consumed)
        except ExhaustedError:
            if config.threshold is not None:
                break
            raise
        if config.threshold is not None and score < config.threshold:
            if not log.steps:
                logger.warning(
                    "No pair reaches threshold %.4f (best %.4f); model left unchanged",
                    config.threshold,
                    score,
                )
            break

        bundle = targets = None
        if config.ib.alpha_mode == "grid-search":
            y = _target_samples(
                config, embeddings, labels, y_labels, ckpt, manifold_config.embed_dim
            )
            bundle, targets = _pair_covariances(embeddings, a, b, y)
        alpha, ib_eval = select_alpha(score, config.ib, bundle, targets, similarity_params.ridge)

        position = labels.index(a) + 1
        layers = _apply_merge(layers, position, alpha)
        labels.remove(b)
        if not config.iterative:
            consumed.add(a)
        current = ckpt.with_layers(layers)

        metrics = None
        if config.eval_batches:
            metrics = evaluate(current, task, n_batches=config.eval_batches)
        step = MergeStep(
            iteration=len(log.steps) + 1,
            pair=(a, b),
            positions=(position, position + 1),
            similarity=score,
            alpha=float(alpha),
            retained_after=len(layers),
            ib=ib_eval.to_dict() if ib_eval is not None else None,
            metrics=metrics,
        )
        log.steps.append(step)
        logger.info(
            "Merge %d: layers %s (S=%.4f, alpha=%.4f), %d left",
            step.iteration,
            step.pair,
            score,
            alpha,
            step.retained_after,
        )
        if on_step is not None:
            on_step(step)

    return current, log


def reverse_prune(ckpt: ModelCheckpoint, target_layers) -> ModelCheckpoint:
    """Keep the first `target_layers` blocks and drop the rest."""
    n = ckpt.config.n_layers
    if not 1 <= target_layers <= n:
        raise InvalidInputError(f"target_layers must be in [1, {n}], got {target_layers}")
    return ckpt.with_layers(ckpt.layers[:target_layers])


def fixed_lambda_merge(ckpt: ModelCheckpoint, lambda_m, target_layers):
    """
    Merge the deepest adjacent pair with a fixed weight `lambda_m` on the lower block until
    `target_layers` blocks remain.
    """
    n = ckpt.config.n_layers
    if not 0.0 <= lambda_m <= 1.0:
        raise InvalidInputError(f"lambda must lie in [0, 1], got {lambda_m}")
    if not 1 <= target_layers <= n:
        raise InvalidInputError(f"target_layers must be in [1, {n}], got {target_layers}")
    log = MergeLog(config={"method": f"fixed:{lambda_m}", "n_layers": n,
                           "target_layers": target_layers})
    labels = list(range(1, n + 1))
    layers = list(ckpt.layers)
    while len(layers) > target_layers:
        position = len(layers) - 1
        a, b = labels[-2], labels[-1]
        layers = _apply_merge(layers, position, lambda_m)
        labels.pop()
        log.steps.append(
            MergeStep(len(log.steps) + 1, (a, b), (position, position + 1), None,
                      float(lambda_m), len(layers))
        )
    return ckpt.with_layers(layers), log


def compression_ratio(l_total, l_retained, q=1.0) -> CompressionReport:
    """(L_total - L_retained / Q) / L_total"""
    if l_total < 1 or not 0 <= l_retained <= l_total:
        raise InvalidInputError(f"need 0 <= retained ({l_retained}) <= total ({l_total})")
    if not q >= 1.0:
        raise InvalidInputError(f"Q must be >= 1, got {q}")
    return CompressionReport(l_total, l_retained, float(q), (l_total - l_retained / q) / l_total)


def _rtn(weights, bits):
    w = weights.astype(np.float64)
    qmax = 2 ** (bits - 1) - 1
    scale = float(np.max(np.abs(w))) / qmax if w.size else 0.0
    if scale == 0.0:
        return weights.copy(), 0.0
    q = np.clip(np.round(w / scale), -qmax, qmax)
    return (q * scale).astype(np.float32), scale


def quantize_rtn(ckpt: ModelCheckpoint, bits, base_bits=DEFAULT_BASE_BITS):
    """
    Simulated per-tensor symmetric round-to-nearest quantisation of every weight matrix.

    Norm scale vectors stay in full precision. Q is measured against `base_bits` wide
    weights, so with the default 16-bit base int4 gives Q = 4 and int8 gives Q = 2.

    Returns:
        tuple: (dequantised ModelCheckpoint, Q)
    """
    if bits not in QUANT_BITS:
        raise InvalidInputError(f"bits must be one of {QUANT_BITS}, got {bits}")
    layers = []
    for layer in ckpt.layers:
        tensors = {
            name: t if t.ndim == 1 else _rtn(t, bits)[0] for name, t in layer.tensors().items()
        }
        layers.append(LayerParams(**tensors))
    q = base_bits / bits
    logger.info("Quantised to int%d; Q = %g relative to %d-bit weights", bits, q, base_bits)
    out = ModelCheckpoint(
        config=ckpt.config,
        embedding=_rtn(ckpt.embedding, bits)[0],
        layers=layers,
        final_norm=ckpt.final_norm,
        head=_rtn(ckpt.head, bits)[0],
    )
    return out, q


def loss_impact_bound(grad_fn, theta_star, delta_theta_norm, observed_delta_loss, iters=20,
                      seed=0, fd_step=1e-5) -> LossImpactReport:
    """
    Second-order bound 0.5 * lambda_max * ||delta theta||^2 on the loss increase.

    lambda_max is estimated by power iteration on Hessian-vector products taken as central
    differences of `grad_fn` around `theta_star`.

    Args:
        grad_fn: theta -> gradient of the loss (float64 vectors)
        theta_star: reference parameters
        delta_theta_norm: ||delta theta||
        observed_delta_loss: measured L(theta) - L(theta_star)
        iters: power-iteration steps
        seed: start-vector seed
        fd_step: finite-difference step along the unit direction
    """
    theta_star = np.asarray(theta_star, dtype=np.float64)

    def hvp(v):
        return (grad_fn(theta_star + fd_step * v) - grad_fn(theta_star - fd_step * v)) / (
            2.0 * fd_step
        )

    lambda_max = power_iteration_max_eig(hvp, theta_star.size, iters, seed)
    bound = 0.5 * lambda_max * delta_theta_norm**2
    satisfied = observed_delta_loss <= bound + BOUND_RTOL * max(1.0, abs(bound))
    return LossImpactReport(
        float(delta_theta_norm), float(lambda_max), float(bound), float(observed_delta_loss),
        bool(satisfied)
    )


def _delta_theta_norm(original: ModelCheckpoint, compressed: ModelCheckpoint, surviving):
    sq = 0.0
    for name in ("embedding", "final_norm", "head"):
        diff = getattr(compressed, name).astype(np.float64) - getattr(original, name)
        sq += float(np.sum(diff**2))
    kept = set(surviving)
    for layer, label in zip(compressed.layers, surviving):
        diff = layer.flat().astype(np.float64) - original.layers[label - 1].flat()
        sq += float(np.sum(diff**2))
    for label in range(1, original.config.n_layers + 1):
        if label not in kept:
            # deleted blocks count in full
            sq += float(np.sum(original.layers[label - 1].flat().astype(np.float64) ** 2))
    return float(np.sqrt(sq))


def loss_impact(original: ModelCheckpoint, compressed: ModelCheckpoint, task: ToyTask,
                surviving=None, hvp_samples=20, seed=0, batch_size=32, fd_step=1e-5):
    """
    Loss-impact report for a compressed model against its original.

    Args:
        surviving: original label (1-based) of every compressed block; defaults to the first
            n blocks, as left by reverse pruning
        hvp_samples: power-iteration steps for lambda_max

    Returns:
        LossImpactReport
    """
    if surviving is None:
        surviving = list(range(1, compressed.config.n_layers + 1))
    if len(surviving) != compressed.config.n_layers:
        raise InvalidInputError("surviving labels must name every compressed block")
    loss = task_loss_fn(original, task, batch_size=batch_size)
    model = TinyDecoder(original)
    params = list(model.parameters())
    theta_star = torch.nn.utils.parameters_to_vector(params).detach().numpy().copy()

    def grad_fn(theta):
        torch.nn.utils.vector_to_parameters(torch.from_numpy(theta), params)
        model.zero_grad()
        value = loss(model)
        value.backward()
        return torch.cat([p.grad.reshape(-1) for p in params]).numpy().copy()

    with torch.no_grad():
        observed = float(loss(TinyDecoder(compressed))) - float(loss(TinyDecoder(original)))
    report = loss_impact_bound(
        grad_fn,
        theta_star,
        _delta_theta_norm(original, compressed, surviving),
        observed,
        iters=hvp_samples,
        seed=seed,
        fd_step=fd_step,
    )
    logger.info(
        "Loss impact: observed %.4g, bound %.4g (lambda_max %.4g)",
        report.observed_delta_loss,
        report.bound,
        report.lambda_max,
    )
    return report
