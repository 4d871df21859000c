import logging
import math

import numpy as np
import pandas as pd
from tqdm import tqdm

from errors import InvalidInputError, LayerfuseError
from infotheory import IBConfig
from manifold import ManifoldConfig, embed_layers
from merge_engine import (
    MergeConfig,
    MergeLog,
    compression_ratio,
    fixed_lambda_merge,
    loss_impact,
    mka_compress,
    quantize_rtn,
    reverse_prune,
    surviving_labels,
)
from model_runtime import (
    ModelConfig,
    ToyTask,
    capture_activations,
    evaluate,
    init_model,
    plant_redundancy,
    train_toy,
)
from similarity import SimilarityParams, build_similarity_matrix

logger = logging.getLogger(__name__)

QUANT_CHOICES = {"none": None, "int8": 8, "int4": 4}
PLANTED_TRAIN_STEPS = 2000


class UnknownMethodError(InvalidInputError):
    """Raised when a compression method name cannot be parsed"""

    pass


def parse_method(name):
    """
    Split a method name into its kind and parameter.

    Args:
        name: "mka", "mka-noniter", "reverse" or "fixed:<lambda>"

    Returns:
        tuple: (kind, lambda or None)
    """
    name = name.strip()
    if name in ("mka", "mka-noniter", "reverse"):
        return name, None
    if name.startswith("fixed:"):
        try:
            value = float(name.split(":", 1)[1])
        except ValueError:
            raise UnknownMethodError(f"Cannot parse lambda in method {name!r}")
        if not 0.0 <= value <= 1.0:
            raise UnknownMethodError(f"lambda must lie in [0, 1] in method {name!r}")
        return "fixed", value
    raise UnknownMethodError(
        f"Unknown method {name!r}; expected mka, mka-noniter, reverse or fixed:<lambda>"
    )


def retained_for_ratio(n_layers, ratio):
    """Number of blocks left after removing round(ratio * n_layers) of them (at least one)."""
    if not 0.0 <= ratio < 1.0:
        raise InvalidInputError(f"ratio must lie in [0, 1), got {ratio}")
    return max(1, n_layers - int(round(ratio * n_layers)))


def layer_similarity(ckpt, task, n_inputs=128, manifold_config=None, measure="nmi",
                     params=None, pool="last"):
    """
    Capture activations, embed every block's output and score all pairs of blocks.

    Returns:
        tuple: (SimilarityMatrix labelled 1..L, list of DiffusionEmbedding)
    """
    manifold_config = manifold_config or ManifoldConfig()
    acts, _ = capture_activations(ckpt, task, n_inputs, pool=pool)
    embeddings = embed_layers(acts[1:], manifold_config)
    matrix = build_similarity_matrix(embeddings, measure, params or SimilarityParams())
    return matrix, embeddings


def compress_with_method(ckpt, method, task, target_layers=None, tau=None, manifold_config=None,
                         ib_config=None, measure="nmi", params=None, recompute=True,
                         n_inputs=128, pool="last", seed=0, eval_batches=0, on_step=None):
    """
    Compress a checkpoint with one of the supported methods.

    `tau` is only meaningful for the similarity-driven methods; the baselines need a target.

    Returns:
        tuple: (compressed ModelCheckpoint, MergeLog)
    """
    kind, value = parse_method(method)
    if kind in ("mka", "mka-noniter"):
        config = MergeConfig(
            target_layers=target_layers,
            threshold=tau,
            ib=ib_config or IBConfig(),
            iterative=kind == "mka",
            recompute_embeddings=recompute,
            seed=seed,
            measure=measure,
            n_inputs=n_inputs,
            pool=pool,
            eval_batches=eval_batches,
        )
        return mka_compress(ckpt, task, manifold_config, config, params, on_step=on_step)
    if target_layers is None:
        raise InvalidInputError(f"method {method!r} needs a target layer count")
    if kind == "fixed":
        return fixed_lambda_merge(ckpt, value, target_layers)
    pruned = reverse_prune(ckpt, target_layers)
    log = MergeLog(config={"method": "reverse", "n_layers": ckpt.config.n_layers,
                           "target_layers": target_layers})
    return pruned, log


def surviving_for(method, log, n_layers, retained):
    kind, _ = parse_method(method)
    if kind == "reverse":
        return list(range(1, retained + 1))
    return surviving_labels(log, n_layers)


def compression_summary(original, compressed, task, method, log, quant="none", n_batches=20,
                        hvp_samples=0, seed=0):
    """
    Metrics of one compressed model: ratio, evaluation before and after, optional loss impact.

    Returns:
        tuple: (report dict, final checkpoint after optional quantisation)
    """
    bits = QUANT_CHOICES[quant]
    q = 1.0
    final = compressed
    if bits is not None:
        final, q = quantize_rtn(compressed, bits)
    n_total = original.config.n_layers
    n_retained = final.config.n_layers
    report = {
        "method": method,
        "quant": quant,
        "compression": compression_ratio(n_total, n_retained, q).to_dict(),
        "before": evaluate(original, task, n_batches=n_batches),
        "after": evaluate(final, task, n_batches=n_batches),
        "steps": [s.to_dict() for s in log.steps],
    }
    if hvp_samples:
        surviving = surviving_for(method, log, n_total, n_retained)
        report["loss_impact"] = loss_impact(
            original, final, task, surviving=surviving, hvp_samples=hvp_samples, seed=seed
        ).to_dict()
    return report, final


def run_sweep(ckpt, task, methods, ratios, n_batches=20, progress=False, progress_callback=None,
              **compress_kwargs):
    """
    Evaluate every (method, ratio) combination.

    A failing combination is recorded with its error message and NaN metrics instead of
    aborting the sweep.

    Args:
        ckpt: original checkpoint
        task: ToyTask used for capture and evaluation
        methods: method names understood by `parse_method`
        ratios: fractions of blocks to remove, in [0, 1)
        n_batches: evaluation batches per model
        progress: show a tqdm bar
        progress_callback: optional callable(fraction_done, text)

    Returns:
        pandas DataFrame: one row per combination
    """
    n_layers = ckpt.config.n_layers
    combos = [(m, r) for m in methods for r in ratios]
    rows = []
    for i, (method, ratio) in enumerate(tqdm(combos, desc="Sweep", disable=not progress)):
        row = {"method": method, "ratio": float(ratio)}
        try:
            parse_method(method)
            retained = retained_for_ratio(n_layers, ratio)
            compressed, _ = compress_with_method(
                ckpt, method, task, target_layers=retained, **compress_kwargs
            )
            metrics = evaluate(compressed, task, n_batches=n_batches)
            report = compression_ratio(n_layers, compressed.config.n_layers)
            row.update(
                retained=compressed.config.n_layers,
                compression_ratio=report.ratio,
                error="",
                **metrics,
            )
        except LayerfuseError as e:
            logger.warning("Sweep row %s @ %.2f failed: %s", method, ratio, e)
            row.update(
                retained=np.nan,
                compression_ratio=np.nan,
                cross_entropy=np.nan,
                next_token_accuracy=np.nan,
                error=str(e),
            )
        rows.append(row)
        if progress_callback is not None:
            progress_callback((i + 1) / len(combos), f"{method} @ {ratio:.2f}")
    columns = ["method", "ratio", "retained", "compression_ratio", "cross_entropy",
               "next_token_accuracy", "error"]
    return pd.DataFrame(rows, columns=columns)


def fixed_lambda_sweep(ckpt, task, lambdas, target_layers, n_batches=20):
    rows = []
    for lam in lambdas:
        compressed, _ = fixed_lambda_merge(ckpt, lam, target_layers)
        rows.append({"lambda": float(lam), "retained": target_layers,
                     **evaluate(compressed, task, n_batches=n_batches)})
    return pd.DataFrame(rows)


def planted_base(seed, n_layers=4, d_model=64, n_heads=4, vocab_size=16, init_scale=0.2,
                 train_steps=PLANTED_TRAIN_STEPS, task=None):
    config = ModelConfig(
        vocab_size=vocab_size,
        d_model=d_model,
        n_layers=n_layers,
        n_heads=n_heads,
        d_ff=4 * d_model,
        seed=seed,
        init_scale=init_scale,
    )
    task = task or ToyTask(vocab_size=vocab_size, seed=seed)
    if train_steps:
        return train_toy(config, task, steps=train_steps), task
    return init_model(config), task


def planted_detection_trial(seed, n_layers=4, d_model=64, epsilon=1e-3, n_inputs=128,
                            manifold_config=None, measure="nmi", train_steps=PLANTED_TRAIN_STEPS,
                            n_batches=5):
    """
    Train a base model, plant a near-identity block after a random block and check the first
    merge finds it.

    Returns:
        dict: position (insertion index), planted label, first merged pair, hit flag, the base
        model's cross-entropy and the cross-entropy change of compressing back to the original
        depth
    """
    base, task = planted_base(seed, n_layers=n_layers, d_model=d_model, train_steps=train_steps)
    rng = np.random.default_rng([seed, 17])
    position = int(rng.integers(1, n_layers + 1))
    planted = plant_redundancy(base, position, epsilon, seed=seed)
    compressed, log = mka_compress(
        planted,
        task,
        manifold_config,
        MergeConfig(target_layers=n_layers, measure=measure, n_inputs=n_inputs, seed=seed),
    )
    first = log.steps[0].pair
    ce_base = evaluate(base, task, n_batches=n_batches)["cross_entropy"]
    ce_before = evaluate(planted, task, n_batches=n_batches)["cross_entropy"]
    ce_after = evaluate(compressed, task, n_batches=n_batches)["cross_entropy"]
    return {
        "seed": seed,
        "position": position,
        "planted_label": position + 1,
        "first_pair": first,
        "hit": position + 1 in first,
        "ce_base": ce_base,
        "ce_change": abs(ce_after - ce_before),
    }


def iterative_comparison_trial(seed, n_layers=4, d_model=64, epsilon=1e-3, n_inputs=128,
                               manifold_config=None, n_batches=5, train_steps=PLANTED_TRAIN_STEPS):
    """
    Plant two adjacent near-identity blocks after a random block of a trained base and
    compress back to the base depth in both modes.

    Removing both plants takes two merges that share a layer, so non-iterative mode has to
    fuse a real block somewhere instead.

    Returns:
        dict: cross-entropy and merged pairs of the iterative and the non-iterative result
    """
    base, task = planted_base(seed, n_layers=n_layers, d_model=d_model, train_steps=train_steps)
    rng = np.random.default_rng([seed, 29])
    position = int(rng.integers(1, n_layers + 1))
    planted = plant_redundancy(base, position, epsilon, seed=seed)
    planted = plant_redundancy(planted, position + 1, epsilon, seed=seed + 1)
    out = {"seed": seed, "planted_labels": (position + 1, position + 2)}
    for mode, iterative in (("iterative", True), ("non_iterative", False)):
        config = MergeConfig(
            target_layers=n_layers, iterative=iterative, n_inputs=n_inputs, seed=seed
        )
        try:
            compressed, log = mka_compress(planted, task, manifold_config, config)
            out[f"ce_{mode}"] = evaluate(compressed, task, n_batches=n_batches)["cross_entropy"]
            out[f"pairs_{mode}"] = [step.pair for step in log.steps]
        except LayerfuseError as e:
            logger.info("Seed %d, iterative=%s failed: %s", seed, iterative, e)
            out[f"ce_{mode}"] = math.inf
            out[f"pairs_{mode}"] = []
    return out
