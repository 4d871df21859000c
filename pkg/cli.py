"""Command-line front end: python cli.py [--seed N] [--config file.toml] [--out DIR] COMMAND ..."""

import logging
from pathlib import Path

import click
import numpy as np
import pandas as pd
import torch
from click.core import ParameterSource

import available_measures
from analysis_tools import compress_with_method, compression_summary, run_sweep
from errors import LayerfuseError
from infotheory import IBConfig
from manifold import ManifoldConfig, embed_layers, save_embeddings
from model_runtime import (
    POOL_MODES,
    TASK_KINDS,
    ModelConfig,
    ToyTask,
    capture_activations,
    evaluate,
    load_activations,
    load_checkpoint,
    save_activations,
    save_checkpoint,
    train_toy_with_history,
)
from similarity import SimilarityParams, build_similarity_matrix, save_similarity
from utils import (
    atomic_write_text,
    load_config_file,
    setup_logging,
    thread_count,
    to_json,
    write_json,
    write_resolved_config,
)

logger = logging.getLogger(__name__)

GLOBAL_KEYS = ("seed", "out", "log_level")


class LayerfuseGroup(click.Group):
    """Maps library errors onto the documented exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except LayerfuseError as e:
            click.echo(f"Error: {e}", err=True)
            ctx.exit(e.exit_code)
        except (FileNotFoundError, IsADirectoryError) as e:
            click.echo(f"Error: {e}", err=True)
            ctx.exit(2)


def _command_defaults(command, values):
    """Config-file values keyed by flag name, re-keyed to the command's parameter names."""
    defaults = {}
    for param in command.params:
        for opt in param.opts:
            key = opt.lstrip("-").replace("-", "_")
            if key in values:
                defaults[param.name] = values[key]
    return defaults


def _out_dir(ctx):
    out = Path(ctx.obj["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _record(ctx):
    # keyed by long flag so the file can be passed back with --config
    params = {max(p.opts, key=len).lstrip("-"): ctx.params[p.name] for p in ctx.command.params}
    params["seed"] = ctx.obj["seed"]
    write_resolved_config(_out_dir(ctx), ctx.command.name, params)


def _task_for(model_config, kind, seq_len, seed):
    return ToyTask(kind=kind, vocab_size=model_config.vocab_size, seq_len=seq_len, seed=seed)


def _manifold_config(sigma, k, t):
    return ManifoldConfig(sigma=sigma, embed_dim=k, diffusion_time=t)


task_option = click.option(
    "--task", "task_kind", type=click.Choice(TASK_KINDS), default="markov-chain", show_default=True
)
seq_len_option = click.option("--seq-len", type=int, default=16, show_default=True)
model_option = click.option(
    "--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False)
)
pool_option = click.option("--pool", type=click.Choice(POOL_MODES), default="last", show_default=True)
n_inputs_option = click.option("--n-inputs", type=int, default=128, show_default=True)


def manifold_options(f):
    f = click.option("--t", "diffusion_time", type=float, default=1.0, show_default=True)(f)
    f = click.option("--k", "embed_dim", type=int, default=8, show_default=True)(f)
    f = click.option("--sigma", type=float, default=None, help="Kernel bandwidth (default: median)")(f)
    return f


def measure_options(f):
    f = click.option("--ridge", type=float, default=None, help="Covariance ridge (default: 1e-6 trace/d)")(f)
    f = click.option(
        "--measure", type=click.Choice(available_measures.MEASURE_KEYS), default="nmi",
        show_default=True,
    )(f)
    return f


@click.group(cls=LayerfuseGroup)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="TOML file of key = value pairs named like the long flags")
@click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True)
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.pass_context
def cli(ctx, seed, config_path, out, log_level):
    file_values = load_config_file(config_path) if config_path else {}
    resolved = {"seed": seed, "out": out, "log_level": log_level}
    for key in GLOBAL_KEYS:
        if key in file_values and ctx.get_parameter_source(key) == ParameterSource.DEFAULT:
            resolved[key] = file_values[key]
    setup_logging(resolved["log_level"])
    torch.set_num_threads(thread_count())
    command_values = {k: v for k, v in file_values.items() if k not in GLOBAL_KEYS}
    ctx.default_map = {
        name: _command_defaults(command, command_values)
        for name, command in ctx.command.commands.items()
    }
    ctx.obj = {"seed": int(resolved["seed"]), "out": resolved["out"], "config_file": config_path}


@cli.command("init-train")
@click.option("--vocab", type=int, default=16, show_default=True)
@click.option("--layers", type=int, default=4, show_default=True)
@click.option("--d-model", type=int, default=64, show_default=True)
@click.option("--heads", type=int, default=4, show_default=True)
@click.option("--d-ff", type=int, default=256, show_default=True)
@click.option("--max-seq-len", type=int, default=64, show_default=True)
@click.option("--init-scale", type=float, default=0.02, show_default=True)
@task_option
@seq_len_option
@click.option("--steps", type=int, default=2000, show_default=True)
@click.option("--lr", type=float, default=3e-3, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.pass_context
def init_train(ctx, vocab, layers, d_model, heads, d_ff, max_seq_len, init_scale, task_kind,
               seq_len, steps, lr, batch_size):
    """Create a toy model and train it on a synthetic task."""
    seed = ctx.obj["seed"]
    config = ModelConfig(vocab, d_model, layers, heads, d_ff, max_seq_len, seed, init_scale)
    task = _task_for(config, task_kind, seq_len, seed)
    ckpt, losses = train_toy_with_history(
        config, task, steps=steps, learning_rate=lr, batch_size=batch_size, progress=True
    )
    out = _out_dir(ctx)
    save_checkpoint(ckpt, out / "model.ckpt")
    curve = pd.DataFrame({"step": np.arange(len(losses)), "loss": losses})
    atomic_write_text(out / "training_curve.csv", curve.to_csv(index=False, float_format="%.9g"))
    _record(ctx)
    click.echo(f"Wrote {out / 'model.ckpt'}")


@cli.command()
@model_option
@task_option
@seq_len_option
@n_inputs_option
@pool_option
@click.pass_context
def capture(ctx, model_path, task_kind, seq_len, n_inputs, pool):
    """Record per-layer activations on the task's capture inputs."""
    ckpt = load_checkpoint(model_path)
    task = _task_for(ckpt.config, task_kind, seq_len, ctx.obj["seed"])
    acts, labels = capture_activations(ckpt, task, n_inputs, pool=pool)
    out = _out_dir(ctx)
    save_activations(
        out / "activations.bin",
        acts,
        {"n_inputs": n_inputs, "pool": pool, "labels": labels.tolist(), "task": task_kind},
    )
    _record(ctx)
    click.echo(f"Wrote {len(acts)} activation tensors to {out / 'activations.bin'}")


@cli.command()
@click.option("--activations", "activations_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@manifold_options
@click.pass_context
def embed(ctx, activations_path, sigma, embed_dim, diffusion_time):
    """Export diffusion embeddings of every block's activations."""
    acts, _ = load_activations(activations_path)
    config = _manifold_config(sigma, embed_dim, diffusion_time)
    embeddings = embed_layers([a for a in acts if a.layer_index > 0], config)
    out = _out_dir(ctx)
    save_embeddings(out / "embeddings.bin", embeddings, config)
    _record(ctx)
    click.echo(f"Wrote {len(embeddings)} embeddings to {out / 'embeddings.bin'}")


@cli.command()
@click.option("--activations", "activations_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@measure_options
@manifold_options
@click.pass_context
def similarity(ctx, activations_path, measure, ridge, sigma, embed_dim, diffusion_time):
    """Layer similarity matrix of an activation dump as CSV, PGM and JSON."""
    acts, _ = load_activations(activations_path)
    config = _manifold_config(sigma, embed_dim, diffusion_time)
    embeddings = embed_layers([a for a in acts if a.layer_index > 0], config)
    matrix = build_similarity_matrix(embeddings, measure, SimilarityParams(ridge))
    out = _out_dir(ctx)
    save_similarity(matrix, out)
    pair, score = matrix.off_diagonal_max()
    summary = {
        "measure": measure,
        "manifold": config.to_dict(),
        "ridge": ridge,
        "layers": {
            str(e.layer_index): {
                "sigma": e.sigma,
                "lambda_2": float(e.eigenvalues_used[0]),
                "lambda_last": float(e.eigenvalues_used[-1]),
            }
            for e in embeddings
        },
        "max_pair": list(pair),
        "max_score": score,
    }
    if "fallback" in matrix.diagnostics:
        summary["nmi_fallback_pairs"] = int(np.triu(matrix.diagnostics["fallback"], 1).sum())
    write_json(out / "similarity.json", summary)
    _record(ctx)
    click.echo(f"Most similar pair {tuple(pair)} (score {score:.4f})")


@cli.command()
@model_option
@task_option
@seq_len_option
@click.option("--method", default="mka", show_default=True,
              help="mka, reverse or fixed:<lambda>")
@click.option("--target-layers", type=int, default=None)
@click.option("--tau", type=float, default=None)
@click.option("--alpha-mode", type=click.Choice(["nmi-heuristic", "grid-search", "fixed"]),
              default="nmi-heuristic", show_default=True)
@click.option("--alpha", "fixed_alpha", type=float, default=0.5, show_default=True)
@click.option("--grid-steps", type=int, default=101, show_default=True)
@click.option("--beta", type=float, default=1.0, show_default=True)
@click.option("--target-mode", type=click.Choice(["final-layer-embedding", "task-labels"]),
              default="final-layer-embedding", show_default=True)
@measure_options
@manifold_options
@click.option("--quant", type=click.Choice(["none", "int8", "int4"]), default="none",
              show_default=True)
@click.option("--no-iterative", is_flag=True, default=False)
@click.option("--no-recompute", is_flag=True, default=False)
@n_inputs_option
@pool_option
@click.option("--n-batches", type=int, default=20, show_default=True)
@click.option("--hvp-samples", type=int, default=20, show_default=True,
              help="Power-iteration steps for the loss-impact bound (0 disables it)")
@click.pass_context
def compress(ctx, model_path, task_kind, seq_len, method, target_layers, tau, alpha_mode,
             fixed_alpha, grid_steps, beta, target_mode, measure, ridge, sigma, embed_dim,
             diffusion_time, quant, no_iterative, no_recompute, n_inputs, pool, n_batches,
             hvp_samples):
    """Compress a checkpoint by merging (or pruning) layers."""
    if target_layers is not None and tau is not None:
        raise click.UsageError("--target-layers and --tau are mutually exclusive")
    seed = ctx.obj["seed"]
    ckpt = load_checkpoint(model_path)
    if target_layers is None and tau is None:
        target_layers = max(1, ckpt.config.n_layers - 1)
    if method == "mka" and no_iterative:
        method = "mka-noniter"
    task = _task_for(ckpt.config, task_kind, seq_len, seed)
    compressed, log = compress_with_method(
        ckpt,
        method,
        task,
        target_layers=target_layers,
        tau=tau,
        manifold_config=_manifold_config(sigma, embed_dim, diffusion_time),
        ib_config=IBConfig(beta=beta, target_mode=target_mode, alpha_mode=alpha_mode,
                           grid_steps=grid_steps, fixed_alpha=fixed_alpha),
        measure=measure,
        params=SimilarityParams(ridge),
        recompute=not no_recompute,
        n_inputs=n_inputs,
        pool=pool,
        seed=seed,
    )
    report, final = compression_summary(
        ckpt, compressed, task, method, log, quant=quant, n_batches=n_batches,
        hvp_samples=hvp_samples, seed=seed,
    )
    out = _out_dir(ctx)
    save_checkpoint(final, out / "compressed.ckpt")
    log.save(out / "merge_log.jsonl")
    write_json(out / "report.json", report)
    _record(ctx)
    click.echo(
        f"{ckpt.config.n_layers} -> {final.config.n_layers} layers, "
        f"compression {report['compression']['percent']}"
    )


@cli.command("evaluate")
@model_option
@task_option
@seq_len_option
@click.option("--n-batches", type=int, default=20, show_default=True)
@click.pass_context
def evaluate_cmd(ctx, model_path, task_kind, seq_len, n_batches):
    """Cross-entropy and next-token accuracy on the task's eval split."""
    ckpt = load_checkpoint(model_path)
    task = _task_for(ckpt.config, task_kind, seq_len, ctx.obj["seed"])
    metrics = evaluate(ckpt, task, n_batches=n_batches)
    write_json(_out_dir(ctx) / "metrics.json", metrics)
    _record(ctx)
    click.echo(to_json(metrics), nl=False)


def _split_list(value, cast=str):
    return [cast(v.strip()) for v in value.split(",") if v.strip()]


@cli.command()
@model_option
@task_option
@seq_len_option
@click.option("--methods", default="mka,reverse", show_default=True)
@click.option("--ratios", default="0,0.25,0.5", show_default=True)
@measure_options
@manifold_options
@n_inputs_option
@pool_option
@click.option("--n-batches", type=int, default=20, show_default=True)
@click.pass_context
def sweep(ctx, model_path, task_kind, seq_len, methods, ratios, measure, ridge, sigma, embed_dim,
          diffusion_time, n_inputs, pool, n_batches):
    """Accuracy and cross-entropy for every method at every compression ratio."""
    seed = ctx.obj["seed"]
    ckpt = load_checkpoint(model_path)
    task = _task_for(ckpt.config, task_kind, seq_len, seed)
    try:
        ratio_values = _split_list(ratios, float)
    except ValueError:
        raise click.BadParameter(f"cannot parse ratios {ratios!r}", param_hint="--ratios")
    table = run_sweep(
        ckpt,
        task,
        _split_list(methods),
        ratio_values,
        n_batches=n_batches,
        progress=True,
        manifold_config=_manifold_config(sigma, embed_dim, diffusion_time),
        measure=measure,
        params=SimilarityParams(ridge),
        n_inputs=n_inputs,
        pool=pool,
        seed=seed,
    )
    out = _out_dir(ctx)
    atomic_write_text(out / "sweep.csv", table.to_csv(index=False, float_format="%.9g"))
    _record(ctx)
    failed = int((table["error"] != "").sum())
    click.echo(f"{len(table) - failed} of {len(table)} rows succeeded")
    if failed == len(table):
        ctx.exit(2)


if __name__ == "__main__":
    cli()
