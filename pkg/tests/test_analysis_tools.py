import math

import numpy as np
import pytest

from analysis_tools import (
    UnknownMethodError,
    compress_with_method,
    compression_summary,
    fixed_lambda_sweep,
    iterative_comparison_trial,
    layer_similarity,
    parse_method,
    planted_detection_trial,
    retained_for_ratio,
    run_sweep,
)
from errors import InvalidInputError
from manifold import ManifoldConfig

MANIFOLD = ManifoldConfig(embed_dim=4)


class TestParseMethod:
    @pytest.mark.parametrize(
        "name, expected",
        [("mka", ("mka", None)), ("mka-noniter", ("mka-noniter", None)),
         ("reverse", ("reverse", None)), ("fixed:0.25", ("fixed", 0.25)), (" fixed:1 ", ("fixed", 1.0))],
    )
    def test_known(self, name, expected):
        assert parse_method(name) == expected

    @pytest.mark.parametrize("name", ["prune", "fixed:abc", "fixed:1.5"])
    def test_unknown(self, name):
        with pytest.raises(UnknownMethodError):
            parse_method(name)


@pytest.mark.parametrize(
    "n_layers, ratio, retained", [(32, 0.5, 16), (4, 0.0, 4), (4, 0.25, 3), (4, 0.9, 1), (12, 1 / 3, 8)]
)
def test_retained_for_ratio(n_layers, ratio, retained):
    assert retained_for_ratio(n_layers, ratio) == retained


def test_ratio_must_be_below_one():
    with pytest.raises(InvalidInputError):
        retained_for_ratio(4, 1.0)


def test_layer_similarity_labels(small_model, markov_task):
    matrix, embeddings = layer_similarity(small_model, markov_task, n_inputs=40,
                                          manifold_config=MANIFOLD)
    assert matrix.layer_ids == (1, 2, 3, 4)
    assert [e.dim for e in embeddings] == [4] * 4


class TestCompressWithMethod:
    def test_reverse(self, small_model, markov_task):
        out, log = compress_with_method(small_model, "reverse", markov_task, target_layers=3)
        assert out.config.n_layers == 3
        assert log.config["method"] == "reverse"
        assert log.steps == []

    def test_baseline_needs_target(self, small_model, markov_task):
        with pytest.raises(InvalidInputError, match="target layer count"):
            compress_with_method(small_model, "fixed:0.5", markov_task, tau=0.5)

    def test_mka_noniter(self, small_model, markov_task):
        out, log = compress_with_method(
            small_model, "mka-noniter", markov_task, target_layers=3, manifold_config=MANIFOLD,
            n_inputs=48,
        )
        assert out.config.n_layers == 3
        assert log.config["merge"]["iterative"] is False


class TestCompressionSummary:
    def test_reverse_int4(self, small_model, markov_task):
        compressed, log = compress_with_method(small_model, "reverse", markov_task, target_layers=2)
        report, final = compression_summary(
            small_model, compressed, markov_task, "reverse", log, quant="int4", n_batches=1
        )
        assert report["compression"]["percent"] == "87.50%"
        assert report["compression"]["q"] == 4.0
        assert final.config.n_layers == 2
        assert "loss_impact" not in report
        assert set(report["after"]) == {"cross_entropy", "next_token_accuracy"}

    def test_with_loss_impact(self, small_model, markov_task):
        compressed, log = compress_with_method(small_model, "fixed:0.5", markov_task, target_layers=3)
        report, _ = compression_summary(
            small_model, compressed, markov_task, "fixed:0.5", log, n_batches=1, hvp_samples=2
        )
        assert report["loss_impact"]["delta_theta_norm"] > 0
        assert report["compression"]["percent"] == "25.00%"


def test_run_sweep_records_failures(small_model, markov_task):
    calls = []
    df = run_sweep(
        small_model, markov_task, ["reverse", "fixed:0.5", "bogus"], [0.0, 0.5], n_batches=1,
        progress_callback=lambda frac, text: calls.append(frac),
    )
    assert list(df.columns) == ["method", "ratio", "retained", "compression_ratio",
                                "cross_entropy", "next_token_accuracy", "error"]
    assert len(df) == 6
    ok = df[df.method != "bogus"]
    assert (ok.error == "").all()
    assert ok.set_index(["method", "ratio"]).loc[("reverse", 0.5), "retained"] == 2
    assert ok.compression_ratio.tolist() == [0.0, 0.5, 0.0, 0.5]
    bad = df[df.method == "bogus"]
    assert bad.cross_entropy.isna().all()
    assert bad.error.str.contains("Unknown method").all()
    assert calls[-1] == 1.0 and len(calls) == 6


def test_run_sweep_with_mka(small_model, markov_task):
    df = run_sweep(small_model, markov_task, ["mka"], [0.25], n_batches=1,
                   manifold_config=MANIFOLD, n_inputs=48)
    assert df.loc[0, "retained"] == 3
    assert np.isfinite(df.loc[0, "cross_entropy"])


def test_fixed_lambda_sweep(small_model, markov_task):
    df = fixed_lambda_sweep(small_model, markov_task, [0.0, 0.5, 1.0], 2, n_batches=1)
    assert df["lambda"].tolist() == [0.0, 0.5, 1.0]
    assert (df.retained == 2).all()


def test_planted_block_is_found_first():
    config = ManifoldConfig(embed_dim=4)
    hits = [
        planted_detection_trial(seed, d_model=32, n_inputs=64, manifold_config=config,
                                train_steps=100, n_batches=1)
        for seed in range(5)
    ]
    assert all(1 <= t["position"] <= 4 for t in hits)
    assert sum(t["hit"] for t in hits) >= 4


def test_non_iterative_merges_never_reuse_a_merged_layer():
    out = iterative_comparison_trial(0, d_model=32, n_inputs=64, train_steps=100,
                                     manifold_config=ManifoldConfig(embed_dim=4), n_batches=1)
    assert math.isfinite(out["ce_iterative"])
    assert len(out["pairs_iterative"]) == 2
    first, second = out["pairs_non_iterative"]
    assert first[0] not in second


@pytest.mark.slow
def test_planted_detection_rate():
    trials = [planted_detection_trial(seed) for seed in range(100)]
    assert all(t["ce_base"] < math.log(16) - 0.1 for t in trials)
    assert sum(t["hit"] for t in trials) >= 95
    assert all(t["ce_change"] <= 0.05 for t in trials if t["hit"])


@pytest.mark.slow
def test_iterative_beats_non_iterative():
    trials = [iterative_comparison_trial(seed) for seed in range(100)]
    assert sum(t["ce_iterative"] <= t["ce_non_iterative"] for t in trials) >= 80
    # the comparison only means something where the two modes merged differently
    differing = [t for t in trials if t["pairs_iterative"] != t["pairs_non_iterative"]]
    assert len(differing) >= 80
    decided = [t for t in differing if t["ce_iterative"] != t["ce_non_iterative"]]
    assert sum(t["ce_iterative"] < t["ce_non_iterative"] for t in decided) >= 0.8 * len(decided)
