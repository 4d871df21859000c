import dataclasses
import math
import struct

import numpy as np
import pytest
import scipy.special
import torch

import model_runtime
from errors import ContainerFormatError, InvalidInputError, TrainingDivergedError
from model_runtime import (
    ModelConfig,
    TinyDecoder,
    ToyTask,
    capture_activations,
    checkpoint_from_tensors,
    checkpoint_to_bytes,
    decode_container,
    encode_container,
    evaluate,
    forward_with_capture,
    init_model,
    load_activations,
    load_checkpoint,
    plant_redundancy,
    save_activations,
    save_checkpoint,
    train_toy,
    train_toy_with_history,
)


class TestModelConfig:
    def test_defaults(self):
        model = init_model(ModelConfig())
        assert len(model.layers) == 4
        assert model.layers[0].attn_q.shape == (64, 64)
        assert model.layers[0].ffn_up.shape == (64, 256)
        assert model.layers[0].ffn_down.shape == (256, 64)
        assert model.embedding.dtype == np.float32

    def test_heads_must_divide_width(self):
        with pytest.raises(InvalidInputError, match="divisible"):
            ModelConfig(d_model=30, n_heads=4)

    def test_head_dim_must_be_even(self):
        with pytest.raises(InvalidInputError, match="even"):
            ModelConfig(d_model=12, n_heads=4)

    def test_seeded_init_is_deterministic(self, small_config):
        assert checkpoint_to_bytes(init_model(small_config)) == checkpoint_to_bytes(
            init_model(small_config)
        )

    def test_norm_scales_start_at_one(self, small_model):
        for layer in small_model.layers:
            assert np.all(layer.norm_attn == 1.0)
            assert np.all(layer.norm_ffn == 1.0)


class TestContainer:
    def test_checkpoint_round_trip_is_bit_exact(self, small_model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(small_model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == small_model.config
        for name, tensor in small_model.tensors().items():
            assert np.array_equal(loaded.tensors()[name], tensor), name

    def test_header_declares_more_layers_than_present(self, tiny_config):
        ckpt = init_model(tiny_config)
        meta = {"config": {**tiny_config.to_dict(), "n_layers": 4}}
        tensors, meta = decode_container(encode_container(ckpt.tensors(), meta))
        with pytest.raises(ContainerFormatError, match="layers.3"):
            checkpoint_from_tensors(tensors, meta)

    def test_header_length_beyond_file(self):
        with pytest.raises(ContainerFormatError) as info:
            decode_container(struct.pack("<Q", 1000) + b"{}")
        assert info.value.offset == 0

    def test_truncated_data(self, tiny_config):
        data = checkpoint_to_bytes(init_model(tiny_config))
        with pytest.raises(ContainerFormatError, match="truncated"):
            decode_container(data[:-10])

    def test_malformed_json(self):
        with pytest.raises(ContainerFormatError, match="JSON"):
            decode_container(struct.pack("<Q", 3) + b"{x}")

    @pytest.mark.parametrize(
        "header",
        [
            b'{"embedding":5}',
            b'{"embedding":{"dtype":"f32","shape":[1],"offsets":[0]}}',
            b'{"embedding":{"dtype":"f32","shape":[1],"offsets":"0,4"}}',
            b'{"embedding":{"dtype":"f32","shape":[1],"offsets":["a",4]}}',
            b'{"__meta__":[1]}',
        ],
    )
    def test_malformed_entries(self, header):
        with pytest.raises(ContainerFormatError) as info:
            decode_container(struct.pack("<Q", len(header)) + header + bytes(4))
        assert info.value.offset == 8

    def test_malformed_layer_name(self, tiny_config):
        ckpt = init_model(tiny_config)
        tensors = {**ckpt.tensors(), "layers.x.w_q": np.zeros(1, dtype=np.float32)}
        data = encode_container(tensors, {"config": tiny_config.to_dict()})
        with pytest.raises(ContainerFormatError, match="layers.x"):
            checkpoint_from_tensors(*decode_container(data))

    def test_shape_offset_mismatch(self):
        header = b'{"a":{"dtype":"f32","shape":[3],"offsets":[0,8]}}'
        with pytest.raises(ContainerFormatError, match="does not match"):
            decode_container(struct.pack("<Q", len(header)) + header + bytes(8))

    def test_activation_dump(self, tiny_config, markov_task, tmp_path):
        acts, labels = capture_activations(init_model(tiny_config), markov_task, 10)
        save_activations(tmp_path / "acts.bin", acts, {"labels": labels.tolist()})
        loaded, meta = load_activations(tmp_path / "acts.bin")
        assert [a.layer_index for a in loaded] == [0, 1, 2, 3]
        assert loaded[2].data.shape == (10, 16)
        assert meta["labels"] == labels.tolist()


class TestToyTask:
    def test_streams_are_deterministic(self, markov_task):
        a, _ = next(markov_task.batches(4))
        b, _ = next(ToyTask(kind="markov-chain", vocab_size=16, seq_len=8, seed=3).batches(4))
        assert np.array_equal(a, b)

    def test_splits_differ(self, markov_task):
        train, _ = next(markov_task.batches(8, "train"))
        held_out, _ = next(markov_task.batches(8, "eval"))
        assert not np.array_equal(train, held_out)

    def test_modular_addition_triples(self):
        task = ToyTask(kind="modular-addition", vocab_size=7, seq_len=11, seed=0)
        tokens, mask = next(task.batches(5))
        assert tokens.shape == (5, 12)
        np.testing.assert_array_equal(tokens[:, 2], (tokens[:, 0] + tokens[:, 1]) % 7)
        np.testing.assert_array_equal(tokens[:, 5], (tokens[:, 3] + tokens[:, 4]) % 7)
        # only targets that are sums are scored
        assert mask[0].tolist() == [(j + 1) % 3 == 2 for j in range(11)]

    def test_unknown_kind(self):
        with pytest.raises(InvalidInputError):
            ToyTask(kind="copy")


class TestForward:
    def test_capture_shapes(self, small_model, markov_task):
        tokens, _ = next(markov_task.batches(6))
        logits, acts = forward_with_capture(small_model, tokens[:, :-1])
        assert logits.shape == (6, 16)
        assert len(acts) == 5
        assert all(a.data.shape == (6, 32) for a in acts)

    def test_duplicated_sequence_gives_identical_rows(self, small_model, markov_task):
        tokens, _ = next(markov_task.batches(1))
        batch = np.repeat(tokens[:, :-1], 2, axis=0)
        _, acts = forward_with_capture(small_model, batch)
        for a in acts:
            np.testing.assert_allclose(a.data[0], a.data[1], rtol=0, atol=1e-12)

    def test_batch_independence(self, small_model, markov_task):
        tokens, _ = next(markov_task.batches(5))
        _, together = forward_with_capture(small_model, tokens[:, :-1])
        _, alone = forward_with_capture(small_model, tokens[2:3, :-1])
        np.testing.assert_allclose(together[-1].data[2], alone[-1].data[0], atol=1e-10)

    def test_causal(self, small_model, markov_task):
        tokens, _ = next(markov_task.batches(1))
        changed = tokens.copy()
        changed[0, -2] = (changed[0, -2] + 1) % 16
        model = TinyDecoder(small_model)
        with torch.no_grad():
            a = model(torch.from_numpy(tokens[:, :-1]))
            b = model(torch.from_numpy(changed[:, :-1]))
        np.testing.assert_allclose(a[:, :-1].numpy(), b[:, :-1].numpy(), atol=1e-12)
        assert not np.allclose(a[:, -1].numpy(), b[:, -1].numpy())

    def test_mean_pool(self, small_model, markov_task):
        tokens, _ = next(markov_task.batches(3))
        _, last = forward_with_capture(small_model, tokens[:, :-1], pool="last")
        _, mean = forward_with_capture(small_model, tokens[:, :-1], pool="mean")
        assert not np.allclose(last[2].data, mean[2].data)

    def test_out_of_vocab_tokens(self, small_model):
        with pytest.raises(InvalidInputError):
            forward_with_capture(small_model, np.array([[0, 16]]))

    def test_too_long(self, small_model):
        with pytest.raises(InvalidInputError, match="max_seq_len"):
            forward_with_capture(small_model, np.zeros((1, 33), dtype=int))


class TestPlantRedundancy:
    def test_zero_epsilon_leaves_function_unchanged(self, small_model, markov_task):
        tokens, _ = next(markov_task.batches(4))
        planted = plant_redundancy(small_model, 2, 0.0)
        assert planted.config.n_layers == 5
        before, _ = forward_with_capture(small_model, tokens[:, :-1])
        after, _ = forward_with_capture(planted, tokens[:, :-1])
        np.testing.assert_allclose(after, before, rtol=1e-12, atol=0)

    def test_block_is_scaled_noise(self, small_model):
        planted = plant_redundancy(small_model, 4, 1e-3)
        block = planted.layers[4]
        assert np.all(block.norm_attn == 1.0)
        assert 0 < np.abs(block.attn_q).max() < 1e-2

    def test_position_out_of_range(self, small_model):
        with pytest.raises(InvalidInputError):
            plant_redundancy(small_model, 5, 1e-3)


class TestEvaluate:
    def test_uniform_logits(self, small_model, markov_task):
        flat = dataclasses.replace(small_model, head=np.zeros_like(small_model.head))
        metrics = evaluate(flat, markov_task, n_batches=2)
        assert metrics["cross_entropy"] == pytest.approx(math.log(16), abs=1e-9)

    def test_uniform_accuracy_on_modular_addition(self, small_model):
        task = ToyTask(kind="modular-addition", vocab_size=16, seq_len=16, seed=0)
        flat = dataclasses.replace(small_model, head=np.zeros_like(small_model.head))
        metrics = evaluate(flat, task, n_batches=20)
        assert metrics["next_token_accuracy"] == pytest.approx(1 / 16, abs=0.03)

    def test_untrained_model_is_near_uniform(self, markov_task):
        metrics = evaluate(init_model(ModelConfig(d_model=32, n_heads=4, d_ff=64)), markov_task, 5)
        assert metrics["cross_entropy"] == pytest.approx(math.log(16), abs=0.05)

    def test_vocab_mismatch(self, small_model):
        with pytest.raises(InvalidInputError, match="vocab"):
            evaluate(small_model, ToyTask(vocab_size=8), n_batches=1)


class TestTraining:
    def test_zero_steps_is_init(self, tiny_config, markov_task):
        assert checkpoint_to_bytes(train_toy(tiny_config, markov_task, steps=0)) == checkpoint_to_bytes(
            init_model(tiny_config)
        )

    def test_loss_decreases(self, tiny_config, markov_task):
        ckpt, losses = train_toy_with_history(tiny_config, markov_task, steps=150, learning_rate=0.02)
        assert len(losses) == 150
        assert np.mean(losses[-10:]) < np.mean(losses[:10])
        assert ckpt.layers[0].attn_q.dtype == np.float32

    def test_training_is_deterministic(self, tiny_config, markov_task):
        a = train_toy(tiny_config, markov_task, steps=5, learning_rate=0.02)
        b = train_toy(tiny_config, markov_task, steps=5, learning_rate=0.02)
        assert checkpoint_to_bytes(a) == checkpoint_to_bytes(b)

    def test_plain_sgd_variant(self, tiny_config, markov_task):
        _, plain = train_toy_with_history(tiny_config, markov_task, steps=4, learning_rate=0.02,
                                          momentum=0.0)
        _, default = train_toy_with_history(tiny_config, markov_task, steps=4, learning_rate=0.02)
        # identical first step, then the momentum buffer makes the runs part
        assert plain[:2] == pytest.approx(default[:2], rel=1e-12)
        assert plain[2:] != default[2:]

    def test_divergence(self, tiny_config, markov_task, monkeypatch):
        monkeypatch.setattr(
            model_runtime,
            "_masked_loss",
            lambda *args: torch.tensor(float("nan"), requires_grad=True),
        )
        with pytest.raises(TrainingDivergedError) as info:
            train_toy(tiny_config, markov_task, steps=3)
        assert info.value.step == 0


def test_capture_needs_two_inputs(small_model, markov_task):
    with pytest.raises(InvalidInputError, match="at least 2"):
        capture_activations(small_model, markov_task, 1)


def loop_reference_states(ckpt, tokens):
    """Hidden states after the embedding and every block, one position and head at a time."""
    config = ckpt.config
    d, n_heads = config.d_model, config.n_heads
    hd = d // n_heads
    half = hd // 2
    inv_freq = model_runtime.ROPE_BASE ** (-np.arange(half) / half)

    def rms(x, scale):
        return x / np.sqrt(np.mean(x * x) + model_runtime.NORM_EPS) * scale

    def rotate(vec, pos):
        cos, sin = np.cos(pos * inv_freq), np.sin(pos * inv_freq)
        return np.concatenate([vec[:half] * cos - vec[half:] * sin,
                               vec[:half] * sin + vec[half:] * cos])

    x = ckpt.embedding.astype(np.float64)[tokens]
    states = [x.copy()]
    for layer in ckpt.layers:
        p = {n: t.astype(np.float64) for n, t in layer.tensors().items()}
        h = np.array([rms(row, p["norm_attn"]) for row in x])
        q, k, v = h @ p["attn_q"], h @ p["attn_k"], h @ p["attn_v"]
        mixed = np.zeros_like(x)
        for head in range(n_heads):
            cols = slice(head * hd, (head + 1) * hd)
            for i in range(len(tokens)):
                qi = rotate(q[i, cols], i)
                scores = np.array([qi @ rotate(k[j, cols], j) for j in range(i + 1)]) / np.sqrt(hd)
                weights = np.exp(scores - scores.max())
                weights /= weights.sum()
                mixed[i, cols] = sum(w * v[j, cols] for j, w in enumerate(weights))
        x = x + mixed @ p["attn_o"]
        h = np.array([rms(row, p["norm_ffn"]) for row in x])
        up = h @ p["ffn_up"]
        x = x + (0.5 * up * (1.0 + scipy.special.erf(up / np.sqrt(2.0)))) @ p["ffn_down"]
        states.append(x.copy())
    return states


@pytest.fixture
def two_layer_model():
    config = ModelConfig(vocab_size=16, d_model=8, n_layers=2, n_heads=2, d_ff=16,
                         max_seq_len=16, seed=4, init_scale=0.5)
    return init_model(config)


class TestForwardReference:
    def test_zero_blocks_are_pure_skips(self, small_model, markov_task):
        zeroed = small_model.with_layers(
            [
                model_runtime.LayerParams(**{
                    n: t if n.startswith("norm_") else np.zeros_like(t)
                    for n, t in layer.tensors().items()
                })
                for layer in small_model.layers
            ]
        )
        tokens, _ = next(markov_task.batches(4))
        _, acts = forward_with_capture(zeroed, tokens[:, :-1], pool="mean")
        for a in acts[1:]:
            np.testing.assert_array_equal(a.data, acts[0].data)

    def test_matches_loop_reference(self, two_layer_model):
        tokens = np.array([3, 1, 4, 1, 5, 9, 2])
        with torch.no_grad():
            _, hidden = TinyDecoder(two_layer_model)(torch.from_numpy(tokens[None]), capture=True)
        expected = loop_reference_states(two_layer_model, tokens)
        assert len(hidden) == len(expected) == 3
        for got, want in zip(hidden, expected):
            np.testing.assert_allclose(got[0].numpy(), want, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("name, index", [("attn_q", (1, 2)), ("attn_v", (0, 5)),
                                             ("attn_o", (3, 3)), ("ffn_up", (2, 7)),
                                             ("norm_attn", (4,))])
    def test_block_gradient_matches_finite_difference(self, two_layer_model, name, index):
        model = TinyDecoder(two_layer_model)
        tokens = torch.tensor([[2, 7, 7, 1, 0, 12]])
        cos, sin = model_runtime.rotary_tables(6, two_layer_model.config.head_dim)
        x0 = model.embedding[tokens].detach()
        block = model.blocks[0]
        weights = torch.from_numpy(np.random.default_rng(0).standard_normal((1, 6, 8)))

        def objective():
            return (block(x0, cos, sin) * weights).sum()

        objective().backward()
        analytic = float(getattr(block, name).grad[index])
        param, h = getattr(block, name), 1e-6
        with torch.no_grad():
            original = float(param[index])
            param[index] = original + h
            up = float(objective())
            param[index] = original - h
            down = float(objective())
            param[index] = original
        assert analytic == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-9)
