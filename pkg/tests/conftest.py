import numpy as np
import pytest

from model_runtime import ModelConfig, ToyTask, init_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_spd():
    def make(rng, d, jitter=None):
        a = rng.standard_normal((d, d))
        return a @ a.T + (d if jitter is None else jitter) * np.eye(d)

    return make


@pytest.fixture
def small_config():
    return ModelConfig(
        vocab_size=16,
        d_model=32,
        n_layers=4,
        n_heads=4,
        d_ff=64,
        max_seq_len=32,
        seed=3,
        init_scale=0.2,
    )


@pytest.fixture
def small_model(small_config):
    return init_model(small_config)


@pytest.fixture
def markov_task():
    return ToyTask(kind="markov-chain", vocab_size=16, seq_len=8, seed=3)


@pytest.fixture
def tiny_config():
    return ModelConfig(
        vocab_size=16, d_model=16, n_layers=3, n_heads=2, d_ff=32, max_seq_len=16, seed=5,
        init_scale=0.2,
    )
