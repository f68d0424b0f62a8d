import numpy as np
import pytest

from multiplex_embed.encoder import EncoderConfig
from multiplex_embed.synthetic import make_factor_graph
from multiplex_embed.text_pipeline import build_vocabulary
from multiplex_embed.trainer import TrainConfig, train

SMALL_ENCODER = dict(layers=1, hidden=16, heads=2, ffn=32, prior_tokens=3, max_positions=15)


@pytest.fixture(scope="session")
def small_factor_graph():
    return make_factor_graph(n_nodes=60, n_clusters=10, seed=3)


@pytest.fixture(scope="session")
def small_vocab(small_factor_graph):
    return build_vocabulary(small_factor_graph.graph.texts)


@pytest.fixture(scope="session")
def small_config(small_vocab):
    return EncoderConfig(vocab_size=len(small_vocab), **SMALL_ENCODER)


@pytest.fixture(scope="session")
def small_checkpoint(small_factor_graph, small_vocab, small_config):
    tc = TrainConfig(epochs=3, batch_size=8, warmup_epochs=1, max_len=12, seed=0)
    return train(small_factor_graph.graph, small_vocab, small_config, tc).checkpoint


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
