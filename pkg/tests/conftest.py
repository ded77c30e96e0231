import numpy as np
import pytest

from src.config import ModelConfig, RunConfig, TrainConfig
from src.idtree import IdentifierTree, build_identifier_tree
from src.model import RetrievalModel


def toy_tree():
    """
    N=8, k=2, depth 3:

        start 8 -> 9 -> 10 -> {0, 1}
                     -> 11 -> {2, 3}
                -> 12 -> 13 -> {4, 5}
                      -> 14 -> {6, 7}
    """
    parent = [10, 10, 11, 11, 13, 13, 14, 14, 8, 8, 9, 9, 8, 12, 12]
    paths = [
        [9, 10, 0], [9, 10, 1], [9, 11, 2], [9, 11, 3],
        [12, 13, 4], [12, 13, 5], [12, 14, 6], [12, 14, 7],
    ]
    return IdentifierTree(2, 3, 8, 15, parent, paths)


def small_tree(n=4, k=2, seed=0, mode="balanced"):
    rng = np.random.default_rng(seed)
    return build_identifier_tree(rng.normal(size=(n, 4)), k, seed=seed, mode=mode)


def tiny_model(tree, d=8, seed=0, n_layers=1, max_history_len=6, dropout=0.0):
    config = ModelConfig(d=d, n_heads=2, ffn_dim=2 * d, n_layers=n_layers, max_history_len=max_history_len, dropout=dropout)
    return RetrievalModel(config.with_tree(tree), seed=seed).eval()


@pytest.fixture
def tree8():
    return toy_tree()


@pytest.fixture
def model8(tree8):
    return tiny_model(tree8)


@pytest.fixture
def train_config():
    return TrainConfig(lambda_a=0.05, lambda_r=0.05, tau=0.5, q=2, beta=0.01, batch_size=16)


@pytest.fixture
def run_config(tmp_path):
    config = RunConfig(seed=0, out_dir=str(tmp_path / "run"))
    config.corpus.synthetic_users = 60
    config.corpus.synthetic_items = 16
    config.embedding.dim = 4
    config.tree.k = 4
    config.model.d = 8
    config.model.n_heads = 2
    config.model.max_history_len = 8
    config.train.batch_size = 64
    config.train.max_epochs = 2
    config.train.valid_beam = 16
    config.train.valid_k = 16
    config.retrieval.beam_size = 16
    config.retrieval.top_n = 16
    config.eval.k_list = [5, 10]
    return config.validate()
