import time

import numpy as np
import pytest

from mtlab.corpus import make_pretraining_suite, make_shared_task_replica
from mtlab.model import ModelConfig
from mtlab.training import TrainConfig, build_vocab, pretrain_base

# one multilingual base shared by the transfer tests; pretraining it is the
# single most expensive step in the suite
BASE_CONFIG = TrainConfig(epochs=2, learning_rate=1e-3, seed=0)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains full-size models (minutes)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_config():
    return ModelConfig(num_layers=1, num_heads=2, d_model=8, d_ff=16, max_seq_len=16,
                       vocab_size=20, dropout_rate=0.0)


@pytest.fixture(scope="session")
def replica_lab():
    """Replica corpora, their shared vocabulary and a pretrained multilingual base."""
    t0 = time.perf_counter()
    replica = make_shared_task_replica(0)
    pool = replica + make_pretraining_suite(0)[1:]
    vocab = build_vocab(pool, 512)
    base = pretrain_base("multilingual", [replica[0], pool[-1]], BASE_CONFIG, ModelConfig(),
                         vocab, name="multi")
    return {
        "replica": replica,
        "low": replica[1:],
        "vocab": vocab,
        "base": base,
        "seconds": time.perf_counter() - t0,
        "cache": {},
    }
