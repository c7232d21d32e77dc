import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sparsedecode.calibration import LayerKTable
from sparsedecode.model import TransformerConfig, random_model

settings.register_profile(
    "ci",
    deadline=None,
    max_examples=40,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


TINY = TransformerConfig(
    layers=2, model_dim=32, ffn_dim=64, heads=4, kv_heads=4,
    vocab=64, max_seq=96, activation="relu",
)

TINY_GQA = TransformerConfig(
    layers=2, model_dim=32, ffn_dim=64, heads=4, kv_heads=2,
    vocab=64, max_seq=96, activation="relu",
)

TINY_SWIGLU = TransformerConfig(
    layers=2, model_dim=32, ffn_dim=64, heads=4, kv_heads=4,
    vocab=64, max_seq=96, activation="swiglu",
)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def tiny_model():
    return random_model(TINY, seed=7)


@pytest.fixture(scope="session")
def gqa_model():
    return random_model(TINY_GQA, seed=11)


@pytest.fixture(scope="session")
def swiglu_model():
    return random_model(TINY_SWIGLU, seed=13)


def full_k_table(config: TransformerConfig) -> LayerKTable:
    rows = tuple((ell, config.ffn_dim, 1.0) for ell in range(config.layers))
    return LayerKTable(rows=rows)


def random_prompts(config: TransformerConfig, batch: int, length: int,
                   seed: int = 0, ragged: bool = False) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for b in range(batch):
        n = length if not ragged else int(rng.integers(1, length + 1))
        out.append(rng.integers(0, config.vocab, n, dtype=np.int64))
    return out
