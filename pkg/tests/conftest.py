from __future__ import annotations

import numpy as np
import pytest

from akipipe.encoder import ModelConfig, init_params
from akipipe.ingest import SyntheticSpec, generate_synthetic_corpus
from akipipe.tokenizer import SPECIAL_TOKENS, Vocabulary, build_test_vocab


@pytest.fixture(scope="session")
def tiny_vocab() -> Vocabulary:
    words = (
        "pt", "stable", "creatinine", "no", "aki", "lasix", "on", "mg", "dl",
        "rising", "urine", "output", "low", "fluids", "started", ".", ",", "/",
        "1", "2", "3",
    )
    return Vocabulary(SPECIAL_TOKENS + words)


@pytest.fixture(scope="session")
def micro_config() -> ModelConfig:
    return ModelConfig(
        num_layers=2,
        num_heads=2,
        hidden_dim=16,
        ff_dim=32,
        vocab_size=64,
        max_position=16,
        dropout_rate=0.0,
        seed=7,
    )


@pytest.fixture(scope="session")
def micro_params(micro_config):
    return init_params(micro_config)


@pytest.fixture(scope="session")
def synthetic_corpus():
    spec = SyntheticSpec(n_stays=60, prevalence=0.2, seed=11)
    return generate_synthetic_corpus(spec)


@pytest.fixture(scope="session")
def synthetic_vocab(synthetic_corpus) -> Vocabulary:
    texts = [note.text for note in synthetic_corpus.notes]
    return build_test_vocab(texts, target_size=80)


@pytest.fixture(scope="session")
def rng() -> np.random.Generator:
    return np.random.default_rng(2024)
