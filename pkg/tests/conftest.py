import os

os.environ.setdefault("TQAT_DETERMINISTIC", "1")

import tqat  # noqa: E402,F401  (pins thread counts before numpy loads)

import numpy as np
import pytest

from tqat.data import BatchStream, builtin_corpus
from tqat.nn import ModelConfig, TransformerModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sample_corpus():
    return builtin_corpus("sample")


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=256, d_model=16, n_layers=1, n_heads=2, max_seq_len=16, ffn_multiplier=2)


@pytest.fixture
def tiny_model(tiny_config):
    return TransformerModel(tiny_config, seed=0)


@pytest.fixture
def tiny_stream(sample_corpus):
    return BatchStream(sample_corpus, seq_len=16, batch_size=4, seed=0)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
