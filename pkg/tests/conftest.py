import numpy as np
import pytest

from bridgelab import autodiff as ad
from bridgelab.model import ModelConfig, Seq2SeqTransformer


@pytest.fixture
def float64():
    with ad.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> ModelConfig:
    kw = dict(vocab_size=20, model_dim=16, num_heads=2, num_encoder_layers=2, num_decoder_layers=2,
              feedforward_dim=32, max_sequence_length=16, dropout_rate=0.0)
    kw.update(overrides)
    return ModelConfig(**kw)


@pytest.fixture
def tiny_model():
    return Seq2SeqTransformer(tiny_config(), seed=7).eval()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_line():
    """Record one PASS/FAIL line per acceptance criterion; shown again in the terminal summary."""
    def record(criterion: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
