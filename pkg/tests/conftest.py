import numpy as np
import pytest
import torch

from dualbin import toymodel as tm


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    """Print one PASS/FAIL line per acceptance criterion after the run."""
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def corpus_bytes() -> bytes:
    return tm.make_toy_corpus(60_000, seed=0)


@pytest.fixture(scope="session")
def corpus_tokens(corpus_bytes) -> np.ndarray:
    return np.frombuffer(corpus_bytes, dtype=np.uint8).astype(np.int64)


@pytest.fixture(scope="session")
def mini_teacher(corpus_tokens) -> tm.TinyDecoder:
    """Briefly trained teacher for module tests (not the acceptance run)."""
    config = tm.ModelConfig()
    train = tm.TrainConfig(steps=300, batch_size=8, seq_len=64, seed=0)
    model, losses = tm.train_teacher(config, corpus_tokens, train)
    assert losses[-1] < losses[0]
    return model
