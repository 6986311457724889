import numpy as np
import pytest
import torch

from snrjscc.model import ModelConfig, build_model

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Log one PASS/FAIL line per acceptance criterion (shown in the terminal summary)."""

    def _record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_adaptive():
    return build_model(ModelConfig(channels=2, seed=3))


@pytest.fixture
def tiny_baseline():
    return build_model(ModelConfig(channels=2, kind="baseline", seed=3))


@pytest.fixture
def images(rng):
    return rng.random((12, 32, 32, 3)).astype(np.float32)
