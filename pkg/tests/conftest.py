import numpy as np
import pytest
import torch

from hcpr.model import ModelConfig, build_model

torch.set_num_threads(1)


@pytest.fixture
def small_config():
    return ModelConfig(num_classes=3, feature_channels=6, embed_dim=5, conv_stages=(4,), input_shape=(8, 8, 1))


@pytest.fixture
def small_model(small_config):
    return build_model(small_config, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """Record one PASS/FAIL line per acceptance criterion and echo it immediately."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
