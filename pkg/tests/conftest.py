from pathlib import Path

import pytest

from mnl.datagen import SynthConfig, gen_synthetic

ROOT = Path(__file__).resolve().parents[1]
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def repo_root():
    return ROOT


@pytest.fixture(scope="session")
def small_data():
    cfg = SynthConfig(n_classes=3, dims=(6, 6), separations=(3.0, 1.0), n_train=400, n_val=100,
                      n_test=100, seed=7)
    return gen_synthetic(cfg)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
