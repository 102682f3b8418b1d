import os
from pathlib import Path

import pytest

from occprior.datasets import build_procedural_dataset

CACHE = Path(os.environ.get("INGEO_CACHE", Path(__file__).resolve().parent.parent / ".cache"))


@pytest.fixture(scope="session")
def cache_dir():
    CACHE.mkdir(parents=True, exist_ok=True)
    return CACHE


@pytest.fixture(scope="session")
def tiny_data(cache_dir):
    """Small textured-sphere dataset for fast training tests."""
    return build_procedural_dataset("textured-sphere", 0, n_train=8, n_test=2, size=24,
                                    cache_dir=cache_dir)


ACCEPTANCE_LINES = []


def record_criterion(number: int, passed: bool, detail: str):
    """Register a one-line acceptance verdict, echoed in the terminal summary."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
