import numpy as np
import pytest

from ticketrec.glyphs import default_glyphs
from ticketrec.pattern_router import Models
from ticketrec.templates import load_registry


@pytest.fixture(scope="session")
def registry():
    return load_registry()


@pytest.fixture(scope="session")
def glyphs():
    return default_glyphs()


@pytest.fixture(scope="session")
def models(glyphs):
    return Models.reference(glyphs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
