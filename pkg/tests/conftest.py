from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cate.space import NB101_SPACE, CellGraph, random_cell

settings.register_profile("repo", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

CONV3 = "conv3x3-bn-relu"
CONV1 = "conv1x1-bn-relu"
POOL = "maxpool3x3"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def diamond() -> CellGraph:
    # input -> a, input -> b, a -> out, b -> out
    return CellGraph.from_edges(["input", CONV3, CONV1, "output"], [(0, 1), (0, 2), (1, 3), (2, 3)])


@pytest.fixture
def chain() -> CellGraph:
    return CellGraph.from_edges(["input", CONV3, "output"], [(0, 1), (1, 2)])


def random_cells(count: int, seed: int = 0, spec=NB101_SPACE) -> list[CellGraph]:
    r = np.random.default_rng(seed)
    return [random_cell(spec, r) for _ in range(count)]


_VERDICTS: list[str] = []


def record_verdict(line: str) -> None:
    _VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
