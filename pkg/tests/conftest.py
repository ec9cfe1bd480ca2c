import numpy as np
import pytest

from khgqa.graph import parse_facts, random_graph

# criterion number -> (passed, detail); filled by the acceptance suite
ACCEPTANCE_RESULTS: dict = {}


def record(number: int, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number])


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_graph():
    return parse_facts("r1\ta\tc\nr1\ta\td\nr2\tb\td\n")


@pytest.fixture
def synthetic_graph():
    return random_graph(200, 2000, [2, 3, 4], seed=11, num_relations=12)
