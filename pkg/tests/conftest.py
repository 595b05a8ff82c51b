import numpy as np
import pytest

from rulerec.kgstore import NodeKind, NodeRef, build_graph

# a=0, b=1 items; c=2, d=3, f=4 entities
TOY_EDGES = [(0, "r1", 2), (0, "r1", 3), (2, "r2", 1), (3, "r2", 1), (3, "r2", 4)]


def toy_nodes():
    return [
        NodeRef(0, NodeKind.ITEM, "a"),
        NodeRef(1, NodeKind.ITEM, "b"),
        NodeRef(2, NodeKind.ENTITY, "c", "brand"),
        NodeRef(3, NodeKind.ENTITY, "d", "brand"),
        NodeRef(4, NodeKind.ENTITY, "f", "os"),
    ]


@pytest.fixture
def toy():
    return build_graph(toy_nodes(), TOY_EDGES, inverse=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance outcomes, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
