import numpy as np
import pytest
from hypothesis import strategies as st

from hiernav.hierarchy import Hierarchy, parse_hierarchy, prune_single_child


def random_tree(rng, n_nodes: int) -> Hierarchy:
    """Random recursive tree: node i hangs under a uniformly drawn earlier node."""
    parents = [-1] + [int(rng.integers(0, i)) for i in range(1, n_nodes)]
    return Hierarchy([f"v{i}" for i in range(n_nodes)], parents)


def random_branching_tree(rng, max_nodes: int) -> Hierarchy:
    """Random tree with no single-child nodes and at least two leaves."""
    while True:
        h = prune_single_child(random_tree(rng, int(rng.integers(3, max_nodes + 1))))
        if len(h.leaves) >= 2 and len(h) <= max_nodes:
            return h


@st.composite
def trees(draw, max_nodes=40):
    n = draw(st.integers(1, max_nodes))
    parents = [-1] + [draw(st.integers(0, i - 1)) for i in range(1, n)]
    return Hierarchy([f"v{i}" for i in range(n)], parents)


@pytest.fixture
def small_tree():
    # 0 -> {1, 2}, 1 -> {3, 4}
    return parse_hierarchy("r -\na r\nb r\nc a\nd a\n")


@pytest.fixture
def bird_tree():
    return parse_hierarchy(
        "animal -\nbird animal\nmammal animal\njunco bird\nrobin bird\nwren bird\n"
        "cat mammal\ndog mammal\n"
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
