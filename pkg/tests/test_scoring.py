import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_branching_tree
from hiernav.data import generate_synthetic_hierarchy
from hiernav.hierarchy import parse_hierarchy
from hiernav.model import NodeDistributions, forward, init_params
from hiernav.scoring import (
    HIERARCHICAL_METRICS,
    format_scores,
    msp_score,
    node_entropies,
    node_path_probability,
    path_scores,
    score_sample,
)


def entropy(p):
    return -sum(q * math.log(q) for q in p if q > 0)


def _bisect(fn, target, lo, hi):
    """Root of fn(q) = target for fn decreasing on [lo, hi]."""
    for _ in range(200):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if fn(mid) > target else (lo, mid)
    return (lo + hi) / 2


def two_way_with_entropy(target):
    q = _bisect(lambda q: entropy([q, 1 - q]), target, 0.5, 1 - 1e-15)
    return [q, 1 - q]


def three_way_with_entropy(target):
    q = _bisect(lambda q: entropy([q, (1 - q) / 2, (1 - q) / 2]), target, 1 / 3, 1 - 1e-15)
    return [q, (1 - q) / 2, (1 - q) / 2]


CHAIN = parse_hierarchy("r -\na r\nx1 r\nb a\nx2 a\nc b\nx3 b\nx4 b\n")


class TestPathScores:
    def test_entropy_aggregates(self):
        dists = {
            CHAIN.node_id("r"): two_way_with_entropy(0.2),
            CHAIN.node_id("a"): two_way_with_entropy(0.05),
            CHAIN.node_id("b"): three_way_with_entropy(0.7),
        }
        s = path_scores(NodeDistributions.from_dict(CHAIN, dists))[0]
        assert CHAIN.names[s.predicted_leaf] == "c"
        assert s.h_min == pytest.approx(0.05, abs=1e-12)
        assert s.h_mean == pytest.approx((0.2 + 0.05 + 0.7) / 3, abs=1e-12)
        assert s.h_mean == pytest.approx(0.3167, abs=1e-4)

    def test_one_hot_path(self):
        nd = NodeDistributions.from_dict(CHAIN, {0: [1.0, 0.0], 1: [1.0, 0.0], 3: [1.0, 0.0, 0.0]})
        s = path_scores(nd)[0]
        assert s.path_probability == 1.0 and s.h_mean == 0.0 and s.h_min == 0.0

    def test_single_internal_node(self):
        h = parse_hierarchy("r -\na r\nb r\nc r")
        p = [0.5, 0.3, 0.2]
        s = path_scores(NodeDistributions.from_dict(h, {0: p}))[0]
        assert s.h_mean == s.h_min == pytest.approx(entropy(p), rel=1e-12)

    def test_node_path_probability(self):
        h = parse_hierarchy("r -\na r\nb r\nc a\nd a")
        nd = NodeDistributions.from_dict(h, {0: [0.6, 0.4], 1: [0.5, 0.5]})
        assert node_path_probability(nd, 1)[0] == pytest.approx(0.6)
        assert node_path_probability(nd, 0)[0] == 1.0
        assert node_path_probability(nd, 3)[0] == pytest.approx(0.3)

    def test_metric_orientation(self, rng):
        h = random_branching_tree(rng, 20)
        scores = path_scores(forward(init_params(h, 3, seed=0), h, rng.normal(size=(5, 3))))
        assert np.array_equal(scores.metric("path_prob"), scores.path_probability)
        assert np.array_equal(scores.metric("h_mean"), -scores.h_mean)
        assert np.array_equal(scores.metric("h_min"), -scores.h_min)
        with pytest.raises(ValueError):
            scores.metric("energy")
        assert HIERARCHICAL_METRICS == ("path_prob", "h_mean", "h_min")

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 100_000))
    def test_invariants(self, seed):
        rng = np.random.default_rng(seed)
        h = random_branching_tree(rng, 40)
        params = init_params(h, 4, seed=seed)
        params = params.with_arrays([a * 3 for a in params.arrays()])
        x = rng.normal(size=4)
        s = score_sample(params, h, x)
        nd = forward(params, h, x[None, :])
        ent = node_entropies(nd)[0]
        path_ents = [ent[list(h.internals).index(n)] for n in h.ancestors(s.predicted_leaf)]
        assert s.h_min == min(path_ents)
        assert s.h_min <= s.h_mean + 1e-15
        probs = [p for _, p, _ in s.per_node]
        assert all(b <= a for a, b in zip(probs, probs[1:]))
        assert s.per_node[-1][0] == s.predicted_leaf
        product = 1.0
        for n in h.path(s.predicted_leaf)[1:]:
            product *= nd.node(h.parents[n])[0, h.children[h.parents[n]].index(n)]
        assert s.path_probability == pytest.approx(product, rel=1e-12)


class TestMSP:
    def flat(self, h, bias):
        p = init_params(h, 1, trunk_layers=0, hierarchical=False, flat=True).zeros_like()
        p.flat_b = np.asarray(bias, dtype=np.float64)
        return p

    def test_uniform(self):
        h = generate_synthetic_hierarchy([3, 4])
        assert msp_score(self.flat(h, np.zeros(12)), [[0.0]])[0] == pytest.approx(1 / 12)

    def test_confident(self):
        h = parse_hierarchy("r -\na r\nb r")
        assert msp_score(self.flat(h, [math.log(9), 0.0]), [[0.0]])[0] == pytest.approx(0.9)
        assert msp_score(self.flat(h, [800.0, 0.0]), [[0.0]])[0] == 1.0


def test_scores_file_format(rng):
    h = parse_hierarchy("r -\na r\nb r\nc a\nd a")
    scores = path_scores(forward(init_params(h, 2, seed=0), h, rng.normal(size=(3, 2))))
    text = format_scores(scores, msp=np.array([0.5, 0.25, 1.0]))
    lines = text.splitlines()
    assert lines[0] == "sample_index,predicted_leaf_name,path_prob,h_mean,h_min,msp"
    assert len(lines) == 4
    assert lines[1].split(",")[1] in {"b", "c", "d"}
    assert format_scores(scores).splitlines()[0] == "sample_index,predicted_leaf_name,path_prob,h_mean,h_min"
