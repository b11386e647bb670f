from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiernav.data import generate_synthetic_features, generate_synthetic_hierarchy
from hiernav.evaluation import (
    ERROR_MODES,
    LOWER_IS_ID,
    auroc,
    format_confusion,
    format_outcomes,
    format_sweep,
    granularity_auroc,
    hierarchical_outcomes,
    is_ancestor_chain,
    node_micro_aurocs,
    tnr_sweep,
)
from hiernav.exceptions import HierNavError
from hiernav.hierarchy import distance_decomposition, holdout_split
from hiernav.inference import MODES
from hiernav.model import forward, init_params, node_path_probabilities
from hiernav.training import LossConfig, TrainConfig, train_sgd


def pairwise_auroc(id_scores, ood_scores) -> Fraction:
    wins = Fraction(0)
    for a in id_scores:
        for b in ood_scores:
            wins += 1 if a > b else Fraction(1, 2) if a == b else 0
    return wins / (len(id_scores) * len(ood_scores))


class TestAUROC:
    def test_perfect(self):
        assert auroc([0.9, 0.8], [0.1, 0.2]) == 1.0

    def test_constant(self):
        assert auroc([0.4] * 3, [0.4] * 5) == 0.5

    def test_worked_example(self):
        assert auroc([0.9, 0.3], [0.5, 0.1]) == 0.75

    def test_lower_is_id(self):
        assert auroc([0.1, 0.2], [0.9, 0.8], LOWER_IS_ID) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            auroc([], [0.1])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6))
    def test_exact_against_pairwise(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 20, size=int(rng.integers(1, 200))) / 7
        b = rng.integers(0, 20, size=int(rng.integers(1, 200))) / 7
        assert auroc(a, b) == float(pairwise_auroc(a.tolist(), b.tolist()))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_swap_complements(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random(30), rng.random(40)
        assert auroc(a, b) + auroc(b, a) == pytest.approx(1.0, abs=1e-15)


class TestGranularity:
    def test_empty_pool_absent(self):
        out = granularity_auroc([0.9, 0.8], {"fine": [0.5], "coarse": [0.1]})
        assert out["medium"] is None
        assert out["fine"] == 1.0 and out["coarse"] == 1.0

    def test_identical_distributions(self):
        s = [0.1, 0.5, 0.9]
        out = granularity_auroc(s, {g: s for g in ("fine", "medium", "coarse")})
        assert all(v == 0.5 for v in out.values())

    def test_overall_between_pools(self, rng):
        id_s = rng.normal(1.0, 1.0, 50)
        fine, coarse = rng.normal(0.7, 1.0, 40), rng.normal(-1.0, 1.0, 40)
        out = granularity_auroc(id_s, {"fine": fine, "coarse": coarse})
        lo, hi = sorted([out["fine"], out["coarse"]])
        assert lo <= out["overall"] <= hi
        assert out["overall"] == pytest.approx((out["fine"] + out["coarse"]) / 2)


class TestOutcomes:
    def test_all_correct(self, small_tree):
        o = hierarchical_outcomes([2, 3, 4], [2, 3, 4], small_tree)
        assert o.accuracy == 1.0 and o.avg_distance == 0.0
        assert o.confusion[0, 0] == 3 and o.confusion.sum() == 3
        assert o.modes == {"correct": 3, "standard_error": 0, "under_prediction": 0, "over_prediction": 0}

    def test_parent_is_under_prediction(self, small_tree):
        o = hierarchical_outcomes([1], [3], small_tree)
        assert o.modes["under_prediction"] == 1
        assert o.avg_distance == 1.0 and o.accuracy == 0.0 and o.ancestor_accuracy == 1.0

    def test_ood_sibling_is_over_prediction(self, bird_tree):
        h_id, gt = holdout_split(bird_tree, ["junco"])
        pred, truth = h_id.node_id("wren"), h_id.node_id(gt.target("junco"))
        assert distance_decomposition(h_id, pred, truth) == (1, 0)
        o = hierarchical_outcomes([pred], [truth], h_id)
        assert o.modes["over_prediction"] == 1
        assert o.confusion[0, 1] == 1

    def test_length_mismatch(self, small_tree):
        with pytest.raises(HierNavError):
            hierarchical_outcomes([1, 2], [1], small_tree)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_marginals(self, seed):
        rng = np.random.default_rng(seed)
        h = generate_synthetic_hierarchy([3, 2, 2])
        preds = rng.integers(0, len(h), 60)
        gts = rng.integers(0, len(h), 60)
        o = hierarchical_outcomes(preds, gts, h)
        assert o.confusion.sum() == 60 and sum(o.modes.values()) == 60
        c = o.confusion
        assert c[0, 0] == o.modes["correct"]
        assert c[1:, 0].sum() == o.modes["under_prediction"]
        assert c[0, 1:].sum() == o.modes["over_prediction"]
        assert c[1:, 1:].sum() == o.modes["standard_error"]
        d = sum(i * c[i, :].sum() + j * c[:, j].sum() for i in range(c.shape[0]) for j in [i])
        assert o.avg_distance == pytest.approx(d / 60)

    def test_path_predictions_never_over(self, rng):
        h = generate_synthetic_hierarchy([3, 3, 2])
        gts = rng.choice(h.leaves, 30)
        preds = [int(rng.choice(h.path(g))) for g in gts]
        o = hierarchical_outcomes(preds, gts, h)
        assert o.modes["over_prediction"] == 0 and o.modes["standard_error"] == 0

    def test_formatters(self, small_tree):
        o = hierarchical_outcomes([1, 3], [3, 4], small_tree)
        conf = format_confusion(o.confusion).splitlines()
        assert conf[0] == "gt_dist\\pred_dist,0,1,2"
        rows = format_outcomes([("leaf", "id", o)]).splitlines()
        assert rows[0].split(",") == ["label", "pool", "n", "accuracy", "ancestor_accuracy",
                                      "avg_hdist", *ERROR_MODES]
        assert rows[1].startswith("leaf,id,2,0.0,0.5,")


@pytest.fixture(scope="module")
def trained():
    h = generate_synthetic_hierarchy([3, 3, 2])
    ds = generate_synthetic_features(h, 6, [1.5, 1.0, 0.5], 0.6, 40, seed=2)
    h_id, gt = holdout_split(h, ["n1_2"])
    names = np.array(h.names, dtype=object)[ds.y]
    ood_mask = np.isin(names, list(gt.mapping))
    id_ds = ds.subset(~ood_mask).relabel(h_id)
    tr, va, te = (id_ds.select_split(s) for s in ("train", "val", "test"))
    ood = ds.subset(ood_mask & (ds.split == "test"))
    gt_ood = np.array([h_id.node_id(gt.target(h.names[l])) for l in ood.y])
    params = train_sgd(init_params(h_id, 6, seed=0), h_id, tr.X, tr.y,
                       TrainConfig(epochs=8, batch_size=32), LossConfig(1.0, 0.2)).params
    P = [node_path_probabilities(forward(params, h_id, d.X)) for d in (va, te, ood)]
    return h_id, P, va.y, te.y, gt_ood


class TestSweep:
    def test_near_zero_tnr_matches_leaf_predictions(self, trained):
        h, (Pv, Pi, Po), yv, yi, go = trained
        pts = tnr_sweep(h, Pv, yv, Pi, yi, Po, go, [1e-9])
        leaf = np.array(h.leaves)[np.argmax(Pi[:, list(h.leaves)], axis=1)]
        base = hierarchical_outcomes(leaf, yi, h)
        for p in pts:
            assert p.id_acc == base.accuracy
            assert p.id_hdist == base.avg_distance

    def test_chains_and_modes(self, trained):
        h, (Pv, Pi, Po), yv, yi, go = trained
        grid = [0.5, 0.8, 0.9, 0.95, 0.99]
        pts, preds = tnr_sweep(h, Pv, yv, Pi, yi, Po, go, grid, keep_predictions=True)
        assert [(p.mode, p.tnr) for p in pts] == [(m, t) for m in MODES for t in grid]
        for mode in MODES:
            for part in (0, 1):
                rows = np.stack([preds[(mode, t)][part] for t in grid], axis=1)
                assert all(is_ancestor_chain(h, r) for r in rows.tolist())

    def test_rejects_unsorted_grid(self, trained):
        h, (Pv, Pi, Po), yv, yi, go = trained
        with pytest.raises(HierNavError):
            tnr_sweep(h, Pv, yv, Pi, yi, Po, go, [0.9, 0.5])
        with pytest.raises(HierNavError):
            tnr_sweep(h, Pv, yv, Pi, yi, Po, go, [0.0])

    def test_format(self, trained):
        h, (Pv, Pi, Po), yv, yi, go = trained
        text = format_sweep(tnr_sweep(h, Pv, yv, Pi, yi, Po, go, [0.5]))
        lines = text.splitlines()
        assert lines[0] == "tnr,mode,id_acc,ood_acc,id_hdist,ood_hdist"
        assert [l.split(",")[1] for l in lines[1:]] == ["node_wise", "path_wise"]

    def test_micro_aurocs(self, trained):
        h, (Pv, Pi, Po), yv, yi, go = trained
        id_only = node_micro_aurocs(h, Pi, yi)
        mixed = node_micro_aurocs(h, Pi, yi, Po, go)
        gated = node_micro_aurocs(h, Pi, yi, Po, go, path_threshold=0.0)
        assert set(id_only) == set(h.internals)
        assert gated == mixed
        assert all(v is None or 0.0 <= v <= 1.0 for v in mixed.values())
