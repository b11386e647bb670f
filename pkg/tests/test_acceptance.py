"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal.

The benchmark-backed criteria (5 to 8) share one three-seed ``run_bench``
call; criterion 10 runs the CLI twice more and compares every report byte.
"""

import time

import numpy as np
import pytest

from conftest import random_tree
from test_evaluation import pairwise_auroc
from test_training import central_differences, gradient_instance, max_relative_error
from hiernav.bench import BenchConfig, model_name, run_bench
from hiernav.cli import run
from hiernav.data import generate_synthetic_features, generate_synthetic_hierarchy
from hiernav.evaluation import auroc, is_ancestor_chain, tnr_sweep
from hiernav.hierarchy import holdout_split
from hiernav.inference import NODE_WISE
from hiernav.model import forward, init_params, leaf_posteriors, node_path_probabilities
from hiernav.training import LossConfig, TrainConfig, backward, soft_loss, train_sgd

GRID = [0.5, 0.8, 0.9, 0.95, 0.99]
HSC_MODELS = [model_name(b) for b in BenchConfig().betas]


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {n:>2}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench_api")
    start = time.perf_counter()
    result = run_bench(7, str(out))
    return result, out, time.perf_counter() - start


def test_c01_normalization(report):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        h = random_tree(rng, int(rng.integers(2, 60)))
        d = int(rng.integers(1, 10))
        p = init_params(h, d, int(rng.integers(0, 4)), int(rng.integers(1, 16)), seed=seed)
        p = p.with_arrays([a * rng.uniform(1, 5) for a in p.arrays()])
        post = leaf_posteriors(forward(p, h, rng.normal(size=(1, d)) * 3))
        worst = max(worst, float(np.max(np.abs(post.sum(axis=1) - 1.0))))
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-9 and elapsed < 10,
           f"max |sum - 1| = {worst:.2e} over 1000 triples in {elapsed:.1f}s")


def test_c02_gradient_oracle(report):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        params, h, X, y, cfg = gradient_instance(seed)
        assert cfg.alpha > 0 and cfg.beta > 0 and len(h) <= 30 and X.shape[1] <= 16
        analytic = backward(params, X, y, cfg, h).arrays()
        worst = max(worst, max_relative_error(analytic, central_differences(params, h, X, y, cfg)))
    elapsed = time.perf_counter() - start
    report(2, worst <= 1e-4 and elapsed < 30,
           f"max relative error {worst:.2e} over 50 instances in {elapsed:.1f}s")


def test_c03_auroc_oracle(report):
    mismatches = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 25, size=int(rng.integers(1, 201))) / 4
        b = rng.integers(0, 25, size=int(rng.integers(1, 201))) / 4
        mismatches += auroc(a, b) != float(pairwise_auroc(a.tolist(), b.tolist()))
    report(3, mismatches == 0, f"{mismatches} mismatches against the pairwise statistic on 100 sets")


def test_c04_threshold_monotonicity(report, bench):
    h = generate_synthetic_hierarchy([3, 3, 3])
    ds = generate_synthetic_features(h, 8, [1.0, 0.7, 0.5], 0.5, 40, seed=4)
    h_id, gt = holdout_split(h, ["n1_2"])
    names = np.array(h.names, dtype=object)[ds.y]
    is_ood = np.isin(names, list(gt.mapping))
    id_ds = ds.subset(~is_ood).relabel(h_id)
    tr, va, te = (id_ds.select_split(s) for s in ("train", "val", "test"))
    params = train_sgd(init_params(h_id, 8, seed=0), h_id, tr.X, tr.y,
                       TrainConfig(epochs=10, batch_size=32, lr_milestones=(6,)),
                       LossConfig(1.0, 0.2)).params
    ood = ds.subset(is_ood & (ds.split == "test"))
    ood_gt = np.array([h_id.node_id(gt.target(h.names[l])) for l in ood.y])
    X = np.vstack([te.X[:70], ood.X[:30]])
    assert len(X) == 100
    P = [node_path_probabilities(forward(params, h_id, Z)) for Z in (va.X, X)]
    gt_all = np.concatenate([te.y[:70], ood_gt[:30]])
    _, preds = tnr_sweep(h_id, P[0], va.y, P[1], gt_all, P[1][:1], gt_all[:1], GRID,
                         modes=(NODE_WISE,), keep_predictions=True)
    chains = np.stack([preds[(NODE_WISE, t)][0] for t in GRID], axis=1)
    violations = sum(not is_ancestor_chain(h_id, row) for row in chains.tolist())
    bench_violations = sum(sum(r.chain_violations.values()) for r in bench[0].runs)
    report(4, violations == 0 and bench_violations == 0,
           f"{violations} chain violations on 100 samples, {bench_violations} across the benchmark")


def test_c05_granularity_trend(report, bench):
    result, _, elapsed = bench
    gaps = {(m, metric): result.mean_auroc(m, metric, "coarse") - result.mean_auroc(m, metric, "fine")
            for m in HSC_MODELS for metric in ("path_prob", "h_min")}
    detail = ", ".join(f"{m}/{k} {v:+.3f}" for (m, k), v in gaps.items())
    report(5, all(v >= 0.05 for v in gaps.values()) and elapsed < 300,
           f"coarse - fine AUROC: {detail}; bench {elapsed:.0f}s")


def test_c06_loss_ablation(report, bench):
    result = bench[0]
    with_beta = result.mean_auroc(model_name(0.2), "path_prob", "coarse")
    without = result.mean_auroc(model_name(0.0), "path_prob", "coarse")
    report(6, with_beta >= without - 0.01,
           f"coarse path-prob AUROC beta=0.2 {with_beta:.4f} vs beta=0 {without:.4f}")


def test_c07_sweep_behaviour(report, bench):
    result = bench[0]
    ok, parts = True, []
    for m in HSC_MODELS:
        def mean(field, tnr):
            return float(np.mean([getattr(p, field) for r in result.runs for p in r.sweeps[m]
                                  if p.mode == NODE_WISE and p.tnr == tnr]))
        ood_lo, ood_hi = mean("ood_hdist", 0.5), mean("ood_hdist", 0.99)
        id_change = abs(mean("id_hdist", 0.99) - mean("id_hdist", 0.5))
        ok &= ood_hi <= ood_lo and id_change <= 0.1
        parts.append(f"{m} OOD {ood_lo:.3f}->{ood_hi:.3f}, ID change {id_change:.3f}")
    report(7, ok, "; ".join(parts))


def test_c08_micro_roc_recovery(report, bench):
    result = bench[0]
    ok, parts = True, []
    for m in HSC_MODELS:
        vals = [v for r in result.runs for v in r.micro[m].values()
                if v[1] is not None and v[2] is not None]
        better = sum(thr >= mixed for _, mixed, thr in vals)
        ok &= better >= 0.8 * len(vals)
        parts.append(f"{m} {better}/{len(vals)}")
    report(8, ok, "nodes with thresholded >= unthresholded micro-AUROC: " + ", ".join(parts))


def test_c09_memorization(report):
    h = generate_synthetic_hierarchy([3, 3])
    rng = np.random.default_rng(0)
    X = rng.normal(size=(len(h.leaves), 4))
    y = np.array(h.leaves)
    res = train_sgd(init_params(h, 4, seed=0), h, X, y,
                    TrainConfig(epochs=200, batch_size=len(y), lr_milestones=()), LossConfig())
    loss = soft_loss(forward(res.params, h, X), y)
    report(9, loss < 0.01, f"soft loss {loss:.2e} after 200 epochs on one batch")


def test_c10_reproducibility(report, bench, tmp_path):
    _, api_dir, _ = bench
    a, b = tmp_path / "a", tmp_path / "b"
    codes = [run(["bench", "--seed", "7", "--out", str(d)]) for d in (a, b)]
    names = sorted(p.name for p in a.iterdir())
    same = [(a / n).read_bytes() == (b / n).read_bytes() for n in names]
    matches_api = [(api_dir / n).read_bytes() == (a / n).read_bytes() for n in names]
    report(10, codes == [0, 0] and names == sorted(p.name for p in b.iterdir())
           and all(same) and all(matches_api) and len(names) > 0,
           f"{sum(same)}/{len(names)} files identical across two CLI runs, "
           f"{sum(matches_api)}/{len(names)} identical to the library run")
