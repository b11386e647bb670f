"""End-to-end synthetic benchmark: holdout splits, HSC and flat models, full report."""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .data import (
    DepthBand,
    SplitSpec,
    generate_synthetic_features,
    generate_synthetic_hierarchy,
    select_holdout_subtrees,
    split_from_selection,
)
from .evaluation import (
    format_confusion,
    format_outcomes,
    format_sweep,
    granularity_auroc,
    hierarchical_outcomes,
    is_ancestor_chain,
    node_micro_aurocs,
    pool_ground_truth,
    tnr_sweep,
)
from .exceptions import DatasetError
from .hierarchy import GRANULARITIES
from .inference import NODE_WISE, PATH_WISE, calibrate_from_probabilities, infer_from_probabilities
from .model import flat_forward, forward, init_params, node_path_probabilities
from .scoring import HIERARCHICAL_METRICS, msp_score, path_scores
from .training import LossConfig, TrainConfig, train_sgd

logger = logging.getLogger(__name__)


@dataclass
class BenchConfig:
    branching: tuple = (3, 3, 3, 3)
    dim: int = 32
    level_scales: tuple = (0.5, 0.5, 0.5, 0.35)
    noise_scale: float = 0.5
    per_leaf: int = 300
    bands: tuple = (
        DepthBand(1, 1, 0.34, "coarse"),
        DepthBand(4, 4, 0.1, "fine"),
    )
    trunk_layers: int = 2
    hidden: int | None = 256
    train: TrainConfig = field(default_factory=TrainConfig)
    betas: tuple = (0.0, 0.2)
    tnr_grid: tuple = (0.5, 0.8, 0.9, 0.95, 0.99)
    roc_tnr: float = 0.95
    n_seeds: int = 3
    max_split_attempts: int = 100


@dataclass
class SeedRun:
    seed: int
    auroc: dict  # (model, metric) -> granularity dict
    sweeps: dict  # model -> list of SweepPoint
    chain_violations: dict  # model -> count
    micro: dict  # model -> {node: (id_only, id_ood, thresholded)}
    outcomes: dict  # (model, pool, setting) -> Outcomes
    n_internal: int


@dataclass
class BenchResult:
    runs: list
    files: list

    def mean_auroc(self, model: str, metric: str, gran: str) -> float:
        return float(np.mean([r.auroc[(model, metric)][gran] for r in self.runs]))


def model_name(beta: float) -> str:
    return f"hsc_beta{beta:g}"


def _make_split(h, cfg: BenchConfig, seed: int):
    for attempt in range(cfg.max_split_attempts):
        spec = SplitSpec(cfg.bands, seed=seed * 1000 + attempt)
        try:
            sel = select_holdout_subtrees(h, spec)
        except DatasetError:
            continue
        wanted = {b.granularity for b in cfg.bands}
        if all(sel[g] for g in wanted):
            return sel
    raise DatasetError("could not draw a holdout split with every granularity represented")


def run_seed(seed: int, cfg: BenchConfig) -> SeedRun:
    h = generate_synthetic_hierarchy(cfg.branching)
    ds = generate_synthetic_features(
        h, cfg.dim, cfg.level_scales, cfg.noise_scale, cfg.per_leaf, seed
    )
    selection = _make_split(h, cfg, seed)
    h_id, gt_map = split_from_selection(h, selection)

    id_leaf_names = {h_id.names[l] for l in h_id.leaves}
    names = np.array(h.names, dtype=object)[ds.y]
    is_id = np.isin(names, list(id_leaf_names))
    id_ds = ds.subset(is_id).relabel(h_id)
    train, val, test = (id_ds.select_split(s) for s in ("train", "val", "test"))

    ood_test = ds.subset(~is_id & (ds.split == "test"))
    ood_names = np.array(h.names, dtype=object)[ood_test.y]
    ood_gran = np.array([gt_map.granularity[n] for n in ood_names.tolist()], dtype=object)
    ood_gt = pool_ground_truth(h_id, h, ood_test.y, gt_map)

    train_cfg = TrainConfig(**{**cfg.train.__dict__, "seed": seed})
    models = {}
    for beta in cfg.betas:
        p0 = init_params(h_id, cfg.dim, cfg.trunk_layers, cfg.hidden, seed=seed)
        res = train_sgd(p0, h_id, train.X, train.y, train_cfg, LossConfig(1.0, beta), val.X, val.y)
        models[model_name(beta)] = res.params
    p0 = init_params(h_id, cfg.dim, cfg.trunk_layers, cfg.hidden, hierarchical=False, flat=True,
                     seed=seed)
    flat = train_sgd(p0, h_id, train.X, train.y, train_cfg, LossConfig(1.0, 0.0)).params

    aurocs, sweeps, chains, micro, outcomes = {}, {}, {}, {}, {}
    for name, params in models.items():
        nd_val, nd_id, nd_ood = (forward(params, h_id, d.X) for d in (val, test, ood_test))
        s_id, s_ood = path_scores(nd_id), path_scores(nd_ood)
        for metric in HIERARCHICAL_METRICS:
            a, b = s_id.metric(metric), s_ood.metric(metric)
            aurocs[(name, metric)] = granularity_auroc(
                a, {g: b[ood_gran == g] for g in GRANULARITIES}
            )
        P_val = node_path_probabilities(nd_val)
        P_id, P_ood = s_id.node_probability, s_ood.node_probability

        outcomes[(name, "id", "leaf")] = hierarchical_outcomes(s_id.predicted_leaf, test.y, h_id)
        outcomes[(name, "ood", "leaf")] = hierarchical_outcomes(s_ood.predicted_leaf, ood_gt, h_id)
        for mode in (NODE_WISE, PATH_WISE):
            table = calibrate_from_probabilities(P_val, h_id, val.y, cfg.roc_tnr, mode,
                                                 on_insufficient="fallback")
            outcomes[(name, "id", f"{mode}@{cfg.roc_tnr:g}")] = hierarchical_outcomes(
                infer_from_probabilities(P_id, h_id, table), test.y, h_id)
            outcomes[(name, "ood", f"{mode}@{cfg.roc_tnr:g}")] = hierarchical_outcomes(
                infer_from_probabilities(P_ood, h_id, table), ood_gt, h_id)

        points, preds = tnr_sweep(h_id, P_val, val.y, P_id, test.y, P_ood, ood_gt, cfg.tnr_grid,
                                  keep_predictions=True)
        sweeps[name] = points
        violations = 0
        for mode in (NODE_WISE, PATH_WISE):
            seqs = [preds[(mode, t)] for t in cfg.tnr_grid]
            for part in (0, 1):
                stacked = np.stack([s[part] for s in seqs], axis=1)
                violations += sum(not is_ancestor_chain(h_id, row) for row in stacked.tolist())
        chains[name] = violations

        path_t = calibrate_from_probabilities(P_val, h_id, val.y, cfg.roc_tnr, PATH_WISE)
        t = path_t.thresholds["*"]
        m_id = node_micro_aurocs(h_id, P_id, test.y)
        m_mix = node_micro_aurocs(h_id, P_id, test.y, P_ood, ood_gt)
        m_thr = node_micro_aurocs(h_id, P_id, test.y, P_ood, ood_gt, path_threshold=t)
        micro[name] = {n: (m_id[n], m_mix[n], m_thr[n]) for n in h_id.internals}

    msp_id, msp_ood = msp_score(flat, test.X), msp_score(flat, ood_test.X)
    aurocs[("flat", "msp")] = granularity_auroc(
        msp_id, {g: msp_ood[ood_gran == g] for g in GRANULARITIES}
    )
    leaves = np.array(h_id.leaves)
    outcomes[("flat", "id", "leaf")] = hierarchical_outcomes(
        leaves[np.argmax(flat_forward(flat, test.X), axis=1)], test.y, h_id)
    return SeedRun(seed, aurocs, sweeps, chains, micro, outcomes, len(h_id.internals))


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _f(v) -> str:
    return "" if v is None else repr(float(v))


def write_report(result: BenchResult, out_dir: str, cfg: BenchConfig) -> list:
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    rows = [["seed", "model", "metric", "fine", "medium", "coarse", "overall"]]
    for r in result.runs:
        for (model, metric), res in r.auroc.items():
            rows.append([r.seed, model, metric] + [_f(res[g]) for g in (*GRANULARITIES, "overall")])
    files["granularity_auroc.csv"] = _csv(rows)

    out_rows = []
    for r in result.runs:
        for (model, pool, setting), o in r.outcomes.items():
            out_rows.append((f"seed{r.seed}/{model}/{setting}", pool, o))
            files[f"confusion_{model}_{pool}_{setting.replace('@', '_tnr')}_seed{r.seed}.csv"] = (
                format_confusion(o.confusion)
            )
    files["outcomes.csv"] = format_outcomes(out_rows)

    for r in result.runs:
        for model, points in r.sweeps.items():
            files[f"sweep_{model}_seed{r.seed}.csv"] = format_sweep(points)

    rows = [["seed", "model", "node", "auroc_id", "auroc_id_ood", "auroc_id_ood_thresholded"]]
    for r in result.runs:
        for model, per_node in r.micro.items():
            for n, vals in per_node.items():
                rows.append([r.seed, model, n] + [_f(v) for v in vals])
    files["micro_roc.csv"] = _csv(rows)

    written = []
    for name in sorted(files):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(files[name])
        written.append(path)
    return written


def run_bench(seed: int = 7, out_dir: str | None = None, cfg: BenchConfig | None = None) -> BenchResult:
    """Run ``cfg.n_seeds`` consecutive seeds starting at ``seed``; write CSVs if ``out_dir``."""
    cfg = cfg or BenchConfig()
    runs = []
    for k in range(cfg.n_seeds):
        logger.info("bench seed %d", seed + k)
        runs.append(run_seed(seed + k, cfg))
    result = BenchResult(runs, [])
    if out_dir is not None:
        result.files = write_report(result, out_dir, cfg)
    return result
