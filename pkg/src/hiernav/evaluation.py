"""AUROC by granularity, hierarchy-aware outcomes and TNR sweeps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .exceptions import HierNavError
from .hierarchy import GRANULARITIES, Hierarchy
from .inference import (
    MODES,
    calibrate_from_probabilities,
    calibration_pairs,
    infer_from_probabilities,
    roc_auc,
)

HIGHER_IS_ID = "higher_is_id"
LOWER_IS_ID = "lower_is_id"


def auroc(id_scores, ood_scores, direction: str = HIGHER_IS_ID) -> float:
    """Probability that a random ID score outranks a random OOD score (ties count 1/2).

    Sort-based; the count is kept in integers so the result equals the
    pairwise statistic exactly.
    """
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("auroc needs nonempty ID and OOD score lists")
    if direction == LOWER_IS_ID:
        a, b = -a, -b
    elif direction != HIGHER_IS_ID:
        raise ValueError(f"unknown direction {direction!r}")
    s = np.concatenate([a, b])
    is_id = np.r_[np.ones(a.size, bool), np.zeros(b.size, bool)]
    order = np.argsort(s, kind="stable")
    s, is_id = s[order], is_id[order]
    starts = np.r_[0, np.nonzero(np.diff(s))[0] + 1]
    id_in = np.add.reduceat(is_id.astype(np.int64), starts)
    ood_in = np.add.reduceat((~is_id).astype(np.int64), starts)
    ood_below = np.cumsum(ood_in) - ood_in
    twice = 2 * int(np.dot(id_in, ood_below)) + int(np.dot(id_in, ood_in))
    return twice / (2 * a.size * b.size)


def granularity_auroc(
    id_scores, ood_pools: Mapping[str, Sequence[float]], direction: str = HIGHER_IS_ID
) -> dict:
    """AUROC of each OOD pool against the ID pool plus ``overall``; empty pools map to None."""
    out = {}
    pooled = []
    for g in GRANULARITIES:
        pool = np.asarray(ood_pools.get(g, ()), dtype=np.float64)
        out[g] = auroc(id_scores, pool, direction) if pool.size else None
        pooled.append(pool)
    allood = np.concatenate(pooled)
    out["overall"] = auroc(id_scores, allood, direction) if allood.size else None
    return out


# ---------------------------------------------------------------------------
# hierarchy-aware outcomes

ERROR_MODES = ("correct", "standard_error", "under_prediction", "over_prediction")


@dataclass
class Outcomes:
    n: int
    accuracy: float
    ancestor_accuracy: float  # pred is an ancestor-or-equal of gt
    avg_distance: float
    confusion: np.ndarray  # [gt_dist_to_lca, pred_dist_to_lca]
    modes: dict = field(default_factory=dict)


def hierarchical_outcomes(preds, gts, h: Hierarchy, size: int | None = None) -> Outcomes:
    """Exact-match accuracy, mean tree distance, distance confusion and error modes."""
    preds = np.asarray(preds, dtype=np.int64)
    gts = np.asarray(gts, dtype=np.int64)
    if preds.shape != gts.shape:
        raise HierNavError("preds and gts differ in length")
    depth = np.array(h.depth)
    lcas = np.array([h.lca(p, g) for p, g in zip(preds.tolist(), gts.tolist())], dtype=np.int64)
    pd = depth[preds] - depth[lcas] if preds.size else np.zeros(0, np.int64)
    gd = depth[gts] - depth[lcas] if preds.size else np.zeros(0, np.int64)
    size = size or h.max_depth + 1
    conf = np.zeros((size, size), dtype=np.int64)
    np.add.at(conf, (gd, pd), 1)
    modes = {
        "correct": int(np.sum((pd == 0) & (gd == 0))),
        "standard_error": int(np.sum((pd > 0) & (gd > 0))),
        "under_prediction": int(np.sum((pd == 0) & (gd > 0))),
        "over_prediction": int(np.sum((pd > 0) & (gd == 0))),
    }
    n = preds.size
    nan = float("nan")
    return Outcomes(
        n=n,
        accuracy=float(np.mean(preds == gts)) if n else nan,
        ancestor_accuracy=float(np.mean(pd == 0)) if n else nan,
        avg_distance=float(np.mean(pd + gd)) if n else nan,
        confusion=conf,
        modes=modes,
    )


# ---------------------------------------------------------------------------
# TNR sweeps


@dataclass
class SweepPoint:
    tnr: float
    mode: str
    id_acc: float
    ood_acc: float
    id_hdist: float
    ood_hdist: float
    flagged: tuple = ()


def tnr_sweep(
    h: Hierarchy,
    P_val: np.ndarray,
    y_val,
    P_id: np.ndarray,
    gt_id,
    P_ood: np.ndarray,
    gt_ood,
    tnr_grid: Sequence[float],
    modes: Sequence[str] = MODES,
    keep_predictions: bool = False,
):
    """Recalibrate at each TNR and measure ID/OOD accuracy and hierarchy distance.

    ``P_*`` are node path probability matrices.  Returns the sweep points and,
    if requested, the per-grid-point predictions keyed by ``(mode, tnr)``.
    """
    grid = [float(t) for t in tnr_grid]
    if any(not 0 < t < 1 for t in grid) or grid != sorted(grid):
        raise HierNavError("TNR grid must be sorted values in (0, 1)")
    points, preds = [], {}
    for mode in modes:
        for t in grid:
            table = calibrate_from_probabilities(P_val, h, y_val, t, mode, on_insufficient="fallback")
            pid = infer_from_probabilities(P_id, h, table)
            pood = infer_from_probabilities(P_ood, h, table) if len(P_ood) else np.zeros(0, np.int64)
            oid = hierarchical_outcomes(pid, gt_id, h)
            ood = hierarchical_outcomes(pood, gt_ood, h)
            points.append(
                SweepPoint(t, table.mode, oid.accuracy, ood.accuracy, oid.avg_distance,
                           ood.avg_distance, table.fallback_nodes)
            )
            if keep_predictions:
                preds[(table.mode, t)] = (pid, pood)
    return (points, preds) if keep_predictions else points


def is_ancestor_chain(h: Hierarchy, seq) -> bool:
    """True if each element is an ancestor-or-equal of the one before it."""
    return all(h.is_ancestor_or_equal(b, a) for a, b in zip(seq, seq[1:]))


# ---------------------------------------------------------------------------
# micro-ROC analysis


def node_micro_aurocs(
    h: Hierarchy,
    P_id: np.ndarray,
    gt_id,
    P_ood: np.ndarray | None = None,
    gt_ood=None,
    path_threshold: float | None = None,
) -> dict:
    """Micro-averaged AUROC of every internal node's one-vs-rest pairs.

    OOD samples, if given, contribute pairs at every node on the path to
    their mapped ground truth.  With ``path_threshold`` only samples whose
    ``Pr(node | x)`` reaches the threshold contribute at that node.  Nodes
    without both positive and negative pairs map to None.
    """
    P = P_id if P_ood is None else np.vstack([P_id, P_ood])
    gt = np.asarray(gt_id, dtype=np.int64)
    if P_ood is not None:
        gt = np.r_[gt, np.asarray(gt_ood, dtype=np.int64)]
    out = {}
    for n in h.internals:
        keep = np.ones(len(gt), bool) if path_threshold is None else P[:, n] >= path_threshold
        s, lab = calibration_pairs(P[keep], h, gt[keep], n)
        out[n] = roc_auc(s, lab) if 0 < lab.sum() < lab.size else None
    return out


# ---------------------------------------------------------------------------
# report files


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def format_confusion(conf: np.ndarray) -> str:
    """CSV grid: rows are gt distance to the LCA, columns prediction distance."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gt_dist\\pred_dist"] + list(range(conf.shape[1])))
    for i, row in enumerate(conf.tolist()):
        w.writerow([i] + row)
    return buf.getvalue()


def format_sweep(points: Sequence[SweepPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tnr", "mode", "id_acc", "ood_acc", "id_hdist", "ood_hdist"])
    for p in points:
        w.writerow([repr(p.tnr), p.mode, _fmt(p.id_acc), _fmt(p.ood_acc), _fmt(p.id_hdist),
                    _fmt(p.ood_hdist)])
    return buf.getvalue()


def format_outcomes(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "pool", "n", "accuracy", "ancestor_accuracy", "avg_hdist", *ERROR_MODES])
    for label, pool, o in rows:
        w.writerow([label, pool, o.n, _fmt(o.accuracy), _fmt(o.ancestor_accuracy),
                    _fmt(o.avg_distance), *[o.modes[m] for m in ERROR_MODES]])
    return buf.getvalue()


def pool_ground_truth(h_id: Hierarchy, h_full: Hierarchy, y_full, gt_map) -> np.ndarray:
    """ID-tree ground-truth node for each OOD label in the full tree."""
    return np.array(
        [h_id.node_id(gt_map.target(h_full.names[l])) for l in np.asarray(y_full).tolist()],
        dtype=np.int64,
    )
