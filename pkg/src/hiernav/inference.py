"""TNR threshold calibration and coarse-to-fine stopping at inference time."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import CalibrationError, HierNavError
from .hierarchy import Hierarchy
from .model import ModelParams, NodeDistributions, forward, layout_for, node_path_probabilities

NODE_WISE = "node_wise"
PATH_WISE = "path_wise"
MODES = (NODE_WISE, PATH_WISE)
GLOBAL_KEY = "*"


def _mode(mode: str) -> str:
    aliases = {"node": NODE_WISE, "path": PATH_WISE, NODE_WISE: NODE_WISE, PATH_WISE: PATH_WISE}
    try:
        return aliases[mode]
    except KeyError:
        raise HierNavError(f"unknown threshold mode {mode!r}") from None


# ---------------------------------------------------------------------------
# ROC


def _roc_counts(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative pair")
    order = np.argsort(-scores, kind="stable")
    s, lab = scores[order], labels[order]
    # last index of each group of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(lab)[ends]
    fp = np.cumsum(~lab)[ends]
    return s[ends], tp, fp, n_pos, n_neg


def node_micro_roc(scores, labels) -> np.ndarray:
    """ROC over pooled (score, is_positive) pairs.

    Returns rows ``(fpr, tpr, threshold)`` starting at ``(0, 0, inf)`` and
    ending at ``(1, 1, min score)``; tied scores move together.
    """
    thr, tp, fp, n_pos, n_neg = _roc_counts(scores, labels)
    return np.column_stack(
        [np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos], np.r_[np.inf, thr]]
    )


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under :func:`node_micro_roc`, computed in integer counts."""
    _, tp, fp, n_pos, n_neg = _roc_counts(scores, labels)
    tp = np.r_[0, tp].astype(object)
    fp = np.r_[0, fp].astype(object)
    twice_area = sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1]))
    return int(twice_area) / (2 * n_pos * n_neg)


# ---------------------------------------------------------------------------
# calibration pairs


def calibration_pairs(P: np.ndarray, h: Hierarchy, gt, node: int):
    """One-vs-rest pairs at internal ``node`` for samples whose path passes through it.

    ``P`` holds ``Pr(n | x)`` per sample and node; ``gt`` is each sample's
    ground-truth node.  Each passing sample contributes one pair per child:
    the child's path probability, positive iff the child lies on the path to
    the ground truth.  A sample whose ground truth is ``node`` itself (an OOD
    sample mapped there) contributes only negatives.
    """
    lay = layout_for(h)
    gt = np.asarray(gt, dtype=np.int64)
    k = lay.internal_pos[node]
    through = lay.anc_internal[gt, k] | (gt == node)
    children = np.array(h.children[node])
    scores = P[np.ix_(through, children)]
    sel = gt[through]
    labels = lay.on_path[sel][:, lay.edge_of[children]]
    return scores.ravel(), labels.ravel()


def tnr_threshold(negatives, tnr_target: float) -> float:
    """Smallest threshold rejecting at least ``tnr_target`` of the negatives.

    A score passes when ``score >= threshold``; the result is clipped to 1.
    """
    neg = np.sort(np.asarray(negatives, dtype=np.float64))
    if neg.size == 0:
        raise ValueError("no negative scores")
    k = max(1, math.ceil(tnr_target * neg.size - 1e-9))
    return float(min(np.nextafter(neg[k - 1], np.inf), 1.0))


@dataclass
class ThresholdTable:
    mode: str
    tnr_target: float
    thresholds: dict  # node name -> threshold, or {"*": threshold}
    score_kind: str = "path_probability"
    fallback_nodes: tuple = field(default=())

    def __post_init__(self):
        self.mode = _mode(self.mode)
        if not 0.0 < self.tnr_target < 1.0:
            raise HierNavError("tnr_target must lie in (0, 1)")
        if self.score_kind != "path_probability":
            raise HierNavError(f"unsupported score kind {self.score_kind!r}")
        for name, t in self.thresholds.items():
            if not 0.0 <= t <= 1.0:
                raise HierNavError(f"threshold for {name!r} outside [0, 1]")
        if self.mode == PATH_WISE and set(self.thresholds) != {GLOBAL_KEY}:
            raise HierNavError("path-wise tables hold a single '*' threshold")

    def edge_thresholds(self, h: Hierarchy) -> np.ndarray:
        """Threshold applied when stepping into each node (indexed by node id)."""
        out = np.zeros(len(h))
        if self.mode == PATH_WISE:
            out[1:] = self.thresholds[GLOBAL_KEY]
            return out
        missing = [h.names[n] for n in h.internals if h.names[n] not in self.thresholds]
        if missing:
            raise HierNavError(f"threshold table lacks nodes {missing[:5]}")
        extra = set(self.thresholds) - {h.names[n] for n in h.internals}
        if extra:
            raise HierNavError(f"threshold table names unknown internal nodes {sorted(extra)[:5]}")
        for n in range(1, len(h)):
            out[n] = self.thresholds[h.names[h.parents[n]]]
        return out


def calibrate_from_probabilities(
    P: np.ndarray,
    h: Hierarchy,
    y,
    tnr_target: float,
    mode: str = NODE_WISE,
    on_insufficient: str = "raise",
) -> ThresholdTable:
    """Thresholds from precomputed node path probabilities ``P`` of ID samples."""
    mode = _mode(mode)
    if not 0.0 < tnr_target < 1.0:
        raise HierNavError("tnr_target must lie in (0, 1)")
    y = np.asarray(y, dtype=np.int64)
    negatives = {}
    for n in h.internals:
        s, lab = calibration_pairs(P, h, y, n)
        negatives[n] = s[~lab]
    pooled = np.concatenate(list(negatives.values()))
    if pooled.size == 0:
        raise CalibrationError("no calibration pairs at any node", [h.names[0]])
    global_t = tnr_threshold(pooled, tnr_target)
    if mode == PATH_WISE:
        return ThresholdTable(mode, tnr_target, {GLOBAL_KEY: global_t})

    thresholds, short = {}, []
    for n in h.internals:
        if negatives[n].size:
            thresholds[h.names[n]] = tnr_threshold(negatives[n], tnr_target)
        else:
            short.append(h.names[n])
            thresholds[h.names[n]] = global_t
    if short and on_insufficient == "raise":
        raise CalibrationError(f"no calibration pairs at nodes {short[:5]}", short)
    return ThresholdTable(mode, tnr_target, thresholds, fallback_nodes=tuple(short))


def calibrate(
    params: ModelParams,
    h: Hierarchy,
    X_val,
    y_val,
    tnr_target: float,
    mode: str = NODE_WISE,
    on_insufficient: str = "raise",
) -> ThresholdTable:
    """Per-node (or pooled) TNR thresholds from ID validation samples.

    With ``on_insufficient="fallback"`` nodes without negative pairs get the
    pooled threshold and are listed in ``fallback_nodes``.
    """
    P = node_path_probabilities(forward(params, h, X_val))
    return calibrate_from_probabilities(P, h, y_val, tnr_target, mode, on_insufficient)


def infer_from_probabilities(P: np.ndarray, h: Hierarchy, table: ThresholdTable) -> np.ndarray:
    """Deepest node on the predicted path whose path probability meets its threshold.

    Walks the most probable leaf's path from the root; on the first node
    whose ``Pr(n | x)`` falls below its threshold, returns that node's
    parent.  Returns the leaf when every step passes and the root when the
    first step fails.
    """
    lay = layout_for(h)
    thr = table.edge_thresholds(h)
    pred_pos = np.argmax(P[:, lay.leaves], axis=1)
    paths = lay.leaf_paths[pred_pos]  # padded with -1
    valid = paths >= 0
    safe = np.where(valid, paths, 0)
    rows = np.arange(P.shape[0])[:, None]
    passed = (P[rows, safe] >= thr[safe]) | ~valid
    passed[:, 0] = True  # root always passes
    # index of the first failing step; path length if none fails
    fail = np.where(passed.all(axis=1), valid.sum(axis=1), np.argmin(passed, axis=1))
    return paths[np.arange(P.shape[0]), fail - 1]


def hierarchical_infer(params: ModelParams, h: Hierarchy, X, table: ThresholdTable) -> np.ndarray:
    P = node_path_probabilities(forward(params, h, X))
    return infer_from_probabilities(P, h, table)


def infer_from_distributions(nd: NodeDistributions, table: ThresholdTable) -> np.ndarray:
    return infer_from_probabilities(node_path_probabilities(nd), nd.hierarchy, table)


# ---------------------------------------------------------------------------
# files


def format_threshold_table(table: ThresholdTable, h: Hierarchy | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["node_name", "threshold", "tnr_target", "mode", "score_kind"])
    names = list(table.thresholds)
    if h is not None and table.mode == NODE_WISE:
        names.sort(key=h.node_id)
    for name in names:
        w.writerow([name, repr(float(table.thresholds[name])), repr(float(table.tnr_target)),
                    table.mode, table.score_kind])
    return buf.getvalue()


def parse_threshold_table(text: str) -> ThresholdTable:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["node_name", "threshold", "tnr_target", "mode", "score_kind"]:
        raise HierNavError("line 1: bad threshold table header")
    thresholds, tnr, mode, kind = {}, None, None, None
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != 5:
            raise HierNavError(f"line {lineno}: expected 5 fields")
        try:
            t, r = float(row[1]), float(row[2])
        except ValueError:
            raise HierNavError(f"line {lineno}: malformed number") from None
        if tnr is None:
            tnr, mode, kind = r, row[3], row[4]
        elif (r, row[3], row[4]) != (tnr, mode, kind):
            raise HierNavError(f"line {lineno}: inconsistent tnr_target/mode/score_kind")
        thresholds[row[0]] = t
    if tnr is None:
        raise HierNavError("threshold table is empty")
    return ThresholdTable(mode, tnr, thresholds, kind)
