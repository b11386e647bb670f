"""OOD scores on prediction paths.

Higher path probability and lower entropy both mean "more in-distribution".
Entropies are in nats.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .exceptions import ModelError
from .hierarchy import Hierarchy
from .model import (
    ModelParams,
    NodeDistributions,
    flat_forward,
    forward,
    layout_for,
    node_path_probabilities,
)


def node_entropies(nd: NodeDistributions) -> np.ndarray:
    """Entropy of each internal node's child distribution, ``(n_samples, |internals|)``."""
    lay = layout_for(nd.hierarchy)
    p = nd.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return np.add.reduceat(terms, lay.seg_start, axis=1)


@dataclass
class PathScore:
    """Scores of one sample's prediction path."""

    predicted_leaf: int
    path_probability: float
    h_mean: float
    h_min: float
    per_node: list  # (node, Pr(node | x), entropy of node's children or None for the leaf)


@dataclass
class PathScores:
    """Batch of path scores; arrays are indexed by sample."""

    predicted_leaf: np.ndarray
    path_probability: np.ndarray
    h_mean: np.ndarray
    h_min: np.ndarray
    node_probability: np.ndarray  # Pr(n | x) for every node
    entropy: np.ndarray  # per internal node
    hierarchy: Hierarchy

    def __len__(self):
        return len(self.predicted_leaf)

    def __getitem__(self, i) -> PathScore:
        h = self.hierarchy
        lay = layout_for(h)
        leaf = int(self.predicted_leaf[i])
        per_node = []
        for n in h.path(leaf):
            k = lay.internal_pos[n]
            ent = float(self.entropy[i, k]) if k >= 0 else None
            per_node.append((n, float(self.node_probability[i, n]), ent))
        return PathScore(
            leaf,
            float(self.path_probability[i]),
            float(self.h_mean[i]),
            float(self.h_min[i]),
            per_node,
        )

    def metric(self, name: str) -> np.ndarray:
        """Scores oriented so that larger means more in-distribution."""
        if name == "path_prob":
            return self.path_probability
        if name == "h_mean":
            return -self.h_mean
        if name == "h_min":
            return -self.h_min
        raise ValueError(f"unknown metric {name!r}")


HIERARCHICAL_METRICS = ("path_prob", "h_mean", "h_min")


def path_scores(nd: NodeDistributions) -> PathScores:
    """Path probability and path entropies of the most probable leaf.

    The entropy path is the set of strict ancestors of the predicted leaf,
    i.e. every internal node whose child choice lies on the path.
    """
    h = nd.hierarchy
    lay = layout_for(h)
    P = node_path_probabilities(nd)
    leaf_p = P[:, lay.leaves]
    pred = lay.leaves[np.argmax(leaf_p, axis=1)]
    ent = node_entropies(nd)
    mask = lay.anc_internal[pred]
    h_mean = np.where(mask, ent, 0.0).sum(axis=1) / mask.sum(axis=1)
    h_min = np.where(mask, ent, np.inf).min(axis=1)
    return PathScores(pred, P[np.arange(len(pred)), pred], h_mean, h_min, P, ent, h)


def score_samples(params: ModelParams, h: Hierarchy, X) -> PathScores:
    return path_scores(forward(params, h, X))


def score_sample(params: ModelParams, h: Hierarchy, x) -> PathScore:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ModelError("score_sample takes a single feature vector")
    return score_samples(params, h, x[None, :])[0]


def msp_score(params: ModelParams, X) -> np.ndarray:
    """Maximum softmax probability of the flat head."""
    return flat_forward(params, X).max(axis=1)


def node_path_probability(nd: NodeDistributions, n: int) -> np.ndarray:
    """``Pr(n | x)`` per sample: product of child probabilities from the root to ``n``."""
    h = nd.hierarchy
    lay = layout_for(h)
    out = np.ones(len(nd))
    for a in h.path(n)[1:]:
        out = out * nd.probs[:, lay.edge_of[a]]
    return out


def format_scores(scores: PathScores, msp: np.ndarray | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["sample_index", "predicted_leaf_name", "path_prob", "h_mean", "h_min"]
    if msp is not None:
        header.append("msp")
    w.writerow(header)
    names = scores.hierarchy.names
    for i in range(len(scores)):
        row = [
            i,
            names[scores.predicted_leaf[i]],
            repr(float(scores.path_probability[i])),
            repr(float(scores.h_mean[i])),
            repr(float(scores.h_min[i])),
        ]
        if msp is not None:
            row.append(repr(float(msp[i])))
        w.writerow(row)
    return buf.getvalue()
