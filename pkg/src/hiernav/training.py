"""Weighted hierarchical losses, analytic gradients and a seeded SGD trainer."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .exceptions import ModelError, TrainingDivergedError
from .hierarchy import Hierarchy
from .model import (
    ModelParams,
    NodeDistributions,
    check_compatible,
    flat_forward,
    layout_for,
    predict_leaf,
    segment_log_softmax,
    segment_softmax,
    trunk_forward,
    forward,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
_LOG_FLOOR = np.log(PROB_FLOOR)


def node_weights(h: Hierarchy) -> np.ndarray:
    """Fraction of all leaves lying below each node (root gets 1)."""
    n_leaves = len(h.leaves)
    return np.array([h.n_leaves_below(n) / n_leaves for n in range(len(h))])


@dataclass
class LossConfig:
    """``alpha`` scales the path cross-entropy, ``beta`` the off-path uniformity term.

    ``node_weights`` defaults to :func:`node_weights` of the tree.
    """

    alpha: float = 1.0
    beta: float = 0.0
    node_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")

    def weights_for(self, h: Hierarchy) -> np.ndarray:
        if self.node_weights is None:
            return node_weights(h)
        w = np.asarray(self.node_weights, dtype=np.float64)
        if w.shape != (len(h),):
            raise ValueError("node_weights must have one entry per node")
        return w


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_milestones: tuple = (10, 20)
    seed: int = 0

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if min(self.learning_rate, self.momentum, self.weight_decay) < 0:
            raise ValueError("learning_rate, momentum and weight_decay must be nonnegative")
        if not self.lr_decay_factor > 0:
            raise ValueError("lr_decay_factor must be positive")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ValueError("lr_milestones must be sorted ascending")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for the 0-based ``epoch``."""
        k = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.learning_rate * self.lr_decay_factor**k


class _Targets:
    """Per-leaf edge tables for the two loss terms."""

    def __init__(self, h: Hierarchy, weights: np.ndarray):
        lay = layout_for(h)
        leaves = lay.leaves
        on = lay.on_path[leaves]  # edge leads towards the leaf
        seg_on = lay.anc_internal[leaves][:, lay.edge_seg]  # edge's parent is on the path
        self.onehot = on.astype(np.float64)
        self.on_mask = seg_on.astype(np.float64)
        self.off_mask = (~seg_on).astype(np.float64)
        self.edge_weight = weights[lay.edge_parent]
        self.uniform = 1.0 / lay.seg_size[lay.edge_seg]


@lru_cache(maxsize=32)
def _targets(h: Hierarchy, weights_key: bytes) -> _Targets:
    return _Targets(h, np.frombuffer(weights_key, dtype=np.float64))


def _targets_for(h: Hierarchy, cfg: LossConfig) -> _Targets:
    return _targets(h, cfg.weights_for(h).tobytes())


def _leaf_rows(h: Hierarchy, y) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    rows = layout_for(h).leaf_pos[y]
    if np.any(rows < 0):
        bad = int(y[np.argmin(rows)])
        raise ModelError(f"label {bad} is not a leaf")
    return rows


def _neg_log(nd: NodeDistributions) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return -np.log(np.maximum(nd.probs, PROB_FLOOR))


def soft_loss(nd: NodeDistributions, y, cfg: LossConfig | None = None) -> float:
    """Batch mean of the node-weighted cross-entropy along each label's path."""
    cfg = cfg or LossConfig()
    h = nd.hierarchy
    t = _targets_for(h, cfg)
    rows = _leaf_rows(h, y)
    per_sample = (_neg_log(nd) * t.onehot[rows] * t.edge_weight).sum(axis=1)
    return float(per_sample.mean())


def other_loss(nd: NodeDistributions, y) -> float:
    """Batch mean of the cross-entropy from uniform at every off-path internal node."""
    h = nd.hierarchy
    t = _targets_for(h, LossConfig())
    rows = _leaf_rows(h, y)
    per_sample = (_neg_log(nd) * t.off_mask[rows] * t.uniform).sum(axis=1)
    return float(per_sample.mean())


def total_loss(nd: NodeDistributions, y, cfg: LossConfig) -> float:
    total = 0.0
    if cfg.alpha:
        total += cfg.alpha * soft_loss(nd, y, cfg)
    if cfg.beta:
        total += cfg.beta * other_loss(nd, y)
    return total


def loss_and_grad(
    params: ModelParams,
    h: Hierarchy,
    X: np.ndarray,
    y,
    cfg: LossConfig,
    weight_decay: float = 0.0,
) -> tuple[float, ModelParams]:
    """Batch-mean loss and its exact gradient with respect to every parameter.

    The loss is ``alpha * soft + beta * other`` on the hierarchical head plus
    plain cross-entropy on the flat head when one is present.  The returned
    gradient includes ``weight_decay * theta``; the returned loss does not
    include the decay penalty.
    """
    check_compatible(params, h)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    rows = _leaf_rows(h, y)
    m = X.shape[0]
    if m == 0:
        raise ValueError("empty batch")
    acts = trunk_forward(params, X)
    feats = acts[-1]
    grads = params.zeros_like()
    d_feats = np.zeros_like(feats)
    loss = 0.0

    if params.has_heads:
        lay = layout_for(h)
        t = _targets_for(h, cfg)
        z = feats @ params.head_W + params.head_b
        p = segment_softmax(z, lay)
        neg_log = -np.maximum(segment_log_softmax(z, lay), _LOG_FLOOR)
        g = np.zeros_like(p)
        if cfg.alpha:
            w = t.edge_weight
            loss += cfg.alpha * float((neg_log * t.onehot[rows] * w).sum() / m)
            g += cfg.alpha * w * (t.on_mask[rows] * p - t.onehot[rows])
        if cfg.beta:
            off = t.off_mask[rows]
            loss += cfg.beta * float((neg_log * off * t.uniform).sum() / m)
            g += cfg.beta * off * (p - t.uniform)
        g /= m
        grads.head_W = feats.T @ g
        grads.head_b = g.sum(axis=0)
        d_feats += g @ params.head_W.T

    if params.has_flat:
        z = feats @ params.flat_W + params.flat_b
        z = z - z.max(axis=1, keepdims=True)
        log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss += float(-log_p[np.arange(m), rows].sum() / m)
        g = np.exp(log_p)
        g[np.arange(m), rows] -= 1.0
        g /= m
        grads.flat_W = feats.T @ g
        grads.flat_b = g.sum(axis=0)
        d_feats += g @ params.flat_W.T

    grad_trunk = []
    d = d_feats
    for i in range(len(params.trunk) - 1, -1, -1):
        W, _ = params.trunk[i]
        d = d * (acts[i + 1] > 0)
        grad_trunk.append((acts[i].T @ d, d.sum(axis=0)))
        if i:
            d = d @ W.T
    grads.trunk = grad_trunk[::-1]

    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss}")
    if weight_decay:
        grads = grads.with_arrays(
            [g + weight_decay * a for g, a in zip(grads.arrays(), params.arrays())]
        )
    return loss, grads


def backward(params, X, y, cfg: LossConfig, h: Hierarchy, weight_decay: float = 0.0) -> ModelParams:
    return loss_and_grad(params, h, X, y, cfg, weight_decay)[1]


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    params: ModelParams
    log: list = field(default_factory=list)


def accuracy(params: ModelParams, h: Hierarchy, X, y) -> float:
    if len(y) == 0:
        return float("nan")
    if params.has_heads:
        pred = predict_leaf(forward(params, h, X))
    else:
        pred = layout_for(h).leaves[np.argmax(flat_forward(params, X), axis=1)]
    return float(np.mean(pred == np.asarray(y)))


def train_sgd(
    params0: ModelParams,
    h: Hierarchy,
    X,
    y,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    X_val=None,
    y_val=None,
) -> TrainResult:
    """Minibatch SGD with momentum, weight decay and step learning-rate decay.

    Samples are reshuffled every epoch from a generator seeded with
    ``cfg.seed``, so identical inputs give bit-identical parameters.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("training set is empty")
    params = params0.copy()
    theta = params.arrays()
    velocity = [np.zeros_like(a) for a in theta]
    rng = np.random.default_rng(cfg.seed)
    log = []
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grad(params, h, X[idx], y[idx], loss_cfg, cfg.weight_decay)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"epoch {epoch + 1}: non-finite loss")
            total += loss * len(idx)
            seen += len(idx)
            for a, v, g in zip(theta, velocity, grads.arrays()):
                v *= cfg.momentum
                v += g
                a -= lr * v
        if not params.is_finite():
            raise TrainingDivergedError(f"epoch {epoch + 1}: parameters became non-finite")
        val_acc = (
            accuracy(params, h, X_val, y_val) if X_val is not None and len(X_val) else float("nan")
        )
        log.append(EpochLog(epoch + 1, lr, total / seen, val_acc))
        logger.debug("epoch %d lr=%g loss=%.6f val_acc=%.4f", epoch + 1, lr, total / seen, val_acc)
    return TrainResult(params, log)


def format_training_log(log) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "lr", "train_loss", "val_accuracy"])
    for e in log:
        w.writerow([e.epoch, repr(e.lr), repr(e.train_loss), repr(e.val_accuracy)])
    return buf.getvalue()
