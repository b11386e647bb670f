"""Hierarchical softmax head, flat softmax baseline and checkpoint files.

All internal-node heads are stored as one concatenated affine map whose
output columns are the tree's edges, grouped by parent: column ``e`` holds
the logit for moving from ``edge_parent[e]`` to ``edge_child[e]``.  Each
parent's children occupy a contiguous block, so per-node softmaxes become
segment reductions.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .exceptions import ModelError
from .hierarchy import Hierarchy

CHECKPOINT_VERSION = 1


class HeadLayout:
    """Index tables mapping tree nodes onto the concatenated head outputs."""

    def __init__(self, h: Hierarchy):
        self.hierarchy = h
        self.internals = np.array(h.internals, dtype=np.int64)
        self.leaves = np.array(h.leaves, dtype=np.int64)
        parent, child, start, size = [], [], [], []
        for n in h.internals:
            start.append(len(child))
            size.append(len(h.children[n]))
            for c in h.children[n]:
                parent.append(n)
                child.append(c)
        self.edge_parent = np.array(parent, dtype=np.int64)
        self.edge_child = np.array(child, dtype=np.int64)
        self.seg_start = np.array(start, dtype=np.int64)
        self.seg_size = np.array(size, dtype=np.int64)
        self.n_edges = len(child)
        # edge feeding each node (root has none)
        self.edge_of = np.full(len(h), -1, dtype=np.int64)
        self.edge_of[self.edge_child] = np.arange(self.n_edges)
        self.internal_pos = np.full(len(h), -1, dtype=np.int64)
        self.internal_pos[self.internals] = np.arange(len(self.internals))
        self.leaf_pos = np.full(len(h), -1, dtype=np.int64)
        self.leaf_pos[self.leaves] = np.arange(len(self.leaves))
        # segment id of every edge, i.e. position of its parent among internals
        self.edge_seg = self.internal_pos[self.edge_parent]

        n = len(h)
        # on_path[v, e]: edge e lies on the root->v path
        on_path = np.zeros((n, self.n_edges), dtype=bool)
        # anc_internal[v, k]: internal node k is a strict ancestor of v
        anc_internal = np.zeros((n, len(self.internals)), dtype=bool)
        for v in range(n):
            for a in h.path(v)[1:]:
                on_path[v, self.edge_of[a]] = True
            for a in h.ancestors(v):
                anc_internal[v, self.internal_pos[a]] = True
        self.on_path = on_path
        self.anc_internal = anc_internal
        # nodes grouped by depth for level-wise products
        self.by_depth = [
            np.array([v for v in range(n) if h.depth[v] == d], dtype=np.int64)
            for d in range(h.max_depth + 1)
        ]
        # padded root->leaf paths, one row per leaf
        width = h.max_depth + 1
        self.leaf_paths = np.full((len(self.leaves), width), -1, dtype=np.int64)
        for i, leaf in enumerate(h.leaves):
            p = h.path(leaf)
            self.leaf_paths[i, : len(p)] = p


@lru_cache(maxsize=32)
def layout_for(h: Hierarchy) -> HeadLayout:
    return HeadLayout(h)


def segment_softmax(logits: np.ndarray, layout: HeadLayout) -> np.ndarray:
    """Per-internal-node softmax over concatenated logits (rows = samples)."""
    starts = layout.seg_start
    mx = np.maximum.reduceat(logits, starts, axis=1)
    z = np.exp(logits - mx[:, layout.edge_seg])
    return z / np.add.reduceat(z, starts, axis=1)[:, layout.edge_seg]


def segment_log_softmax(logits: np.ndarray, layout: HeadLayout) -> np.ndarray:
    starts = layout.seg_start
    mx = np.maximum.reduceat(logits, starts, axis=1)
    shifted = logits - mx[:, layout.edge_seg]
    lse = np.log(np.add.reduceat(np.exp(shifted), starts, axis=1))
    return shifted - lse[:, layout.edge_seg]


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    """Shared fully connected trunk plus hierarchical and/or flat heads.

    ``trunk`` is a list of ``(W, b)`` with ``W`` of shape ``(in, out)``,
    each followed by a rectifier.  ``head_W`` (``hidden x n_edges``) and
    ``head_b`` hold every internal node's head side by side in
    :class:`HeadLayout` column order; ``flat_W``/``flat_b`` map onto the
    leaves in id order.
    """

    trunk: list = field(default_factory=list)
    head_W: np.ndarray | None = None
    head_b: np.ndarray | None = None
    flat_W: np.ndarray | None = None
    flat_b: np.ndarray | None = None

    @property
    def input_dim(self) -> int:
        if self.trunk:
            return self.trunk[0][0].shape[0]
        W = self.head_W if self.head_W is not None else self.flat_W
        return W.shape[0]

    @property
    def has_heads(self) -> bool:
        return self.head_W is not None

    @property
    def has_flat(self) -> bool:
        return self.flat_W is not None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in self.trunk:
            out += [W, b]
        for a in (self.head_W, self.head_b, self.flat_W, self.flat_b):
            if a is not None:
                out.append(a)
        return out

    def with_arrays(self, arrays) -> "ModelParams":
        it = iter(arrays)
        trunk = [(next(it), next(it)) for _ in self.trunk]
        kw = {}
        for name in ("head_W", "head_b", "flat_W", "flat_b"):
            kw[name] = next(it) if getattr(self, name) is not None else None
        return ModelParams(trunk, **kw)

    def copy(self) -> "ModelParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "ModelParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def head(self, h: Hierarchy, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Weight and bias views of internal node ``n``'s head."""
        lay = layout_for(h)
        k = lay.internal_pos[n]
        if k < 0:
            raise ModelError(f"node {h.names[n]!r} is a leaf and has no head")
        sl = slice(lay.seg_start[k], lay.seg_start[k] + lay.seg_size[k])
        return self.head_W[:, sl], self.head_b[sl]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def equal(self, other: "ModelParams") -> bool:
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(
            x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(a, b)
        )


def default_hidden_width(h: Hierarchy) -> int:
    return max(64, 2 * len(h.leaves))


def init_params(
    h: Hierarchy,
    input_dim: int,
    trunk_layers: int = 1,
    hidden: int | None = None,
    hierarchical: bool = True,
    flat: bool = False,
    seed: int = 0,
) -> ModelParams:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    if not 0 <= trunk_layers <= 3:
        raise ModelError("trunk_layers must be between 0 and 3")
    if not (hierarchical or flat):
        raise ModelError("need a hierarchical head, a flat head, or both")
    hidden = default_hidden_width(h) if hidden is None else int(hidden)
    rng = np.random.default_rng(seed)

    def affine(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return (
            rng.uniform(-bound, bound, (fan_in, fan_out)),
            rng.uniform(-bound, bound, fan_out),
        )

    trunk, width = [], int(input_dim)
    for _ in range(trunk_layers):
        trunk.append(affine(width, hidden))
        width = hidden
    params = ModelParams(trunk)
    if hierarchical:
        params.head_W, params.head_b = affine(width, layout_for(h).n_edges)
    if flat:
        params.flat_W, params.flat_b = affine(width, len(h.leaves))
    return params


def check_compatible(params: ModelParams, h: Hierarchy) -> None:
    lay = layout_for(h)
    if params.has_heads and params.head_W.shape[1] != lay.n_edges:
        raise ModelError(
            f"model has {params.head_W.shape[1]} head outputs, hierarchy has {lay.n_edges} edges"
        )
    if params.has_flat and params.flat_W.shape[1] != len(h.leaves):
        raise ModelError(
            f"flat head has {params.flat_W.shape[1]} outputs, hierarchy has {len(h.leaves)} leaves"
        )


# ---------------------------------------------------------------------------
# forward pass


def _as_batch(params: ModelParams, X) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ModelError(f"expected inputs of dimension {params.input_dim}, got {X.shape[-1]}")
    if not np.all(np.isfinite(X)):
        raise ModelError("non-finite input features")
    return X, single


def trunk_forward(params: ModelParams, X: np.ndarray) -> list[np.ndarray]:
    """Activations after every trunk layer; element 0 is the input itself."""
    acts = [X]
    for W, b in params.trunk:
        acts.append(np.maximum(acts[-1] @ W + b, 0.0))
    return acts


@dataclass
class NodeDistributions:
    """Child distributions of every internal node, for a batch of samples.

    ``probs`` has one row per sample and one column per edge (see
    :class:`HeadLayout`).
    """

    probs: np.ndarray
    hierarchy: Hierarchy

    def __post_init__(self):
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))

    @classmethod
    def from_dict(cls, h: Hierarchy, dists: dict) -> "NodeDistributions":
        """Single-sample distributions from ``{internal node: probabilities}``."""
        lay = layout_for(h)
        probs = np.full((1, lay.n_edges), np.nan)
        for n in h.internals:
            if n not in dists:
                raise ModelError(f"missing distribution for node {h.names[n]!r}")
            p = np.asarray(dists[n], dtype=np.float64)
            if p.shape != (len(h.children[n]),):
                raise ModelError(f"node {h.names[n]!r}: expected {len(h.children[n])} probabilities")
            k = lay.internal_pos[n]
            probs[0, lay.seg_start[k] : lay.seg_start[k] + len(p)] = p
        return cls(probs, h)

    def __len__(self):
        return self.probs.shape[0]

    def node(self, n: int) -> np.ndarray:
        """``(n_samples, |children|)`` distribution of internal node ``n``."""
        lay = layout_for(self.hierarchy)
        k = lay.internal_pos[n]
        if k < 0:
            raise ModelError(f"node {self.hierarchy.names[n]!r} has no children")
        return self.probs[:, lay.seg_start[k] : lay.seg_start[k] + lay.seg_size[k]]


def head_logits(params: ModelParams, features: np.ndarray) -> np.ndarray:
    return features @ params.head_W + params.head_b


def forward(params: ModelParams, h: Hierarchy, X) -> NodeDistributions:
    """Softmax child distributions of every internal node for inputs ``X``."""
    if not params.has_heads:
        raise ModelError("model has no hierarchical head")
    check_compatible(params, h)
    X, _ = _as_batch(params, X)
    feats = trunk_forward(params, X)[-1]
    return NodeDistributions(segment_softmax(head_logits(params, feats), layout_for(h)), h)


def node_path_probabilities(nd: NodeDistributions) -> np.ndarray:
    """``Pr(n | x)`` for every node (columns in id order); the root is 1."""
    h = nd.hierarchy
    lay = layout_for(h)
    if np.isnan(nd.probs).any():
        raise ModelError("node distributions contain missing values")
    out = np.empty((len(nd), len(h)))
    out[:, 0] = 1.0
    parents = np.array(h.parents)
    for nodes in lay.by_depth[1:]:
        out[:, nodes] = out[:, parents[nodes]] * nd.probs[:, lay.edge_of[nodes]]
    return out


def leaf_posteriors(nd: NodeDistributions) -> np.ndarray:
    """Leaf probabilities (columns follow ``hierarchy.leaves``) as path products."""
    return node_path_probabilities(nd)[:, layout_for(nd.hierarchy).leaves]


def predict_leaf(nd: NodeDistributions) -> np.ndarray:
    """Most probable leaf id per sample; ties go to the lowest node id."""
    lay = layout_for(nd.hierarchy)
    return lay.leaves[np.argmax(leaf_posteriors(nd), axis=1)]


def flat_forward(params: ModelParams, X) -> np.ndarray:
    """Softmax over the flat head's leaf logits."""
    if not params.has_flat:
        raise ModelError("model has no flat head")
    X, _ = _as_batch(params, X)
    z = trunk_forward(params, X)[-1] @ params.flat_W + params.flat_b
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# checkpoints

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _put(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a, dtype=np.float64), allow_pickle=False)
    return buf.getvalue()


def save_model(params: ModelParams, h: Hierarchy, path) -> None:
    """Write a zip container of ``.npy`` arrays with heads keyed by node name."""
    check_compatible(params, h)
    meta = {
        "format": "hiernav-model",
        "version": CHECKPOINT_VERSION,
        "input_dim": params.input_dim,
        "trunk_widths": [int(W.shape[1]) for W, _ in params.trunk],
        "hierarchical": params.has_heads,
        "flat": params.has_flat,
        "heads": {h.names[n]: [h.names[c] for c in h.children[n]] for n in h.internals}
        if params.has_heads
        else {},
        "leaves": [h.names[l] for l in h.leaves] if params.has_flat else [],
    }
    with zipfile.ZipFile(path, "w") as zf:
        _put(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for i, (W, b) in enumerate(params.trunk):
            _put(zf, f"trunk/{i}/W.npy", _npy_bytes(W))
            _put(zf, f"trunk/{i}/b.npy", _npy_bytes(b))
        if params.has_heads:
            for n in h.internals:
                W, b = params.head(h, n)
                _put(zf, f"heads/{h.names[n]}/W.npy", _npy_bytes(W))
                _put(zf, f"heads/{h.names[n]}/b.npy", _npy_bytes(b))
        if params.has_flat:
            _put(zf, "flat/W.npy", _npy_bytes(params.flat_W))
            _put(zf, "flat/b.npy", _npy_bytes(params.flat_b))


def load_model(path, h: Hierarchy) -> ModelParams:
    """Read a checkpoint written by :func:`save_model` and check it against ``h``."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise ModelError(f"{path}: not a model checkpoint ({exc})") from None
    with zf:

        def arr(name):
            with zf.open(name) as fh:
                return np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)

        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError:
            raise ModelError(f"{path}: missing meta.json") from None
        if meta.get("format") != "hiernav-model" or meta.get("version") != CHECKPOINT_VERSION:
            raise ModelError(f"{path}: unsupported checkpoint format/version")
        trunk = [
            (arr(f"trunk/{i}/W.npy"), arr(f"trunk/{i}/b.npy"))
            for i in range(len(meta["trunk_widths"]))
        ]
        params = ModelParams(trunk)
        if meta["hierarchical"]:
            expected = {h.names[n]: [h.names[c] for c in h.children[n]] for n in h.internals}
            if meta["heads"] != expected:
                raise ModelError(f"{path}: head layout does not match the hierarchy")
            Ws, bs = [], []
            for n in h.internals:
                Ws.append(arr(f"heads/{h.names[n]}/W.npy"))
                bs.append(arr(f"heads/{h.names[n]}/b.npy"))
            params.head_W = np.ascontiguousarray(np.concatenate(Ws, axis=1))
            params.head_b = np.concatenate(bs)
        if meta["flat"]:
            if meta["leaves"] != [h.names[l] for l in h.leaves]:
                raise ModelError(f"{path}: flat head leaves do not match the hierarchy")
            params.flat_W = arr("flat/W.npy")
            params.flat_b = arr("flat/b.npy")
    return params
