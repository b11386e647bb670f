"""Synthetic hierarchical data, dataset files and OOD holdout selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import DatasetError, HierarchyError
from .hierarchy import GRANULARITIES, Hierarchy, holdout_split

SPLITS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature rows with leaf labels (node ids of ``hierarchy``) and split tags."""

    X: np.ndarray
    y: np.ndarray
    hierarchy: Hierarchy
    split: np.ndarray = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2:
            raise DatasetError("X must be 2-D")
        if y.shape != (X.shape[0],):
            raise DatasetError("y must have one label per row of X")
        split = self.split
        if split is None:
            split = np.full(X.shape[0], "train", dtype=object)
        split = np.asarray(split, dtype=object)
        if split.shape != y.shape:
            raise DatasetError("split must have one tag per sample")
        bad = set(split.tolist()) - set(SPLITS)
        if bad:
            raise DatasetError(f"unknown split tags {sorted(bad)}")
        leaves = set(self.hierarchy.leaves)
        for lab in np.unique(y):
            if int(lab) not in leaves:
                raise DatasetError(f"label id {int(lab)} is not a leaf")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "split", split)

    def __len__(self):
        return self.X.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.hierarchy == other.hierarchy
            and self.X.shape == other.X.shape
            and self.X.tobytes() == other.X.tobytes()
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.split, other.split)
        )

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def label_names(self) -> list[str]:
        return [self.hierarchy.names[i] for i in self.y]

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(self.X[mask], self.y[mask], self.hierarchy, self.split[mask])

    def select_split(self, name: str) -> "Dataset":
        return self.subset(self.split == name)

    def leaf_counts(self) -> dict[str, int]:
        names, counts = np.unique(self.y, return_counts=True)
        return {self.hierarchy.names[n]: int(c) for n, c in zip(names, counts)}

    def relabel(self, hierarchy: Hierarchy) -> "Dataset":
        """Re-express labels against another tree sharing leaf names."""
        try:
            ids = {n: hierarchy.node_id(self.hierarchy.names[n]) for n in np.unique(self.y)}
        except HierarchyError as exc:
            raise DatasetError(str(exc)) from None
        y = np.array([ids[n] for n in self.y], dtype=np.int64)
        return Dataset(self.X, y, hierarchy, self.split)


# ---------------------------------------------------------------------------
# synthetic generation


def generate_synthetic_hierarchy(branching: Sequence[int], seed: int = 0) -> Hierarchy:
    """Complete tree with ``branching[k]`` children per node at depth ``k``.

    Nodes are named ``n<level>_<index>``.  ``seed`` is accepted for interface
    symmetry; the construction is deterministic.
    """
    branching = [int(b) for b in branching]
    if not branching:
        raise HierarchyError("need at least one level of branching")
    if any(b < 2 for b in branching):
        raise HierarchyError(f"branching factors must be >= 2, got {branching}")
    names = ["n0_0"]
    parents = [-1]
    level = [0]
    for depth, b in enumerate(branching, 1):
        nxt = []
        for p in level:
            for _ in range(b):
                nxt.append(len(names))
                names.append(f"n{depth}_{len(nxt) - 1}")
                parents.append(p)
        level = nxt
    return Hierarchy(names, parents)


def node_means(h: Hierarchy, dim: int, level_scales: Sequence[float], rng) -> np.ndarray:
    """Hierarchical diffusion: each node's mean is its parent's plus a Gaussian step."""
    means = np.zeros((len(h), dim))
    for n in range(1, len(h)):
        scale = level_scales[h.depth[n] - 1]
        means[n] = means[h.parents[n]] + rng.normal(0.0, scale, dim)
    return means


def generate_synthetic_features(
    h: Hierarchy,
    dim: int,
    level_scales: Sequence[float],
    noise_scale: float,
    per_leaf: int,
    seed: int,
    split_fractions: Sequence[float] = (0.6, 0.2, 0.2),
) -> Dataset:
    """Gaussian features whose means diffuse down the tree.

    The root mean is zero, each child's mean adds an isotropic Gaussian draw
    with the standard deviation given for its depth (``level_scales[depth-1]``),
    and each sample adds isotropic ``noise_scale`` noise to its leaf's mean.
    Within each leaf the first samples are tagged train, then val, then test
    according to ``split_fractions``.
    """
    dim = int(dim)
    per_leaf = int(per_leaf)
    level_scales = [float(s) for s in level_scales]
    if dim < 1:
        raise DatasetError("dim must be >= 1")
    if per_leaf < 1:
        raise DatasetError("per_leaf must be >= 1")
    if len(level_scales) < h.max_depth:
        raise DatasetError(
            f"need {h.max_depth} level scales for this tree, got {len(level_scales)}"
        )
    if any(not s > 0 for s in level_scales) or not noise_scale >= 0:
        raise DatasetError("level scales must be > 0 and noise_scale >= 0")
    fractions = np.asarray(split_fractions, dtype=float)
    if fractions.shape != (3,) or np.any(fractions < 0) or not np.isclose(fractions.sum(), 1):
        raise DatasetError("split_fractions must be three nonnegative values summing to 1")

    rng = np.random.default_rng(seed)
    means = node_means(h, dim, level_scales, rng)
    n_train = int(round(fractions[0] * per_leaf))
    n_val = int(round(fractions[1] * per_leaf))
    tags = np.array(
        ["train"] * n_train + ["val"] * n_val + ["test"] * (per_leaf - n_train - n_val),
        dtype=object,
    )[:per_leaf]
    X, y, split = [], [], []
    for leaf in h.leaves:
        X.append(means[leaf] + noise_scale * rng.normal(0.0, 1.0, (per_leaf, dim)))
        y.append(np.full(per_leaf, leaf))
        split.append(tags)
    return Dataset(np.vstack(X), np.concatenate(y), h, np.concatenate(split))


# ---------------------------------------------------------------------------
# holdout selection


@dataclass(frozen=True)
class DepthBand:
    lo: int
    hi: int
    probability: float
    granularity: str


@dataclass(frozen=True)
class SplitSpec:
    """Depth bands with Bernoulli selection probabilities, plus a seed.

    ``selections`` holds explicit ``(node_name, granularity)`` holdouts; when
    present they are used verbatim instead of random selection.
    """

    bands: tuple[DepthBand, ...] = ()
    seed: int = 0
    selections: tuple[tuple[str, str], ...] = field(default=())

    def __post_init__(self):
        bands = tuple(DepthBand(*b) if not isinstance(b, DepthBand) else b for b in self.bands)
        for b in bands:
            if b.lo < 1 or b.hi < b.lo:
                raise DatasetError(f"invalid depth band {b.lo}-{b.hi}")
            if not 0.0 <= b.probability <= 1.0:
                raise DatasetError(f"band probability {b.probability} outside [0, 1]")
            if b.granularity not in GRANULARITIES:
                raise DatasetError(f"unknown granularity {b.granularity!r}")
        ordered = sorted(bands, key=lambda b: b.lo)
        for a, b in zip(ordered, ordered[1:]):
            if b.lo <= a.hi:
                raise DatasetError("depth bands overlap")
        for _, g in self.selections:
            if g not in GRANULARITIES:
                raise DatasetError(f"unknown granularity {g!r}")
        object.__setattr__(self, "bands", bands)
        object.__setattr__(self, "selections", tuple(tuple(s) for s in self.selections))


# Appendix-style setting for a deep (15-level) tree.
IMAGENET1K_BANDS = (
    DepthBand(3, 6, 0.25, "coarse"),
    DepthBand(7, 10, 0.0625, "medium"),
    DepthBand(11, 15, 0.0125, "fine"),
)


def select_holdout_subtrees(h: Hierarchy, spec: SplitSpec) -> dict[str, list[str]]:
    """Pick holdout subtree roots per granularity by seeded Bernoulli draws.

    Every non-root node whose depth falls in a band is drawn independently
    with that band's probability.  When both a node and one of its ancestors
    are drawn the shallower node wins.  Raises if fewer than two ID leaves
    would survive.
    """
    out: dict[str, list[str]] = {g: [] for g in GRANULARITIES}
    if spec.selections:
        chosen = [(h.node_id(name), g) for name, g in spec.selections]
    else:
        rng = np.random.default_rng(spec.seed)
        chosen = []
        for band in spec.bands:
            eligible = [n for n in range(1, len(h)) if band.lo <= h.depth[n] <= band.hi]
            draws = rng.random(len(eligible))
            chosen.extend((n, band.granularity) for n, u in zip(eligible, draws) if u < band.probability)

    chosen.sort(key=lambda t: (h.depth[t[0]], t[0]))
    selected: set[int] = set()
    for n, g in chosen:
        if n in selected or any(a in selected for a in h.ancestors(n)):
            continue
        selected.add(n)
        out[g].append(h.names[n])
    for g in out:
        out[g].sort(key=h.node_id)

    removed = set()
    for n in selected:
        removed.update(h.leaves_below(n))
    if len(h.leaves) - len(removed) < 2:
        raise DatasetError("holdout selection leaves fewer than 2 ID leaves; re-seed or lower p")
    return out


def split_from_selection(h: Hierarchy, selection: dict[str, list[str]]):
    """Run the holdout on a per-granularity selection -> (id_hierarchy, gt_map)."""
    roots = {name: g for g, names in selection.items() for name in names}
    return holdout_split(h, roots)


# ---------------------------------------------------------------------------
# file formats


def write_dataset(ds: Dataset) -> str:
    """Serialize as ``dim=<d>`` then ``leaf<TAB>v1,...,vd`` lines (split tags are not stored)."""
    names = ds.hierarchy.names
    lines = [f"dim={ds.dim}"]
    for row, lab in zip(ds.X.tolist(), ds.y.tolist()):
        lines.append(names[lab] + "\t" + ",".join(map(repr, row)))
    return "\n".join(lines) + "\n"


def read_dataset(text: str, hierarchy: Hierarchy, split: str = "train") -> Dataset:
    """Parse a dataset file against ``hierarchy``; every row gets ``split`` as its tag."""
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}")
    lines = text.splitlines()
    if not lines or not lines[0].startswith("dim="):
        raise DatasetError("line 1: expected 'dim=<d>'")
    try:
        dim = int(lines[0][4:])
    except ValueError:
        raise DatasetError(f"line 1: malformed dimension {lines[0]!r}") from None
    if dim < 1:
        raise DatasetError("line 1: dim must be >= 1")
    rows, labels = [], []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        name, sep, values = line.partition("\t")
        if not sep:
            raise DatasetError(f"line {lineno}: expected 'leaf<TAB>values'")
        if not hierarchy.has_node(name):
            raise DatasetError(f"line {lineno}: unknown leaf {name!r}")
        node = hierarchy.node_id(name)
        if not hierarchy.is_leaf(node):
            raise DatasetError(f"line {lineno}: {name!r} is not a leaf")
        parts = values.split(",")
        if len(parts) != dim:
            raise DatasetError(f"line {lineno}: {len(parts)} features, expected {dim}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise DatasetError(f"line {lineno}: malformed number") from None
        labels.append(node)
    X = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return Dataset(X, np.array(labels, dtype=np.int64), hierarchy,
                   np.full(len(rows), split, dtype=object))


def write_split(selection: dict[str, list[str]]) -> str:
    lines = []
    for g in GRANULARITIES:
        for name in selection.get(g, []):
            lines.append(f"{name}\t{g}")
    return "\n".join(lines) + ("\n" if lines else "")


def read_split(text: str) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {g: [] for g in GRANULARITIES}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in GRANULARITIES:
            raise DatasetError(f"line {lineno}: expected 'node<TAB>fine|medium|coarse'")
        out[parts[1]].append(parts[0])
    return out
