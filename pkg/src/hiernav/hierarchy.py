"""Rooted label trees: parsing, topology queries, distances and pruning.

Node ids are topologically ordered (a parent always has a smaller id than its
children) and the root is node 0.  Names are the stable identifiers across
transformations; ids are reassigned whenever a tree is rebuilt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .exceptions import HierarchyError

ROOT_PARENT = "-"
GRANULARITIES = ("fine", "medium", "coarse")


class Hierarchy:
    """Immutable rooted tree over uniquely named nodes.

    Parameters
    ----------
    names : sequence of str
        Node names, indexed by node id.
    parents : sequence of int
        Parent id of each node; ``-1`` for the root (which must be node 0).
    """

    __slots__ = (
        "names",
        "parents",
        "children",
        "depth",
        "leaves",
        "internals",
        "_index",
        "_ancestors",
        "_leaf_count",
    )

    def __init__(self, names: Sequence[str], parents: Sequence[int]):
        names = tuple(str(n) for n in names)
        parents = tuple(int(p) for p in parents)
        if not names:
            raise HierarchyError("empty hierarchy")
        if len(names) != len(parents):
            raise HierarchyError("names and parents differ in length")
        index = {}
        for i, name in enumerate(names):
            _check_name(name)
            if name in index:
                raise HierarchyError(f"duplicate node name {name!r}")
            index[name] = i
        if parents[0] != -1:
            raise HierarchyError("node 0 must be the root")
        for i in range(1, len(parents)):
            p = parents[i]
            if p == -1:
                raise HierarchyError(f"multiple roots: {names[0]!r} and {names[i]!r}")
            if not 0 <= p < i:
                raise HierarchyError(
                    f"node {names[i]!r} has parent id {p}; parents must precede children"
                )

        children: list[list[int]] = [[] for _ in names]
        depth = [0] * len(names)
        ancestors: list[tuple[int, ...]] = [()] * len(names)
        for i in range(1, len(names)):
            p = parents[i]
            children[p].append(i)
            depth[i] = depth[p] + 1
            ancestors[i] = ancestors[p] + (p,)

        leaf_count = [0] * len(names)
        for i in range(len(names) - 1, -1, -1):
            if not children[i]:
                leaf_count[i] = 1
            if i:
                leaf_count[parents[i]] += leaf_count[i]

        self.names = names
        self.parents = parents
        self.children = tuple(tuple(c) for c in children)
        self.depth = tuple(depth)
        self.leaves = tuple(i for i in range(len(names)) if not children[i])
        self.internals = tuple(i for i in range(len(names)) if children[i])
        self._index = index
        self._ancestors = tuple(ancestors)
        self._leaf_count = tuple(leaf_count)

    # -- construction -------------------------------------------------
    @classmethod
    def from_parent_names(cls, pairs: Iterable[tuple[str, str | None]]) -> "Hierarchy":
        """Build from ``(name, parent_name)`` pairs; the root's parent is ``None``.

        Pairs may come in any order; ids follow a stable topological order
        that keeps the input order among nodes whose parents are known.
        """
        pairs = list(pairs)
        order: dict[str, str | None] = {}
        for name, parent in pairs:
            if name in order:
                raise HierarchyError(f"duplicate node name {name!r}")
            order[name] = parent
        roots = [n for n, p in order.items() if p is None]
        if not roots:
            raise HierarchyError("no root node")
        if len(roots) > 1:
            raise HierarchyError(f"multiple roots: {roots[0]!r} and {roots[1]!r}")
        for name, parent in order.items():
            if parent is not None and parent not in order:
                raise HierarchyError(f"node {name!r}: unknown parent {parent!r}")

        # Stable topological sort by repeated sweeps over the input order.
        placed: dict[str, int] = {}
        names: list[str] = []
        parents: list[int] = []
        pending = list(order)
        while pending:
            remaining = []
            for name in pending:
                parent = order[name]
                if parent is None:
                    placed[name] = len(names)
                    names.append(name)
                    parents.append(-1)
                elif parent in placed:
                    placed[name] = len(names)
                    names.append(name)
                    parents.append(placed[parent])
                else:
                    remaining.append(name)
            if len(remaining) == len(pending):
                raise HierarchyError(f"cycle or unreachable nodes: {sorted(remaining)[:5]}")
            pending = remaining
        # Every placed node needs its root chain placed first, so names[0] is the root.
        return cls(names, parents)

    # -- basic queries ------------------------------------------------
    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Hierarchy)
            and self.names == other.names
            and self.parents == other.parents
        )

    def __hash__(self) -> int:
        return hash((self.names, self.parents))

    def __repr__(self) -> str:
        return (
            f"Hierarchy(n_nodes={len(self)}, n_leaves={len(self.leaves)}, "
            f"root={self.names[0]!r})"
        )

    @property
    def root(self) -> int:
        return 0

    @property
    def max_depth(self) -> int:
        return max(self.depth)

    def node_id(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise HierarchyError(f"unknown node name {name!r}") from None

    def has_node(self, name: str) -> bool:
        return name in self._index

    def _check(self, n: int) -> int:
        n = int(n)
        if not 0 <= n < len(self.names):
            raise HierarchyError(f"unknown node id {n}")
        return n

    def parent(self, n: int) -> int:
        """Parent id of ``n``; ``-1`` for the root."""
        return self.parents[self._check(n)]

    def is_leaf(self, n: int) -> bool:
        return not self.children[self._check(n)]

    def ancestors(self, n: int) -> tuple[int, ...]:
        """Strict ancestors of ``n`` ordered root first."""
        return self._ancestors[self._check(n)]

    def path(self, n: int) -> tuple[int, ...]:
        """Root-to-``n`` path, inclusive of both ends."""
        return self.ancestors(n) + (n,)

    def is_ancestor_or_equal(self, a: int, b: int) -> bool:
        """True if ``a`` lies on the root-to-``b`` path."""
        a, b = self._check(a), self._check(b)
        return a == b or a in self._ancestors[b]

    def n_leaves_below(self, n: int) -> int:
        return self._leaf_count[self._check(n)]

    def subtree(self, n: int) -> list[int]:
        """Ids of ``n`` and all its descendants in id order."""
        n = self._check(n)
        out = [n]
        stack = list(reversed(self.children[n]))
        while stack:
            c = stack.pop()
            out.append(c)
            stack.extend(reversed(self.children[c]))
        return sorted(out)

    def leaves_below(self, n: int) -> list[int]:
        return [c for c in self.subtree(n) if not self.children[c]]

    def lca(self, a: int, b: int) -> int:
        """Deepest node that is an ancestor-or-equal of both ``a`` and ``b``."""
        pa, pb = self.path(a), self.path(b)
        out = 0
        for x, y in zip(pa, pb):
            if x != y:
                break
            out = x
        return out

    def distance(self, a: int, b: int) -> int:
        """Number of edges between ``a`` and ``b``."""
        return self.depth[a] + self.depth[b] - 2 * self.depth[self.lca(a, b)]


def _check_name(name: str) -> None:
    if not name:
        raise HierarchyError("empty node name")
    if any(ch in name for ch in "\t\n\r"):
        raise HierarchyError(f"node name {name!r} contains tab or newline")
    if name == ROOT_PARENT:
        raise HierarchyError(f"{ROOT_PARENT!r} is reserved for the root's parent")


# ---------------------------------------------------------------------------
# file format


def parse_hierarchy(text: str) -> Hierarchy:
    """Parse ``name<TAB>parent`` lines; the root's parent is ``-``.

    Whitespace other than tab is also accepted as a separator so that
    hand-written files work.  Lines starting with ``#`` are ignored.
    """
    names: list[str] = []
    parents: list[int] = []
    index: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise HierarchyError(f"line {lineno}: expected 'name<TAB>parent', got {raw!r}")
        name, parent = parts[0].strip(), parts[1].strip()
        if name in index:
            raise HierarchyError(f"line {lineno}: duplicate node name {name!r}")
        if parent == ROOT_PARENT:
            if names:
                raise HierarchyError(f"line {lineno}: multiple roots ({names[0]!r} and {name!r})")
            pid = -1
        else:
            if not names:
                raise HierarchyError(f"line {lineno}: first node must be the root")
            if parent not in index:
                raise HierarchyError(f"line {lineno}: unknown parent {parent!r}")
            pid = index[parent]
        try:
            _check_name(name)
        except HierarchyError as exc:
            raise HierarchyError(f"line {lineno}: {exc}") from None
        index[name] = len(names)
        names.append(name)
        parents.append(pid)
    if not names:
        raise HierarchyError("empty hierarchy file")
    return Hierarchy(names, parents)


def format_hierarchy(h: Hierarchy) -> str:
    lines = []
    for name, p in zip(h.names, h.parents):
        lines.append(f"{name}\t{ROOT_PARENT if p < 0 else h.names[p]}")
    return "\n".join(lines) + "\n"


def read_hierarchy(path) -> Hierarchy:
    with open(path, encoding="utf-8") as fh:
        return parse_hierarchy(fh.read())


def write_hierarchy(h: Hierarchy, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_hierarchy(h))


# ---------------------------------------------------------------------------
# topology queries as free functions


def ancestors(h: Hierarchy, n: int) -> list[int]:
    return list(h.ancestors(n))


def lca(h: Hierarchy, a: int, b: int) -> int:
    return h.lca(a, b)


def hierarchy_distance(h: Hierarchy, a: int, b: int) -> int:
    return h.distance(a, b)


def distance_decomposition(h: Hierarchy, pred: int, gt: int) -> tuple[int, int]:
    """Edges from ``pred`` and from ``gt`` up to their lowest common ancestor."""
    c = h.lca(pred, gt)
    return h.depth[pred] - h.depth[c], h.depth[gt] - h.depth[c]


# ---------------------------------------------------------------------------
# rebuilding


def _rebuild(h: Hierarchy, keep: Sequence[bool]) -> Hierarchy:
    """Keep the flagged nodes, reattaching each to its nearest kept ancestor.

    Exactly one kept node must have no kept ancestor; it becomes the root.
    """
    new_id = {}
    names, parents = [], []
    for i in range(len(h)):
        if not keep[i]:
            continue
        p = -1
        for a in reversed(h.ancestors(i)):
            if keep[a]:
                p = new_id[a]
                break
        if p == -1 and names:
            raise HierarchyError("rebuild would leave multiple roots")
        new_id[i] = len(names)
        names.append(h.names[i])
        parents.append(p)
    return Hierarchy(names, parents)


def prune_single_child(h: Hierarchy) -> Hierarchy:
    """Remove every node that has exactly one child, splicing out chains.

    A single-child root is removed too and its child becomes the root.
    """
    keep = [len(h.children[i]) != 1 for i in range(len(h))]
    if all(keep):
        return h
    # Removing single-child nodes never changes other nodes' child counts.
    return _rebuild(h, keep)


def children_entropy(h: Hierarchy, n: int, leaf_counts: Mapping[int, float]) -> float:
    """Shannon entropy (nats) of the sample mass split across ``n``'s children."""
    masses = [sum(leaf_counts.get(l, 0) for l in h.leaves_below(c)) for c in h.children[n]]
    total = float(sum(masses))
    if total <= 0:
        return 0.0
    ent = 0.0
    for m in masses:
        if m > 0:
            q = m / total
            ent -= q * math.log(q)
    return ent


def entropy_prune(
    h: Hierarchy, leaf_counts: Mapping[str, float], target_internal: int
) -> Hierarchy:
    """Merge minimum-entropy internal nodes into their parents.

    ``leaf_counts`` maps leaf names to training sample counts.  At each step
    the non-root internal node whose children carry the least evenly spread
    sample mass is removed and its children are attached to its parent; ties
    go to the lowest node id.  Repeats until ``target_internal`` internal
    nodes remain.
    """
    target_internal = int(target_internal)
    if target_internal < 1:
        raise HierarchyError("target_internal must be at least 1")
    if target_internal > len(h.internals):
        raise HierarchyError(
            f"target_internal={target_internal} exceeds the current "
            f"{len(h.internals)} internal nodes"
        )
    unknown = set(leaf_counts) - {h.names[l] for l in h.leaves}
    if unknown:
        raise HierarchyError(f"leaf_counts names non-leaf nodes: {sorted(unknown)[:5]}")
    if any(v < 0 for v in leaf_counts.values()):
        raise HierarchyError("leaf_counts must be nonnegative")

    while len(h.internals) > target_internal:
        counts = {h.node_id(name): c for name, c in leaf_counts.items()}
        best, best_ent = -1, math.inf
        for n in h.internals:
            if n == h.root:
                continue
            ent = children_entropy(h, n, counts)
            if ent < best_ent:
                best, best_ent = n, ent
        keep = [True] * len(h)
        keep[best] = False
        h = _rebuild(h, keep)
    return h


@dataclass(frozen=True)
class OodGroundTruthMap:
    """Held-out class name -> nearest surviving ID node, plus granularity tags."""

    mapping: dict[str, str]
    granularity: dict[str, str] = field(default_factory=dict)

    def target(self, name: str) -> str:
        return self.mapping[name]


def holdout_split(
    h: Hierarchy, holdout_roots: Sequence[str] | Mapping[str, str]
) -> tuple[Hierarchy, OodGroundTruthMap]:
    """Remove whole subtrees and map each removed leaf onto the ID tree.

    ``holdout_roots`` is a list of node names, or a mapping from node name to
    granularity tag.  Internal nodes left without children are dropped and
    single-child chains are spliced out; each removed leaf maps to its nearest
    surviving ancestor (the new root if every original ancestor was removed).
    """
    if isinstance(holdout_roots, Mapping):
        gran_of_root = dict(holdout_roots)
        roots = list(holdout_roots)
    else:
        roots = list(holdout_roots)
        gran_of_root = {}
    for g in gran_of_root.values():
        if g not in GRANULARITIES:
            raise HierarchyError(f"unknown granularity {g!r}")
    ids = [h.node_id(r) for r in roots]
    if len(set(ids)) != len(ids):
        raise HierarchyError("duplicate holdout roots")
    for a in ids:
        for b in ids:
            if a != b and h.is_ancestor_or_equal(a, b):
                raise HierarchyError(
                    f"nested holdouts: {h.names[a]!r} is an ancestor of {h.names[b]!r}"
                )
    if 0 in ids:
        raise HierarchyError("cannot hold out the root")

    keep = [True] * len(h)
    removed_leaf_root: dict[int, int] = {}
    for r in ids:
        for c in h.subtree(r):
            keep[c] = False
            if h.is_leaf(c):
                removed_leaf_root[c] = r
    # Originally-internal nodes that lost all children carry no ID classes.
    for i in range(len(h) - 1, -1, -1):
        if keep[i] and h.children[i] and not any(keep[c] for c in h.children[i]):
            keep[i] = False
    n_left = sum(1 for l in h.leaves if keep[l])
    if n_left < 2:
        raise HierarchyError(f"holdout leaves {n_left} ID leaves; need at least 2")

    id_h = prune_single_child(_rebuild(h, keep))
    mapping, granularity = {}, {}
    for leaf, r in removed_leaf_root.items():
        target = id_h.names[0]
        for a in reversed(h.ancestors(leaf)):
            if id_h.has_node(h.names[a]):
                target = h.names[a]
                break
        mapping[h.names[leaf]] = target
        if h.names[r] in gran_of_root:
            granularity[h.names[leaf]] = gran_of_root[h.names[r]]
    return id_h, OodGroundTruthMap(mapping, granularity)
