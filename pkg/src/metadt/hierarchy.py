"""Class hierarchy: validated tree structure, semantic vectors and adjacency.

A hierarchy file is JSON::

    {
      "semantic_dim": 4,
      "embeddings": "words.txt",            # optional, needed for "tokens"
      "nodes": [{"id": "n0", "name": "dog", "semantic": [..]},
                {"id": "n1", "name": "spotted dog", "tokens": ["spotted", "dog"]}],
      "edges": [["n0", "n1"]],               # [parent_id, child_id]
      "root": "n0",
      "classes": {"0": "n1"}                 # few-shot class index -> leaf id
    }
"""

from __future__ import annotations

import json
import logging
import warnings
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metadt.errors import (
    CycleError,
    DegenerateGraphError,
    DisconnectedNodeError,
    DuplicateClassError,
    HierarchyError,
    MultipleRootsError,
    ParseError,
    SemanticDimensionError,
    UnknownClassError,
)

logger = logging.getLogger(__name__)

ADJACENCY_NORMS = ("symmetric", "asymmetric")


class MultipleParentsError(HierarchyError):
    pass


class UnknownTokenWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class HierarchyGraph:
    """Immutable, validated class taxonomy.

    Nodes are indexed ``0..F-1`` in file order. ``children[i]`` is sorted by
    node name. ``leaf_to_class`` maps every leaf to a few-shot class index.
    """

    ids: tuple[str, ...]
    names: tuple[str, ...]
    semantic: np.ndarray
    parent: tuple[int | None, ...]
    children: tuple[tuple[int, ...], ...]
    root: int
    leaf_to_class: Mapping[int, int]
    class_to_leaf: tuple[int, ...] = field(repr=False)

    @classmethod
    def build(
        cls,
        ids: Sequence[str],
        names: Sequence[str],
        edges: Iterable[tuple[str, str]],
        root: str,
        classes: Mapping[int, str],
        semantic: np.ndarray,
        semantic_dim: int | None = None,
    ) -> HierarchyGraph:
        """Validate raw pieces and assemble a graph. Raises a HierarchyError subclass on failure."""
        ids = tuple(str(i) for i in ids)
        names = tuple(str(n) for n in names)
        if len(names) != len(ids):
            raise HierarchyError("names and ids differ in length")
        index: dict[str, int] = {}
        for i, node_id in enumerate(ids):
            if node_id in index:
                raise HierarchyError(f"duplicate node id {node_id!r}")
            index[node_id] = i
        F = len(ids)
        if F == 0:
            raise HierarchyError("hierarchy has no nodes")
        if root not in index:
            raise HierarchyError(f"root {root!r} is not a node")

        parent: list[int | None] = [None] * F
        kids: list[list[int]] = [[] for _ in range(F)]
        touched = [False] * F
        for edge in edges:
            p_id, c_id = (str(e) for e in edge)
            for node_id in (p_id, c_id):
                if node_id not in index:
                    raise HierarchyError(f"edge references unknown node {node_id!r}")
            p, c = index[p_id], index[c_id]
            if p == c:
                raise CycleError(f"self-loop edge on {p_id!r}")
            if parent[c] is not None:
                raise MultipleParentsError(f"node {c_id!r} has more than one parent")
            parent[c] = p
            kids[p].append(c)
            touched[p] = touched[c] = True

        root_idx = index[root]
        if parent[root_idx] is not None:
            raise CycleError(f"root {root!r} has a parent {ids[parent[root_idx]]!r}")
        for i in range(F):
            if i == root_idx or parent[i] is not None:
                continue
            if not touched[i]:
                raise DisconnectedNodeError(f"node {ids[i]!r} has no edges")
            raise MultipleRootsError(f"nodes {ids[root_idx]!r} and {ids[i]!r} both lack a parent")
        # every chain of parent pointers must end at the root
        state = [0] * F  # 0 unseen, 1 on current chain, 2 reaches root
        state[root_idx] = 2
        for start in range(F):
            chain = []
            node = start
            while state[node] == 0:
                state[node] = 1
                chain.append(node)
                node = parent[node]
            if state[node] == 1:
                raise CycleError(f"cycle through node {ids[node]!r}")
            for n in chain:
                state[n] = 2

        children = tuple(tuple(sorted(k, key=lambda j: (names[j], ids[j]))) for k in kids)
        leaves = {i for i in range(F) if not children[i]}

        leaf_to_class: dict[int, int] = {}
        n_classes = len(classes)
        seen_classes = set()
        for k, leaf_id in classes.items():
            k = int(k)
            if not 0 <= k < n_classes or k in seen_classes:
                raise HierarchyError(f"class indices must be 0..{n_classes - 1}, got {k}")
            seen_classes.add(k)
            leaf_id = str(leaf_id)
            if leaf_id not in index:
                raise HierarchyError(f"class {k} maps to unknown node {leaf_id!r}")
            leaf = index[leaf_id]
            if leaf not in leaves:
                raise HierarchyError(f"class {k} maps to non-leaf node {leaf_id!r}")
            if leaf in leaf_to_class:
                raise DuplicateClassError(
                    f"leaf {leaf_id!r} mapped to classes {leaf_to_class[leaf]} and {k}")
            leaf_to_class[leaf] = k
        unmapped = sorted(leaves - leaf_to_class.keys())
        if unmapped:
            raise HierarchyError(f"leaves without a class: {[ids[i] for i in unmapped]}")

        semantic = np.array(semantic, dtype=np.float64)
        if semantic.ndim != 2 or semantic.shape[0] != F:
            raise SemanticDimensionError(f"semantic matrix shape {semantic.shape} does not match {F} nodes")
        if semantic_dim is not None and semantic.shape[1] != semantic_dim:
            raise SemanticDimensionError(
                f"semantic vectors have dimension {semantic.shape[1]}, declared {semantic_dim}")
        if not np.isfinite(semantic).all():
            raise SemanticDimensionError("semantic vectors contain non-finite values")
        semantic.setflags(write=False)

        class_to_leaf = [0] * n_classes
        for leaf, k in leaf_to_class.items():
            class_to_leaf[k] = leaf
        return cls(ids, names, semantic, tuple(parent), children, root_idx,
                   dict(sorted(leaf_to_class.items())), tuple(class_to_leaf))

    @property
    def node_count(self) -> int:
        return len(self.ids)

    F = node_count

    @property
    def semantic_dim(self) -> int:
        return self.semantic.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_to_leaf)

    @property
    def edges(self) -> set[tuple[int, int]]:
        return {(p, c) for c, p in enumerate(self.parent) if p is not None}

    def is_leaf(self, i: int) -> bool:
        return not self.children[i]

    @property
    def internal_nodes(self) -> list[int]:
        return [i for i in range(self.node_count) if self.children[i]]

    def index_of(self, node_id: str) -> int:
        try:
            return self.ids.index(node_id)
        except ValueError:
            raise UnknownClassError(f"unknown node id {node_id!r}") from None

    def depth(self, i: int) -> int:
        d = 0
        while self.parent[i] is not None:
            i = self.parent[i]
            d += 1
        return d

    def traversal_path(self, k: int) -> list[int]:
        """Root-to-leaf node indices for few-shot class ``k``."""
        if not 0 <= k < self.n_classes:
            raise UnknownClassError(f"class {k} is not mapped to a leaf")
        path = [self.class_to_leaf[k]]
        while self.parent[path[-1]] is not None:
            path.append(self.parent[path[-1]])
        return path[::-1]

    def path_matrix(self) -> np.ndarray:
        """F x N 0/1 matrix; entry (j, k) is 1 iff non-root node j lies on the path to class k."""
        B = np.zeros((self.node_count, self.n_classes))
        for k in range(self.n_classes):
            B[self.traversal_path(k)[1:], k] = 1.0
        return B

    def restrict(self, leaf_ids: Sequence[str]) -> HierarchyGraph:
        """Minimal subtree spanning the root and ``leaf_ids``; class k becomes ``leaf_ids[k]``.

        Used to build the per-episode hierarchy over the sampled classes.
        """
        keep: set[int] = set()
        leaves = [self.index_of(i) for i in leaf_ids]
        for leaf in leaves:
            if not self.is_leaf(leaf):
                raise HierarchyError(f"{self.ids[leaf]!r} is not a leaf")
            node: int | None = leaf
            while node is not None and node not in keep:
                keep.add(node)
                node = self.parent[node]
        order = [i for i in range(self.node_count) if i in keep]
        edges = [(self.ids[self.parent[i]], self.ids[i]) for i in order if self.parent[i] is not None]
        return HierarchyGraph.build(
            [self.ids[i] for i in order],
            [self.names[i] for i in order],
            edges,
            self.ids[self.root],
            {k: self.ids[leaf] for k, leaf in enumerate(leaves)},
            self.semantic[order],
        )

    def with_semantic(self, semantic: np.ndarray) -> HierarchyGraph:
        return HierarchyGraph.build(
            self.ids, self.names,
            [(self.ids[p], self.ids[c]) for p, c in sorted(self.edges, key=lambda e: e[1])],
            self.ids[self.root],
            {k: self.ids[leaf] for k, leaf in enumerate(self.class_to_leaf)},
            semantic,
        )

    def to_dict(self) -> dict:
        return {
            "semantic_dim": self.semantic_dim,
            "nodes": [
                {"id": self.ids[i], "name": self.names[i], "semantic": self.semantic[i].tolist()}
                for i in range(self.node_count)
            ],
            "edges": [[self.ids[p], self.ids[c]] for c, p in enumerate(self.parent) if p is not None],
            "root": self.ids[self.root],
            "classes": {str(k): self.ids[leaf] for k, leaf in enumerate(self.class_to_leaf)},
        }

    def same_as(self, other: HierarchyGraph) -> bool:
        return (
            self.ids == other.ids
            and self.names == other.names
            and self.parent == other.parent
            and self.children == other.children
            and self.root == other.root
            and dict(self.leaf_to_class) == dict(other.leaf_to_class)
            and self.semantic.shape == other.semantic.shape
            and np.array_equal(self.semantic, other.semantic)
        )


@dataclass(frozen=True)
class AdjacencyOperator:
    a_hat: np.ndarray


def build_adjacency(g: HierarchyGraph) -> np.ndarray:
    """Symmetric 0/1 adjacency matrix of the hierarchy, zero diagonal."""
    A = np.zeros((g.node_count, g.node_count))
    for p, c in g.edges:
        A[p, c] = A[c, p] = 1.0
    return A


def normalize_adjacency(a: np.ndarray, self_loops: bool = True, mode: str = "symmetric") -> AdjacencyOperator:
    """``D^-1/2 (A + I) D^-1/2`` with D the degree matrix of the (self-looped) input.

    ``mode="asymmetric"`` computes ``D^-1/2 A' D^+1/2`` instead.
    """
    if mode not in ADJACENCY_NORMS:
        raise ValueError(f"adjacency_norm must be one of {ADJACENCY_NORMS}, got {mode!r}")
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DegenerateGraphError(f"adjacency must be square, got {a.shape}")
    if self_loops:
        a = a + np.eye(a.shape[0])
    deg = a.sum(axis=1)
    if (deg <= 0).any():
        raise DegenerateGraphError(f"isolated node(s) {np.flatnonzero(deg <= 0).tolist()} with self-loops disabled")
    left = 1.0 / np.sqrt(deg)
    right = left if mode == "symmetric" else np.sqrt(deg)
    a_hat = left[:, None] * a * right[None, :]
    a_hat.setflags(write=False)
    return AdjacencyOperator(a_hat)


def adjacency_operator(g: HierarchyGraph, self_loops: bool = True, mode: str = "symmetric") -> AdjacencyOperator:
    return normalize_adjacency(build_adjacency(g), self_loops=self_loops, mode=mode)


def traversal_path(g: HierarchyGraph, k: int) -> list[int]:
    return g.traversal_path(k)


def load_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    """Read a whitespace-separated word vector table (``token v1 ... vd`` per line)."""
    table: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise ParseError(f"bad number in embedding row: {exc}", line=lineno) from None
            if dim is None:
                dim = vec.size
            if vec.size == 0 or vec.size != dim:
                raise ParseError(f"expected {dim} values for {parts[0]!r}, got {vec.size}", line=lineno)
            table[parts[0]] = vec
    return table


def semantic_from_names(
    names: Sequence[Sequence[str]],
    embeddings: Mapping[str, np.ndarray],
    fallback: bool = True,
    dim: int | None = None,
) -> np.ndarray:
    """Mean word vector of each token list.

    Unknown tokens are skipped. A name whose tokens are all unknown gives a
    zero row and an :class:`UnknownTokenWarning`; with ``fallback=False`` any
    unknown token is an error instead.
    """
    if dim is None:
        if not embeddings:
            raise HierarchyError("empty embedding table and no dimension given")
        dim = len(next(iter(embeddings.values())))
    rows = np.zeros((len(names), dim))
    for i, tokens in enumerate(names):
        if not tokens:
            raise HierarchyError(f"node {i} has an empty token list")
        known = [embeddings[t] for t in tokens if t in embeddings]
        missing = [t for t in tokens if t not in embeddings]
        if missing and not fallback:
            raise HierarchyError(f"unknown tokens {missing} for node {i}")
        if missing:
            logger.debug("node %d: skipping unknown tokens %s", i, missing)
        if known:
            rows[i] = np.mean(known, axis=0)
        else:
            warnings.warn(f"no known tokens in {list(tokens)}; using a zero vector", UnknownTokenWarning,
                          stacklevel=2)
    return rows


def parse_hierarchy(doc: Mapping, embeddings: Mapping[str, np.ndarray] | None = None,
                    base_dir: Path | None = None) -> HierarchyGraph:
    try:
        nodes = doc["nodes"]
        edges = doc["edges"]
        root = str(doc["root"])
        classes = doc["classes"]
        semantic_dim = int(doc["semantic_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise HierarchyError(f"hierarchy document missing or malformed field: {exc}") from None

    if embeddings is None and doc.get("embeddings") and base_dir is not None:
        embeddings = load_embeddings(base_dir / doc["embeddings"])

    ids, names = [], []
    semantic = np.zeros((len(nodes), semantic_dim))
    token_rows, token_lists = [], []
    for i, node in enumerate(nodes):
        ids.append(str(node["id"]))
        names.append(str(node.get("name", node["id"])))
        has_sem, has_tok = "semantic" in node, "tokens" in node
        if has_sem == has_tok:
            raise HierarchyError(f"node {node['id']!r} needs exactly one of 'semantic' or 'tokens'")
        if has_sem:
            vec = np.asarray(node["semantic"], dtype=np.float64)
            if vec.shape != (semantic_dim,):
                raise SemanticDimensionError(
                    f"node {node['id']!r} semantic has shape {vec.shape}, declared {semantic_dim}")
            semantic[i] = vec
        else:
            token_rows.append(i)
            token_lists.append([str(t) for t in node["tokens"]])
    if token_rows:
        if embeddings is None:
            raise HierarchyError("nodes use 'tokens' but no embedding table was provided")
        table_dim = len(next(iter(embeddings.values()))) if embeddings else semantic_dim
        if table_dim != semantic_dim:
            raise SemanticDimensionError(f"embedding dimension {table_dim} != declared {semantic_dim}")
        semantic[token_rows] = semantic_from_names(token_lists, embeddings, dim=semantic_dim)

    return HierarchyGraph.build(ids, names, [tuple(e) for e in edges], root,
                                {int(k): v for k, v in classes.items()}, semantic, semantic_dim)


def load_hierarchy(path: str | Path, embeddings: Mapping[str, np.ndarray] | None = None) -> HierarchyGraph:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", line=exc.lineno) from None
    return parse_hierarchy(doc, embeddings, base_dir=path.parent)


def save_hierarchy(g: HierarchyGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(g.to_dict(), indent=1) + "\n", encoding="utf-8")


def balanced_hierarchy(branching: Sequence[int], semantic_dim: int = 1, prefix: str = "n") -> HierarchyGraph:
    """A complete tree with ``branching[d]`` children per node at depth ``d``.

    Leaves are numbered as classes in depth-first order; semantic vectors are
    zero placeholders (see :func:`metadt.episodes.synthetic_semantics`).
    """
    ids, names, edges = [f"{prefix}root"], ["root"], []
    frontier = [(f"{prefix}root", "")]
    for b in branching:
        nxt = []
        for node_id, label in frontier:
            for j in range(b):
                child_label = f"{label}{j}" if not label else f"{label}.{j}"
                child_id = f"{prefix}{child_label}"
                ids.append(child_id)
                names.append(child_label)
                edges.append((node_id, child_id))
                nxt.append((child_id, child_label))
        frontier = nxt
    leaves = sorted((lab, nid) for nid, lab in frontier)
    classes = {k: nid for k, (_, nid) in enumerate(leaves)}
    return HierarchyGraph.build(ids, names, edges, ids[0], classes, np.zeros((len(ids), semantic_dim)))
