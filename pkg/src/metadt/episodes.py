"""Feature datasets, N-way K-shot episode sampling and synthetic data.

Feature files are text::

    #metadt-features v1 d_f=3
    s0<TAB>cat<TAB>0.1 0.25 -1.0

Seeds for parallel or per-episode work are split with
``numpy.random.SeedSequence(seed, spawn_key=(index,))`` (see :func:`child_rng`).
"""

from __future__ import annotations

import re
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metadt.errors import CapacityError, ConfigError, ParseError, UnknownClassError
from metadt.hierarchy import HierarchyGraph

HEADER_RE = re.compile(r"^#metadt-features v1 d_f=(\d+)\s*$")
DEFAULT_QUERY_PER_CLASS = 15


def child_rng(seed: int, *index: int) -> np.random.Generator:
    """Independent generator for (seed, index...) ; the declared splitting rule."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(index)))


@dataclass(frozen=True)
class LabeledSet:
    ids: tuple[str, ...]
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class FeatureDataset:
    ids: list[str]
    class_labels: list[str]
    features: np.ndarray
    class_index: dict[str, int] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.ids) != self.features.shape[0] or len(self.class_labels) != len(self.ids):
            raise ParseError(f"inconsistent dataset: {len(self.ids)} ids, features {self.features.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise ParseError("duplicate sample ids")
        if not self.class_index:
            self.class_index = {c: i for i, c in enumerate(dict.fromkeys(self.class_labels))}
        missing = set(self.class_labels) - self.class_index.keys()
        if missing:
            raise UnknownClassError(f"classes {sorted(missing)} absent from class_index")
        self._by_class: dict[str, np.ndarray] = {}
        for c in self.class_index:
            self._by_class[c] = np.array([i for i, lab in enumerate(self.class_labels) if lab == c], dtype=np.intp)
        self._row = {sid: i for i, sid in enumerate(self.ids)}

    @property
    def d_f(self) -> int:
        return self.features.shape[1]

    @property
    def classes(self) -> list[str]:
        return list(self.class_index)

    def rows_of(self, label: str) -> np.ndarray:
        return self._by_class[label]

    def row(self, sample_id: str) -> int:
        try:
            return self._row[sample_id]
        except KeyError:
            raise UnknownClassError(f"unknown sample id {sample_id!r}") from None

    @property
    def samples(self) -> list[dict]:
        return [{"id": i, "class": c, "features": f} for i, c, f in zip(self.ids, self.class_labels, self.features)]

    def subset(self, rows: Sequence[int], labels: Sequence[int]) -> LabeledSet:
        rows = np.asarray(rows, dtype=np.intp)
        return LabeledSet(tuple(self.ids[r] for r in rows), self.features[rows], np.asarray(labels, dtype=np.intp))


@dataclass(frozen=True)
class Episode:
    n_way: int
    k_shot: int
    support: LabeledSet
    query: LabeledSet
    class_map: tuple[str, ...]


def sample_episode(
    ds: FeatureDataset,
    n: int,
    k: int,
    q_per_class: int,
    rng: np.random.Generator,
    classes: Sequence[str] | None = None,
    fixed_query: Sequence[str] = (),
) -> Episode:
    """Draw ``n`` classes uniformly, then ``k`` support and ``q_per_class`` query samples each.

    ``classes`` restricts the class pool (e.g. base or novel classes).
    ``fixed_query`` forces those sample ids into the query set; their classes
    are always part of the episode.
    """
    if n < 1 or k < 1 or q_per_class < 0:
        raise ConfigError(f"invalid episode shape n={n} k={k} q={q_per_class}")
    pool = list(ds.classes if classes is None else classes)
    forced_rows = [ds.row(s) for s in fixed_query]
    forced_classes = list(dict.fromkeys(ds.class_labels[r] for r in forced_rows))
    need = k + q_per_class
    eligible = [c for c in pool if len(ds.rows_of(c)) >= need]
    if len(eligible) < n or not set(forced_classes) <= set(pool):
        raise CapacityError(
            f"need {n} classes with >= {need} samples; {len(eligible)} of {len(pool)} qualify")
    if len(forced_classes) > n:
        raise CapacityError(f"{len(forced_classes)} classes among fixed query samples exceed n={n}")
    others = [c for c in eligible if c not in forced_classes]
    picked = list(rng.choice(len(others), size=n - len(forced_classes), replace=False)) if others else []
    chosen = forced_classes + [others[i] for i in picked]
    order = rng.permutation(n)
    chosen = [chosen[i] for i in order]

    s_rows, s_lab, q_rows, q_lab = [], [], [], []
    for label, c in enumerate(chosen):
        rows = ds.rows_of(c)
        fixed_here = [r for r in forced_rows if ds.class_labels[r] == c]
        free = np.array([r for r in rows if r not in fixed_here], dtype=np.intp)
        n_q = max(q_per_class - len(fixed_here), 0)
        if len(free) < k + n_q:
            raise CapacityError(f"class {c!r} has {len(rows)} samples, needs {k + n_q + len(fixed_here)}")
        draw = free[rng.choice(len(free), size=k + n_q, replace=False)]
        s_rows.extend(draw[:k])
        s_lab.extend([label] * k)
        q_rows.extend(list(fixed_here) + list(draw[k:]))
        q_lab.extend([label] * (len(fixed_here) + n_q))
    return Episode(n, k, ds.subset(s_rows, s_lab), ds.subset(q_rows, q_lab), tuple(chosen))


@dataclass(frozen=True)
class SyntheticSpec:
    hierarchy: HierarchyGraph
    d_f: int = 32
    superclass_spread: float = 1.0
    class_spread: float = 0.5
    noise_sigma: float = 0.1

    def __post_init__(self):
        if self.d_f <= 0:
            raise ConfigError("d_f must be positive")
        if min(self.superclass_spread, self.class_spread) <= 0 or self.noise_sigma < 0:
            raise ConfigError("spreads must be positive and noise_sigma non-negative")
        if self.class_spread > self.superclass_spread:
            raise ConfigError("class_spread must not exceed superclass_spread")


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def node_centers(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Hierarchical placement of one center per node (root at the origin).

    A node sits at its parent's center plus a random direction times a
    radius: ``class_spread`` for leaves, ``superclass_spread`` halved per
    level below the root's children for internal nodes (never below
    ``class_spread``).
    """
    g = spec.hierarchy
    centers = np.zeros((g.node_count, spec.d_f))
    order = [g.root]
    for node in order:
        order.extend(g.children[node])
    for node in order[1:]:
        if g.is_leaf(node):
            radius = spec.class_spread
        else:
            radius = max(spec.superclass_spread * 0.5 ** (g.depth(node) - 1), spec.class_spread)
        centers[node] = centers[g.parent[node]] + radius * _unit(rng, spec.d_f)
    return centers


def generate_synthetic(spec: SyntheticSpec, samples_per_class: int, rng: np.random.Generator) -> FeatureDataset:
    """Gaussian clusters around hierarchically placed leaf centers.

    Class labels are leaf node ids; ``metadata["centers"]`` holds every node's
    true center keyed by node id.
    """
    g = spec.hierarchy
    centers = node_centers(spec, rng)
    ids, labels, feats = [], [], []
    for k in range(g.n_classes):
        leaf = g.class_to_leaf[k]
        noise = rng.standard_normal((samples_per_class, spec.d_f)) * spec.noise_sigma
        feats.append(centers[leaf] + noise)
        for j in range(samples_per_class):
            ids.append(f"{g.ids[leaf]}/{j}")
            labels.append(g.ids[leaf])
    class_index = {g.ids[g.class_to_leaf[k]]: k for k in range(g.n_classes)}
    meta = {"centers": {g.ids[i]: centers[i] for i in range(g.node_count)}}
    return FeatureDataset(ids, labels, np.vstack(feats), class_index, meta)


def synthetic_semantics(
    g: HierarchyGraph,
    centers: dict[str, np.ndarray],
    d_s: int,
    rng: np.random.Generator,
    mode: str = "aligned",
    noise: float = 0.0,
) -> HierarchyGraph:
    """Attach semantic vectors derived from the true centers.

    ``aligned``: unit center projected by a fixed random d_s x d_f matrix,
    plus optional Gaussian ``noise``. ``random``: i.i.d. vectors that carry
    no geometric information.
    """
    vecs = np.array([centers[i] for i in g.ids])
    d_f = vecs.shape[1]
    if mode == "aligned":
        proj = rng.standard_normal((d_f, d_s)) / np.sqrt(d_s)
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        units = np.divide(vecs, norms, out=np.zeros_like(vecs), where=norms > 0)
        sem = units @ proj + noise * rng.standard_normal((len(vecs), d_s))
    elif mode == "random":
        sem = rng.standard_normal((len(vecs), d_s)) / np.sqrt(d_s)
    else:
        raise ConfigError(f"unknown semantic mode {mode!r}")
    return g.with_semantic(sem)


def save_features(ds: FeatureDataset, path: str | Path) -> None:
    lines = [f"#metadt-features v1 d_f={ds.d_f}"]
    for sid, label, vec in zip(ds.ids, ds.class_labels, ds.features):
        lines.append(f"{sid}\t{label}\t" + " ".join(repr(float(v)) for v in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_features(path: str | Path, hierarchy: HierarchyGraph | None = None) -> FeatureDataset:
    """Parse a feature file; with ``hierarchy`` every class must be one of its leaf ids."""
    leaf_ids = None
    if hierarchy is not None:
        leaf_ids = {hierarchy.ids[leaf] for leaf in hierarchy.class_to_leaf}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        m = HEADER_RE.match(header)
        if not m:
            raise ParseError("missing '#metadt-features v1 d_f=<int>' header", line=1)
        d_f = int(m.group(1))
        ids, labels, rows = [], [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", line=lineno)
            sid, label, values = parts
            try:
                vec = [float(v) for v in values.split()]
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if len(vec) != d_f:
                raise ParseError(f"expected {d_f} values, got {len(vec)}", line=lineno)
            if leaf_ids is not None and label not in leaf_ids:
                raise ParseError(f"class {label!r} is not a leaf of the hierarchy", line=lineno)
            ids.append(sid)
            labels.append(label)
            rows.append(vec)
    feats = np.array(rows, dtype=np.float64).reshape(len(rows), d_f)
    return FeatureDataset(ids, labels, feats)
