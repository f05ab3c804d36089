"""Differentiable decision tree over a class hierarchy.

Every node carries a prototype vector. At an internal node the sample moves
to child ``j`` with probability ``softmax_j(gamma * cos(x, theta_j))`` taken
over the node's children; a class probability is the product of these
factors along the root-to-leaf path (the root itself contributes 1).
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np

from metadt import tensor as T
from metadt.errors import ContractError, ShapeError
from metadt.hierarchy import HierarchyGraph
from metadt.tensor import Tensor

DEFAULT_GAMMA = 10.0


@dataclass(frozen=True)
class TreeParams:
    weights: Tensor
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        object.__setattr__(self, "weights", T.as_tensor(self.weights))
        if self.weights.ndim != 2:
            raise ShapeError(f"tree weights must be F x d_f, got {self.weights.shape}")
        if not self.gamma > 0:
            raise ContractError(f"gamma must be positive, got {self.gamma}")

    def check(self, g: HierarchyGraph) -> None:
        if self.weights.shape[0] != g.node_count:
            raise ShapeError(f"tree has {self.weights.shape[0]} weight rows but hierarchy has {g.node_count} nodes")


@dataclass(frozen=True)
class ClassDistribution:
    probs: np.ndarray

    def argmax(self) -> int:
        # np.argmax returns the first maximum, i.e. the lowest class index on ties
        return int(np.argmax(self.probs))

    def __len__(self) -> int:
        return len(self.probs)

    def __getitem__(self, k):
        return self.probs[k]


@dataclass
class TraceStep:
    node: int
    node_name: str
    sibling_probs: dict[int, float]
    chosen: int


@dataclass
class DecisionTrace:
    steps: list[TraceStep]
    predicted_class: int
    final_prob: float
    argmax_class: int = -1
    path: list[int] = field(default_factory=list)

    @property
    def agrees_with_argmax(self) -> bool:
        return self.predicted_class == self.argmax_class

    def to_dict(self, g: HierarchyGraph | None = None) -> dict:
        steps = []
        for s in self.steps:
            step = {
                "node": s.node,
                "node_name": s.node_name,
                "sibling_probs": {str(c): p for c, p in s.sibling_probs.items()},
                "chosen": s.chosen,
            }
            if g is not None:
                step["node_id"] = g.ids[s.node]
                step["chosen_name"] = g.names[s.chosen]
            steps.append(step)
        return {
            "steps": steps,
            "predicted_class": self.predicted_class,
            "final_prob": self.final_prob,
            "argmax_class": self.argmax_class,
            "greedy_agrees_with_argmax": self.agrees_with_argmax,
        }


class _Structure:
    """Index arrays for the vectorized tree evaluation of one hierarchy."""

    def __init__(self, g: HierarchyGraph):
        self.nonroot = np.array([i for i in range(g.node_count) if i != g.root], dtype=np.intp)
        pos = {node: j for j, node in enumerate(self.nonroot)}
        parent_of = np.array([g.parent[i] for i in self.nonroot], dtype=np.intp)
        # sibling indicator: column sums of exp-logits over each child's sibling group
        self.siblings = (parent_of[:, None] == parent_of[None, :]).astype(np.float64)
        self.groups = [np.array([pos[c] for c in g.children[p]], dtype=np.intp) for p in g.internal_nodes]
        self.paths = g.path_matrix()[self.nonroot]


_STRUCTURES: weakref.WeakKeyDictionary[HierarchyGraph, _Structure] = weakref.WeakKeyDictionary()


def _structure(g: HierarchyGraph) -> _Structure:
    s = _STRUCTURES.get(g)
    if s is None:
        s = _STRUCTURES[g] = _Structure(g)
    return s


def class_prob_tensor(weights, feats: np.ndarray, g: HierarchyGraph, gamma: float = DEFAULT_GAMMA) -> Tensor:
    """Batched class probabilities (n x N) as a taped tensor.

    ``weights`` is the F x d_f prototype matrix, ``feats`` an n x d_f batch.
    This is the training path; :func:`class_probs` is the per-sample form.
    """
    weights = T.as_tensor(weights)
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    if weights.shape[0] != g.node_count or feats.shape[1] != weights.shape[1]:
        raise ShapeError(f"weights {weights.shape} / features {feats.shape} do not fit {g.node_count} nodes")
    s = _structure(g)
    cos = T.cosine_matrix(feats, T.gather(weights, s.nonroot))
    logits = T.mul(cos, float(gamma))
    shift = np.empty_like(logits.data)
    for grp in s.groups:
        shift[:, grp] = logits.data[:, grp].max(axis=1, keepdims=True)
    e = T.exp(T.sub(logits, Tensor(shift)))
    cond = T.div(e, T.matmul(e, Tensor(s.siblings)))
    return T.exp(T.matmul(T.log(cond), Tensor(s.paths)))


def _check_node(g: HierarchyGraph, node: int) -> None:
    if not 0 <= node < g.node_count:
        raise ContractError(f"node {node} out of range")
    if g.is_leaf(node):
        raise ContractError(f"node {node} ({g.names[node]!r}) is a leaf and makes no decision")


def conditional_probs(tp: TreeParams, g: HierarchyGraph, node: int, x_feat) -> dict[int, float]:
    """Probability of moving from internal ``node`` to each of its children."""
    tp.check(g)
    _check_node(g, node)
    x = np.asarray(x_feat, dtype=np.float64).reshape(-1)
    kids = list(g.children[node])
    cos = T.cosine_matrix(x[None, :], T.gather(tp.weights, np.array(kids)))
    probs = T.softmax_scaled(T.reshape(cos, (len(kids),)), tp.gamma).data
    return {c: float(p) for c, p in zip(kids, probs)}


def path_probabilities(g: HierarchyGraph, conditionals: dict[int, float] | np.ndarray) -> ClassDistribution:
    """Class probabilities from per-node conditionals ``P(node | parent(node))``.

    ``conditionals`` maps every non-root node (or indexes an F-vector); the
    root's own factor is fixed to 1.
    """
    probs = np.empty(g.n_classes)
    for k in range(g.n_classes):
        p = 1.0
        for node in g.traversal_path(k)[1:]:
            p *= float(conditionals[node])
        probs[k] = p
    return ClassDistribution(probs)


def all_conditionals(tp: TreeParams, g: HierarchyGraph, x_feat) -> dict[int, float]:
    cond: dict[int, float] = {}
    for node in g.internal_nodes:
        cond.update(conditional_probs(tp, g, node, x_feat))
    return cond


def class_probs(tp: TreeParams, g: HierarchyGraph, x_feat) -> ClassDistribution:
    return path_probabilities(g, all_conditionals(tp, g, x_feat))


def predict(tp: TreeParams, g: HierarchyGraph, x_feat) -> int:
    return class_probs(tp, g, x_feat).argmax()


def predict_batch(tp: TreeParams, g: HierarchyGraph, feats: np.ndarray) -> np.ndarray:
    return np.argmax(class_prob_tensor(tp.weights, feats, g, tp.gamma).data, axis=1)


def explain(tp: TreeParams, g: HierarchyGraph, x_feat) -> DecisionTrace:
    """Greedy root-to-leaf walk taking the most probable child at each node."""
    cond = all_conditionals(tp, g, x_feat)
    steps = []
    node = g.root
    path = [node]
    final = 1.0
    while not g.is_leaf(node):
        sib = {c: cond[c] for c in g.children[node]}
        best = max(sib, key=lambda c: (sib[c], -c))
        steps.append(TraceStep(node, g.names[node], sib, best))
        final *= sib[best]
        node = best
        path.append(node)
    argmax_class = path_probabilities(g, cond).argmax()
    return DecisionTrace(steps, g.leaf_to_class[node], final, argmax_class, path)


def divergence(trace: DecisionTrace, g: HierarchyGraph, true_class: int) -> dict | None:
    """Where the greedy path leaves the true class's path, or None if it never does."""
    truth = g.traversal_path(true_class)
    for depth, (got, want) in enumerate(zip(trace.path, truth)):
        if got != want:
            decision = trace.path[depth - 1]
            return {
                "depth": depth,
                "decision_node": decision,
                "decision_node_name": g.names[decision],
                "chosen": got,
                "chosen_name": g.names[got],
                "expected": want,
                "expected_name": g.names[want],
            }
    return None
