"""Cosine nearest-prototype classifier and its convex fusion with the tree."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metadt import tensor as T
from metadt.errors import ConfigError, ContractError, DegenerateInputError, ShapeError
from metadt.iddtree import DEFAULT_GAMMA, ClassDistribution


@dataclass(frozen=True)
class CosineClassifier:
    prototypes: np.ndarray
    gamma: float = DEFAULT_GAMMA

    def probs(self, feats: np.ndarray) -> np.ndarray:
        """Batched class probabilities for the rows of ``feats``."""
        cos = T.cosine_matrix(np.atleast_2d(feats), self.prototypes)
        return T.softmax_scaled(cos, self.gamma).data


@dataclass(frozen=True)
class FusionConfig:
    lam: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"fusion lambda must lie in [0, 1], got {self.lam}")


def default_lambda(k_shot: int) -> float:
    """0.8 for 1-shot and 0.1 for 5-shot, linearly interpolated in between."""
    if k_shot <= 1:
        return 0.8
    if k_shot >= 5:
        return 0.1
    return 0.8 + (k_shot - 1) * (0.1 - 0.8) / 4


def fit_cosine(features: np.ndarray, labels: np.ndarray, n_classes: int, gamma: float = DEFAULT_GAMMA) -> CosineClassifier:
    """One prototype per class: the mean of that class's support features."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    protos = np.empty((n_classes, features.shape[1]))
    for k in range(n_classes):
        rows = features[labels == k]
        if len(rows) == 0:
            raise ContractError(f"class {k} has no support samples")
        protos[k] = rows.mean(axis=0)
    if (np.linalg.norm(protos, axis=1) < T.NORM_FLOOR).any():
        raise DegenerateInputError("a class prototype has zero norm")
    return CosineClassifier(protos, gamma)


def cosine_distribution(c: CosineClassifier, x_feat) -> ClassDistribution:
    x = np.asarray(x_feat, dtype=np.float64).reshape(1, -1)
    return ClassDistribution(c.probs(x)[0])


def fuse(p_tree, p_cos, cfg: FusionConfig | float):
    """``lam * p_tree + (1 - lam) * p_cos``; works for single distributions and batches."""
    lam = cfg.lam if isinstance(cfg, FusionConfig) else FusionConfig(float(cfg)).lam
    single = isinstance(p_tree, ClassDistribution)
    a = np.asarray(p_tree.probs if single else p_tree, dtype=np.float64)
    b = np.asarray(p_cos.probs if isinstance(p_cos, ClassDistribution) else p_cos, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot fuse distributions of shapes {a.shape} and {b.shape}")
    for name, p in (("p_tree", a), ("p_cos", b)):
        if a.size and np.abs(p.sum(axis=-1) - 1.0).max() > 1e-6:
            raise ContractError(f"{name} does not sum to 1 within 1e-6")
    # clipping only absorbs rounding; it makes betweenness and fuse(p, p) == p exact
    out = np.clip(lam * a + (1.0 - lam) * b, np.minimum(a, b), np.maximum(a, b))
    return ClassDistribution(out) if single else out
