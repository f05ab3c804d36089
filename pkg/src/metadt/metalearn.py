"""Two-loop optimization of the tree inference network.

The inner loop fine-tunes a copy of the network on one episode's support set
with plain gradient descent; the outer loop updates the shared
initialization from the query loss after adaptation (AdamW, one episode per
step). Meta-test repeats the inner loop and scores the query set.
"""

from __future__ import annotations

import time
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field

import numpy as np

from metadt import tensor as T
from metadt.dtinet import NO_DROPOUT, DropoutConfig, DTINetParams, infer_tree_params
from metadt.episodes import Episode, LabeledSet
from metadt.errors import ConfigError, ContractError, DivergenceError, NumericError
from metadt.hierarchy import AdjacencyOperator, HierarchyGraph, adjacency_operator
from metadt.iddtree import DEFAULT_GAMMA, ClassDistribution, class_prob_tensor
from metadt.tensor import GradTape, Tensor

GRAD_MODES = ("first_order", "full_second_order")
MAX_SECOND_ORDER_STEPS = 3


@dataclass(frozen=True)
class InnerLoopConfig:
    steps: int = 25
    lr: float = 0.05

    def __post_init__(self):
        if self.steps < 0 or not self.lr > 0:
            raise ConfigError(f"inner loop needs steps >= 0 and lr > 0, got {self.steps}, {self.lr}")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("invalid Adam settings")


@dataclass(frozen=True)
class OuterLoopConfig:
    epochs: int = 20
    episodes_per_epoch: int = 100
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    grad_mode: str = "first_order"

    def __post_init__(self):
        if self.epochs < 0 or self.episodes_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and episodes_per_epoch >= 1")
        if self.grad_mode not in GRAD_MODES:
            raise ConfigError(f"grad_mode must be one of {GRAD_MODES}")


@dataclass(frozen=True)
class Task:
    """One episode together with its hierarchy, adjacency and node semantics."""

    graph: HierarchyGraph
    a_hat: AdjacencyOperator
    support: LabeledSet
    query: LabeledSet
    semantic: np.ndarray | None = None

    @property
    def h(self) -> np.ndarray:
        return self.graph.semantic if self.semantic is None else self.semantic

    @classmethod
    def from_episode(
        cls,
        episode: Episode,
        hierarchy: HierarchyGraph,
        self_loops: bool = True,
        adjacency_norm: str = "symmetric",
        identity_adjacency: bool = False,
    ) -> Task:
        g = hierarchy.restrict(episode.class_map)
        if identity_adjacency:
            a_hat = AdjacencyOperator(np.eye(g.node_count))
        else:
            a_hat = adjacency_operator(g, self_loops=self_loops, mode=adjacency_norm)
        return cls(g, a_hat, episode.support, episode.query)


@dataclass
class AdaptedState:
    params: DTINetParams
    support_losses: list[float]


def _probs(params, g, a_hat, h, feats, *, gamma, dropout=NO_DROPOUT, phase="eval", rng=None) -> Tensor:
    tp = infer_tree_params(params, h, a_hat, dropout, phase, rng, gamma)
    return class_prob_tensor(tp.weights, feats, g, gamma)


def support_loss(
    params: DTINetParams,
    g: HierarchyGraph,
    a_hat: AdjacencyOperator,
    support: LabeledSet,
    *,
    h: np.ndarray | None = None,
    gamma: float = DEFAULT_GAMMA,
    dropout: DropoutConfig = NO_DROPOUT,
    phase: str = "inner_adapt",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean cross-entropy of the tree inferred by ``params`` over a labeled set."""
    if len(support) == 0:
        raise ContractError("empty support set")
    h = g.semantic if h is None else h
    probs = _probs(params, g, a_hat, h, support.features, gamma=gamma, dropout=dropout, phase=phase, rng=rng)
    return T.mean_cross_entropy(probs, support.labels)


def adapt(
    init: DTINetParams,
    support: LabeledSet,
    g: HierarchyGraph,
    a_hat: AdjacencyOperator,
    cfg: InnerLoopConfig,
    *,
    h: np.ndarray | None = None,
    gamma: float = DEFAULT_GAMMA,
) -> AdaptedState:
    """``cfg.steps`` gradient-descent steps on the support loss.

    ``init`` is left untouched. If an enclosing tape watches ``init`` the
    whole update chain is recorded on it, which is how second-order outer
    gradients are obtained.
    """
    params = init
    losses: list[float] = []
    for step in range(cfg.steps + 1):
        try:
            with GradTape() as tape:
                tape.watch(*params)
                loss = support_loss(params, g, a_hat, support, h=h, gamma=gamma)
            losses.append(loss.item())
            if step == cfg.steps:
                break
            grads = tape.gradient(loss, list(params))
            params = DTINetParams(*(T.sub(w, T.mul(dw, cfg.lr)) for w, dw in zip(params, grads)))
        except NumericError as exc:
            raise DivergenceError(f"inner loop diverged at step {step}: {exc}", step=step) from None
    return AdaptedState(params, losses)


def query_distribution(
    adapted: AdaptedState,
    g: HierarchyGraph,
    a_hat: AdjacencyOperator,
    x_feat,
    *,
    h: np.ndarray | None = None,
    gamma: float = DEFAULT_GAMMA,
) -> ClassDistribution:
    h = g.semantic if h is None else h
    probs = _probs(adapted.params, g, a_hat, h, np.atleast_2d(x_feat), gamma=gamma)
    return ClassDistribution(probs.data[0])


def adapted_query_probs(params: DTINetParams, task: Task, inner: InnerLoopConfig,
                        gamma: float = DEFAULT_GAMMA) -> tuple[np.ndarray, AdaptedState]:
    adapted = adapt(params, task.support, task.graph, task.a_hat, inner, h=task.h, gamma=gamma)
    probs = _probs(adapted.params, task.graph, task.a_hat, task.h, task.query.features, gamma=gamma)
    return probs.data, adapted


class AdamW:
    """Adam with decoupled weight decay over the three weight matrices."""

    def __init__(self, cfg: AdamConfig):
        self.cfg = cfg
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: DTINetParams, grads: list[np.ndarray]) -> DTINetParams:
        c = self.cfg
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.t += 1
        new = []
        for i, (w, g) in enumerate(zip(params.arrays(), grads)):
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            m_hat = self.m[i] / (1 - c.beta1 ** self.t)
            v_hat = self.v[i] / (1 - c.beta2 ** self.t)
            w = w * (1 - c.lr * c.weight_decay)
            new.append(w - c.lr * m_hat / (np.sqrt(v_hat) + c.eps))
        return DTINetParams(*new)


@dataclass
class EpisodeStats:
    support_loss_initial: float
    support_loss_final: float
    query_loss: float
    query_accuracy: float


def outer_gradient(
    params: DTINetParams,
    task: Task,
    inner: InnerLoopConfig,
    grad_mode: str = "first_order",
    *,
    rng: np.random.Generator | None = None,
    gamma: float = DEFAULT_GAMMA,
    dropout: DropoutConfig = NO_DROPOUT,
) -> tuple[list[np.ndarray], EpisodeStats]:
    """Gradient of the post-adaptation query loss w.r.t. the initialization.

    ``first_order`` evaluates the query-loss gradient at the adapted
    parameters; ``full_second_order`` differentiates through the inner loop.
    """
    def query_loss(adapted_params):
        probs = _probs(adapted_params, task.graph, task.a_hat, task.h, task.query.features,
                       gamma=gamma, dropout=dropout, phase="outer_train", rng=rng)
        return probs, T.mean_cross_entropy(probs, task.query.labels)

    if grad_mode == "first_order":
        adapted = adapt(params, task.support, task.graph, task.a_hat, inner, h=task.h, gamma=gamma)
        with GradTape() as tape:
            tape.watch(*adapted.params)
            probs, loss = query_loss(adapted.params)
        grads = tape.gradient(loss, list(adapted.params))
    elif grad_mode == "full_second_order":
        if inner.steps > MAX_SECOND_ORDER_STEPS:
            raise ConfigError(
                f"full_second_order supports at most {MAX_SECOND_ORDER_STEPS} inner steps, got {inner.steps}")
        with GradTape() as tape:
            tape.watch(*params)
            adapted = adapt(params, task.support, task.graph, task.a_hat, inner, h=task.h, gamma=gamma)
            probs, loss = query_loss(adapted.params)
        grads = tape.gradient(loss, list(params))
    else:
        raise ConfigError(f"grad_mode must be one of {GRAD_MODES}")
    acc = float(np.mean(np.argmax(probs.data, axis=1) == task.query.labels))
    stats = EpisodeStats(adapted.support_losses[0], adapted.support_losses[-1], loss.item(), acc)
    return [g.data for g in grads], stats


def meta_train(
    init: DTINetParams,
    tasks: Iterable[Task],
    inner: InnerLoopConfig,
    outer: OuterLoopConfig,
    rng: np.random.Generator,
    *,
    gamma: float = DEFAULT_GAMMA,
    dropout: DropoutConfig = NO_DROPOUT,
    on_record: Callable[[dict], None] | None = None,
) -> tuple[DTINetParams, list[dict]]:
    """Episodic outer loop: ``outer.epochs * outer.episodes_per_epoch`` AdamW steps."""
    stream = iter(tasks)
    opt = AdamW(outer.optimizer)
    params = init.detached()
    log: list[dict] = []
    index = 0
    for epoch in range(outer.epochs):
        for episode in range(outer.episodes_per_epoch):
            try:
                task = next(stream)
            except StopIteration:
                raise ContractError(f"task stream exhausted after {index} episodes") from None
            start = time.perf_counter()
            try:
                grads, stats = outer_gradient(params, task, inner, outer.grad_mode,
                                              rng=rng, gamma=gamma, dropout=dropout)
                params = opt.step(params, grads)
                if not all(np.isfinite(w).all() for w in params.arrays()):
                    raise NumericError("non-finite parameters after outer step")
            except NumericError as exc:
                raise DivergenceError(f"episode {index}: {exc}", episode=index,
                                      step=getattr(exc, "step", None)) from None
            record = {
                "epoch": epoch,
                "episode": episode,
                "support_loss_initial": stats.support_loss_initial,
                "support_loss_final": stats.support_loss_final,
                "query_loss": stats.query_loss,
                "query_accuracy": stats.query_accuracy,
                "wall_ms": (time.perf_counter() - start) * 1e3,
            }
            log.append(record)
            if on_record is not None:
                on_record(record)
            index += 1
    return params, log


@dataclass(frozen=True)
class AccuracyReport:
    accuracies: np.ndarray

    @property
    def n(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def ci95(self) -> float:
        return float(1.96 * np.std(self.accuracies) / np.sqrt(self.n))

    def __str__(self) -> str:
        return f"{100 * self.mean:.2f}% ± {100 * self.ci95:.2f}"

    def to_dict(self) -> dict:
        return {"episodes": self.n, "mean": self.mean, "ci95": self.ci95,
                "accuracies": [float(a) for a in self.accuracies]}


Predictor = Callable[[DTINetParams, Task], np.ndarray]


def metadt_predictor(inner: InnerLoopConfig, gamma: float = DEFAULT_GAMMA) -> Predictor:
    def predict(params: DTINetParams, task: Task) -> np.ndarray:
        probs, _ = adapted_query_probs(params, task, inner, gamma)
        return np.argmax(probs, axis=1)
    return predict


def meta_test(
    trained: DTINetParams,
    tasks: Iterable[Task],
    inner: InnerLoopConfig,
    *,
    gamma: float = DEFAULT_GAMMA,
    predictor: Predictor | None = None,
) -> AccuracyReport:
    """Per-episode query accuracy after adaptation, reduced in episode order."""
    predictor = predictor or metadt_predictor(inner, gamma)
    accs = [float(np.mean(predictor(trained, task) == task.query.labels)) for task in tasks]
    if not accs:
        raise ContractError("meta_test needs at least one episode")
    return AccuracyReport(np.array(accs))
