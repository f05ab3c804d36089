"""Experiment building blocks shared by the command-line subcommands.

A :class:`World` bundles the global hierarchy (with node semantics), the
feature dataset and the base / novel class split. Episodes are drawn from it
with one child generator per episode, so any episode can be regenerated from
``(seed, stream, index)`` alone.
"""

from __future__ import annotations

from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass

import numpy as np

from metadt.config import RunConfig, model_config
from metadt.dtinet import DropoutConfig, Dims, DTINetParams, config_digest, infer_tree_params, init_params
from metadt.episodes import (
    FeatureDataset,
    SyntheticSpec,
    child_rng,
    generate_synthetic,
    load_features,
    sample_episode,
    synthetic_semantics,
)
from metadt.errors import ConfigError, UnknownClassError
from metadt.fusion import default_lambda, fit_cosine, fuse
from metadt.hierarchy import HierarchyGraph, adjacency_operator, balanced_hierarchy, load_hierarchy
from metadt.iddtree import class_prob_tensor, divergence, explain
from metadt.metalearn import (
    AccuracyReport,
    AdamConfig,
    InnerLoopConfig,
    OuterLoopConfig,
    Task,
    adapt,
    adapted_query_probs,
    meta_train,
)

# spawn-key streams under the run seed
INIT, TRAIN_TASKS, DROPOUT, EVAL_TASKS, EXPLAIN_TASKS, DUMP_TASKS = range(6)
# spawn-key streams under the data seed
DATA, SEMANTICS = 100, 101


@dataclass(frozen=True)
class World:
    hierarchy: HierarchyGraph
    dataset: FeatureDataset
    base: tuple[str, ...]
    novel: tuple[str, ...]

    @property
    def d_s(self) -> int:
        return self.hierarchy.semantic_dim


def stratified_novel(g: HierarchyGraph, n_novel: int) -> list[str]:
    """Hold out leaves round-robin across parents, last child first."""
    groups: dict[int, list[str]] = {}
    for leaf in g.class_to_leaf:
        groups.setdefault(g.parent[leaf], []).append(g.ids[leaf])
    queues = [list(reversed(v)) for v in groups.values()]
    out: list[str] = []
    while len(out) < n_novel and any(queues):
        for q in queues:
            if q and len(out) < n_novel:
                out.append(q.pop(0))
    if len(out) < n_novel:
        raise ConfigError(f"n_novel={n_novel} exceeds the {g.n_classes} available classes")
    return out


def build_world(cfg: RunConfig) -> World:
    if cfg.hierarchy_path:
        g = load_hierarchy(cfg.hierarchy_path)
    else:
        g = balanced_hierarchy(cfg.synthetic_branching, cfg.d_s)
    if cfg.synthetic:
        spec = SyntheticSpec(g, cfg.d_f, cfg.superclass_spread, cfg.class_spread, cfg.noise_sigma)
        ds = generate_synthetic(spec, cfg.samples_per_class, child_rng(cfg.data_seed, DATA))
        if cfg.semantic_mode != "file":
            g = synthetic_semantics(g, ds.metadata["centers"], cfg.d_s, child_rng(cfg.data_seed, SEMANTICS),
                                    cfg.semantic_mode, cfg.semantic_noise)
    else:
        ds = load_features(cfg.features_path, g)
    if ds.d_f != cfg.d_f:
        raise ConfigError(f"d_f = {cfg.d_f} but the features have dimension {ds.d_f}")
    if cfg.no_semantic:
        g = g.with_semantic(np.eye(g.node_count))
    elif g.semantic_dim != cfg.d_s:
        raise ConfigError(f"d_s = {cfg.d_s} but the hierarchy semantics have dimension {g.semantic_dim}")

    leaves = [g.ids[leaf] for leaf in g.class_to_leaf]
    present = [c for c in leaves if c in ds.class_index]
    if cfg.novel_classes:
        unknown = [c for c in cfg.novel_classes if c not in present]
        if unknown:
            raise UnknownClassError(f"novel classes {unknown} are not classes of the dataset")
        novel = list(cfg.novel_classes)
    else:
        novel = [c for c in stratified_novel(g, cfg.n_novel) if c in present]
    base = [c for c in present if c not in novel]
    return World(g, ds, tuple(base), tuple(novel))


def dims_for(cfg: RunConfig, world: World) -> Dims:
    return Dims(world.d_s, cfg.d_in, cfg.d_hid, cfg.d_f)


def digest_for(cfg: RunConfig, world: World) -> bytes:
    return config_digest(model_config(cfg, world.d_s))


def inner_config(cfg: RunConfig, steps: int | None = None) -> InnerLoopConfig:
    return InnerLoopConfig(cfg.m_train if steps is None else steps, cfg.inner_lr)


def make_task(cfg: RunConfig, world: World, rng: np.random.Generator, classes: Sequence[str],
              fixed_query: Sequence[str] = ()) -> Task:
    ep = sample_episode(world.dataset, cfg.n_way, cfg.k_shot, cfg.q_per_class, rng, classes, fixed_query)
    return Task.from_episode(ep, world.hierarchy, cfg.self_loops, cfg.adjacency_norm, identity_adjacency=cfg.no_gcn)


def task_stream(cfg: RunConfig, world: World, stream: int, classes: Sequence[str], count: int) -> Iterator[Task]:
    for i in range(count):
        yield make_task(cfg, world, child_rng(cfg.seed, stream, i), classes)


def train(cfg: RunConfig, world: World, on_record: Callable[[dict], None] | None = None
          ) -> tuple[DTINetParams, list[dict]]:
    init = init_params(dims_for(cfg, world), child_rng(cfg.seed, INIT))
    outer = OuterLoopConfig(
        cfg.epochs, cfg.episodes_per_epoch,
        AdamConfig(cfg.outer_lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps),
        cfg.grad_mode,
    )
    dropout = DropoutConfig(cfg.dropout_rate, frozenset(cfg.dropout_phases))
    tasks = task_stream(cfg, world, TRAIN_TASKS, world.base, cfg.epochs * cfg.episodes_per_epoch)
    return meta_train(init, tasks, inner_config(cfg), outer, child_rng(cfg.seed, DROPOUT),
                      gamma=cfg.gamma, dropout=dropout, on_record=on_record)


def mean_prototype_weights(task: Task) -> np.ndarray:
    """Leaves take their class support mean; every internal node the mean of its children."""
    g = task.graph
    w = np.zeros((g.node_count, task.support.features.shape[1]))
    for k, leaf in enumerate(g.class_to_leaf):
        w[leaf] = task.support.features[task.support.labels == k].mean(axis=0)
    order = [g.root]
    for node in order:
        order.extend(g.children[node])
    for node in reversed(order):
        if not g.is_leaf(node):
            w[node] = w[list(g.children[node])].mean(axis=0)
    return w


def tree_query_probs(params: DTINetParams | None, task: Task, cfg: RunConfig, m_test: int) -> np.ndarray:
    if cfg.no_dtinet:
        return class_prob_tensor(mean_prototype_weights(task), task.query.features, task.graph, cfg.gamma).data
    probs, _ = adapted_query_probs(params, task, InnerLoopConfig(m_test, cfg.inner_lr), cfg.gamma)
    return probs


def resolve_lambda(cfg: RunConfig) -> float:
    return default_lambda(cfg.k_shot) if cfg.fusion_lambda == "auto" else float(cfg.fusion_lambda)


@dataclass(frozen=True)
class EvalResult:
    tree: AccuracyReport
    cosine: AccuracyReport
    fused: AccuracyReport
    lam: float
    m_test: int

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "m_test": self.m_test, "metadt": self.tree.to_dict(),
                "cosine": self.cosine.to_dict(), "fused": self.fused.to_dict()}

    def table(self) -> str:
        """Fusion comparison: cosine classifier, tree alone, and their mixture."""
        rows = [("cosine classifier", self.cosine), ("MetaDT", self.tree),
                (f"MetaDT + cosine (lambda={self.lam:g})", self.fused)]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {rep}" for name, rep in rows)


def evaluate(params: DTINetParams | None, cfg: RunConfig, world: World, *, lam: float | None = None,
             m_test: int | None = None, episodes: int | None = None) -> EvalResult:
    """Meta-test over ``episodes`` novel-class episodes drawn from the eval stream."""
    lam = resolve_lambda(cfg) if lam is None else lam
    m_test = cfg.effective_m_test if m_test is None else m_test
    n = cfg.eval_episodes if episodes is None else episodes
    acc = {"tree": [], "cosine": [], "fused": []}
    for task in task_stream(cfg, world, EVAL_TASKS, world.novel, n):
        p_tree = tree_query_probs(params, task, cfg, m_test)
        p_cos = fit_cosine(task.support.features, task.support.labels, cfg.n_way, cfg.gamma).probs(task.query.features)
        p_fused = fuse(p_tree, p_cos, lam)
        for key, p in (("tree", p_tree), ("cosine", p_cos), ("fused", p_fused)):
            acc[key].append(float(np.mean(np.argmax(p, axis=1) == task.query.labels)))
    rep = {k: AccuracyReport(np.array(v)) for k, v in acc.items()}
    return EvalResult(rep["tree"], rep["cosine"], rep["fused"], lam, m_test)


ABLATIONS = (
    ("full", "MetaDT"),
    ("no_semantic", "w/o class semantics (one-hot nodes)"),
    ("no_gcn", "w/o graph convolution (identity adjacency)"),
    ("no_dtinet", "w/o DTINet (mean-prototype tree)"),
    ("no_adapt", "w/o fast adaptation (m_test = 0)"),
)


def ablate(cfg: RunConfig, episodes: int | None = None,
           on_record: Callable[[str, dict], None] | None = None) -> dict[str, EvalResult]:
    """The five ablation settings, all scored on the same evaluation episodes."""
    base_cfg = cfg.replace(no_semantic=False, no_gcn=False, no_dtinet=False, no_adapt=False)
    world = build_world(base_cfg)
    log = (lambda name: (lambda rec: on_record(name, rec))) if on_record else (lambda name: None)
    full, _ = train(base_cfg, world, log("full"))
    out = {"full": evaluate(full, base_cfg, world, episodes=episodes)}
    for flag in ("no_semantic", "no_gcn"):
        c = base_cfg.replace(**{flag: True})
        w = build_world(c)
        params, _ = train(c, w, log(flag))
        out[flag] = evaluate(params, c, w, episodes=episodes)
    c = base_cfg.replace(no_dtinet=True)
    out["no_dtinet"] = evaluate(None, c, world, episodes=episodes)
    c = base_cfg.replace(no_adapt=True)
    out["no_adapt"] = evaluate(full, c, world, episodes=episodes)
    return out


def ablation_table(results: dict[str, EvalResult]) -> str:
    width = max(len(label) for _, label in ABLATIONS)
    return "\n".join(f"({i}) {label:<{width}}  {results[key].tree}"
                     for i, (key, label) in zip(("i", "ii", "iii", "iv", "v"), ABLATIONS) if key in results)


def _pool_for(world: World, sample_ids: Sequence[str]) -> tuple[str, ...]:
    labels = {world.dataset.class_labels[world.dataset.row(s)] for s in sample_ids}
    if labels <= set(world.novel):
        return world.novel
    return tuple(world.dataset.classes)


def explain_samples(params: DTINetParams, cfg: RunConfig, world: World, sample_ids: Sequence[str],
                    episode_seed: int | None = None) -> list[dict]:
    """Decision traces for ``sample_ids`` placed in the query set of one adapted episode."""
    seed = cfg.seed if episode_seed is None else episode_seed
    task = make_task(cfg, world, child_rng(seed, EXPLAIN_TASKS), _pool_for(world, sample_ids), sample_ids)
    adapted = adapt(params, task.support, task.graph, task.a_hat, InnerLoopConfig(cfg.effective_m_test, cfg.inner_lr),
                    h=task.h, gamma=cfg.gamma)
    tp = infer_tree_params(adapted.params, task.h, task.a_hat, gamma=cfg.gamma)
    g = task.graph
    out = []
    for sid in sample_ids:
        row = task.query.ids.index(sid)
        true_class = int(task.query.labels[row])
        trace = explain(tp, g, task.query.features[row])
        record = {
            "sample_id": sid,
            "true_class": true_class,
            "true_label": g.ids[g.class_to_leaf[true_class]],
            "predicted_label": g.ids[g.class_to_leaf[trace.predicted_class]],
            "correct": trace.predicted_class == true_class,
            "episode_classes": [g.ids[leaf] for leaf in g.class_to_leaf],
            **trace.to_dict(g),
        }
        record["path"] = [g.ids[i] for i in trace.path]
        if not record["correct"]:
            record["divergence"] = divergence(trace, g, true_class)
        out.append(record)
    return out


def dump_weights(params: DTINetParams, cfg: RunConfig, world: World, episode_seed: int | None = None) -> list[dict]:
    """Per-node prototype rows: the global tree, or one episode before and after adaptation."""
    rows = []
    if episode_seed is None:
        g = world.hierarchy
        a_hat = adjacency_operator(g, cfg.self_loops, cfg.adjacency_norm)
        if cfg.no_gcn:
            a_hat = type(a_hat)(np.eye(g.node_count))
        stages = [("init", g, infer_tree_params(params, g.semantic, a_hat, gamma=cfg.gamma))]
    else:
        task = make_task(cfg, world, child_rng(episode_seed, DUMP_TASKS), world.novel)
        g = task.graph
        adapted = adapt(params, task.support, g, task.a_hat, InnerLoopConfig(cfg.effective_m_test, cfg.inner_lr),
                        h=task.h, gamma=cfg.gamma)
        stages = [
            ("before", g, infer_tree_params(params, task.h, task.a_hat, gamma=cfg.gamma)),
            ("after", g, infer_tree_params(adapted.params, task.h, task.a_hat, gamma=cfg.gamma)),
        ]
    for stage, g, tp in stages:
        for i in range(g.node_count):
            rows.append({
                "node_id": g.ids[i],
                "node_name": g.names[i],
                "depth": g.depth(i),
                "leaf": g.is_leaf(i),
                "stage": stage,
                "weights": tp.weights.data[i],
            })
    return rows
