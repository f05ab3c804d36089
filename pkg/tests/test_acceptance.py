"""Headline acceptance checks; run with ``pytest tests/test_acceptance.py -s`` to see the PASS/FAIL lines."""

import json
import time
from importlib.resources import files

import numpy as np

import oracles as O
import worlds as W
from metadt import experiments as X
from metadt.cli import main
from metadt.dtinet import DTINetParams, infer_tree_params, init_params, Dims
from metadt.fusion import fit_cosine, fuse
from metadt.hierarchy import adjacency_operator, load_hierarchy
from metadt.iddtree import TreeParams, class_prob_tensor, class_probs
from metadt.metalearn import InnerLoopConfig, adapt, support_loss
from metadt.tensor import GradTape, mean_cross_entropy

EXAMPLE = files("metadt") / "data" / "example.toml"


def verdict(name: str, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


def test_seven_node_golden():
    start = time.perf_counter()
    g = load_hierarchy(files("metadt") / "data" / "seven_node.json")
    w, x = O.seven_node_prototypes(g, 10.0)
    dist = class_probs(TreeParams(w, 10.0), g, x)
    secs = time.perf_counter() - start
    err, total = abs(dist[3] - 0.42), abs(dist.probs.sum() - 1)
    verdict("seven-node worked example", err < 1e-9 and total < 1e-9 and secs < 1,
            f"|P(3)-0.42|={err:.1e}, |sum-1|={total:.1e}, {secs:.3f}s")


def test_oracle_equivalence():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        g = O.random_tree(rng, max_depth=4, max_leaves=20)
        w, x = rng.standard_normal((g.node_count, 5)), rng.standard_normal(5)
        worst = max(worst, np.abs(class_probs(TreeParams(w), g, x).probs - O.graph_paths(g, w, x, 10.0)).max())
    secs = time.perf_counter() - start
    verdict("oracle equivalence", worst < 1e-10 and secs < 10, f"200 trees, max err {worst:.1e}, {secs:.2f}s")


def pipeline_loss(params, g, h, a_hat, feats, labels):
    tp = infer_tree_params(params, h, a_hat)
    return mean_cross_entropy(class_prob_tensor(tp.weights, feats, g), labels)


def smooth_instance(params, h, a_hat, margin=1e-3) -> bool:
    """Finite differences need every prototype nonzero and no pre-activation near a ReLU kink."""
    w0, w1, w2 = params.arrays()
    z0 = a_hat @ h @ w0
    z1 = a_hat @ np.maximum(z0, 0) @ w1
    theta = a_hat @ np.maximum(z1, 0) @ w2
    near_kink = min(np.abs(z0).min(), np.abs(z1).min()) < margin
    return not near_kink and np.linalg.norm(theta, axis=1).min() > 1e-6


def test_gradient_suite():
    start = time.perf_counter()
    worst = 0.0
    n = seed = rejected = 0
    while n < 50:
        rng = np.random.default_rng(10_000 + seed)
        seed += 1
        g = O.random_tree(rng, max_depth=3, max_leaves=6, d_s=4)
        if g.node_count > 10:
            continue
        d_f = int(rng.integers(2, 17))
        params = init_params(Dims(4, 8, 8, d_f), rng)
        a_hat = adjacency_operator(g).a_hat
        feats = rng.standard_normal((4, d_f))
        labels = rng.integers(0, g.n_classes, 4)
        if not smooth_instance(params, g.semantic, a_hat):
            rejected += 1
            continue
        with GradTape() as tape:
            tape.watch(*params)
            loss = pipeline_loss(params, g, g.semantic, a_hat, feats, labels)
        grads = [t.data for t in tape.gradient(loss, list(params))]
        if max(np.linalg.norm(gr) for gr in grads) < 1e-8:
            # collapsed hidden layers make every cosine equal: the loss is flat
            rejected += 1
            continue
        arrays = params.arrays()
        for i, analytic in enumerate(grads):
            def f(w, i=i):
                ws = list(arrays)
                ws[i] = w
                return pipeline_loss(DTINetParams(*ws), g, g.semantic, a_hat, feats, labels).item()
            numeric = O.central_diff(f, arrays[i], h=1e-5)
            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
        n += 1
    secs = time.perf_counter() - start
    verdict("gradient suite", worst < 1e-4 and secs < 60, f"50 instances ({rejected} degenerate redrawn), max rel err {worst:.1e}, {secs:.1f}s")


def test_fast_adaptation():
    drops, worst = 0, 0.0
    for seed in range(100):
        t = W.task(seed)
        p = W.params(seed)
        state = adapt(p, t.support, t.graph, t.a_hat, InnerLoopConfig(25, 0.05), h=t.h)
        drops += state.support_losses[-1] < state.support_losses[0]
        theta = O.gcn_straight(t.h, O.normalized_adjacency(t.graph.parent), *p.arrays())
        want = np.mean([O.cross_entropy_direct(O.graph_paths(t.graph, theta, x, 10.0), y)
                        for x, y in zip(t.support.features, t.support.labels)])
        worst = max(worst, abs(state.support_losses[0] - want))
    verdict("fast adaptation", drops >= 95 and worst < 1e-10,
            f"loss fell in {drops}/100 episodes, initial-loss err {worst:.1e}")


def test_meta_learning_lift(desk_run):
    before, after = desk_run.untrained_eval.tree, desk_run.trained_eval.tree
    total = desk_run.train_seconds + desk_run.timings["untrained"] + desk_run.timings["trained"]
    gain = 100 * (after.mean - before.mean)
    verdict("meta-learning lift", gain >= 5 and total < 600,
            f"untrained {before}, trained {after} (+{gain:.2f} pts), {total:.0f}s")


def test_ablation_direction(desk_run):
    full, frozen = desk_run.trained_eval.tree, desk_run.no_adapt_eval.tree
    verdict("ablation direction", full.mean >= frozen.mean, f"full {full} vs m_test=0 {frozen}")


def test_fusion_boundaries(desk_run):
    cfg, world = desk_run.cfg, desk_run.world
    same, between, episodes = True, True, 0
    for task in X.task_stream(cfg, world, X.EVAL_TASKS, world.novel, 50):
        p_tree = X.tree_query_probs(desk_run.trained, task, cfg, cfg.m_test)
        p_cos = fit_cosine(task.support.features, task.support.labels, cfg.n_way, cfg.gamma).probs(task.query.features)
        same &= np.array_equal(fuse(p_tree, p_cos, 1.0).argmax(1), p_tree.argmax(1))
        same &= np.array_equal(fuse(p_tree, p_cos, 0.0).argmax(1), p_cos.argmax(1))
        for lam in (0.1, 0.5, 0.8):
            out = fuse(p_tree, p_cos, lam)
            between &= bool(np.all(out >= np.minimum(p_tree, p_cos)) and np.all(out <= np.maximum(p_tree, p_cos)))
        episodes += 1
    one = X.evaluate(desk_run.trained, cfg, world, lam=1.0, episodes=50)
    zero = X.evaluate(desk_run.trained, cfg, world, lam=0.0, episodes=50)
    same &= np.array_equal(one.fused.accuracies, one.tree.accuracies)
    same &= np.array_equal(zero.fused.accuracies, zero.cosine.accuracies)
    verdict("fusion boundaries", same and between,
            f"{episodes} episodes; boundary predictions identical={same}, entrywise betweenness={between}")


def test_determinism(tmp_path, capsys):
    args = ["--config", str(EXAMPLE), "--seed", "7", "--set", "epochs=2"]
    outputs = []
    for run in ("a", "b"):
        out = str(tmp_path / run)
        assert main(["train", *args, "--out", out]) == 0
        assert main(["eval", *args, "--out", out, "--episodes", "100"]) == 0
        outputs.append(capsys.readouterr().out.splitlines()[-1])
    ckpt = [(tmp_path / r / "checkpoint.mdtc").read_bytes() for r in ("a", "b")]
    reports = [json.loads((tmp_path / r / "eval_report.json").read_text())["metadt"] for r in ("a", "b")]
    ok = ckpt[0] == ckpt[1] and outputs[0] == outputs[1] and reports[0] == reports[1]
    verdict("determinism", ok, f"checkpoints identical={ckpt[0] == ckpt[1]}, eval {outputs[0]!r} twice")


def test_invariant_sweep():
    norm_err = scale_err = perm_err = 0.0
    dims = Dims(3, 5, 6, 4)
    for seed in range(100):
        rng = np.random.default_rng(20_000 + seed)
        g = O.random_tree(rng)
        w, x = rng.standard_normal((g.node_count, 4)), rng.standard_normal(4)
        p = class_probs(TreeParams(w), g, x).probs
        norm_err = max(norm_err, abs(p.sum() - 1))
        c = float(rng.uniform(1e-3, 1e3))
        scale_err = max(scale_err, np.abs(class_probs(TreeParams(w), g, c * x).probs - p).max())
        params = init_params(dims, rng)
        a = adjacency_operator(g).a_hat
        P = np.eye(g.node_count)[rng.permutation(g.node_count)]
        base = infer_tree_params(params, g.semantic, a).weights.data
        moved = infer_tree_params(params, P @ g.semantic, P @ a @ P.T).weights.data
        perm_err = max(perm_err, np.abs(moved - P @ base).max())
    verdict("invariant sweep", norm_err < 1e-9 and scale_err < 1e-10 and perm_err < 1e-10,
            f"100 instances each: normalization {norm_err:.1e}, scale {scale_err:.1e}, permutation {perm_err:.1e}")
