import json
import warnings
from importlib.resources import files

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles as O
from metadt.errors import (
    CycleError,
    DegenerateGraphError,
    DisconnectedNodeError,
    DuplicateClassError,
    HierarchyError,
    MultipleRootsError,
    SemanticDimensionError,
    UnknownClassError,
)
from metadt.hierarchy import (
    HierarchyGraph,
    MultipleParentsError,
    UnknownTokenWarning,
    adjacency_operator,
    balanced_hierarchy,
    build_adjacency,
    load_hierarchy,
    normalize_adjacency,
    parse_hierarchy,
    save_hierarchy,
    semantic_from_names,
    traversal_path,
)

DATA = files("metadt") / "data"


def seven_node() -> HierarchyGraph:
    return load_hierarchy(DATA / "seven_node.json")


def doc(**changes):
    base = {
        "semantic_dim": 1,
        "nodes": [{"id": i, "semantic": [0.0]} for i in ("r", "a", "b")],
        "edges": [["r", "a"], ["r", "b"]],
        "root": "r",
        "classes": {"0": "a", "1": "b"},
    }
    base.update(changes)
    return base


def test_two_node_adjacency():
    g = HierarchyGraph.build(["r", "l"], ["r", "l"], [("r", "l")], "r", {0: "l"}, np.zeros((2, 1)))
    assert build_adjacency(g).tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_seven_node_adjacency_row_sums_are_degrees():
    g = seven_node()
    a = build_adjacency(g)
    degrees = [sum(1 for e in g.edges if i in e) for i in range(g.node_count)]
    assert a.sum(axis=1).tolist() == degrees
    assert np.array_equal(a, a.T) and not np.diag(a).any()


def test_star_adjacency():
    ids = ["r", "x", "y", "z"]
    g = HierarchyGraph.build(ids, ids, [("r", c) for c in "xyz"], "r", {0: "x", 1: "y", 2: "z"}, np.zeros((4, 1)))
    sums = build_adjacency(g).sum(axis=1)
    assert sums[0] == 3 and (sums[1:] == 1).all()


def test_normalize_small_cases():
    assert normalize_adjacency(np.zeros((1, 1))).a_hat.tolist() == [[1.0]]
    two = normalize_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]])).a_hat
    assert np.allclose(two, 0.5, atol=1e-15)


def test_isolated_node_without_self_loops():
    with pytest.raises(DegenerateGraphError):
        normalize_adjacency(np.zeros((2, 2)), self_loops=False)


def test_asymmetric_mode_is_d_half_a_d_half():
    g = seven_node()
    a = build_adjacency(g) + np.eye(g.node_count)
    d = a.sum(axis=1)
    want = np.diag(d ** -0.5) @ a @ np.diag(d ** 0.5)
    assert np.allclose(adjacency_operator(g, mode="asymmetric").a_hat, want, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_normalized_adjacency_properties(seed, loops):
    g = O.random_tree(np.random.default_rng(seed))
    a_hat = adjacency_operator(g, self_loops=loops).a_hat
    assert np.allclose(a_hat, a_hat.T, atol=1e-12)
    assert (a_hat >= 0).all()
    assert ((build_adjacency(g) + (np.eye(g.node_count) if loops else 0) == 0) <= (a_hat == 0)).all()
    if loops:
        # row sums can exceed 1 at hubs; the operator norm cannot
        eig = np.linalg.eigvalsh(a_hat)
        assert eig.max() <= 1 + 1e-12 and eig.min() > -1
        d_half = np.sqrt(build_adjacency(g).sum(axis=1) + 1)
        assert np.allclose(a_hat @ d_half, d_half, atol=1e-12)
        assert np.abs(a_hat - O.normalized_adjacency(g.parent)).max() < 1e-14


def test_traversal_paths():
    g = seven_node()
    assert [g.ids[i] for i in traversal_path(g, 3)] == ["6", "5", "3"]
    flat = balanced_hierarchy([4])
    assert all(len(flat.traversal_path(k)) == 2 for k in range(4))
    with pytest.raises(UnknownClassError):
        g.traversal_path(4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_paths_cover_every_edge_once(seed):
    g = O.random_tree(np.random.default_rng(seed))
    covered = set()
    for k in range(g.n_classes):
        path = g.traversal_path(k)
        assert path[0] == g.root and g.leaf_to_class[path[-1]] == k
        for p, c in zip(path, path[1:]):
            assert (p, c) in g.edges
            covered.add((p, c))
    assert len(covered) == g.node_count - 1


def test_bundled_fixtures():
    g = seven_node()
    assert (g.node_count, g.n_classes, g.semantic_dim) == (7, 4, 4)
    assert g.ids[g.root] == "6"
    animals = load_hierarchy(DATA / "animals.json")
    assert (animals.node_count, animals.n_classes) == (8, 5)
    dog = animals.index_of("dog")
    assert np.allclose(animals.semantic[dog], [0.65, -0.05, 0.1, 0.2])


@pytest.mark.parametrize("changes, error", [
    ({"edges": [["r", "a"], ["a", "b"], ["b", "a"]]}, MultipleParentsError),
    ({"edges": [["r", "a"], ["b", "a"]]}, MultipleParentsError),
    ({"edges": [["r", "a"], ["a", "r"], ["r", "b"]]}, CycleError),
    ({"edges": [["r", "a"]], "classes": {"0": "a"}}, DisconnectedNodeError),
    ({"classes": {"0": "a", "1": "a"}}, DuplicateClassError),
    ({"semantic_dim": 2}, SemanticDimensionError),
    ({"classes": {"0": "a"}}, HierarchyError),
    ({"classes": {"0": "r", "1": "b"}}, HierarchyError),
])
def test_validation_errors(changes, error):
    with pytest.raises(error):
        parse_hierarchy(doc(**changes))


def test_cycle_among_non_root_nodes():
    d = doc(nodes=[{"id": i, "semantic": [0.0]} for i in ("r", "a", "b", "c", "d")],
            edges=[["r", "a"], ["b", "c"], ["c", "d"], ["d", "b"]], classes={"0": "a"})
    with pytest.raises(CycleError):
        parse_hierarchy(d)


def test_multiple_roots():
    d = doc(nodes=[{"id": i, "semantic": [0.0]} for i in ("r", "a", "s", "b")],
            edges=[["r", "a"], ["s", "b"]])
    with pytest.raises(MultipleRootsError):
        parse_hierarchy(d)


def test_node_needs_exactly_one_semantic_source():
    d = doc()
    d["nodes"][1] = {"id": "a", "semantic": [0.0], "tokens": ["a"]}
    with pytest.raises(HierarchyError):
        parse_hierarchy(d)


def test_semantic_from_names():
    table = {"dog": np.array([1.0, 2.0]), "cat": np.array([3.0, 0.0])}
    rows = semantic_from_names([["dog"], ["dog", "cat"]], table)
    assert rows.tolist() == [[1.0, 2.0], [2.0, 1.0]]
    with pytest.warns(UnknownTokenWarning):
        zero = semantic_from_names([["zebra"]], table)
    assert zero.tolist() == [[0.0, 0.0]]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert np.allclose(semantic_from_names([["dog", "zebra"]], table), [[1.0, 2.0]])
    with pytest.raises(HierarchyError):
        semantic_from_names([[]], table)
    with pytest.raises(HierarchyError):
        semantic_from_names([["zebra"]], table, fallback=False)


def test_round_trip(tmp_path):
    for g in (seven_node(), load_hierarchy(DATA / "animals.json"), O.random_tree(np.random.default_rng(5))):
        save_hierarchy(g, tmp_path / "h.json")
        assert load_hierarchy(tmp_path / "h.json").same_as(g)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_property(seed):
    g = O.random_tree(np.random.default_rng(seed))
    assert parse_hierarchy(json.loads(json.dumps(g.to_dict()))).same_as(g)


def test_children_sorted_by_name():
    ids = ["r", "z", "m", "a"]
    g = HierarchyGraph.build(ids, ids, [("r", "z"), ("r", "m"), ("r", "a")], "r", {0: "z", 1: "m", 2: "a"},
                             np.zeros((4, 1)))
    assert [g.names[c] for c in g.children[g.root]] == ["a", "m", "z"]


def test_restrict_keeps_minimal_subtree():
    g = balanced_hierarchy([3, 2])
    sub = g.restrict(["n2.1", "n0.0"])
    assert set(sub.ids) == {"nroot", "n0", "n2", "n0.0", "n2.1"}
    assert [sub.ids[sub.class_to_leaf[k]] for k in range(2)] == ["n2.1", "n0.0"]
    with pytest.raises(HierarchyError):
        g.restrict(["n0"])
