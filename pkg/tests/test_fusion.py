import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles as O
from metadt.errors import ConfigError, ContractError, DegenerateInputError, ShapeError
from metadt.fusion import FusionConfig, cosine_distribution, default_lambda, fit_cosine, fuse
from metadt.iddtree import ClassDistribution


def test_one_shot_prototypes_are_the_support_features():
    x = np.random.default_rng(0).standard_normal((5, 7))
    c = fit_cosine(x, np.arange(5), 5)
    assert np.array_equal(c.prototypes, x)


def test_identical_samples_give_that_sample():
    x = np.random.default_rng(1).standard_normal((3, 4))
    c = fit_cosine(np.repeat(x, 2, axis=0), np.repeat(np.arange(3), 2), 3)
    assert np.array_equal(c.prototypes, x)


def test_five_shot_mean_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((25, 6))
    y = rng.permutation(np.repeat(np.arange(5), 5))
    c = fit_cosine(x, y, 5)
    for k in range(5):
        rows = [x[i] for i in range(25) if y[i] == k]
        want = [sum(r[j] for r in rows) / 5 for j in range(6)]
        assert np.abs(c.prototypes[k] - want).max() < 1e-12


def test_missing_class_is_rejected():
    with pytest.raises(ContractError):
        fit_cosine(np.ones((2, 3)), np.array([0, 0]), 2)


def test_argmax_at_own_prototype():
    c = fit_cosine(np.eye(4), np.arange(4), 4)
    for j in range(4):
        assert cosine_distribution(c, np.eye(4)[j]).argmax() == j


def test_identical_prototypes_are_uniform():
    c = fit_cosine(np.ones((3, 2)), np.arange(3), 3)
    assert np.abs(cosine_distribution(c, [0.3, -2.0]).probs - 1 / 3).max() < 1e-15


def test_cosine_matches_direct_formula():
    rng = np.random.default_rng(3)
    c = fit_cosine(rng.standard_normal((5, 8)), np.arange(5), 5, gamma=10.0)
    for _ in range(20):
        x = rng.standard_normal(8)
        want = O.softmax_direct([O.cosine(x, w) for w in c.prototypes], 10.0)
        got = cosine_distribution(c, x).probs
        assert np.abs(got - want).max() < 1e-12 and abs(got.sum() - 1) < 1e-12


def test_zero_query_is_degenerate():
    c = fit_cosine(np.eye(2), np.arange(2), 2)
    with pytest.raises(DegenerateInputError):
        cosine_distribution(c, [0.0, 0.0])


def test_fuse_boundaries_and_worked_value():
    a = ClassDistribution(np.array([0.5, 0.2, 0.3]))
    b = ClassDistribution(np.array([0.3, 0.6, 0.1]))
    assert np.array_equal(fuse(a, b, 1.0).probs, a.probs)
    assert np.array_equal(fuse(a, b, 0.0).probs, b.probs)
    assert fuse(a, b, FusionConfig(0.8))[0] == pytest.approx(0.46, abs=1e-15)


def test_fuse_errors():
    with pytest.raises(ShapeError):
        fuse(np.ones(3) / 3, np.ones(2) / 2, 0.5)
    with pytest.raises(ContractError):
        fuse(np.array([0.5, 0.6]), np.array([0.5, 0.5]), 0.5)
    with pytest.raises(ConfigError):
        FusionConfig(1.5)
    with pytest.raises(ConfigError):
        fuse(np.ones(2) / 2, np.ones(2) / 2, -0.1)


def dirichlet(seed, n):
    rng = np.random.default_rng(seed)
    return rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n)), float(rng.uniform())


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 10))
def test_fuse_is_entrywise_convex(seed, n):
    a, b, lam = dirichlet(seed, n)
    out = fuse(a, b, lam)
    assert np.all(out >= np.minimum(a, b)) and np.all(out <= np.maximum(a, b))
    assert abs(out.sum() - 1) < 1e-12
    assert np.array_equal(fuse(a, a, lam), a)


def test_fuse_of_identical_inputs_is_identity():
    p = np.array([0.25, 0.25, 0.5])
    for lam in np.linspace(0, 1, 11):
        assert np.array_equal(fuse(p, p, lam), p)


def test_boundary_argmax_follows_the_selected_input():
    rng = np.random.default_rng(4)
    a, b = rng.dirichlet(np.ones(5), 50), rng.dirichlet(np.ones(5), 50)
    assert np.array_equal(fuse(a, b, 1.0).argmax(axis=1), a.argmax(axis=1))
    assert np.array_equal(fuse(a, b, 0.0).argmax(axis=1), b.argmax(axis=1))


def test_default_lambda():
    assert default_lambda(1) == 0.8 and default_lambda(5) == 0.1
    assert default_lambda(3) == pytest.approx(0.45)
