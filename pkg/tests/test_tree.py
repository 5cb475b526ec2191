import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clvsim.errors import ConfigError, SchemaError
from clvsim.learners import (
    ForcedSplitSpec,
    RegressionTree,
    TreeFitParams,
    apply_bins,
    bin_thresholds,
    feature_importances,
    fit_regression_tree,
    tree_predict,
)
from oracles import exhaustive_best_split, node_rows, sse


def test_constant_target_gives_single_leaf():
    X = np.arange(20.0)[:, None]
    tree = fit_regression_tree(X, np.full(20, 3.5), TreeFitParams(min_samples_leaf=1))
    assert tree.leaf_count == 1
    assert tree_predict(tree, [7.0]) == (3.5, 0)


def test_exact_separation_on_binary_feature():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    y = np.array([0.0, 0.0, 10.0, 10.0])
    tree = fit_regression_tree(X, y, TreeFitParams(max_leaves=2, min_samples_leaf=1), feature_names=["x"])
    assert tree.feature[0] == 0
    assert sorted(tree.value[tree.feature < 0]) == [0.0, 10.0]
    value, leaf = tree_predict(tree, {"x": 1.0})
    assert value == 10.0
    assert leaf == tree.leaf_id[tree.right[0]] == 1


def test_missing_routes_left():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    y = np.array([0.0, 0.0, 10.0, 10.0])
    tree = fit_regression_tree(X, y, TreeFitParams(max_leaves=2, min_samples_leaf=1))
    assert tree.missing_left[0]
    assert tree_predict(tree, [float("nan")]) == (0.0, 0)


def test_missing_values_in_training_go_left(rng):
    X = rng.integers(0, 4, size=(120, 1)).astype(float)
    X[:10, 0] = np.nan
    y = np.where(np.isnan(X[:, 0]) | (X[:, 0] < 2), 0.0, 5.0)
    tree = fit_regression_tree(X, y, TreeFitParams(max_leaves=2, min_samples_leaf=1))
    pred = tree.predict(X)
    assert np.allclose(pred, y)


def test_forced_root_on_uninformative_flag(rng):
    flag = rng.integers(0, 2, 200).astype(float)
    signal = rng.normal(size=200)
    X = np.column_stack([flag, signal])
    y = 3 * (signal > 0)
    spec = ForcedSplitSpec("flag")
    tree = fit_regression_tree(X, y, TreeFitParams(max_leaves=4, min_samples_leaf=5), spec, ["flag", "signal"])
    assert tree.feature[0] == 0 and tree.forced[0]
    assert tree.threshold[0] == 0.5
    assert tree.n_samples[tree.left[0]] == (flag == 0).sum()
    assert tree.n_samples[tree.right[0]] == (flag == 1).sum()


def test_degenerate_forced_partition_gives_parent_mean():
    X = np.column_stack([np.zeros(30), np.arange(30.0)])
    y = np.arange(30.0)
    spec = ForcedSplitSpec("flag")
    tree = fit_regression_tree(X, y, TreeFitParams(max_leaves=2, min_samples_leaf=1), spec, ["flag", "z"])
    assert tree.leaf_count == 2
    assert tree.value[tree.right[0]] == pytest.approx(y.mean())
    assert tree.n_samples[tree.right[0]] == 0


def test_forced_prefix_identity(rng):
    X = rng.integers(0, 2, size=(400, 3)).astype(float)
    X = np.column_stack([X, rng.normal(size=400)])
    y = X @ np.array([1.0, 2.0, 4.0, 0.5]) + rng.normal(0, 0.1, 400)
    spec = ForcedSplitSpec.from_dict({"feature": "a", "left": {"feature": "b", "left": None, "right": None},
                                      "right": {"feature": "c", "left": None, "right": None}})
    tree = fit_regression_tree(X, y, TreeFitParams(max_leaves=12, min_samples_leaf=5), spec, ["a", "b", "c", "d"])
    assert tree.forced_prefix() == spec.to_dict()
    assert tree.leaf_count <= 12


def test_forced_split_rejects_non_binary_and_unknown():
    X = np.column_stack([np.arange(10.0), np.zeros(10)])
    with pytest.raises(SchemaError):
        fit_regression_tree(X, np.zeros(10), None, ForcedSplitSpec("a"), ["a", "b"])
    with pytest.raises(SchemaError):
        fit_regression_tree(X, np.zeros(10), None, ForcedSplitSpec("zz"), ["a", "b"])


def test_forced_spec_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ForcedSplitSpec.from_dict({"feature": "a", "colour": 1})


def test_too_few_leaves_for_forced_structure():
    spec = ForcedSplitSpec("a", ForcedSplitSpec("b"))
    X = np.zeros((10, 2))
    with pytest.raises(ConfigError):
        fit_regression_tree(X, np.zeros(10), TreeFitParams(max_leaves=2), spec, ["a", "b"])


def _random_dataset(rng, n_max=200, n_levels=8):
    n = int(rng.integers(40, n_max + 1))
    p = int(rng.integers(1, 5))
    X = rng.integers(0, n_levels, size=(n, p)).astype(float)
    w = rng.normal(size=p)
    y = np.sin(X @ w) * 3 + rng.normal(0, 0.5, n)
    return X, y


def check_greedy_optimality(X, y, params):
    """Every internal node's split reduces SSE by the exhaustive optimum.

    When growth stopped below the leaf cap, no leaf admits a positive-gain split either.
    """
    tree = fit_regression_tree(X, y, params)
    rows = node_rows(tree, X)
    for node in range(tree.n_nodes):
        r = rows[node]
        best = exhaustive_best_split(X, y, r, params.min_samples_leaf)
        if tree.feature[node] >= 0:
            col = X[r, tree.feature[node]]
            left = col <= tree.threshold[node]
            red = sse(y[r]) - sse(y[r][left]) - sse(y[r][~left])
            assert math.isclose(red, best[0], rel_tol=1e-9, abs_tol=1e-9), (node, red, best)
            assert math.isclose(tree.gain[node], red, rel_tol=1e-9, abs_tol=1e-9)
        elif tree.leaf_count < params.max_leaves and len(r) >= 2 * params.min_samples_leaf:
            assert best[0] <= 1e-9 * max(1.0, sse(y[r])), (node, best)
    return tree


@pytest.mark.parametrize("seed", range(5))
def test_greedy_split_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    X, y = _random_dataset(rng)
    check_greedy_optimality(X, y, TreeFitParams(max_leaves=int(rng.choice([8, 200])), min_samples_leaf=int(rng.integers(1, 6)),
                                                max_bins=8))


def test_tie_break_prefers_lower_feature():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    tree = fit_regression_tree(X, y, TreeFitParams(max_leaves=2, min_samples_leaf=1))
    assert tree.feature[0] == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.integers(1, 10))
def test_leaf_count_bound(seed, max_leaves, min_leaf):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(150, 3))
    y = rng.normal(size=150)
    tree = fit_regression_tree(X, y, TreeFitParams(max_leaves=max_leaves, min_samples_leaf=min_leaf))
    assert tree.leaf_count <= max_leaves
    leaves = tree.feature < 0
    assert sorted(tree.leaf_id[leaves]) == list(range(tree.leaf_count))
    assert (tree.n_samples[leaves] >= min_leaf).all()


def test_bins_cover_missing_and_levels():
    X = np.array([[1.0], [2.0], [np.nan], [3.0]])
    thr = bin_thresholds(X, 8)
    assert np.allclose(thr[0], [1.5, 2.5])
    assert apply_bins(X, thr, 8)[:, 0].tolist() == [0, 1, 8, 2]


def test_quantile_thresholds_when_many_values(rng):
    X = rng.normal(size=(1000, 1))
    thr = bin_thresholds(X, 16)[0]
    assert len(thr) <= 15
    assert np.all(np.diff(thr) > 0)


def _two_split_tree():
    # root splits on a (gain 8), left child splits on b (gain 2)
    return RegressionTree(
        feature=np.array([0, 1, -1, -1, -1]), threshold=np.array([0.5, 0.5, 0, 0, 0.0]),
        missing_left=np.ones(5, bool), left=np.array([1, 3, -1, -1, -1]), right=np.array([2, 4, -1, -1, -1]),
        forced=np.zeros(5, bool), value=np.array([0, 0, 5.0, 1.0, 2.0]), gain=np.array([8.0, 2.0, 0, 0, 0]),
        n_samples=np.array([4, 2, 2, 1, 1]), leaf_id=np.array([-1, -1, 2, 0, 1]), feature_names=("a", "b"),
    )


class TestImportances:
    def test_two_split_fixture(self):
        assert feature_importances(_two_split_tree()) == {"a": 8.0, "b": 2.0}

    def test_single_leaf(self):
        tree = fit_regression_tree(np.zeros((5, 2)), np.ones(5), feature_names=["a", "b"])
        assert feature_importances(tree) == {"a": 0.0, "b": 0.0}

    def test_single_split(self):
        X = np.array([[0.0, 5.0], [1.0, 5.0]] * 4)
        y = X[:, 0] * 2
        tree = fit_regression_tree(X, y, TreeFitParams(max_leaves=2, min_samples_leaf=1), feature_names=["a", "b"])
        imp = feature_importances(tree)
        assert imp["a"] > 0 and imp["b"] == 0.0


def test_routing_of_constructed_tree():
    tree = _two_split_tree()
    assert tree_predict(tree, {"a": 0.0, "b": 0.0}) == (1.0, 0)
    assert tree_predict(tree, {"a": 0.0, "b": 1.0}) == (2.0, 1)
    assert tree_predict(tree, {"a": 1.0, "b": 0.0}) == (5.0, 2)
    with pytest.raises(SchemaError):
        tree_predict(tree, {"a": 1.0})


def test_serialization_round_trip(rng):
    X = rng.normal(size=(200, 3))
    X[::7, 1] = np.nan
    tree = fit_regression_tree(X, rng.normal(size=200), TreeFitParams(max_leaves=9, min_samples_leaf=5))
    back = RegressionTree.from_dict(tree.to_dict())
    assert np.array_equal(back.predict(X), tree.predict(X))
    assert back.to_dict() == tree.to_dict()
