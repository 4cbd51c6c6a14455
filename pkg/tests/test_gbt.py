from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridts.gbt import (
    LEAF,
    GBTConfig,
    GBTModel,
    SortedColumns,
    Tree,
    build_tree,
    feature_importance,
    find_best_split,
    leaf_weight,
    log_loss,
    logistic,
    logistic_grad_hess,
    predict_proba,
    predict_tree,
    split_gain,
    train,
)
from oracles import leaf_ids, oracle_leaves, tree_reduction, objective_reduction

EXACT = GBTConfig(subsample=1.0, min_child_weight=0.0, max_depth=2)


def random_instance(rng):
    n = int(rng.integers(2, 13))
    d = int(rng.integers(1, 4))
    X = rng.normal(size=(n, d))
    # a few repeated values and missing entries exercise ties and default directions
    X[rng.random((n, d)) < 0.2] = np.nan
    X[:, 0] = np.where(rng.random(n) < 0.3, 0.5, X[:, 0])
    y = rng.integers(0, 2, n).astype(np.float64)
    margin = rng.normal(0, 1, n)
    g, h = logistic_grad_hess(margin, y)
    return X, g, h


# ------------------------------------------------------------------ objective pieces


def test_grad_hess_examples():
    assert logistic_grad_hess(0.0, 1) == (-0.5, 0.25)
    assert logistic_grad_hess(0.0, 0) == (0.5, 0.25)
    g, h = logistic_grad_hess(50.0, 1)
    assert abs(g) < 1e-20 and h < 1e-20
    assert logistic(np.array([-800.0, 800.0])).tolist() == [0.0, 1.0]


def test_split_gain_examples():
    assert split_gain(2, 2, -2, 2, 1, 0) == pytest.approx(4 / 3, abs=1e-15)
    # mirrored children carry no information; without lambda only the penalty remains
    assert split_gain(1.5, 2, 1.5, 2, 0, 0.3) == pytest.approx(-0.3, abs=1e-15)
    # with lambda the mirrored split is strictly worse than no split
    assert split_gain(1.5, 2, 1.5, 2, 1, 0) < 0


@settings(max_examples=300, deadline=None)
@given(st.floats(-50, 50), st.floats(0.01, 50), st.floats(-50, 50), st.floats(0.01, 50))
def test_split_gain_nonnegative_without_penalties(GL, HL, GR, HR):
    # convexity of G^2/H; lambda > 0 can make a split worthless, so it is zero here
    assert split_gain(GL, HL, GR, HR, 0.0, 0.0) >= -1e-9 * (1 + (GL * GL + GR * GR) / min(HL, HR))


def test_log_loss_stable():
    assert log_loss([0.0, 0.0], [1, 0]) == pytest.approx(math.log(2))
    assert math.isfinite(log_loss([1000.0], [0]))


# ------------------------------------------------------------------ split search


def example_1d():
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    y = np.array([0, 0, 1, 1.0])
    g, h = logistic_grad_hess(np.zeros(4), y)
    return X, g, h


def test_best_split_1d_example():
    X, g, h = example_1d()
    s = find_best_split(SortedColumns.build(X), g, h, np.arange(4), EXACT)
    assert s.feature == 0 and s.threshold == 2.5
    # brute force over the three candidates
    gains = [split_gain(g[:k].sum(), h[:k].sum(), g[k:].sum(), h[k:].sum(), 1.0, 0.0) for k in (1, 2, 3)]
    assert s.gain == pytest.approx(max(gains), abs=1e-15) and int(np.argmax(gains)) == 1


def test_best_split_none_cases():
    X = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    g, h = logistic_grad_hess(np.zeros(3), np.ones(3))
    assert find_best_split(SortedColumns.build(X), g, h, np.arange(3), EXACT) is None
    Xc = np.full((4, 2), 7.0)
    g, h = logistic_grad_hess(np.zeros(4), np.array([0, 1, 0, 1.0]))
    assert find_best_split(SortedColumns.build(Xc), g, h, np.arange(4), EXACT) is None
    with pytest.raises(ValueError):
        find_best_split(SortedColumns.build(Xc), g, h, np.array([], dtype=int), EXACT)


def test_tie_break_lowest_feature_then_threshold():
    X = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]])
    g, h = logistic_grad_hess(np.zeros(4), np.array([0, 1, 1, 0.0]))
    s = find_best_split(SortedColumns.build(X), g, h, np.arange(4), EXACT)
    # 1.5 and 3.5 give equal gain on both identical features
    assert (s.feature, s.threshold) == (0, 1.5)


def test_min_child_weight_respected():
    X, g, h = example_1d()
    cfg = GBTConfig(subsample=1.0, min_child_weight=0.6)
    assert find_best_split(SortedColumns.build(X), g, h, np.arange(4), cfg) is None


def test_missing_rows_take_better_side():
    X = np.array([[1.0], [2.0], [3.0], [4.0], [np.nan], [np.nan]])
    g, h = logistic_grad_hess(np.zeros(6), np.array([0, 0, 1, 1, 1, 1.0]))
    s = find_best_split(SortedColumns.build(X), g, h, np.arange(6), EXACT)
    assert s.threshold == 2.5 and not s.default_left


# ------------------------------------------------------------------ tree building


def test_stump_leaf_weights():
    X, g, h = example_1d()
    tree = build_tree(SortedColumns.build(X), g, h, GBTConfig(subsample=1.0, min_child_weight=0.0, max_depth=1))
    assert tree.n_nodes == 3 and tree.value[0] == 2.5
    assert tree.value[tree.left[0]] == pytest.approx(-2 / 3, abs=1e-15)
    assert tree.value[tree.right[0]] == pytest.approx(2 / 3, abs=1e-15)
    p = predict_proba(GBTModel(0.0, [tree], 1.0, ["x"]), np.array([[0.0], [2.4], [2.6], [9.0]]))
    np.testing.assert_allclose(p, logistic([-2 / 3, -2 / 3, 2 / 3, 2 / 3]), atol=1e-15)


def test_pure_node_is_single_leaf():
    X = np.array([[1.0], [2.0], [3.0]])
    g, h = logistic_grad_hess(np.zeros(3), np.ones(3))
    tree = build_tree(SortedColumns.build(X), g, h, EXACT)
    assert tree.n_nodes == 1
    assert tree.value[0] == pytest.approx(leaf_weight(g.sum(), h.sum(), 1.0), abs=1e-15)


def test_greedy_matches_exhaustive_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(50):
        X, g, h = random_instance(rng)
        for cfg in (EXACT, GBTConfig(subsample=1.0, max_depth=1, min_child_weight=0.3, reg_lambda=0.5)):
            tree = build_tree(SortedColumns.build(X), g, h, cfg)
            ours = tree_reduction(tree, X, g, h, cfg.reg_lambda)
            ref = objective_reduction(oracle_leaves(X, g, h, np.arange(len(g)), 0, cfg), g, h, cfg.reg_lambda)
            assert abs(ours - ref) <= 1e-9
            assert tree.depth <= cfg.max_depth


def test_depth_limit_and_row_mask():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 3))
    g, h = logistic_grad_hess(np.zeros(200), (X[:, 0] + X[:, 1] > 0).astype(float))
    for depth in (1, 3, 6):
        tree = build_tree(SortedColumns.build(X), g, h, GBTConfig(max_depth=depth, subsample=1.0))
        assert tree.depth <= depth
    mask = np.zeros(200, dtype=bool)
    mask[:50] = True
    masked = build_tree(SortedColumns.build(X), g, h, GBTConfig(max_depth=2), mask)
    direct = build_tree(SortedColumns.build(X[:50]), g[:50], h[:50], GBTConfig(max_depth=2))
    np.testing.assert_array_equal(masked.feature, direct.feature)
    np.testing.assert_allclose(masked.value, direct.value, rtol=0, atol=1e-12)


def test_preorder_round_trip():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(100, 2))
    g, h = logistic_grad_hess(np.zeros(100), (X[:, 0] > 0).astype(float))
    tree = build_tree(SortedColumns.build(X), g, h, GBTConfig(max_depth=3, subsample=1.0))
    back = Tree.from_preorder(tree.feature, tree.value, tree.default_left, tree.gain)
    np.testing.assert_array_equal(back.left, tree.left)
    np.testing.assert_array_equal(back.right, tree.right)
    with pytest.raises(ValueError):
        Tree.from_preorder([0, LEAF], [0.0, 1.0], [True, True])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_leaf_weights_locally_optimal(seed):
    rng = np.random.default_rng(seed)
    X, g, h = random_instance(rng)
    tree = build_tree(SortedColumns.build(X), g, h, EXACT)
    ids = leaf_ids(tree, X)
    for k in np.unique(ids):
        G, H = g[ids == k].sum(), h[ids == k].sum()
        obj = lambda w: G * w + 0.5 * (H + 1.0) * w * w
        w = tree.value[k]
        assert obj(w) <= obj(w + 1e-3) and obj(w) <= obj(w - 1e-3)


# ------------------------------------------------------------------ boosting


def toy_2d(n=20, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    y = (X[:, 0] - 0.5 * X[:, 1] > 0).astype(float)
    return X, y


def test_separable_toy_converges():
    X, y = toy_2d()
    model, trace = train(X, y, X, y, GBTConfig(learning_rate=0.3, subsample=1.0, max_rounds=200,
                                               min_child_weight=0.0, patience_rounds=200))
    assert trace.train_loss[-1] < 0.05


def test_training_deterministic_by_seed():
    X, y = toy_2d(200, seed=3)
    a, ta = train(X, y, X[:50], y[:50], GBTConfig(seed=5, max_rounds=40))
    b, tb = train(X, y, X[:50], y[:50], GBTConfig(seed=5, max_rounds=40))
    assert ta.val_loss == tb.val_loss
    assert all((p.value == q.value).all() for p, q in zip(a.trees, b.trees))
    c, tc = train(X, y, X[:50], y[:50], GBTConfig(seed=6, max_rounds=40))
    assert tc.val_loss != ta.val_loss


def test_early_stopping_truncates_to_best_round():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(300, 3))
    y = (rng.random(300) < 0.3).astype(float)  # pure noise overfits quickly
    Xv = rng.normal(size=(100, 3))
    yv = (rng.random(100) < 0.3).astype(float)
    model, trace = train(X, y, Xv, yv, GBTConfig(learning_rate=0.3, patience_rounds=5, max_rounds=300))
    assert len(trace.val_loss) < 300
    best = trace.best_round
    assert trace.val_loss[best] == min(trace.val_loss)
    assert all(trace.val_loss[best] <= v for v in trace.val_loss[best:])
    assert len(model.trees) == best + 1
    assert len(trace.val_loss) - 1 - best == 5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(5, 60))
def test_training_loss_monotone(seed, n):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    X[rng.random((n, 2)) < 0.1] = np.nan
    y = (rng.random(n) < 0.4).astype(float)
    _, trace = train(X, y, X, y, GBTConfig(learning_rate=0.1, subsample=1.0, max_rounds=30,
                                           patience_rounds=30, max_depth=3))
    assert all(b <= a + 1e-12 for a, b in zip(trace.train_loss, trace.train_loss[1:]))


def test_monotone_transform_invariance():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(60, 3))
    y = (X[:, 0] + rng.normal(0, 0.5, 60) > 0).astype(float)
    cfg = GBTConfig(subsample=1.0, max_rounds=20, patience_rounds=20, max_depth=3)
    a, _ = train(X, y, X, y, cfg)
    T = np.exp(X) * 2 + 1
    b, _ = train(T, y, T, y, cfg)
    for p, q in zip(a.trees, b.trees):
        np.testing.assert_array_equal(p.feature, q.feature)
    np.testing.assert_allclose(predict_proba(a, X), predict_proba(b, T), rtol=0, atol=1e-12)


def test_missing_routing_consistency():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(300, 2))
    y = (X[:, 0] > 0.2).astype(float)
    X[rng.random((300, 2)) < 0.25] = np.nan
    model, _ = train(X, y, X, y, GBTConfig(max_depth=1, subsample=1.0, max_rounds=20))
    probe = X[np.isnan(X).any(axis=1)]
    for tree in model.trees:
        if tree.feature[0] == LEAF:
            continue
        f = tree.feature[0]
        filled = probe.copy()
        far = -1e300 if tree.default_left[0] else 1e300
        filled[:, f] = np.where(np.isnan(probe[:, f]), far, probe[:, f])
        np.testing.assert_array_equal(predict_tree(tree, probe), predict_tree(tree, filled))


def test_predict_errors_and_empty_model():
    empty = GBTModel(0.0, [], 0.02, ["a", "b"])
    np.testing.assert_array_equal(predict_proba(empty, np.zeros((3, 2))), [0.5] * 3)
    with pytest.raises(ValueError, match="feature layout"):
        predict_proba(empty, np.zeros((3, 3)))
    with pytest.raises(ValueError, match="feature layout"):
        predict_proba(empty, np.zeros((3, 2)), ["b", "a"])


def test_feature_importance():
    X, g, h = example_1d()
    X = np.hstack([np.zeros((4, 1)), X])
    tree = build_tree(SortedColumns.build(X), g, h, GBTConfig(subsample=1.0, min_child_weight=0.0, max_depth=1))
    imp = feature_importance(GBTModel(0.0, [tree], 0.1, ["unused", "x"]))
    assert imp["unused"] == 0.0 and imp["x"] == pytest.approx(tree.gain[0]) and imp["x"] > 0
    with pytest.raises(ValueError):
        feature_importance(GBTModel(0.0, [], 0.1, ["x"]))


def test_config_validation():
    for bad in (dict(learning_rate=0), dict(subsample=0), dict(subsample=1.5), dict(max_depth=0),
                dict(base_score=1.0), dict(reg_lambda=-1), dict(patience_rounds=0)):
        with pytest.raises(ValueError):
            GBTConfig(**bad)
