"""Tree, forest, metric, and tuning tests with hand-checked oracles.

The affine-invariance properties use power-of-two scales and dyadic
offsets so every intermediate quantity stays exactly representable and
the invariance can be asserted bitwise, not just within a tolerance.
"""

from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ringdesign.dataset import Dataset, FeatureConfig, SampleRecord
from ringdesign.ml import (
    DEFAULT_FOREST_GRID,
    DEFAULT_TREE_GRID,
    GeometryModel,
    Hyperparams,
    ModelSchemaError,
    RegressionTree,
    fit_forest,
    fit_tree,
    grid_search,
    kfold_cv,
    kfold_indices,
    load_model,
    mape,
    metrics_report,
    nmae,
    nmae_by_tree_count,
    save_model,
    splitmix64,
    train_geometry_model,
)

STUMP_X = np.array([[1.0], [2.0], [8.0], [9.0]])
STUMP_Y = np.array([0.0, 0.0, 10.0, 10.0])


def sse(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(np.sum((v - v.mean()) ** 2))


def test_stump_splits_at_midpoint_five():
    # Brute force over the three candidate midpoints confirms 5.0 is the
    # unique SSE minimizer before asking the tree for its answer.
    xs = STUMP_X[:, 0]
    candidates = [(a + b) / 2 for a, b in zip(sorted(xs)[:-1], sorted(xs)[1:])]
    assert candidates == [1.5, 5.0, 8.5]
    costs = {
        t: sse(STUMP_Y[xs <= t]) + sse(STUMP_Y[xs > t]) for t in candidates
    }
    assert min(costs, key=costs.get) == 5.0

    tree = fit_tree(STUMP_X, STUMP_Y, Hyperparams(max_depth=1))
    assert not tree.root.is_leaf()
    assert tree.root.feature == 0
    assert tree.root.threshold == 5.0
    assert tree.root.left.leaf_value[0] == 0.0
    assert tree.root.right.leaf_value[0] == 10.0


def test_point_on_threshold_routes_left():
    tree = fit_tree(STUMP_X, STUMP_Y, Hyperparams(max_depth=1))
    assert tree.predict_one(np.array([5.0]))[0] == 0.0
    assert tree.predict_one(np.array([5.0 + 1e-12]))[0] == 10.0


def test_single_sample_is_a_leaf():
    tree = fit_tree(np.array([[3.0, 4.0]]), np.array([[7.0, 8.0]]))
    assert tree.root.is_leaf()
    np.testing.assert_array_equal(tree.predict_one(np.array([0.0, 0.0])), [7.0, 8.0])


def test_unlimited_tree_memorizes_distinct_features():
    rng = np.random.default_rng(11)
    X = rng.permutation(np.arange(30.0)).reshape(-1, 1)
    Y = rng.normal(size=(30, 2))
    tree = fit_tree(X, Y, Hyperparams(max_depth=None, min_samples_leaf=1))
    np.testing.assert_array_equal(tree.predict(X), Y)
    assert mape(Y + 5.0, tree.predict(X) + 5.0) == 0.0


def test_tie_breaks_lowest_threshold_then_lowest_feature():
    # Thresholds 1.5 and 3.5 tie on cost; the scan keeps the lower one.
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    Y = np.array([0.0, 10.0, 0.0, 10.0])
    tree = fit_tree(X, Y, Hyperparams(max_depth=1))
    assert tree.root.threshold == 1.5
    # A duplicated feature column ties exactly; feature 0 must win.
    X2 = np.column_stack([STUMP_X[:, 0], STUMP_X[:, 0]])
    tree2 = fit_tree(X2, STUMP_Y, Hyperparams(max_depth=1))
    assert tree2.root.feature == 0


def test_min_samples_leaf_constrains_candidates():
    tree = fit_tree(STUMP_X, STUMP_Y, Hyperparams(max_depth=1, min_samples_leaf=2))
    assert tree.root.threshold == 5.0  # 1.5 and 8.5 would starve a child
    leafy = fit_tree(STUMP_X, STUMP_Y, Hyperparams(min_samples_leaf=3))
    assert leafy.root.is_leaf()  # 4 samples cannot give both children 3


def test_zero_variance_stops_growth():
    X = np.arange(8.0).reshape(-1, 1)
    Y = np.full(8, 3.25)
    tree = fit_tree(X, Y, Hyperparams(max_depth=None))
    assert tree.root.is_leaf()
    assert tree.root.leaf_value[0] == 3.25


def test_max_depth_limits_leaves():
    X = np.arange(8.0).reshape(-1, 1)
    Y = X[:, 0].copy()

    def count_leaves(node):
        if node.is_leaf():
            return 1
        return count_leaves(node.left) + count_leaves(node.right)

    shallow = fit_tree(X, Y, Hyperparams(max_depth=2))
    assert count_leaves(shallow.root) <= 4
    assert not np.array_equal(shallow.predict(X)[:, 0], Y)
    deep = fit_tree(X, Y, Hyperparams(max_depth=None))
    np.testing.assert_array_equal(deep.predict(X)[:, 0], Y)


def test_input_validation():
    with pytest.raises(ValueError):
        fit_tree(np.empty((0, 2)), np.empty((0,)))
    with pytest.raises(ValueError):
        fit_tree(np.ones((4, 2)), np.ones(3))
    with pytest.raises(ValueError):
        Hyperparams(min_samples_leaf=0)
    with pytest.raises(ValueError):
        Hyperparams(max_depth=0)
    with pytest.raises(ValueError):
        Hyperparams(bootstrap_fraction=0.0)
    with pytest.raises(ValueError):
        Hyperparams(max_features=0)
    tree = fit_tree(STUMP_X, STUMP_Y)
    with pytest.raises(ValueError):
        tree.predict(np.ones((2, 3)))


def forest_data(seed=0, n=80):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-3, 3, size=(n, 3))
    y = X[:, 0] ** 2 + 2.0 * np.sin(X[:, 1]) + 0.3 * rng.normal(size=n)
    return X, y


def test_forest_prediction_is_exact_tree_mean():
    X, y = forest_data()
    forest = fit_forest(X, y, Hyperparams(n_estimators=7, max_depth=4, seed=3))
    probe = X[:11]
    stack = np.stack([t.predict(probe) for t in forest.trees])
    np.testing.assert_array_equal(forest.predict(probe), stack.mean(axis=0))


def test_forest_without_bootstrap_degenerates_to_single_tree():
    X, y = forest_data()
    hp = Hyperparams(n_estimators=1, bootstrap=False, max_depth=5)
    forest = fit_forest(X, y, hp)
    tree = fit_tree(X, y, Hyperparams(max_depth=5))
    np.testing.assert_array_equal(forest.predict(X), tree.predict(X))
    # several identical trees average to the same value
    multi = fit_forest(X, y, Hyperparams(n_estimators=5, bootstrap=False, max_depth=5))
    np.testing.assert_allclose(multi.predict(X), tree.predict(X), rtol=1e-15)


def test_forest_reproducible_and_prefix_stable(tmp_path):
    X, y = forest_data()

    def as_json(hp):
        ds = Dataset(
            records=tuple(
                SampleRecord(30.0 + i, 1.0 + i * 0.01, 0.5 + i * 0.001,
                             tuple(map(float, X[i])))
                for i in range(len(X))
            ),
            feature_config=FeatureConfig(),
        )
        model = train_geometry_model(ds, hp)
        path = tmp_path / f"m{hp.n_estimators}_{hp.seed}.json"
        save_model(model, path)
        return json.loads(path.read_text())

    hp7 = Hyperparams(n_estimators=7, max_depth=3, seed=42)
    a = as_json(hp7)
    b = as_json(hp7)
    assert a == b
    # first trees of a larger forest are bitwise the smaller forest
    small = as_json(Hyperparams(n_estimators=3, max_depth=3, seed=42))
    for target in a["per_target"]:
        assert (
            a["per_target"][target]["trees"][:3]
            == small["per_target"][target]["trees"]
        )


@given(st.integers(0, 2**31 - 1), st.integers(1, 16))
@settings(max_examples=50, deadline=None)
def test_splitmix_streams_do_not_collide_on_small_ranges(seed, n):
    seeds = [splitmix64(seed, i) for i in range(n)]
    assert len(set(seeds)) == n


def test_mape_fixtures():
    assert mape([100.0, 2.0], [90.0, 2.2]) == pytest.approx(10.0, rel=1e-12)
    assert mape([3.0, 4.0], [3.0, 4.0]) == 0.0
    assert mape([50.0], [75.0]) == 50.0
    assert mape([-50.0], [-75.0]) == 50.0  # magnitude ratio, sign-safe
    with pytest.raises(ValueError):
        mape([1.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        mape([1.0, 2.0], [1.0])


def test_nmae_fixtures():
    assert nmae([1.0, 3.0], [2.0, 2.0]) == -1.0
    assert nmae([5.0], [5.0]) == 0.0
    base = nmae([0.0, 0.0], [1.0, 3.0])
    doubled = nmae([0.0, 0.0], [2.0, 6.0])
    assert doubled == 2.0 * base == -4.0


def test_metrics_report_per_target():
    Yt = np.array([[100.0, 2.0], [100.0, 2.0]])
    Yp = np.array([[90.0, 2.2], [110.0, 1.8]])
    rep = metrics_report(Yt, Yp, ("a", "b"))
    assert rep.mape_percent == pytest.approx((10.0, 10.0), rel=1e-12)
    assert rep.nmae_value == pytest.approx((-10.0, -0.2), rel=1e-12)
    assert rep.per_sample_ape.shape == (2, 2)
    assert rep.to_dict()["mape_percent"]["a"] == pytest.approx(10.0)


def test_kfold_sizes_and_partition():
    folds = kfold_indices(8, 4, seed=0)
    assert [len(f) for f in folds] == [2, 2, 2, 2]
    folds = kfold_indices(346, 4, seed=0)
    assert [len(f) for f in folds] == [87, 87, 86, 86]
    allidx = np.concatenate(folds)
    assert sorted(allidx.tolist()) == list(range(346))
    with pytest.raises(ValueError):
        kfold_indices(3, 4, seed=0)
    a = kfold_indices(20, 4, seed=5)
    b = kfold_indices(20, 4, seed=5)
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa, fb)


def test_cv_scores_unseen_folds():
    # A memorizing tree still cannot score perfectly on held-out folds.
    X, y = forest_data(seed=2, n=60)
    report = kfold_cv(X, y, Hyperparams(max_depth=None), k=4, seed=0)
    assert len(report.fold_scores) == 4
    assert report.mean_score < 0.0
    assert report.mean_score == pytest.approx(np.mean(report.fold_scores))


def test_grid_search_single_point_and_table_order():
    X, y = forest_data(seed=3, n=40)
    best, table = grid_search(
        X, y, {"max_depth": [4]}, base_hp=Hyperparams(), k=4
    )
    assert best.max_depth == 4
    assert len(table) == 1

    _, table = grid_search(
        X, y, {"max_depth": [2, 4], "min_samples_leaf": [1, 3]}, k=4
    )
    assert [row["params"] for row in table] == [
        {"max_depth": 2, "min_samples_leaf": 1},
        {"max_depth": 2, "min_samples_leaf": 3},
        {"max_depth": 4, "min_samples_leaf": 1},
        {"max_depth": 4, "min_samples_leaf": 3},
    ]


def test_grid_search_selects_dominating_cell():
    X, y = forest_data(seed=4, n=90)
    best, table = grid_search(X, y, {"max_depth": [1, 8]}, k=4)
    assert best.max_depth == 8
    scores = {row["params"]["max_depth"]: row["mean_score"] for row in table}
    assert scores[8] > scores[1]


def test_grid_search_tie_keeps_first_cell():
    # Depths 50 and 80 both grow the tree to purity on 40 samples, so
    # their CV scores are identical and the earlier cell must win.
    X, y = forest_data(seed=5, n=40)
    best, table = grid_search(X, y, {"max_depth": [50, 80]}, k=4)
    assert table[0]["mean_score"] == table[1]["mean_score"]
    assert best.max_depth == 50


def test_default_grids_cover_reference_cells():
    assert set(DEFAULT_TREE_GRID["max_depth"]) >= {12, 20, 80}
    assert set(DEFAULT_TREE_GRID["min_samples_leaf"]) >= {1, 7}
    assert set(DEFAULT_FOREST_GRID["n_estimators"]) >= {180, 200}


def split_shape(node):
    if node.is_leaf():
        return "leaf"
    return (node.feature, split_shape(node.left), split_shape(node.right))


def threshold_pairs(a, b):
    if a.is_leaf():
        return []
    return (
        [(a.threshold, b.threshold)]
        + threshold_pairs(a.left, b.left)
        + threshold_pairs(a.right, b.right)
    )


def leaf_pairs(a, b):
    if a.is_leaf():
        return [(a.leaf_value, b.leaf_value)]
    return leaf_pairs(a.left, b.left) + leaf_pairs(a.right, b.right)


@given(
    data_seed=st.integers(0, 2**31 - 1),
    ex=st.integers(-3, 6),
    ey=st.integers(-3, 6),
    kx=st.integers(-64, 64),
)
@settings(max_examples=60, deadline=None)
def test_affine_rescaling_preserves_structure_exactly(data_seed, ex, ey, kx):
    # Integer-valued data with power-of-two scales and dyadic offsets
    # keeps every midpoint, partial sum, and comparison exact, so the
    # rescaled tree must be bitwise identical up to the affine maps.
    rng = np.random.default_rng(data_seed)
    X = rng.integers(-8, 9, size=(16, 2)).astype(float)
    Y = rng.integers(-8, 9, size=(16, 1)).astype(float)
    ax, ay, bx = 2.0**ex, 2.0**ey, kx / 8.0
    hp = Hyperparams(max_depth=4, min_samples_leaf=2)
    t1 = fit_tree(X, Y, hp)
    t2 = fit_tree(ax * X + bx, ay * Y, hp)
    assert split_shape(t1.root) == split_shape(t2.root)
    for th1, th2 in threshold_pairs(t1.root, t2.root):
        assert th2 == ax * th1 + bx
    for l1, l2 in leaf_pairs(t1.root, t2.root):
        np.testing.assert_array_equal(l2, ay * l1)
    np.testing.assert_array_equal(
        t2.predict(ax * X + bx), ay * t1.predict(X)
    )


def test_affine_rescaling_general_offsets_within_tolerance():
    # Arbitrary (non-dyadic) affine maps keep the structure as long as
    # no two candidate splits tie within float rounding; reasonably
    # sized nodes keep the costs well separated.
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 3))
    Y = rng.normal(size=(60, 2))
    ax = np.array([1.7, 0.33, 12.0])
    bx = np.array([3.1, -0.4, 250.0])
    ay, by = 2.3, -5.0
    hp = Hyperparams(max_depth=4, min_samples_leaf=5)
    t1 = fit_tree(X, Y, hp)
    t2 = fit_tree(ax * X + bx, ay * Y + by, hp)
    assert split_shape(t1.root) == split_shape(t2.root)
    np.testing.assert_allclose(
        (t2.predict(ax * X + bx) - by) / ay, t1.predict(X), rtol=1e-9, atol=1e-9
    )


def test_more_trees_do_not_hurt_on_average():
    gains = []
    for seed in range(5):
        X, y = forest_data(seed=100 + seed, n=150)
        X_tr, y_tr, X_te, y_te = X[:100], y[:100], X[100:], y[100:]
        forest = fit_forest(
            X_tr, y_tr, Hyperparams(n_estimators=50, max_depth=None, seed=seed)
        )
        scores = dict(nmae_by_tree_count(forest, X_te, y_te, [5, 50]))
        gains.append(scores[50] - scores[5])
    assert np.mean(gains) >= 0.0  # NMAE: higher is better


def test_nmae_by_tree_count_matches_full_forest():
    X, y = forest_data(seed=9, n=60)
    forest = fit_forest(X, y, Hyperparams(n_estimators=12, max_depth=4, seed=1))
    (_, at_12), = nmae_by_tree_count(forest, X, y, [12])
    assert at_12 == nmae(y, forest.predict(X)[:, 0])
    with pytest.raises(ValueError):
        nmae_by_tree_count(forest, X, y, [13])


def synthetic_geometry_dataset(n=24, include_d1=False) -> Dataset:
    feat = FeatureConfig(include_d1=include_d1)
    width = len(feat.names())
    records = []
    rng = np.random.default_rng(5)
    for i in range(n):
        r, w, h = 30.0 + 4 * i, 1.0 + 0.04 * i, 0.5 + 0.0125 * i
        base = np.array([r * 1e5, w * 1e6, h * 1e7])
        noise = rng.normal(scale=1e3, size=3)
        feats = tuple((base + noise)[:width]) if width == 3 else tuple(
            np.append(base + noise, 4.5e11)
        )
        records.append(SampleRecord(r, w, h, feats))
    return Dataset(records=tuple(records), feature_config=feat)


def test_geometry_model_save_load_bitwise(tmp_path):
    ds = synthetic_geometry_dataset()
    model = train_geometry_model(
        ds, Hyperparams(n_estimators=5, max_depth=6, seed=2)
    )
    probe = ds.features_matrix()[::3]
    before = model.predict(probe)
    path = tmp_path / "model.json"
    save_model(model, path)
    loaded = load_model(path)
    np.testing.assert_array_equal(loaded.predict(probe), before)
    assert loaded.feature_names == model.feature_names
    assert loaded.normalizer is None


def test_geometry_model_normalized_round_trip(tmp_path):
    ds = synthetic_geometry_dataset()
    model = train_geometry_model(
        ds, Hyperparams(n_estimators=3, max_depth=8, seed=2), normalize=True
    )
    pred = model.predict(ds.features_matrix())
    # denormalized outputs land in physical ranges, not [0, 1]
    assert pred[:, 0].min() >= 30.0 and pred[:, 0].max() <= 30.0 + 4 * 23
    path = tmp_path / "model.json"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.normalizer is not None
    np.testing.assert_array_equal(
        loaded.predict(ds.features_matrix()), pred
    )


def test_geometry_model_single_vector_and_multi_output():
    ds = synthetic_geometry_dataset()
    model = train_geometry_model(
        ds,
        Hyperparams(n_estimators=4, max_depth=6, seed=0),
        multi_output=True,
    )
    single = model.predict(ds.records[0].features)
    assert single.shape == (3,)
    batch = model.predict(ds.features_matrix())
    assert batch.shape == (len(ds), 3)
    np.testing.assert_array_equal(batch[0], single)


def test_load_model_rejects_corrupt_files(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{ not json")
    with pytest.raises(ModelSchemaError):
        load_model(path)
    path.write_text(json.dumps({"schema_version": 999}))
    with pytest.raises(ModelSchemaError):
        load_model(path)
    path.write_text(json.dumps({"schema_version": 1, "targets": []}))
    with pytest.raises(ModelSchemaError):
        load_model(path)
