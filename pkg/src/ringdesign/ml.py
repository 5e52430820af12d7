"""Regression trees, bagged forests, metrics, and tuning, from scratch.

The estimators here are deliberately self-contained: greedy CART trees
split on midpoint thresholds by minimizing the summed squared error of
the two children, and forests average trees trained on seeded bootstrap
resamples. Everything is deterministic given the hyperparameter seed;
per-tree random streams are derived with a splitmix64 step so that
growing or shrinking the ensemble never changes the trees that are
shared between the two sizes.

Conventions fixed across the package:
* routing is x[feature] <= threshold to the left child, > to the right;
* split ties are broken toward the lowest feature index, then the
  lowest threshold;
* a forest prediction is the plain arithmetic mean of its trees.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Dataset, MinMaxNormalizer

MODEL_SCHEMA_VERSION = 1
_MASK64 = (1 << 64) - 1


class ModelSchemaError(ValueError):
    pass


def splitmix64(seed: int, index: int) -> int:
    """Deterministic per-index stream seed derived from a master seed."""
    z = (seed + 0x9E3779B97F4A7C15 * (index + 1)) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class Hyperparams:
    max_depth: int | None = None  # None = grow until pure or exhausted
    min_samples_leaf: int = 1
    n_estimators: int = 1
    bootstrap_fraction: float = 1.0
    bootstrap: bool = True  # off: every tree sees the full training set
    max_features: int | str = "all"  # per-node random feature subset size
    seed: int = 0

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 or None")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if not 0.0 < self.bootstrap_fraction <= 1.0:
            raise ValueError("bootstrap_fraction must be in (0, 1]")
        if self.max_features != "all":
            if not isinstance(self.max_features, int) or self.max_features < 1:
                raise ValueError("max_features must be a positive count or 'all'")


@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = math.nan
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    leaf_value: np.ndarray | None = None

    def is_leaf(self) -> bool:
        return self.leaf_value is not None


@dataclass
class RegressionTree:
    root: TreeNode
    hyperparams: Hyperparams
    n_features: int
    n_targets: int

    def predict_one(self, x: np.ndarray) -> np.ndarray:
        node = self.root
        while not node.is_leaf():
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node.leaf_value

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = _as_2d(X, self.n_features)
        return np.array([self.predict_one(row) for row in X])


@dataclass
class RandomForestModel:
    trees: list[RegressionTree]
    hyperparams: Hyperparams
    n_features: int
    n_targets: int

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = _as_2d(X, self.n_features)
        stack = np.stack([t.predict(X) for t in self.trees])
        return np.mean(stack, axis=0)


def _as_2d(X, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def _targets_2d(Y) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    return Y.reshape(-1, 1) if Y.ndim == 1 else Y


def _best_split(X, Y, rows, min_samples_leaf, features):
    """Exhaustive scan over midpoint thresholds; (feature, threshold) or None.

    Child costs come from prefix sums over the sorted target values, so
    one feature costs O(n log n). np.argmin returns the first minimum,
    which on an ascending threshold sweep is the documented lowest-
    threshold tie-break; the feature loop keeps strictly-better costs
    only, which keeps the lowest feature index on ties.
    """
    n = rows.size
    Ysub = Y[rows]
    best_cost = math.inf
    best: tuple[int, float] | None = None
    for f in features:
        xv = X[rows, f]
        order = np.argsort(xv, kind="stable")
        xs = xv[order]
        ys = Ysub[order]
        change = xs[1:] != xs[:-1]
        if not change.any():
            continue
        k = np.arange(1, n)
        valid = change & (k >= min_samples_leaf) & (n - k >= min_samples_leaf)
        if not valid.any():
            continue
        c1 = np.cumsum(ys, axis=0)
        c2 = np.cumsum(ys * ys, axis=0)
        kv = k[valid].astype(float)[:, None]
        S1 = c1[:-1][valid]
        S2 = c2[:-1][valid]
        R1 = c1[-1] - S1
        R2 = c2[-1] - S2
        cost = (S2 - S1 * S1 / kv).sum(axis=1) + (
            R2 - R1 * R1 / (n - kv)
        ).sum(axis=1)
        j = int(np.argmin(cost))
        if cost[j] < best_cost:
            pos = np.flatnonzero(valid)[j]
            best_cost = float(cost[j])
            best = (int(f), float((xs[pos] + xs[pos + 1]) / 2.0))
    return best


def fit_tree(X, Y, hp: Hyperparams = Hyperparams(), rng=None) -> RegressionTree:
    """Greedy CART regression tree minimizing total children SSE.

    Stops on max_depth, on nodes too small to give both children
    min_samples_leaf points, and on zero target variance. With
    max_features set, each node scans a random feature subset drawn
    from rng (seeded from hp.seed when rng is omitted).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("X must be a non-empty 2D array")
    Y = _targets_2d(Y)
    if Y.shape[0] != X.shape[0]:
        raise ValueError(
            f"X has {X.shape[0]} rows but Y has {Y.shape[0]}"
        )
    n, d = X.shape
    if hp.max_features != "all" and hp.max_features > d:
        raise ValueError("max_features exceeds the feature count")
    if hp.max_features != "all" and rng is None:
        rng = np.random.default_rng(hp.seed)

    def grow(rows: np.ndarray, depth: int) -> TreeNode:
        Ysub = Y[rows]
        if (
            (hp.max_depth is not None and depth >= hp.max_depth)
            or rows.size < 2 * hp.min_samples_leaf
            or bool(np.all(Ysub == Ysub[0]))
        ):
            return TreeNode(leaf_value=Ysub.mean(axis=0))
        if hp.max_features == "all":
            features = range(d)
        else:
            features = np.sort(rng.choice(d, size=hp.max_features, replace=False))
        split = _best_split(X, Y, rows, hp.min_samples_leaf, features)
        if split is None:
            return TreeNode(leaf_value=Ysub.mean(axis=0))
        f, t = split
        go_left = X[rows, f] <= t
        return TreeNode(
            feature=f,
            threshold=t,
            left=grow(rows[go_left], depth + 1),
            right=grow(rows[~go_left], depth + 1),
        )

    root = grow(np.arange(n), 0)
    return RegressionTree(root=root, hyperparams=hp, n_features=d, n_targets=Y.shape[1])


def fit_forest(X, Y, hp: Hyperparams = Hyperparams()) -> RandomForestModel:
    """Bagged ensemble of CART trees with per-tree derived seeds."""
    X = np.asarray(X, dtype=float)
    Y = _targets_2d(Y)
    n = X.shape[0]
    sample_size = int(round(hp.bootstrap_fraction * n))
    if sample_size < 1:
        raise ValueError("bootstrap sample would be empty")
    trees = []
    for i in range(hp.n_estimators):
        rng = np.random.default_rng(splitmix64(hp.seed, i))
        if hp.bootstrap:
            rows = rng.integers(0, n, size=sample_size)
        else:
            rows = np.arange(n)
        trees.append(fit_tree(X[rows], Y[rows], hp, rng=rng))
    return RandomForestModel(
        trees=trees, hyperparams=hp, n_features=X.shape[1], n_targets=Y.shape[1]
    )


def mape(actual, predicted) -> float:
    """Mean absolute percentage error, in percent."""
    a = np.asarray(actual, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if a.shape != p.shape:
        raise ValueError("actual and predicted must have the same shape")
    if np.any(a == 0.0):
        raise ValueError("MAPE is undefined for zero actual values")
    return float(100.0 * np.mean(np.abs(p - a) / np.abs(a)))


def nmae(actual, predicted) -> float:
    """Negative mean absolute error; 0 is perfect, more negative is worse."""
    a = np.asarray(actual, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if a.shape != p.shape:
        raise ValueError("actual and predicted must have the same shape")
    return float(-np.mean(np.abs(p - a)))


@dataclass(frozen=True)
class MetricsReport:
    target_names: tuple[str, ...]
    mape_percent: tuple[float, ...]
    nmae_value: tuple[float, ...]
    per_sample_ape: np.ndarray  # percent, shape (n_samples, n_targets)

    def to_dict(self) -> dict:
        return {
            "targets": list(self.target_names),
            "mape_percent": {
                t: v for t, v in zip(self.target_names, self.mape_percent)
            },
            "nmae": {t: v for t, v in zip(self.target_names, self.nmae_value)},
        }


def metrics_report(Y_true, Y_pred, target_names) -> MetricsReport:
    Yt = _targets_2d(Y_true)
    Yp = _targets_2d(Y_pred)
    if Yt.shape != Yp.shape:
        raise ValueError("shape mismatch between truth and predictions")
    if np.any(Yt == 0.0):
        raise ValueError("per-sample percentage errors undefined at zero truth")
    ape = 100.0 * np.abs(Yp - Yt) / np.abs(Yt)
    return MetricsReport(
        target_names=tuple(target_names),
        mape_percent=tuple(float(v) for v in ape.mean(axis=0)),
        nmae_value=tuple(
            float(-v) for v in np.abs(Yp - Yt).mean(axis=0)
        ),
        per_sample_ape=ape,
    )


def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle, then contiguous folds; the first n % k folds are
    one element larger."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"cannot make {k} folds from {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    base = n // k
    extra = n % k
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(perm[start : start + size])
        start += size
    return folds


@dataclass(frozen=True)
class CVReport:
    fold_scores: tuple[float, ...]
    mean_score: float


def kfold_cv(
    X, Y, hp: Hyperparams, k: int = 4, seed: int = 0, fit_fn=None, score_fn=None
) -> CVReport:
    """k-fold cross-validation; fit on k-1 folds, score the held one.

    fit_fn defaults to fit_forest when hp.n_estimators > 1, else
    fit_tree; score_fn defaults to NMAE (higher is better).
    """
    X = np.asarray(X, dtype=float)
    Y = _targets_2d(Y)
    if fit_fn is None:
        fit_fn = fit_forest if hp.n_estimators > 1 else fit_tree
    if score_fn is None:
        score_fn = nmae
    folds = kfold_indices(X.shape[0], k, seed)
    scores = []
    for i in range(k):
        held = folds[i]
        rest = np.concatenate([folds[j] for j in range(k) if j != i])
        model = fit_fn(X[rest], Y[rest], hp)
        scores.append(float(score_fn(Y[held], model.predict(X[held]))))
    return CVReport(fold_scores=tuple(scores), mean_score=float(np.mean(scores)))


DEFAULT_TREE_GRID = {
    "max_depth": [12, 20, 80],
    "min_samples_leaf": [1, 7],
}
DEFAULT_FOREST_GRID = {
    "max_depth": [12, 20, 80],
    "min_samples_leaf": [1, 7],
    "n_estimators": [180, 200],
}


def _grid_cells(param_grid: dict) -> list[dict]:
    keys = list(param_grid.keys())
    cells = [{}]
    for key in keys:
        cells = [dict(cell, **{key: v}) for cell in cells for v in param_grid[key]]
    return cells


def grid_search(
    X,
    Y,
    param_grid: dict,
    base_hp: Hyperparams = Hyperparams(),
    k: int = 4,
    seed: int = 0,
    fit_fn=None,
    score_fn=None,
):
    """Exhaustive hyperparameter search scored by k-fold CV mean NMAE.

    Returns (best Hyperparams, table), the table holding one row per
    cell in iteration order (first key outermost). The best cell is the
    highest mean score; exact ties keep the earliest cell.
    """
    if not param_grid or any(len(v) == 0 for v in param_grid.values()):
        raise ValueError("param_grid must have at least one value per key")
    table = []
    best_hp = None
    best_score = -math.inf
    for cell in _grid_cells(param_grid):
        hp = Hyperparams(**{**asdict(base_hp), **cell})
        report = kfold_cv(X, Y, hp, k=k, seed=seed, fit_fn=fit_fn, score_fn=score_fn)
        table.append(
            {
                "params": cell,
                "fold_scores": list(report.fold_scores),
                "mean_score": report.mean_score,
            }
        )
        if report.mean_score > best_score:
            best_score = report.mean_score
            best_hp = hp
    return best_hp, table


# --- geometry-facing wrapper -------------------------------------------------

GEOMETRY_TARGETS = ("radius_um", "width_um", "height_um")


@dataclass
class GeometryModel:
    """Feature vector (q0, q1, q2[, d1]) in, geometry (R, w, h) out.

    Holds one forest per target by default, or a single multi-output
    forest ("joint" mode) whose split impurity sums the per-target
    variances. When trained on normalized data the min/max maps for
    features and targets ride along and are applied transparently.
    """

    targets: tuple[str, ...]
    forests: dict[str, RandomForestModel]
    feature_names: tuple[str, ...]
    feature_config: dict
    normalizer: dict | None  # {"features": MinMaxNormalizer, "targets": ...}
    train_meta: dict = field(default_factory=dict)
    multi_output: bool = False

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = X.reshape(1, -1) if single else X
        if self.normalizer is not None:
            X2 = self.normalizer["features"].apply(X2)
        if self.multi_output:
            out = self.forests["joint"].predict(X2)
        else:
            cols = [self.forests[t].predict(X2)[:, 0] for t in self.targets]
            out = np.column_stack(cols)
        if self.normalizer is not None:
            out = self.normalizer["targets"].invert(out)
        return out[0] if single else out


def train_geometry_model(
    train: Dataset,
    hp: Hyperparams | dict = Hyperparams(max_depth=20, n_estimators=200),
    normalize: bool = False,
    multi_output: bool = False,
    train_meta: dict | None = None,
) -> GeometryModel:
    """Fit forests mapping dispersion features to geometry.

    hp may be a single Hyperparams (shared) or a per-target dict. With
    normalize=True both features and targets are min-max scaled from
    the training split before fitting.
    """
    X = train.features_matrix()
    Y = train.targets_matrix()
    normalizer = None
    if normalize:
        normalizer = {
            "features": MinMaxNormalizer.fit(X),
            "targets": MinMaxNormalizer.fit(Y),
        }
        X = normalizer["features"].apply(X)
        Y = normalizer["targets"].apply(Y)
    forests: dict[str, RandomForestModel] = {}
    if multi_output:
        shared = hp if isinstance(hp, Hyperparams) else hp["joint"]
        forests["joint"] = fit_forest(X, Y, shared)
    else:
        for i, name in enumerate(GEOMETRY_TARGETS):
            target_hp = hp if isinstance(hp, Hyperparams) else hp[name]
            forests[name] = fit_forest(X, Y[:, i], target_hp)
    return GeometryModel(
        targets=GEOMETRY_TARGETS,
        forests=forests,
        feature_names=train.feature_config.names(),
        feature_config=asdict(train.feature_config),
        normalizer=normalizer,
        train_meta=train_meta or {},
        multi_output=multi_output,
    )


# --- serialization -----------------------------------------------------------


def _node_to_json(node: TreeNode):
    if node.is_leaf():
        return {"leaf": [float(v) for v in node.leaf_value]}
    return {
        "f": node.feature,
        "t": node.threshold,
        "l": _node_to_json(node.left),
        "r": _node_to_json(node.right),
    }


def _node_from_json(obj) -> TreeNode:
    if "leaf" in obj:
        return TreeNode(leaf_value=np.array(obj["leaf"], dtype=float))
    return TreeNode(
        feature=int(obj["f"]),
        threshold=float(obj["t"]),
        left=_node_from_json(obj["l"]),
        right=_node_from_json(obj["r"]),
    )


def _hp_to_json(hp: Hyperparams) -> dict:
    return asdict(hp)


def _hp_from_json(d: dict) -> Hyperparams:
    return Hyperparams(**d)


def _forest_to_json(model: RandomForestModel) -> dict:
    return {
        "hyperparams": _hp_to_json(model.hyperparams),
        "n_features": model.n_features,
        "n_targets": model.n_targets,
        "trees": [_node_to_json(t.root) for t in model.trees],
    }


def _forest_from_json(d: dict) -> RandomForestModel:
    hp = _hp_from_json(d["hyperparams"])
    trees = [
        RegressionTree(
            root=_node_from_json(obj),
            hyperparams=hp,
            n_features=int(d["n_features"]),
            n_targets=int(d["n_targets"]),
        )
        for obj in d["trees"]
    ]
    return RandomForestModel(
        trees=trees,
        hyperparams=hp,
        n_features=int(d["n_features"]),
        n_targets=int(d["n_targets"]),
    )


def save_model(model: GeometryModel, path) -> None:
    payload = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "targets": list(model.targets),
        "multi_output": model.multi_output,
        "per_target": {
            name: _forest_to_json(forest) for name, forest in model.forests.items()
        },
        "feature_names": list(model.feature_names),
        "feature_config": model.feature_config,
        "normalizer": None
        if model.normalizer is None
        else {
            "features": model.normalizer["features"].to_dict(),
            "targets": model.normalizer["targets"].to_dict(),
        },
        "train_meta": model.train_meta,
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> GeometryModel:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelSchemaError(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ModelSchemaError("model file must hold a JSON object")
    if payload.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ModelSchemaError(
            f"unsupported model schema version {payload.get('schema_version')!r}"
        )
    required = {"targets", "per_target", "feature_names", "feature_config"}
    missing = required - payload.keys()
    if missing:
        raise ModelSchemaError(f"model file missing keys: {sorted(missing)}")
    normalizer = None
    if payload.get("normalizer") is not None:
        normalizer = {
            "features": MinMaxNormalizer.from_dict(payload["normalizer"]["features"]),
            "targets": MinMaxNormalizer.from_dict(payload["normalizer"]["targets"]),
        }
    return GeometryModel(
        targets=tuple(payload["targets"]),
        forests={
            name: _forest_from_json(d) for name, d in payload["per_target"].items()
        },
        feature_names=tuple(payload["feature_names"]),
        feature_config=payload["feature_config"],
        normalizer=normalizer,
        train_meta=payload.get("train_meta", {}),
        multi_output=bool(payload.get("multi_output", False)),
    )


def nmae_by_tree_count(
    model: RandomForestModel, X, Y, counts
) -> list[tuple[int, float]]:
    """Held-out NMAE using only the first n trees, for each n in counts.

    Valid because per-tree seeds depend on the tree index alone: the
    first n trees of a large forest are exactly the forest that would
    have been trained with n_estimators=n.
    """
    X = _as_2d(np.asarray(X, dtype=float), model.n_features)
    Y = _targets_2d(Y)
    per_tree = np.stack([t.predict(X) for t in model.trees])
    out = []
    for n in counts:
        if not 1 <= n <= len(model.trees):
            raise ValueError(f"tree count {n} outside [1, {len(model.trees)}]")
        pred = per_tree[:n].mean(axis=0)
        out.append((int(n), nmae(Y, pred)))
    return out
