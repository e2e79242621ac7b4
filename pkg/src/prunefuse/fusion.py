"""Impact measurement and the two signal-fusion regressors.

The fusion target is the per-layer accuracy drop from one-shot ablation:
delta_l = acc(current model) - acc(model with layer l masked), measured on
a held-out set with no fine-tuning. A regressor fit on (signal matrix,
impacts) predicts the drop for each live layer and the layer with the
smallest predicted impact is pruned next.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelState, evaluate_accuracy
from .signals import SIGNAL_NAMES


class FusionError(Exception):
    pass


@dataclass
class ImpactVector:
    layer_indices: list[int]
    deltas: np.ndarray  # accuracy fractions, one per live layer


def measure_impacts(model: ModelState, eval_batches) -> ImpactVector:
    """Ablate each live layer in turn and record the accuracy drop.

    The prune flag is toggled temporarily; the model is unchanged on return.
    """
    eval_batches = list(eval_batches)
    if not eval_batches or all(len(b) == 0 for b in eval_batches):
        raise FusionError("measure_impacts: empty evaluation set")
    live = model.live_layers()
    if not live:
        raise FusionError("measure_impacts: no live layers")
    acc_orig = evaluate_accuracy(model, eval_batches)
    deltas = np.empty(len(live))
    for i, layer in enumerate(live):
        model.prune_mask[layer] = True
        try:
            deltas[i] = acc_orig - evaluate_accuracy(model, eval_batches)
        finally:
            model.prune_mask[layer] = False
    return ImpactVector(list(live), deltas)


# ---------------------------------------------------------------------------
# linear fusion: ridge least squares on z-scored features


@dataclass
class LinearModel:
    weights: np.ndarray       # coefficients in standardized feature space
    bias: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    ridge_lambda: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.feature_mean) / self.feature_std
        return Z @ self.weights + self.bias


def fit_linear(X: np.ndarray, y: np.ndarray, ridge_lambda: float = 1e-6) -> LinearModel:
    """Ridge regression on per-column z-scored features.

    The intercept is not penalized: with centered columns it is exactly the
    target mean. Zero-variance columns get unit scale so they contribute a
    zero coefficient instead of NaNs.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise FusionError(f"fit_linear: bad shapes X{X.shape}, y{y.shape}")
    if len(X) < 2:
        raise FusionError(f"fit_linear: need at least 2 rows, got {len(X)}")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    Z = (X - mean) / std
    Zc = Z - Z.mean(axis=0)
    ybar = float(y.mean())
    A = Zc.T @ Zc + ridge_lambda * np.eye(X.shape[1])
    w = np.linalg.solve(A, Zc.T @ (y - ybar))
    bias = ybar - float(Z.mean(axis=0) @ w)
    if not (np.all(np.isfinite(w)) and np.isfinite(bias)):
        raise FusionError("fit_linear: non-finite coefficients")
    return LinearModel(w, bias, mean, std, ridge_lambda)


# ---------------------------------------------------------------------------
# forest fusion: variance-reduction CART regression trees


@dataclass
class TreeNode:
    value: float
    feature: int = -1            # -1 marks a leaf
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    def predict_one(self, x: np.ndarray) -> float:
        node = self
        while node.feature >= 0:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node.value

    def to_dict(self) -> dict:
        if self.feature < 0:
            return {"value": self.value}
        return {
            "value": self.value,
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    min_leaf: int = 2
    feature_frac: float = 1.0 / 3.0
    bootstrap: bool = True
    seed: int = 0


@dataclass
class ForestModel:
    trees: list[TreeNode]
    importances: np.ndarray   # normalized total variance reduction per feature
    params: ForestParams
    target_range: tuple[float, float] = (0.0, 0.0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.zeros(len(X))
        for tree in self.trees:
            out += [tree.predict_one(row) for row in X]
        return out / len(self.trees)


def _best_split(X, y, features, min_leaf):
    """Split with the largest sum-of-squares reduction among candidate
    features; both children must keep at least min_leaf samples."""
    n = len(y)
    parent_sse = float(((y - y.mean()) ** 2).sum())
    best = None  # (reduction, feature, threshold)
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        csum = np.cumsum(ys)
        csq = np.cumsum(ys * ys)
        total_sum, total_sq = csum[-1], csq[-1]
        for i in range(min_leaf - 1, n - min_leaf):
            if xs[i] == xs[i + 1]:
                continue
            nl = i + 1
            nr = n - nl
            sse_l = csq[i] - csum[i] ** 2 / nl
            sse_r = (total_sq - csq[i]) - (total_sum - csum[i]) ** 2 / nr
            reduction = parent_sse - sse_l - sse_r
            if best is None or reduction > best[0] + 1e-15:
                threshold = (xs[i] + xs[i + 1]) / 2.0
                if threshold >= xs[i + 1]:  # midpoint rounded up onto the right value
                    threshold = xs[i]
                best = (reduction, f, threshold)
    return best


def _grow_tree(X, y, min_leaf, n_candidates, rng, importance):
    node = TreeNode(value=float(y.mean()))
    if len(y) < 2 * min_leaf or np.all(y == y[0]):
        return node
    features = rng.choice(X.shape[1], size=n_candidates, replace=False)
    split = _best_split(X, y, features, min_leaf)
    if split is None or split[0] <= 0.0:
        return node
    reduction, f, threshold = split
    importance[f] += reduction
    mask = X[:, f] <= threshold
    node.feature = int(f)
    node.threshold = float(threshold)
    node.left = _grow_tree(X[mask], y[mask], min_leaf, n_candidates, rng, importance)
    node.right = _grow_tree(X[~mask], y[~mask], min_leaf, n_candidates, rng, importance)
    return node


def fit_forest(X: np.ndarray, y: np.ndarray, params: ForestParams = ForestParams()) -> ForestModel:
    """Bootstrap ensemble of CART regression trees with per-split feature
    subsampling. Each tree's RNG is derived from params.seed + tree index,
    so serial and parallel fits agree."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise FusionError(f"fit_forest: bad shapes X{X.shape}, y{y.shape}")
    if len(X) < 2:
        raise FusionError(f"fit_forest: need at least 2 rows, got {len(X)}")
    n, m = X.shape
    n_candidates = max(1, int(round(m * params.feature_frac)))
    importance = np.zeros(m)
    trees = []
    for t in range(params.n_trees):
        rng = np.random.default_rng(params.seed + t)
        idx = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
        trees.append(_grow_tree(X[idx], y[idx], params.min_leaf, n_candidates, rng, importance))
    total = importance.sum()
    if total > 0:
        importance = importance / total
    return ForestModel(trees, importance, params, (float(y.min()), float(y.max())))


# ---------------------------------------------------------------------------
# selection and importance extraction


def select_layer(layer_indices, predicted) -> int:
    """Layer with the minimum predicted impact; ties break to the lowest
    layer index."""
    layer_indices = list(layer_indices)
    predicted = np.asarray(predicted, dtype=np.float64)
    if len(layer_indices) == 0 or len(predicted) != len(layer_indices):
        raise FusionError("select_layer: empty or mismatched inputs")
    best = None
    for layer, value in zip(layer_indices, predicted):
        if best is None or value < best[1] or (value == best[1] and layer < best[0]):
            best = (layer, value)
    return int(best[0])


def extract_importance(fitted) -> tuple[np.ndarray, bool]:
    """Normalized per-signal importances in [-1, 1].

    Linear models: standardized-space weights divided by the max absolute
    weight (sign preserved). Forests: impurity importances divided by the
    max importance. All-zero importances return zeros with the degenerate
    flag set. Idempotent: renormalizing a normalized vector is a no-op.
    """
    if isinstance(fitted, LinearModel):
        raw = fitted.weights
    elif isinstance(fitted, ForestModel):
        raw = fitted.importances
    else:
        raise FusionError(f"extract_importance: unsupported model {type(fitted).__name__}")
    peak = float(np.abs(raw).max()) if raw.size else 0.0
    if peak == 0.0:
        return np.zeros_like(np.asarray(raw, dtype=np.float64)), True
    return np.asarray(raw, dtype=np.float64) / peak, False


# ---------------------------------------------------------------------------
# audit dumps


def dump_fitted_model(fitted, path) -> None:
    """Structured-text dump of a fitted fusion model for audit."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(fitted, LinearModel):
        payload = {
            "kind": "linear",
            "weights": fitted.weights.tolist(),
            "bias": fitted.bias,
            "feature_mean": fitted.feature_mean.tolist(),
            "feature_std": fitted.feature_std.tolist(),
            "ridge_lambda": fitted.ridge_lambda,
        }
    elif isinstance(fitted, ForestModel):
        payload = {
            "kind": "forest",
            "n_trees": fitted.params.n_trees,
            "importances": fitted.importances.tolist(),
            "target_range": list(fitted.target_range),
            "trees": [t.to_dict() for t in fitted.trees],
        }
    else:
        raise FusionError(f"dump_fitted_model: unsupported model {type(fitted).__name__}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_importance_csv(fitted, path) -> None:
    """Per-signal importance CSV: strategy name, raw value, normalized value."""
    if isinstance(fitted, LinearModel):
        raw = fitted.weights
    else:
        raw = fitted.importances
    normalized, _ = extract_importance(fitted)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("signal,raw,normalized\n")
        for name, r, n in zip(SIGNAL_NAMES, raw, normalized):
            fh.write(f"{name},{float(r)!r},{float(n)!r}\n")
