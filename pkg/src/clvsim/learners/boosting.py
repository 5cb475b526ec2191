"""Gradient-boosted tree ensembles for squared-error regression and softmax classification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from ..errors import ConfigError, SchemaError, TaskError
from ._kernels import ensemble_scores
from .tree import RegressionTree, TreeFitParams, TreeGrower

DEFAULT_ROUNDS = 100
DEFAULT_SHRINKAGE = 0.1
DEFAULT_TREE_PARAMS = TreeFitParams(max_leaves=31, min_samples_leaf=20, min_gain=0.0, max_bins=64)

# Halvings tried before a round's step is dropped entirely.
_MAX_BACKTRACK = 40


@dataclass
class GradientBoostedEnsemble:
    task: str  # "regression" or "multiclass"
    n_classes: int
    init_scores: np.ndarray
    trees: list[RegressionTree]  # round-major, one tree per class per round
    shrinkage: float
    feature_names: tuple[str, ...]
    params: TreeFitParams = field(default_factory=TreeFitParams)
    train_loss: list[float] = field(default_factory=list)
    _flat: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def trees_per_round(self) -> int:
        return self.n_classes if self.task == "multiclass" else 1

    @property
    def n_rounds(self) -> int:
        return len(self.trees) // self.trees_per_round

    def iter_trees(self) -> Iterator[RegressionTree]:
        return iter(self.trees)

    def _flatten(self):
        if self._flat is None:
            sizes = [t.n_nodes for t in self.trees]
            offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64) if sizes else np.zeros(0, np.int64)
            tpr = self.trees_per_round
            tree_class = np.array([j % tpr for j in range(len(self.trees))], dtype=np.int64)

            def cat(attr, dtype):
                if not self.trees:
                    return np.zeros(1, dtype=dtype)
                return np.ascontiguousarray(np.concatenate([getattr(t, attr) for t in self.trees]), dtype=dtype)

            self._flat = (
                offsets, tree_class,
                cat("feature", np.int64), cat("threshold", np.float64), cat("missing_left", np.bool_),
                cat("left", np.int64), cat("right", np.int64), cat("value", np.float64),
            )
        return self._flat

    def _matrix(self, X) -> np.ndarray:
        if isinstance(X, Mapping):
            try:
                X = [[float(X[n]) for n in self.feature_names]]
            except KeyError as exc:
                raise SchemaError(f"feature vector lacks {exc.args[0]!r}") from None
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.feature_names):
            raise SchemaError(f"expected {len(self.feature_names)} features, got {X.shape[1]}")
        return X

    def raw_scores(self, X) -> np.ndarray:
        """Summed scores, shape (n, K) (K=1 for regression)."""
        X = self._matrix(X)
        return ensemble_scores(X, self.init_scores, self.shrinkage, *self._flatten())

    def staged_raw_scores(self, X) -> Iterator[np.ndarray]:
        """Scores after 0, 1, ..., n_rounds rounds, accumulated exactly as during fitting."""
        X = self._matrix(X)
        F = np.tile(self.init_scores, (len(X), 1))
        yield F.copy()
        tpr = self.trees_per_round
        for r in range(self.n_rounds):
            for k in range(tpr):
                F[:, k] = F[:, k] + self.shrinkage * self.trees[r * tpr + k].predict(X)
            yield F.copy()

    def predict(self, X) -> np.ndarray:
        if self.task != "regression":
            raise TaskError("predict() is for regression ensembles; use predict_proba")
        return self.raw_scores(X)[:, 0]

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n_classes": self.n_classes,
            "init_scores": self.init_scores.tolist(),
            "shrinkage": self.shrinkage,
            "feature_names": list(self.feature_names),
            "params": self.params.to_dict(),
            "train_loss": list(self.train_loss),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GradientBoostedEnsemble":
        return cls(
            task=d["task"],
            n_classes=int(d["n_classes"]),
            init_scores=np.asarray(d["init_scores"], dtype=np.float64),
            trees=[RegressionTree.from_dict(t) for t in d["trees"]],
            shrinkage=float(d["shrinkage"]),
            feature_names=tuple(d["feature_names"]),
            params=TreeFitParams(**d["params"]),
            train_loss=[float(v) for v in d["train_loss"]],
        )


def softmax(F: np.ndarray) -> np.ndarray:
    z = F - F.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_loss(F: np.ndarray, y: np.ndarray) -> float:
    z = F - F.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def mse(F: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((y - F[:, 0]) ** 2))


def predict_proba(model: GradientBoostedEnsemble, X) -> np.ndarray:
    """Class probabilities; a single mapping or 1-D row yields a length-K vector."""
    if model.task != "multiclass":
        raise TaskError("predict_proba requires a multiclass ensemble")
    single = isinstance(X, Mapping) or np.ndim(X) == 1
    P = softmax(model.raw_scores(X))
    return P[0] if single else P


def _check_inputs(X, y, rounds, shrinkage, feature_names):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("X must be 2-D with len(X) == len(y) >= 1")
    if rounds < 0:
        raise ConfigError("rounds must be >= 0")
    if not 0 < shrinkage <= 1:
        raise ConfigError("shrinkage must be in (0, 1]")
    if feature_names is None:
        feature_names = [f"f{i}" for i in range(X.shape[1])]
    return X, tuple(feature_names)


def _step(F, k, tree, leaf_rows, shrinkage, loss_fn, current):
    """Add one tree's contribution to column k of F, halving its leaf values until the loss does not rise."""
    base_values = tree.value.copy()
    scale = 1.0
    for _ in range(_MAX_BACKTRACK):
        tree.value = base_values * scale
        contrib = np.zeros(len(F))
        for node, rows in leaf_rows.items():
            contrib[rows] = tree.value[node]
        trial = F.copy()
        trial[:, k] = F[:, k] + shrinkage * contrib
        loss = loss_fn(trial)
        if loss <= current:
            return trial, loss
        scale *= 0.5
    tree.value = np.zeros_like(base_values)
    return F, current


def fit_gbdt_regressor(
    X,
    y,
    rounds: int = DEFAULT_ROUNDS,
    shrinkage: float = DEFAULT_SHRINKAGE,
    tree_params: TreeFitParams | None = None,
    feature_names: Sequence[str] | None = None,
) -> GradientBoostedEnsemble:
    """Squared-error boosting: each round fits a tree to the current residuals."""
    y = np.asarray(y, dtype=np.float64)
    X, names = _check_inputs(X, y, rounds, shrinkage, feature_names)
    params = tree_params or DEFAULT_TREE_PARAMS
    init = np.array([float(np.mean(y))])
    F = np.tile(init, (len(y), 1))
    loss_fn = lambda G: mse(G, y)  # noqa: E731
    losses = [loss_fn(F)]
    trees = []
    grower = TreeGrower(X, params, names) if rounds else None
    for _ in range(rounds):
        resid = y - F[:, 0]
        tree, leaf_rows = grower.grow(resid)
        F, loss = _step(F, 0, tree, leaf_rows, shrinkage, loss_fn, losses[-1])
        trees.append(tree)
        losses.append(loss)
    return GradientBoostedEnsemble("regression", 1, init, trees, float(shrinkage), names, params, losses)


def class_priors(y: np.ndarray, n_classes: int) -> np.ndarray:
    """Empirical class frequencies; absent classes get half a pseudo-count."""
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    floor = 0.5
    return np.where(counts > 0, counts, floor) / len(y)


def fit_gbdt_classifier(
    X,
    y,
    rounds: int = DEFAULT_ROUNDS,
    shrinkage: float = DEFAULT_SHRINKAGE,
    tree_params: TreeFitParams | None = None,
    feature_names: Sequence[str] | None = None,
    n_classes: int | None = None,
) -> GradientBoostedEnsemble:
    """Softmax boosting with one tree per class per round.

    Tree structure is chosen on the class residuals ``onehot - p``; leaf values
    take a Newton step ``(K-1)/K * sum(r) / sum(p(1-p))``.
    """
    y = np.asarray(y)
    if y.size and (y.min() < 0 or not np.issubdtype(y.dtype, np.integer)):
        raise ConfigError("labels must be non-negative integers")
    y = y.astype(np.int64)
    K = int(n_classes if n_classes is not None else y.max() + 1)
    if K < 2:
        raise ConfigError("need at least two classes")
    if y.max() >= K:
        raise ConfigError("label out of range for n_classes")
    X, names = _check_inputs(X, y, rounds, shrinkage, feature_names)
    params = tree_params or DEFAULT_TREE_PARAMS
    init = np.log(class_priors(y, K))
    F = np.tile(init, (len(y), 1))
    onehot = np.zeros((len(y), K))
    onehot[np.arange(len(y)), y] = 1.0
    loss_fn = lambda G: log_loss(G, y)  # noqa: E731
    losses = [loss_fn(F)]
    trees = []
    grower = TreeGrower(X, params, names) if rounds else None
    factor = (K - 1) / K
    for _ in range(rounds):
        P = softmax(F)
        round_trees = []
        for k in range(K):
            resid = onehot[:, k] - P[:, k]
            tree, leaf_rows = grower.grow(resid)
            hess = P[:, k] * (1.0 - P[:, k])
            for node, rows in leaf_rows.items():
                denom = max(float(hess[rows].sum()), 1e-12)
                tree.value[node] = factor * float(resid[rows].sum()) / denom
            round_trees.append((tree, leaf_rows))
        # apply the K trees jointly, backtracking on a shared scale
        base = [t.value.copy() for t, _ in round_trees]
        scale = 1.0
        current = losses[-1]
        for _attempt in range(_MAX_BACKTRACK + 1):
            trial = F.copy()
            for k, (tree, leaf_rows) in enumerate(round_trees):
                tree.value = base[k] * scale if _attempt < _MAX_BACKTRACK else np.zeros_like(base[k])
                contrib = np.zeros(len(F))
                for node, rows in leaf_rows.items():
                    contrib[rows] = tree.value[node]
                trial[:, k] = trial[:, k] + shrinkage * contrib
            loss = loss_fn(trial)
            if loss <= current:
                break
            scale *= 0.5
        F = trial
        losses.append(loss)
        trees.extend(t for t, _ in round_trees)
    return GradientBoostedEnsemble("multiclass", K, init, trees, float(shrinkage), names, params, losses)
