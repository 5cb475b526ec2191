"""Single regression tree: histogram split finding, forced top splits, best-first growth."""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..errors import ConfigError, SchemaError
from ._kernels import apply_tree, best_split, build_histogram

FORCED_THRESHOLD = 0.5


@dataclass(frozen=True)
class ForcedSplitSpec:
    """Binary tree of product-flag tests; ``None`` children are where greedy growth starts."""

    feature: str
    left: "ForcedSplitSpec | None" = None
    right: "ForcedSplitSpec | None" = None

    @property
    def n_leaves(self) -> int:
        return sum(1 if c is None else c.n_leaves for c in (self.left, self.right))

    @property
    def features(self) -> set[str]:
        out = {self.feature}
        for c in (self.left, self.right):
            if c is not None:
                out |= c.features
        return out

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "left": None if self.left is None else self.left.to_dict(),
            "right": None if self.right is None else self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "ForcedSplitSpec | None":
        if d is None:
            return None
        unknown = set(d) - {"feature", "left", "right"}
        if unknown or "feature" not in d:
            raise ConfigError(f"bad forced-split node: {dict(d)!r}")
        return cls(d["feature"], cls.from_dict(d.get("left")), cls.from_dict(d.get("right")))

    @classmethod
    def load(cls, path: str | Path) -> "ForcedSplitSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TreeFitParams:
    max_leaves: int = 31
    min_samples_leaf: int = 20
    min_gain: float = 0.0
    max_bins: int = 64

    def __post_init__(self):
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be >= 1")
        if self.max_leaves < 1:
            raise ConfigError("max_leaves must be >= 1")
        if self.min_gain < 0:
            raise ConfigError("min_gain must be non-negative")
        if not 2 <= self.max_bins <= 255:
            raise ConfigError("max_bins must be in [2, 255]")

    def to_dict(self) -> dict:
        return {"max_leaves": self.max_leaves, "min_samples_leaf": self.min_samples_leaf,
                "min_gain": self.min_gain, "max_bins": self.max_bins}


def bin_thresholds(X: np.ndarray, max_bins: int) -> list[np.ndarray]:
    """Candidate split thresholds per column.

    Columns with at most ``max_bins`` distinct values split at midpoints between
    them; others at distinct interior quantiles. Missing values are ignored.
    """
    out = []
    levels = np.arange(1, max_bins) / max_bins
    for j in range(X.shape[1]):
        col = X[:, j]
        col = col[~np.isnan(col)]
        uniq = np.unique(col)
        if len(uniq) <= 1:
            thr = np.empty(0)
        elif len(uniq) <= max_bins:
            thr = (uniq[:-1] + uniq[1:]) / 2.0
        else:
            thr = np.unique(np.quantile(col, levels))
            thr = thr[thr < uniq[-1]]
        out.append(thr.astype(np.float64))
    return out


def apply_bins(X: np.ndarray, thresholds: Sequence[np.ndarray], max_bins: int) -> np.ndarray:
    """Map raw values to bin ids; bin ``b`` holds thresholds[b-1] < x <= thresholds[b], missing -> max_bins."""
    binned = np.empty(X.shape, dtype=np.uint8)
    for j, thr in enumerate(thresholds):
        col = X[:, j]
        b = np.searchsorted(thr, col, side="left")
        b[np.isnan(col)] = max_bins
        binned[:, j] = b
    return binned


@dataclass
class RegressionTree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    forced: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    n_samples: np.ndarray
    leaf_id: np.ndarray  # -1 for internal nodes
    feature_names: tuple[str, ...] = field(default=())

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def leaf_count(self) -> int:
        return int((self.feature < 0).sum())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index (not leaf id) reached by each row."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        return apply_tree(X, self.feature, self.threshold, self.missing_left, self.left, self.right)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def predict_leaf_ids(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_id[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "missing_left": self.missing_left.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "forced": self.forced.tolist(),
            "value": self.value.tolist(),
            "gain": self.gain.tolist(),
            "n_samples": self.n_samples.tolist(),
            "leaf_id": self.leaf_id.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegressionTree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            missing_left=np.asarray(d["missing_left"], dtype=np.bool_),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            forced=np.asarray(d["forced"], dtype=np.bool_),
            value=np.asarray(d["value"], dtype=np.float64),
            gain=np.asarray(d["gain"], dtype=np.float64),
            n_samples=np.asarray(d["n_samples"], dtype=np.int64),
            leaf_id=np.asarray(d["leaf_id"], dtype=np.int64),
            feature_names=tuple(d["feature_names"]),
        )

    def forced_prefix(self) -> dict | None:
        """Nested {feature, left, right} view of the forced nodes, comparable to ForcedSplitSpec.to_dict()."""

        def walk(node):
            if self.feature[node] < 0 or not self.forced[node]:
                return None
            return {
                "feature": self.feature_names[self.feature[node]],
                "left": walk(self.left[node]),
                "right": walk(self.right[node]),
            }

        return walk(0)


def tree_predict(tree: RegressionTree, x: Mapping[str, float] | Sequence[float]) -> tuple[float, int]:
    """Route one feature vector; returns (prediction, leaf_id)."""
    if isinstance(x, Mapping):
        try:
            row = [float(x[n]) for n in tree.feature_names]
        except KeyError as exc:
            raise SchemaError(f"feature vector lacks {exc.args[0]!r}") from None
    else:
        row = list(x)
    node = int(tree.apply(np.asarray([row], dtype=np.float64))[0])
    return float(tree.value[node]), int(tree.leaf_id[node])


@dataclass
class _Node:
    idx: np.ndarray
    parent_mean: float
    sums: np.ndarray | None = None
    counts: np.ndarray | None = None


class _Builder:
    def __init__(self):
        self.feature, self.threshold, self.missing_left = [], [], []
        self.left, self.right, self.forced = [], [], []
        self.value, self.gain, self.n_samples = [], [], []

    def add(self, value: float, n: int) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.missing_left.append(True)
        self.left.append(-1)
        self.right.append(-1)
        self.forced.append(False)
        self.value.append(value)
        self.gain.append(0.0)
        self.n_samples.append(n)
        return len(self.feature) - 1

    def split(self, node, feature, threshold, gain, forced, lval, ln, rval, rn):
        l = self.add(lval, ln)
        r = self.add(rval, rn)
        self.feature[node] = feature
        self.threshold[node] = threshold
        self.gain[node] = gain
        self.forced[node] = forced
        self.left[node] = l
        self.right[node] = r
        return l, r

    def build(self, feature_names) -> RegressionTree:
        feature = np.asarray(self.feature, dtype=np.int64)
        left = np.asarray(self.left, dtype=np.int64)
        right = np.asarray(self.right, dtype=np.int64)
        leaf_id = np.full(len(feature), -1, dtype=np.int64)
        counter = 0
        stack = [0]
        while stack:  # pre-order, left first
            node = stack.pop()
            if feature[node] < 0:
                leaf_id[node] = counter
                counter += 1
            else:
                stack.append(right[node])
                stack.append(left[node])
        return RegressionTree(
            feature=feature,
            threshold=np.asarray(self.threshold, dtype=np.float64),
            missing_left=np.asarray(self.missing_left, dtype=np.bool_),
            left=left,
            right=right,
            forced=np.asarray(self.forced, dtype=np.bool_),
            value=np.asarray(self.value, dtype=np.float64),
            gain=np.asarray(self.gain, dtype=np.float64),
            n_samples=np.asarray(self.n_samples, dtype=np.int64),
            leaf_id=leaf_id,
            feature_names=tuple(feature_names),
        )


def split_gain(sum_left, n_left, sum_right, n_right):
    """Squared-error decrease of a split: nL*nR/n * (meanL - meanR)**2."""
    n = n_left + n_right
    return n_left * n_right / n * (sum_left / n_left - sum_right / n_right) ** 2


class TreeGrower:
    """Grows one tree on pre-binned data. Reused across boosting rounds."""

    def __init__(self, X, params: TreeFitParams, feature_names, thresholds=None, binned=None):
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        self.params = params
        self.feature_names = tuple(feature_names)
        if len(self.feature_names) != self.X.shape[1]:
            raise SchemaError("feature_names length does not match X")
        self.thresholds = thresholds if thresholds is not None else bin_thresholds(self.X, params.max_bins)
        self.binned = binned if binned is not None else apply_bins(self.X, self.thresholds, params.max_bins)
        self.n_bins = params.max_bins + 1
        self._n_thresholds = np.array([len(t) for t in self.thresholds], dtype=np.int64)
        self.allowed = np.ones(self.X.shape[1], dtype=np.bool_)

    # -- split search -------------------------------------------------
    def _histogram(self, idx, y):
        return build_histogram(self.binned, idx, y, self.n_bins)

    def _best_split(self, sums, counts):
        gain, f, j = best_split(sums, counts, self._n_thresholds, self.params.max_bins,
                                self.params.min_samples_leaf, self.allowed)
        if f < 0:
            return None
        return gain, f, j

    # -- growth -------------------------------------------------------
    def grow(self, y: np.ndarray, forced: ForcedSplitSpec | None = None, idx: np.ndarray | None = None):
        """Returns (tree, rows_per_leaf_node) where rows_per_leaf_node maps leaf node -> row indices."""
        p = self.params
        y = np.ascontiguousarray(y, dtype=np.float64)
        if idx is None:
            idx = np.arange(len(y), dtype=np.int64)
        if forced is not None:
            for name in forced.features:
                if name not in self.feature_names:
                    raise SchemaError(f"forced feature {name!r} not among features")
            if p.max_leaves < forced.n_leaves:
                raise ConfigError(f"max_leaves={p.max_leaves} < forced leaves={forced.n_leaves}")
        b = _Builder()
        root_mean = float(np.mean(y[idx])) if len(idx) else 0.0
        root = b.add(root_mean, len(idx))
        frontier: list[tuple[int, np.ndarray]] = []
        leaf_rows: dict[int, np.ndarray] = {}

        def force(node, rows, spec, fallback):
            if spec is None:
                frontier.append((node, rows))
                return
            f = self.feature_names.index(spec.feature)
            col = self.X[rows, f]
            go_left = (col <= FORCED_THRESHOLD) | np.isnan(col)
            lrows, rrows = rows[go_left], rows[~go_left]
            here = float(np.mean(y[rows])) if len(rows) else fallback
            lmean = float(np.mean(y[lrows])) if len(lrows) else here
            rmean = float(np.mean(y[rrows])) if len(rrows) else here
            gain = 0.0
            if len(lrows) and len(rrows):
                gain = split_gain(y[lrows].sum(), len(lrows), y[rrows].sum(), len(rrows))
            l, r = b.split(node, f, FORCED_THRESHOLD, gain, True, lmean, len(lrows), rmean, len(rrows))
            force(l, lrows, spec.left, here)
            force(r, rrows, spec.right, here)

        force(root, idx, forced, root_mean)
        n_leaves = len(frontier)

        heap = []
        nodes: dict[int, _Node] = {}

        def consider(node, rows, sums=None, counts=None):
            leaf_rows[node] = rows
            if len(rows) < 2 * p.min_samples_leaf:
                return
            if sums is None:
                sums, counts = self._histogram(rows, y)
            best = self._best_split(sums, counts)
            nodes[node] = _Node(rows, 0.0, sums, counts)
            if best is None or not best[0] > p.min_gain:
                return
            gain, f, j = best
            heapq.heappush(heap, (-gain, node, f, j))

        for node, rows in frontier:
            consider(node, rows)

        while heap and n_leaves < p.max_leaves:
            neg_gain, node, f, j = heapq.heappop(heap)
            info = nodes.pop(node)
            rows = info.idx
            bins = self.binned[rows, f]
            go_left = (bins <= j) | (bins == p.max_bins)
            lrows, rrows = rows[go_left], rows[~go_left]
            l, r = b.split(node, f, float(self.thresholds[f][j]), -neg_gain, False,
                           float(np.mean(y[lrows])), len(lrows), float(np.mean(y[rrows])), len(rrows))
            del leaf_rows[node]
            n_leaves += 1
            small_is_left = len(lrows) <= len(rrows)
            small = lrows if small_is_left else rrows
            s_sums, s_counts = self._histogram(small, y)
            o_sums, o_counts = info.sums - s_sums, info.counts - s_counts
            if small_is_left:
                consider(l, lrows, s_sums, s_counts)
                consider(r, rrows, o_sums, o_counts)
            else:
                consider(l, lrows, o_sums, o_counts)
                consider(r, rrows, s_sums, s_counts)

        tree = b.build(self.feature_names)
        leaf_rows = {k: v for k, v in leaf_rows.items() if tree.feature[k] < 0}
        return tree, leaf_rows


def fit_regression_tree(
    X,
    y,
    params: TreeFitParams | None = None,
    forced: ForcedSplitSpec | None = None,
    feature_names: Sequence[str] | None = None,
) -> RegressionTree:
    """Fit a least-squares regression tree, materialising ``forced`` at the top first."""
    params = params or TreeFitParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("X must be 2-D with len(X) == len(y) >= 1")
    if feature_names is None:
        feature_names = [f"f{i}" for i in range(X.shape[1])]
    if forced is not None:
        for name in forced.features:
            if name not in feature_names:
                raise SchemaError(f"forced feature {name!r} not in schema")
            col = X[:, list(feature_names).index(name)]
            col = col[~np.isnan(col)]
            if not np.isin(col, (0.0, 1.0)).all():
                raise SchemaError(f"forced feature {name!r} is not binary")
    grower = TreeGrower(X, params, feature_names)
    tree, _ = grower.grow(y, forced)
    return tree


def feature_importances(model) -> dict[str, float]:
    """Total split gain per feature; accepts a RegressionTree or an ensemble with ``trees``."""
    trees = [model] if isinstance(model, RegressionTree) else list(model.iter_trees())
    names = trees[0].feature_names if trees else ()
    out = {n: 0.0 for n in names}
    for t in trees:
        for f, g in zip(t.feature, t.gain):
            if f >= 0:
                out[t.feature_names[f]] += float(g)
    return out
