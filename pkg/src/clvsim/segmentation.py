"""Value segmentation: one regression tree on base-year customer value with forced product splits."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from .core import PanelDataset
from .errors import ConfigError, DataError, SchemaError
from .learners.tree import ForcedSplitSpec, RegressionTree, TreeFitParams, fit_regression_tree

FOUR_CLASSES = ("S_00", "S_01", "S_10", "S_11")
CHURN_LABEL = "churn"
DEFAULT_EXCLUDED = ("age_years",)


def default_forced_spec() -> ForcedSplitSpec:
    """Mortgage / investment / credit card / savings ladder, shallower on the mortgage side."""
    text = resources.files("clvsim").joinpath("data/forced_splits.json").read_text()
    return ForcedSplitSpec.from_dict(json.loads(text))


@dataclass
class SegmentationModel:
    tree: RegressionTree
    n_segments: int
    forced: ForcedSplitSpec | None
    base_year: int = 0
    requested_segments: int | None = None

    def __post_init__(self):
        self.high_level, self.four_class = _subtree_groups(self.tree)

    @property
    def churn_segment(self) -> int:
        return self.n_segments

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.tree.feature_names

    @property
    def subtree_map(self) -> dict[str, frozenset[int]]:
        out = {f"H{i + 1}": g for i, g in enumerate(self.high_level)}
        out.update(self.four_class)
        return out

    def segments_for(self, X: np.ndarray, churned: np.ndarray | None = None) -> np.ndarray:
        seg = self.tree.predict_leaf_ids(X) + 1
        if churned is not None:
            seg = np.where(churned, self.churn_segment, seg)
        return seg.astype(np.int64)

    def to_dict(self) -> dict:
        return {
            "tree": self.tree.to_dict(),
            "n_segments": self.n_segments,
            "forced": None if self.forced is None else self.forced.to_dict(),
            "base_year": self.base_year,
            "requested_segments": self.requested_segments,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SegmentationModel":
        return cls(
            tree=RegressionTree.from_dict(d["tree"]),
            n_segments=int(d["n_segments"]),
            forced=ForcedSplitSpec.from_dict(d["forced"]),
            base_year=int(d["base_year"]),
            requested_segments=d["requested_segments"],
        )


def _leaves_under(tree: RegressionTree, node: int) -> frozenset[int]:
    out = []
    stack = [node]
    while stack:
        n = stack.pop()
        if tree.feature[n] < 0:
            out.append(int(tree.leaf_id[n]) + 1)
        else:
            stack.extend((tree.right[n], tree.left[n]))
    return frozenset(out)


def _subtree_groups(tree: RegressionTree):
    """High-level groups (first non-forced node under each forced path, left to right) and the
    four mortgage x investment classes taken from the first two forced levels."""
    high = []

    def walk(node):
        if tree.feature[node] >= 0 and tree.forced[node]:
            walk(tree.left[node])
            walk(tree.right[node])
        else:
            high.append(_leaves_under(tree, node))

    if tree.feature[0] >= 0 and tree.forced[0]:
        walk(0)
    else:
        high.append(_leaves_under(tree, 0))

    four: dict[str, frozenset[int]] = {}
    if tree.feature[0] >= 0 and tree.forced[0]:
        for a, child in (("0", tree.left[0]), ("1", tree.right[0])):
            if tree.feature[child] >= 0 and tree.forced[child]:
                four[f"S_{a}0"] = _leaves_under(tree, tree.left[child])
                four[f"S_{a}1"] = _leaves_under(tree, tree.right[child])
    return tuple(high), four


def fit_segmentation(
    train: PanelDataset,
    base_year: int,
    forced: ForcedSplitSpec | None,
    S: int,
    params: TreeFitParams | None = None,
    excluded_features: Iterable[str] = DEFAULT_EXCLUDED,
) -> SegmentationModel:
    """Fit the segmentation tree on non-churned base-year rows with cv as target.

    At most S-1 leaves become segments 1..L; the id after the last leaf is the churn segment.
    """
    params = params or TreeFitParams(min_samples_leaf=50)
    n_forced = forced.n_leaves if forced is not None else 1
    if S < n_forced + 1:
        raise ConfigError(f"S={S} too small: need >= {n_forced + 1} (forced leaves + churn)")
    yr = train.year_range
    if yr is None or not yr[0] <= base_year <= yr[1]:
        raise DataError(f"base year {base_year} outside the panel's year range {yr}")
    rows = train.frame[(train.frame["year_index"] == base_year) & (train.frame["churned"] == 0)]
    if rows.empty:
        raise DataError(f"no non-churned rows in base year {base_year}")
    excluded = set(excluded_features)
    features = [n for n in train.schema.names if n not in excluded]
    if forced is not None:
        missing = forced.features - set(train.schema.names)
        if missing:
            raise SchemaError(f"forced features not in schema: {sorted(missing)}")
    X = rows[features].to_numpy(dtype=np.float64)
    y = rows["cv"].to_numpy(dtype=np.float64)
    tree = fit_regression_tree(X, y, replace(params, max_leaves=S - 1), forced, features)
    return SegmentationModel(tree, tree.leaf_count + 1, forced, base_year, S)


def segment_frame(model: SegmentationModel, frame: pd.DataFrame) -> np.ndarray:
    missing = [n for n in model.feature_names if n not in frame.columns]
    if missing:
        raise SchemaError(f"panel lacks segmentation features {missing[:5]}")
    X = frame[list(model.feature_names)].to_numpy(dtype=np.float64)
    return model.segments_for(X, frame["churned"].to_numpy().astype(bool))


def assign_segments(model: SegmentationModel, panel: PanelDataset) -> pd.Series:
    """Segment id for every (customer_id, year_index) row; churned rows get the churn id."""
    seg = segment_frame(model, panel.frame)
    index = pd.MultiIndex.from_frame(panel.frame[["customer_id", "year_index"]])
    return pd.Series(seg, index=index, name="segment")


def four_class_of(model: SegmentationModel, s: int) -> str:
    if s == model.churn_segment:
        return CHURN_LABEL
    if not 1 <= s < model.churn_segment:
        raise ConfigError(f"segment {s} out of range 1..{model.churn_segment}")
    if not model.four_class:
        raise ConfigError("segmentation has no two-level forced structure")
    for label, segs in model.four_class.items():
        if s in segs:
            return label
    raise ConfigError(f"segment {s} lies outside the two-level forced structure")


def four_class_array(model: SegmentationModel, segments: np.ndarray) -> np.ndarray:
    """Vectorised four_class_of; labels coded as indices into FOUR_CLASSES, churn as 4."""
    lookup = np.full(model.n_segments + 1, -1, dtype=np.int64)
    for i, label in enumerate(FOUR_CLASSES):
        for s in model.four_class.get(label, ()):
            lookup[s] = i
    lookup[model.churn_segment] = len(FOUR_CLASSES)
    return lookup[np.asarray(segments)]


def segments_in_subtrees(model: SegmentationModel, classes: Iterable[str]) -> frozenset[int]:
    out: set[int] = set()
    table = model.subtree_map
    for label in classes:
        if label not in table:
            raise ConfigError(f"unknown subtree label {label!r}")
        out |= table[label]
    return frozenset(out)
