"""Transition models, value assigners and the Markov frequency / mean-value baseline."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .core import FeatureSchema, PanelDataset
from .errors import ConfigError, DataError, SchemaError
from .learners.boosting import (
    DEFAULT_ROUNDS,
    DEFAULT_SHRINKAGE,
    GradientBoostedEnsemble,
    fit_gbdt_classifier,
    fit_gbdt_regressor,
    predict_proba,
)
from .learners.tree import TreeFitParams, feature_importances

VARIANTS = ("full", "simple")
SIMPLE_KINDS = ("static", "yearly_progressing", "monthly_progressing")
LAG_FEATURE = "cv_lag1"

DEFAULT_BUDGETS = {
    "transition_full": 50,
    "transition_simple": 30,
    "value_full": None,
    "value_simple": 25,
}


@dataclass(frozen=True)
class BoostingConfig:
    rounds: int = DEFAULT_ROUNDS
    shrinkage: float = DEFAULT_SHRINKAGE
    tree: TreeFitParams = field(default_factory=lambda: TreeFitParams(max_leaves=31, min_samples_leaf=20))
    importance_rounds: int = 10
    importance_sample: int = 5000
    seed: int = 0

    def to_dict(self) -> dict:
        return {"rounds": self.rounds, "shrinkage": self.shrinkage, "tree": self.tree.to_dict(),
                "importance_rounds": self.importance_rounds, "importance_sample": self.importance_sample,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BoostingConfig":
        d = dict(d)
        if "tree" in d:
            d["tree"] = TreeFitParams(**d["tree"])
        return cls(**d)


def simple_features(schema: FeatureSchema, budget: int | None = None,
                    fixed: Sequence[str] | None = None) -> list[str]:
    """Static and deterministically progressible features, in schema order, clamped to ``budget``."""
    names = list(fixed) if fixed is not None else list(schema.names_of_kind(*SIMPLE_KINDS))
    for n in names:
        if n not in schema:
            raise SchemaError(f"simple feature {n!r} not in schema")
        if schema[n].kind not in SIMPLE_KINDS:
            raise ConfigError(f"feature {n!r} of kind {schema[n].kind!r} cannot be progressed")
    return names if budget is None else names[:budget]


def one_hot(segments: np.ndarray, S: int) -> np.ndarray:
    out = np.zeros((len(segments), S))
    out[np.arange(len(segments)), np.asarray(segments, dtype=np.int64) - 1] = 1.0
    return out


def segment_block(prefix: str, S: int) -> list[str]:
    return [f"{prefix}{s}" for s in range(1, S + 1)]


@dataclass
class TrainingSet:
    """Base feature matrix plus the segment that is one-hot encoded next to it."""

    base: np.ndarray
    segment: np.ndarray
    y: np.ndarray
    base_features: list[str]
    n_segments: int
    prefix: str
    customer_id: np.ndarray | None = None

    @property
    def feature_names(self) -> list[str]:
        return self.base_features + segment_block(self.prefix, self.n_segments)

    @property
    def X(self) -> np.ndarray:
        return np.hstack([self.base, one_hot(self.segment, self.n_segments)])

    def __iter__(self):
        yield self.X
        yield self.y

    def __len__(self) -> int:
        return len(self.y)


def _consecutive_pairs(panel: PanelDataset, assignments: pd.Series):
    """Row positions (prev, next) of every customer's consecutive-year pair with a live prev row."""
    f = panel.frame
    yr = panel.year_range
    if yr is None or yr[1] - yr[0] < 1:
        raise DataError("need a panel spanning at least two years")
    cid = f["customer_id"].to_numpy()
    year = f["year_index"].to_numpy()
    churned = f["churned"].to_numpy().astype(bool)
    nxt = np.arange(1, len(f) + 1)
    nxt[-1] = 0
    ok = (cid == cid[nxt]) & (year[nxt] == year + 1) & ~churned
    ok[-1] = False
    prev_pos = np.flatnonzero(ok)
    seg = _aligned_segments(panel, assignments)
    return prev_pos, prev_pos + 1, seg


def _aligned_segments(panel: PanelDataset, assignments: pd.Series) -> np.ndarray:
    key = pd.MultiIndex.from_frame(panel.frame[["customer_id", "year_index"]])
    seg = assignments.reindex(key)
    if seg.isna().any():
        raise DataError("assignments do not cover every panel row")
    return seg.to_numpy(dtype=np.int64)


def build_transition_training(panel: PanelDataset, assignments: pd.Series, variant: str,
                              features: Sequence[str] | None = None, S: int | None = None) -> TrainingSet:
    """One row per consecutive-year pair: features and segment at t-1, target segment at t."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    prev, nxt, seg = _consecutive_pairs(panel, assignments)
    if features is None:
        features = list(panel.schema.names) if variant == "full" else simple_features(panel.schema)
    S = int(S if S is not None else seg.max())
    base = panel.frame[list(features)].to_numpy(dtype=np.float64)[prev]
    return TrainingSet(base, seg[prev], seg[nxt], list(features), S, "prev_seg_",
                       panel.frame["customer_id"].to_numpy()[prev])


def build_value_training(panel: PanelDataset, assignments: pd.Series, variant: str,
                         features: Sequence[str] | None = None, S: int | None = None) -> TrainingSet:
    """One row per customer-year t >= 1: features at t-1, actual segment at t, target cv at t."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    prev, nxt, seg = _consecutive_pairs(panel, assignments)
    f = panel.frame
    if features is None:
        features = list(panel.schema.names) if variant == "full" else simple_features(panel.schema)
    S = int(S if S is not None else seg.max())
    base = f[list(features)].to_numpy(dtype=np.float64)[prev]
    names = list(features)
    if variant == "full":
        base = np.hstack([base, f["cv"].to_numpy(dtype=np.float64)[prev][:, None]])
        names = names + [LAG_FEATURE]
    y = f["cv"].to_numpy(dtype=np.float64)[nxt]
    return TrainingSet(base, seg[nxt], y, names, S, "seg_", f["customer_id"].to_numpy()[prev])


@dataclass
class TransitionModel:
    variant: str
    classifier: GradientBoostedEnsemble
    base_features: list[str]
    n_segments: int

    @property
    def feature_names(self) -> list[str]:
        return self.base_features + segment_block("prev_seg_", self.n_segments)

    def proba(self, base: np.ndarray, s_prev: np.ndarray) -> np.ndarray:
        """(n, S) next-segment distributions; column j is segment j+1."""
        X = np.hstack([np.asarray(base, dtype=np.float64), one_hot(s_prev, self.n_segments)])
        return predict_proba(self.classifier, X)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "base_features": self.base_features,
                "n_segments": self.n_segments, "classifier": self.classifier.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TransitionModel":
        return cls(d["variant"], GradientBoostedEnsemble.from_dict(d["classifier"]),
                   list(d["base_features"]), int(d["n_segments"]))


@dataclass
class ValueAssignerModel:
    variant: str
    regressor: GradientBoostedEnsemble
    base_features: list[str]  # includes the lag feature for the full variant
    n_segments: int

    @property
    def feature_names(self) -> list[str]:
        return self.base_features + segment_block("seg_", self.n_segments)

    def values(self, base: np.ndarray) -> np.ndarray:
        """(n, S) predicted value for every candidate segment."""
        base = np.asarray(base, dtype=np.float64)
        n, S = len(base), self.n_segments
        rep = np.repeat(base, S, axis=0)
        segs = np.tile(np.arange(1, S + 1), n)
        X = np.hstack([rep, one_hot(segs, S)])
        return self.regressor.predict(X).reshape(n, S)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "base_features": self.base_features,
                "n_segments": self.n_segments, "regressor": self.regressor.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ValueAssignerModel":
        return cls(d["variant"], GradientBoostedEnsemble.from_dict(d["regressor"]),
                   list(d["base_features"]), int(d["n_segments"]))


def _select_by_importance(ts: TrainingSet, budget: int, cfg: BoostingConfig) -> list[str]:
    """Top-``budget`` base features by split gain of a small model fit on a subsample."""
    if budget >= len(ts.base_features):
        return list(ts.base_features)
    rng = np.random.default_rng(cfg.seed)
    n = len(ts)
    rows = np.sort(rng.choice(n, size=min(n, cfg.importance_sample), replace=False))
    probe = fit_gbdt_classifier(
        ts.X[rows], ts.y[rows] - 1, rounds=cfg.importance_rounds, shrinkage=max(cfg.shrinkage, 0.3),
        tree_params=cfg.tree, feature_names=ts.feature_names, n_classes=ts.n_segments,
    )
    imp = feature_importances(probe)
    order = sorted(range(len(ts.base_features)), key=lambda i: (-imp[ts.base_features[i]], i))
    keep = sorted(order[:budget])
    return [ts.base_features[i] for i in keep]


def _subset(ts: TrainingSet, names: list[str]) -> TrainingSet:
    cols = [ts.base_features.index(n) for n in names]
    return TrainingSet(ts.base[:, cols], ts.segment, ts.y, names, ts.n_segments, ts.prefix, ts.customer_id)


def fit_transition(ts: TrainingSet, variant: str, S: int, feature_budget: int | None = None,
                   config: BoostingConfig | None = None) -> TransitionModel:
    """Fit a next-segment classifier. The full variant first keeps the ``feature_budget``
    most important base features; the segment one-hot block is always kept."""
    cfg = config or BoostingConfig()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if not ts.base_features:
        raise ConfigError("transition model needs at least one feature")
    ts = TrainingSet(ts.base, ts.segment, ts.y, ts.base_features, S, ts.prefix, ts.customer_id)
    if feature_budget is not None:
        if variant == "full":
            ts = _subset(ts, _select_by_importance(ts, feature_budget, cfg))
        else:
            ts = _subset(ts, ts.base_features[:feature_budget])
    clf = fit_gbdt_classifier(ts.X, ts.y - 1, rounds=cfg.rounds, shrinkage=cfg.shrinkage,
                              tree_params=cfg.tree, feature_names=ts.feature_names, n_classes=S)
    return TransitionModel(variant, clf, list(ts.base_features), S)


def fit_value_assigner(ts: TrainingSet, variant: str, S: int, feature_budget: int | None = None,
                       config: BoostingConfig | None = None) -> ValueAssignerModel:
    """Fit a regressor of next-year cv on lagged features plus the one-hot landing segment."""
    cfg = config or BoostingConfig()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if not ts.base_features:
        raise ConfigError("value assigner needs at least one feature")
    ts = TrainingSet(ts.base, ts.segment, ts.y, ts.base_features, S, ts.prefix, ts.customer_id)
    if feature_budget is not None and feature_budget < len(ts.base_features):
        ts = _subset(ts, ts.base_features[:feature_budget])
    reg = fit_gbdt_regressor(ts.X, ts.y, rounds=cfg.rounds, shrinkage=cfg.shrinkage,
                             tree_params=cfg.tree, feature_names=ts.feature_names)
    return ValueAssignerModel(variant, reg, list(ts.base_features), S)


def _vector(x: Mapping[str, float], names: Sequence[str]) -> np.ndarray:
    try:
        return np.asarray([[float(x[n]) for n in names]], dtype=np.float64)
    except KeyError as exc:
        raise SchemaError(f"feature vector lacks {exc.args[0]!r}") from None


def _check_segment(s: int, S: int) -> None:
    if not 1 <= s <= S:
        raise ConfigError(f"segment {s} out of range 1..{S}")


def predict_transition(model: TransitionModel, s_prev: int, x: Mapping[str, float]) -> np.ndarray:
    """Distribution over segments 1..S (index j holds segment j+1)."""
    _check_segment(s_prev, model.n_segments)
    return model.proba(_vector(x, model.base_features), np.array([s_prev]))[0]


def predict_value(model: ValueAssignerModel, s: int, x: Mapping[str, float]) -> float:
    """Value if the customer lands in segment ``s``. The full variant reads ``cv_lag1`` (or ``cv``) from x."""
    _check_segment(s, model.n_segments)
    if LAG_FEATURE in model.base_features and LAG_FEATURE not in x and "cv" in x:
        x = {**x, LAG_FEATURE: x["cv"]}
    base = _vector(x, model.base_features)
    X = np.hstack([base, one_hot(np.array([s]), model.n_segments)])
    return float(model.regressor.predict(X)[0])


@dataclass
class MarkovBaseline:
    transition: np.ndarray  # (S, S), row r-1 is the distribution from segment r
    mean_value: np.ndarray  # (S,)

    @property
    def n_segments(self) -> int:
        return len(self.mean_value)

    def to_dict(self) -> dict:
        return {"transition": self.transition.tolist(), "mean_value": self.mean_value.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MarkovBaseline":
        return cls(np.asarray(d["transition"], dtype=np.float64), np.asarray(d["mean_value"], dtype=np.float64))


def fit_markov_baseline(assignments: pd.Series, cv: pd.Series, S: int) -> MarkovBaseline:
    """Relative transition frequencies between consecutive years and mean cv per segment.

    Both series are indexed by (customer_id, year_index). Rows without observed
    transitions are uniform; the churn segment's mean value is 0.
    """
    a = assignments.sort_index()
    df = pd.DataFrame({"seg": a.to_numpy()}, index=a.index).reset_index()
    df.columns = ["customer_id", "year_index", "seg"]
    cid = df["customer_id"].to_numpy()
    yr = df["year_index"].to_numpy()
    seg = df["seg"].to_numpy(dtype=np.int64)
    if len(df) < 2:
        raise DataError("need at least one observed transition")
    ok = (cid[:-1] == cid[1:]) & (yr[1:] == yr[:-1] + 1) & (seg[:-1] != S)
    if not ok.any():
        raise DataError("need at least one observed transition")
    counts = np.zeros((S, S))
    np.add.at(counts, (seg[:-1][ok] - 1, seg[1:][ok] - 1), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        trans = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / S)
    values = cv.reindex(a.index).to_numpy(dtype=np.float64)
    mean_value = np.zeros(S)
    for s in range(1, S + 1):
        sel = seg == s
        if sel.any() and s != S:
            mean_value[s - 1] = float(np.mean(values[sel]))
    return MarkovBaseline(trans, mean_value)


def baseline_predict(baseline: MarkovBaseline, s_prev: int) -> tuple[np.ndarray, np.ndarray]:
    _check_segment(s_prev, baseline.n_segments)
    return baseline.transition[s_prev - 1].copy(), baseline.mean_value.copy()
