"""Validation metrics, decile transition matrices and product propensity with lift."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, NotApplicable
from .predictors import TransitionModel, predict_transition
from .segmentation import SegmentationModel, four_class_array, four_class_of, segments_in_subtrees

# Marker for a ratio whose denominator is zero.
UNDEFINED = float("nan")
DEFAULT_X = (10, 20, 40)


@dataclass
class MetricsReport:
    period: str
    n_customers: int
    medae: float
    separation: dict[int, float] = field(default_factory=dict)
    top_x_precision: dict[int, float] = field(default_factory=dict)
    accuracy_50: float = UNDEFINED
    accuracy_4: float = UNDEFINED
    model: str = "clv"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["separation"] = {str(k): json_float(v) for k, v in self.separation.items()}
        d["top_x_precision"] = {str(k): json_float(v) for k, v in self.top_x_precision.items()}
        for k in ("medae", "accuracy_50", "accuracy_4"):
            d[k] = json_float(d[k])
        return d


def json_float(v: float):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


def _aligned(predicted, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape or p.ndim != 1:
        raise DataError("predicted and actual must be 1-D and the same length")
    if len(p) == 0:
        raise DataError("empty input")
    return p, a


def medae(predicted, actual) -> float:
    p, a = _aligned(predicted, actual)
    return float(np.median(np.abs(p - a)))


def top_count(n: int, x: float) -> int:
    """Size of the top-x% set: round(x% of n), at least 1."""
    return max(1, int(math.floor(x / 100.0 * n + 0.5)))


def rank_desc(values: np.ndarray) -> np.ndarray:
    """Indices ordered by value descending; ties keep input order."""
    return np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")


def separation(predicted, actual, x: float) -> float:
    """Mean actual of the top-x% by prediction over mean actual of the bottom-x%."""
    p, a = _aligned(predicted, actual)
    if not 0 < x <= 50:
        raise DataError("x must be in (0, 50]")
    k = top_count(len(p), x)
    if 2 * k > len(p):
        raise DataError(f"need at least {2 * k} customers for x={x}")
    order = rank_desc(p)
    top = a[order[:k]].mean()
    bottom = a[order[-k:]].mean()
    if bottom == 0:
        return UNDEFINED
    return float(top / bottom)


def top_x_precision(predicted, actual, x: float) -> float:
    p, a = _aligned(predicted, actual)
    if not 0 < x <= 100:
        raise DataError("x must be in (0, 100]")
    k = top_count(len(p), x)
    top_pred = set(rank_desc(p)[:k].tolist())
    top_act = set(rank_desc(a)[:k].tolist())
    return len(top_pred & top_act) / k


def argmax_segments(distributions: np.ndarray) -> np.ndarray:
    """1-based argmax per row; ties resolve to the lowest segment id."""
    return np.argmax(np.asarray(distributions), axis=1) + 1


def transition_accuracy(distributions, actual_segments, class_mapping=None,
                        exclude_churn_truth: bool = False) -> float:
    """Exact-match accuracy of the argmax segment.

    ``class_mapping`` is None (identity), a SegmentationModel (map both sides
    through the four mortgage/investment classes, churn a fifth bucket) or a callable.
    """
    pred = argmax_segments(distributions)
    truth = np.asarray(actual_segments, dtype=np.int64)
    if len(pred) != len(truth):
        raise DataError("distributions and actual segments differ in length")
    if isinstance(class_mapping, SegmentationModel):
        model = class_mapping
        if exclude_churn_truth:
            keep = truth != model.churn_segment
            pred, truth = pred[keep], truth[keep]
        pred = four_class_array(model, pred)
        truth = four_class_array(model, truth)
    elif class_mapping is not None:
        pred = np.array([class_mapping(int(s)) for s in pred])
        truth = np.array([class_mapping(int(s)) for s in truth])
    if len(truth) == 0:
        return UNDEFINED
    return float(np.mean(pred == truth))


def lift_curve(propensities, actual_uptake, grid: Iterable[float] = DEFAULT_X) -> list[tuple[float, float]]:
    """(x, uptake rate in the top-x% by propensity / overall uptake rate) for each x."""
    p = np.asarray(propensities, dtype=np.float64)
    y = np.asarray(actual_uptake, dtype=bool)
    if p.shape != y.shape or len(p) == 0:
        raise DataError("propensities and uptake must be the same non-zero length")
    base = y.mean()
    order = rank_desc(p)
    out = []
    for x in grid:
        if base == 0:
            out.append((float(x), UNDEFINED))
            continue
        k = top_count(len(p), x)
        out.append((float(x), float(y[order[:k]].mean() / base)))
    return out


def decile_transition_matrix(cv_year_a, cv_year_b) -> tuple[np.ndarray, float]:
    """10x10 row-normalised matrix of decile moves (decile 0 = lowest) and the share that moved."""
    a = np.asarray(cv_year_a, dtype=np.float64)
    b = np.asarray(cv_year_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError("both years must be aligned 1-D arrays")
    n = len(a)
    if n < 10:
        raise DataError("need at least 10 customers")

    def deciles(v):
        ranks = np.empty(n, dtype=np.int64)
        ranks[np.argsort(v, kind="stable")] = np.arange(n)
        return ranks * 10 // n

    da, db = deciles(a), deciles(b)
    counts = np.zeros((10, 10))
    np.add.at(counts, (da, db), 1.0)
    rows = counts.sum(axis=1, keepdims=True)
    matrix = counts / np.where(rows > 0, rows, 1.0)
    moved = float(np.mean(da != db))
    return matrix, moved


def propensity_from_distribution(distribution: np.ndarray, segments: Iterable[int]) -> float:
    """Raw sum of next-segment probability over ``segments`` (no renormalisation)."""
    dist = np.asarray(distribution)
    return float(sum(dist[s - 1] for s in sorted(segments)))


def propensity(model: TransitionModel, segmodel: SegmentationModel, s_prev: int, x: Mapping[str, float],
               target_subtrees: Sequence[str] = ("S_01", "S_11")) -> float:
    """Probability of moving into any segment of ``target_subtrees`` next period."""
    current = four_class_of(segmodel, s_prev)
    if current in target_subtrees:
        raise NotApplicable(f"customer already in {current}")
    dist = predict_transition(model, s_prev, x)
    return propensity_from_distribution(dist, segments_in_subtrees(segmodel, target_subtrees))


def batch_propensity(distributions: np.ndarray, segmodel: SegmentationModel,
                     target_subtrees: Sequence[str] = ("S_01", "S_11")) -> np.ndarray:
    cols = np.array(sorted(segments_in_subtrees(segmodel, target_subtrees)), dtype=np.int64) - 1
    acc = np.zeros(len(distributions))
    for c in cols:
        acc = acc + distributions[:, c]
    return acc


def metrics_report(period: str, predicted_cv, actual_cv, distributions=None, actual_segments=None,
                   segmodel: SegmentationModel | None = None, xs: Sequence[int] = DEFAULT_X,
                   model: str = "clv") -> MetricsReport:
    report = MetricsReport(period=period, n_customers=len(np.asarray(actual_cv)),
                           medae=medae(predicted_cv, actual_cv), model=model)
    for x in xs:
        report.separation[x] = separation(predicted_cv, actual_cv, x)
        report.top_x_precision[x] = top_x_precision(predicted_cv, actual_cv, x)
    if distributions is not None:
        report.accuracy_50 = transition_accuracy(distributions, actual_segments)
        if segmodel is not None and segmodel.four_class:
            report.accuracy_4 = transition_accuracy(distributions, actual_segments, segmodel)
    return report
