"""End-to-end orchestration: segment, fit the four models and the baseline, simulate, evaluate."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .bundle import ModelBundle, config_hash
from .core import PanelDataset
from .errors import ConfigError, DataError, NotApplicable
from .evaluation import (
    MetricsReport,
    batch_propensity,
    decile_transition_matrix,
    json_float,
    lift_curve,
    metrics_report,
)
from .learners.tree import ForcedSplitSpec, TreeFitParams
from .predictors import (
    DEFAULT_BUDGETS,
    BoostingConfig,
    build_transition_training,
    build_value_training,
    fit_markov_baseline,
    fit_transition,
    fit_value_assigner,
    simple_features,
)
from .segmentation import assign_segments, default_forced_spec, fit_segmentation, segment_frame, segments_in_subtrees
from .simulator import BaselineModels, BatchResult, LearnedModels, default_rules, simulate_batch
from .synthgen import GeneratorConfig, split_holdout

DEFAULT_TARGETS = ("S_01", "S_11")
LIFT_GRID = (10, 20, 30, 40, 50, 60, 70, 80, 90, 100)


def _default_boosting() -> BoostingConfig:
    return BoostingConfig(rounds=40, shrinkage=0.2, tree=TreeFitParams(max_leaves=15, min_samples_leaf=20))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    segments: int = 50
    horizon: int = 5
    discount: float = 0.0
    base_year: int = 0
    start_year: int | None = None
    holdout_fraction: float = 0.25
    evaluate_split: str = "test"
    forced_splits: str | None = None
    use_forced_splits: bool = True
    budgets: dict = field(default_factory=lambda: dict(DEFAULT_BUDGETS))
    simple_features: tuple[str, ...] | None = None
    boosting: BoostingConfig = field(default_factory=_default_boosting)
    segmentation_tree: TreeFitParams = field(default_factory=lambda: TreeFitParams(min_samples_leaf=50))
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    absorb_churn: bool = False
    target_subtrees: tuple[str, ...] = DEFAULT_TARGETS
    threads: int | None = None

    def __post_init__(self):
        if self.segments < 2:
            raise ConfigError("segments must be >= 2")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.discount <= -1:
            raise ConfigError("discount must exceed -1")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must be in [0, 1)")
        if self.evaluate_split not in ("all", "train", "test"):
            raise ConfigError("evaluate_split must be one of all, train, test")
        unknown = set(self.budgets) - set(DEFAULT_BUDGETS)
        if unknown:
            raise ConfigError(f"unknown feature budgets {sorted(unknown)}")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["boosting"] = self.boosting.to_dict()
        d["segmentation_tree"] = self.segmentation_tree.to_dict()
        d["generator"] = self.generator.to_dict()
        d["budgets"] = dict(self.budgets)
        d["target_subtrees"] = list(self.target_subtrees)
        d["simple_features"] = None if self.simple_features is None else list(self.simple_features)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        try:
            if "boosting" in d:
                d["boosting"] = BoostingConfig.from_dict(d["boosting"])
            if "segmentation_tree" in d:
                d["segmentation_tree"] = TreeFitParams(**d["segmentation_tree"])
            if "generator" in d:
                d["generator"] = GeneratorConfig.from_dict(d["generator"])
            if "budgets" in d:
                d["budgets"] = {**DEFAULT_BUDGETS, **d["budgets"]}
            for k in ("target_subtrees", "simple_features"):
                if d.get(k) is not None:
                    d[k] = tuple(d[k])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from None

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def forced_spec(self) -> ForcedSplitSpec | None:
        if not self.use_forced_splits:
            return None
        return default_forced_spec() if self.forced_splits is None else ForcedSplitSpec.load(self.forced_splits)


def set_threads(n: int | None) -> None:
    if n is not None:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------- training


def train(panel: PanelDataset, config: RunConfig) -> ModelBundle:
    """Holdout split, segmentation, the four predictors and the Markov baseline, in that order."""
    panel.validate()
    train_panel, _ = split_holdout(panel, config.holdout_fraction, config.seed)
    if train_panel.n_customers == 0:
        raise DataError("training split is empty")
    segmodel = fit_segmentation(train_panel, config.base_year, config.forced_spec(), config.segments,
                                config.segmentation_tree)
    S = segmodel.n_segments
    assigned = assign_segments(segmodel, train_panel)
    schema = panel.schema
    fixed = simple_features(schema, fixed=config.simple_features)
    boost = replace(config.boosting, seed=config.seed)
    b = config.budgets

    ts_full = build_transition_training(train_panel, assigned, "full", S=S)
    t_full = fit_transition(ts_full, "full", S, b["transition_full"], boost)
    ts_simple = build_transition_training(train_panel, assigned, "simple", features=fixed, S=S)
    t_simple = fit_transition(ts_simple, "simple", S, b["transition_simple"], boost)
    vs_full = build_value_training(train_panel, assigned, "full", S=S)
    v_full = fit_value_assigner(vs_full, "full", S, b["value_full"], boost)
    vs_simple = build_value_training(train_panel, assigned, "simple", features=fixed, S=S)
    v_simple = fit_value_assigner(vs_simple, "simple", S, b["value_simple"], boost)

    cv = train_panel.frame.set_index(["customer_id", "year_index"])["cv"]
    baseline = fit_markov_baseline(assigned, cv, S)
    rules = default_rules(schema)
    metadata = {
        "seed": config.seed,
        "config_hash": config.hash(),
        "year_range": [int(y) for y in panel.year_range],
        "holdout_fraction": config.holdout_fraction,
        "n_train_customers": train_panel.n_customers,
        "requested_segments": config.segments,
        "package_version": __version__,
    }
    return ModelBundle(schema, segmodel, t_full, t_simple, v_full, v_simple, baseline, rules, metadata)


def split_for(panel: PanelDataset, bundle: ModelBundle, which: str) -> PanelDataset:
    """Recreate the training-time customer split recorded in the bundle."""
    if which == "all":
        return panel
    train_part, test_part = split_holdout(panel, bundle.metadata["holdout_fraction"], bundle.metadata["seed"])
    return train_part if which == "train" else test_part


# ---------------------------------------------------------------- simulation


@dataclass
class StartState:
    customer_id: np.ndarray  # every customer in the panel, sorted
    alive: np.ndarray  # has a non-churned row in the start year
    segment: np.ndarray  # start segment, churn id where not alive
    frame: pd.DataFrame  # start-year rows of the alive customers, aligned with customer_id[alive]


def start_state(bundle: ModelBundle, panel: PanelDataset, start_year: int) -> StartState:
    ids = np.array(panel.customer_ids)
    rows = panel.frame[(panel.frame["year_index"] == start_year) & (panel.frame["churned"] == 0)]
    rows = rows.set_index("customer_id").reindex(ids)
    alive = rows["year_index"].notna().to_numpy()
    live = rows[alive].reset_index()
    seg = np.full(len(ids), bundle.segmentation.churn_segment, dtype=np.int64)
    if alive.any():
        seg[alive] = segment_frame(bundle.segmentation, live)
    return StartState(ids, alive, seg, live)


def resolve_start_year(bundle: ModelBundle, config: RunConfig) -> int:
    return bundle.segmentation.base_year if config.start_year is None else config.start_year


def simulate_panel(bundle: ModelBundle, panel: PanelDataset, config: RunConfig, baseline: bool = False,
                   start_year: int | None = None) -> pd.DataFrame:
    """Per-customer expected cv for years 1..T after ``start_year`` and their discounted CLV.

    Customers without a live start-year row get all-zero rows.
    """
    start = resolve_start_year(bundle, config) if start_year is None else start_year
    st = start_state(bundle, panel, start)
    T = config.horizon
    models = BaselineModels(bundle.baseline) if baseline else bundle.learned()
    cv = np.zeros((len(st.customer_id), T))
    clv = np.zeros(len(st.customer_id))
    if st.alive.any():
        res: BatchResult = simulate_batch(models, st.segment[st.alive], st.frame, T, config.discount,
                                          bundle.progression_rules, config.absorb_churn)
        cv[st.alive] = res.cv
        clv[st.alive] = res.clv
    out = pd.DataFrame({"customer_id": st.customer_id})
    for t in range(T):
        out[f"cv_{t + 1}"] = cv[:, t]
    out["clv"] = clv
    return out


def write_simulation_csv(frame: pd.DataFrame, path: str | Path) -> None:
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_simulation_csv(path: str | Path) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"customer_id": str}, float_precision="round_trip")
    if "customer_id" not in frame.columns or "clv" not in frame.columns:
        raise DataError(f"{path} is not a simulation CSV")
    return frame


# ---------------------------------------------------------------- evaluation


@dataclass
class Evaluation:
    reports: list[MetricsReport]
    lift: list[tuple[float, float]]
    deciles: np.ndarray | None
    moved_share: float | None
    n_propensity: int
    uptake_rate: float

    def to_dict(self) -> dict:
        return {
            "reports": [r.to_dict() for r in self.reports],
            "lift": [{"x": x, "lift": json_float(v)} for x, v in self.lift],
            "decile_moved_share": self.moved_share,
            "propensity_customers": self.n_propensity,
            "uptake_rate": json_float(self.uptake_rate),
        }


def _actual_years(panel: PanelDataset, ids: np.ndarray, years: Sequence[int]):
    """(n, len(years)) actual cv, 0 where the customer has no row, plus the presence mask."""
    f = panel.frame.set_index(["customer_id", "year_index"])
    out = np.zeros((len(ids), len(years)))
    present = np.zeros((len(ids), len(years)), dtype=bool)
    for j, y in enumerate(years):
        key = pd.MultiIndex.from_arrays([ids, np.full(len(ids), y)])
        col = f["cv"].reindex(key)
        present[:, j] = col.notna().to_numpy()
        out[:, j] = col.fillna(0.0).to_numpy()
    return out, present


def _next_segments(bundle: ModelBundle, panel: PanelDataset, ids: np.ndarray, year: int) -> np.ndarray:
    """Segment at ``year`` for each id; customers without a row there count as churned."""
    rows = panel.frame[panel.frame["year_index"] == year]
    seg = pd.Series(segment_frame(bundle.segmentation, rows), index=rows["customer_id"].to_numpy())
    return seg.reindex(ids).fillna(bundle.segmentation.churn_segment).to_numpy(dtype=np.int64)


def evaluate(bundle: ModelBundle, panel: PanelDataset, predictions: pd.DataFrame, config: RunConfig,
             baseline_predictions: pd.DataFrame | None = None) -> Evaluation:
    """Metrics for every predicted year the panel also observes, on the configured split."""
    part = split_for(panel, bundle, config.evaluate_split)
    start = resolve_start_year(bundle, config)
    st = start_state(bundle, part, start)
    ids = st.customer_id[st.alive]
    if len(ids) < 2:
        raise DataError("fewer than two live customers to evaluate")
    year_max = part.year_range[1]
    horizon = [c for c in predictions.columns if c.startswith("cv_")]
    periods = [k for k in range(1, len(horizon) + 1) if start + k <= year_max]
    if not periods:
        raise DataError(f"panel has no years after the start year {start} to compare against")
    actual, _ = _actual_years(part, ids, [start + k for k in periods])

    seg0 = st.segment[st.alive]
    seg1 = _next_segments(bundle, part, ids, start + 1)
    P_full = bundle.transition_full.proba(_base(st.frame, bundle.transition_full.base_features), seg0)
    P_base = bundle.baseline.transition[seg0 - 1]

    reports = []
    for label, preds, dist in (("clv", predictions, P_full), ("baseline", baseline_predictions, P_base)):
        if preds is None:
            continue
        p = preds.set_index("customer_id").reindex(ids)
        if p.isna().any().any():
            raise DataError("predictions do not cover every evaluated customer")
        for j, k in enumerate(periods):
            reports.append(metrics_report(
                f"t+{k}", p[f"cv_{k}"].to_numpy(), actual[:, j],
                distributions=dist if k == 1 else None, actual_segments=seg1 if k == 1 else None,
                segmodel=bundle.segmentation, model=label,
            ))

    lift, uptake_rate, n_prop = [(float(x), float("nan")) for x in LIFT_GRID], float("nan"), 0
    if all(t in bundle.segmentation.subtree_map for t in config.target_subtrees):
        eligible, prop = propensity_scores(bundle, st, ids, seg0, config.target_subtrees)
        targets = segments_in_subtrees(bundle.segmentation, config.target_subtrees)
        uptake = np.isin(seg1[eligible], sorted(targets))
        n_prop = len(prop)
        if n_prop and uptake.any():
            lift = lift_curve(prop, uptake, LIFT_GRID)
            uptake_rate = float(uptake.mean())

    cv_a, _ = _actual_years(part, ids, [start])
    deciles, moved = None, None
    if len(ids) >= 10:
        deciles, moved = decile_transition_matrix(cv_a[:, 0], actual[:, 0])
    return Evaluation(reports, lift, deciles, moved, n_prop, uptake_rate)


def _base(frame: pd.DataFrame, names: Sequence[str]) -> np.ndarray:
    return LearnedModels._base(frame, names)


def propensity_scores(bundle: ModelBundle, st: StartState, ids: np.ndarray, seg0: np.ndarray,
                      targets: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Mask of customers outside the target subtrees and their next-period propensity."""
    target_segs = segments_in_subtrees(bundle.segmentation, targets)
    eligible = ~np.isin(seg0, sorted(target_segs))
    frame = st.frame[eligible]
    if not eligible.any():
        return eligible, np.zeros(0)
    P = bundle.transition_full.proba(_base(frame, bundle.transition_full.base_features), seg0[eligible])
    return eligible, batch_propensity(P, bundle.segmentation, targets)


def rank_propensity(bundle: ModelBundle, panel: PanelDataset, config: RunConfig) -> pd.DataFrame:
    """Customers outside the target subtrees ranked by propensity (ties keep customer order)."""
    start = resolve_start_year(bundle, config)
    st = start_state(bundle, panel, start)
    ids = st.customer_id[st.alive]
    seg0 = st.segment[st.alive]
    eligible, prop = propensity_scores(bundle, st, ids, seg0, config.target_subtrees)
    if not eligible.any():
        raise NotApplicable("every live customer is already in the target subtrees")
    out = pd.DataFrame({"customer_id": ids[eligible], "segment": seg0[eligible], "propensity": prop})
    out = out.iloc[np.argsort(-prop, kind="stable")].reset_index(drop=True)
    out.insert(0, "rank", np.arange(1, len(out) + 1))
    return out


# ---------------------------------------------------------------- artifacts


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_lift_csv(lift: Sequence[tuple[float, float]], path: str | Path) -> None:
    frame = pd.DataFrame({"x_percent": [x for x, _ in lift], "lift (×)": [v for _, v in lift]})
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def write_decile_csv(matrix: np.ndarray, path: str | Path) -> None:
    frame = pd.DataFrame(matrix, columns=[f"to_decile_{j}" for j in range(10)])
    frame.insert(0, "from_decile", np.arange(10))
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def write_segments_csv(bundle: ModelBundle, panel: PanelDataset, path: str | Path) -> None:
    seg = assign_segments(bundle.segmentation, panel)
    frame = seg.reset_index()
    frame.columns = ["customer_id", "year", "segment"]
    frame.to_csv(path, index=False, lineterminator="\n")
