"""Multi-period expected-value simulation over segment distributions."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np
import pandas as pd

from .core import FeatureSchema, discounted_clv
from .errors import ConfigError
from .predictors import LAG_FEATURE, MarkovBaseline, TransitionModel, ValueAssignerModel

ORACLE_LIMIT = 10**6
RULE_ACTIONS = ("add", "accrue", "hold")


@dataclass(frozen=True)
class Rule:
    action: str  # "add", "accrue" (add only where already positive) or "hold"
    amount: float = 0.0

    def __post_init__(self):
        if self.action not in RULE_ACTIONS:
            raise ConfigError(f"unknown progression action {self.action!r}")

    def apply(self, value, periods: int = 1):
        if self.action == "add":
            return value + self.amount * periods
        if self.action == "accrue":
            # zero tenure means the product is not held and stays that way
            return np.where(np.asarray(value) > 0, value + self.amount * periods, value)
        return value


def default_rules(schema: FeatureSchema) -> dict[str, Rule]:
    """+1 per year for yearly features, +12 for monthly tenures of held products, static features held."""
    rules = {}
    for f in schema.features:
        if f.kind == "yearly_progressing":
            rules[f.name] = Rule("add", 1.0)
        elif f.kind == "monthly_progressing":
            rules[f.name] = Rule("accrue", 12.0)
        elif f.kind == "static":
            rules[f.name] = Rule("hold")
    return rules


def progress_features(x: Mapping[str, float], rules: Mapping[str, Rule],
                      required: Sequence[str] = ()) -> dict[str, float]:
    """Advance one period. Only rule-covered features survive."""
    uncovered = [n for n in required if n not in rules]
    if uncovered:
        raise ConfigError(f"no progression rule for {uncovered}")
    return {n: float(r.apply(x[n])) for n, r in rules.items() if n in x}


class StepModels(Protocol):
    n_segments: int

    def first_step(self, s0: np.ndarray, frame: pd.DataFrame) -> tuple[np.ndarray, np.ndarray]:
        """(n, S) transition probabilities from s0 and (n, S) candidate values, both at x_0."""

    def later_step(self, frame: pd.DataFrame) -> tuple[np.ndarray, np.ndarray]:
        """(n, S, S) transition matrices (row r-1 = from segment r) and (n, S) values at x_{t-1}."""

    @property
    def simple_features(self) -> list[str]: ...


@dataclass
class LearnedModels:
    transition_full: TransitionModel
    transition_simple: TransitionModel
    value_full: ValueAssignerModel
    value_simple: ValueAssignerModel

    @property
    def n_segments(self) -> int:
        return self.transition_full.n_segments

    @property
    def simple_features(self) -> list[str]:
        return sorted(set(self.transition_simple.base_features) | set(self.value_simple.base_features))

    @staticmethod
    def _base(frame: pd.DataFrame, names: Sequence[str]) -> np.ndarray:
        cols = []
        for n in names:
            if n == LAG_FEATURE and n not in frame.columns:
                cols.append(frame["cv"].to_numpy(dtype=np.float64))
            else:
                cols.append(frame[n].to_numpy(dtype=np.float64))
        return np.column_stack(cols) if cols else np.zeros((len(frame), 0))

    def first_step(self, s0, frame):
        P = self.transition_full.proba(self._base(frame, self.transition_full.base_features), s0)
        V = self.value_full.values(self._base(frame, self.value_full.base_features))
        return P, V

    def later_step(self, frame):
        n, S = len(frame), self.n_segments
        base = self._base(frame, self.transition_simple.base_features)
        rep = np.repeat(base, S, axis=0)
        prev = np.tile(np.arange(1, S + 1), n)
        P = self.transition_simple.proba(rep, prev).reshape(n, S, S)
        V = self.value_simple.values(self._base(frame, self.value_simple.base_features))
        return P, V


@dataclass
class BaselineModels:
    """Markov matrix and mean values behind the same interface as the learned models."""

    baseline: MarkovBaseline

    @property
    def n_segments(self) -> int:
        return self.baseline.n_segments

    @property
    def simple_features(self) -> list[str]:
        return []

    def first_step(self, s0, frame):
        n = len(s0)
        P = self.baseline.transition[np.asarray(s0) - 1]
        V = np.tile(self.baseline.mean_value, (n, 1))
        return P, V

    def later_step(self, frame):
        n = len(frame)
        S = self.n_segments
        P = np.broadcast_to(self.baseline.transition, (n, S, S))
        V = np.tile(self.baseline.mean_value, (n, 1))
        return P, V


@dataclass
class SimulationResult:
    per_year_distributions: np.ndarray  # (T, S)
    per_year_cv: np.ndarray  # (T,)
    clv: float
    horizon: int
    discount: float


@dataclass
class BatchResult:
    distributions: np.ndarray  # (n, T, S)
    cv: np.ndarray  # (n, T)
    clv: np.ndarray  # (n,)
    horizon: int
    discount: float

    def customer(self, i: int) -> SimulationResult:
        return SimulationResult(self.distributions[i], self.cv[i], float(self.clv[i]), self.horizon, self.discount)


def _check(T: int, d: float) -> None:
    if T < 1:
        raise ConfigError("horizon must be >= 1")
    if d <= -1:
        raise ConfigError("discount must exceed -1")


def _absorb(P: np.ndarray, V: np.ndarray, S: int):
    P = np.array(P, copy=True)
    P[:, S - 1, :] = 0.0
    P[:, S - 1, S - 1] = 1.0
    V = V.copy()
    V[:, S - 1] = 0.0
    return P, V


def _progress_frame(frame: pd.DataFrame, rules: Mapping[str, Rule], periods: int) -> pd.DataFrame:
    out = {}
    for name, rule in rules.items():
        if name in frame.columns:
            out[name] = rule.apply(frame[name].to_numpy(dtype=np.float64), periods)
    return pd.DataFrame(out, index=frame.index)


def _step_inputs(models: StepModels, s0, frame, T, rules, absorb_churn):
    """Yields (t, P, V) with P (n,S) at t=1 and (n,S,S) afterwards."""
    S = models.n_segments
    required = models.simple_features
    uncovered = [n for n in required if n not in rules]
    if uncovered:
        raise ConfigError(f"no progression rule for {uncovered}")
    P1, V1 = models.first_step(np.asarray(s0), frame)
    if absorb_churn:
        V1 = V1.copy()
        V1[:, S - 1] = 0.0
    yield 1, P1, V1
    for t in range(2, T + 1):
        x_prev = _progress_frame(frame, rules, t - 1)
        P, V = models.later_step(x_prev)
        if absorb_churn:
            P, V = _absorb(P, V, S)
        yield t, P, V


def simulate_batch(models: StepModels, s0: np.ndarray, frame: pd.DataFrame, T: int, d: float,
                   rules: Mapping[str, Rule], absorb_churn: bool = False) -> BatchResult:
    """Propagate segment distributions for every row of ``frame`` (base-year features)."""
    _check(T, d)
    n, S = len(frame), models.n_segments
    dists = np.zeros((n, T, S))
    cv = np.zeros((n, T))
    dist = None
    for t, P, V in _step_inputs(models, s0, frame, T, rules, absorb_churn):
        if t == 1:
            dist = np.array(P, dtype=np.float64)
        else:
            dist = np.einsum("nr,nrs->ns", dist, P)
        acc = np.zeros(n)
        for s in range(S):
            acc = acc + dist[:, s] * V[:, s]
        dists[:, t - 1] = dist
        cv[:, t - 1] = acc
    clv = np.array([discounted_clv(row, d) for row in cv])
    return BatchResult(dists, cv, clv, T, d)


def _one_row(x: Mapping[str, float]) -> pd.DataFrame:
    return pd.DataFrame({k: [float(v)] for k, v in x.items()}, index=[0])


def simulate_customer(s0: int, x0: Mapping[str, float], T: int, d: float, models: StepModels,
                      rules: Mapping[str, Rule], absorb_churn: bool = False) -> SimulationResult:
    """Expected per-year value and discounted CLV for one customer starting in segment ``s0``."""
    return simulate_batch(models, np.array([s0]), _one_row(x0), T, d, rules, absorb_churn).customer(0)


def enumerate_oracle(s0: int, x0: Mapping[str, float], T: int, d: float, models: StepModels,
                     rules: Mapping[str, Rule], absorb_churn: bool = False) -> SimulationResult:
    """Exact expectation by summing over all S**T segment paths."""
    _check(T, d)
    S = models.n_segments
    if S ** T > ORACLE_LIMIT:
        raise ConfigError(f"S**T = {S ** T} paths exceeds the oracle limit {ORACLE_LIMIT}")
    steps = [(P[0], V[0]) for _, P, V in _step_inputs(models, np.array([s0]), _one_row(x0), T, rules,
                                                        absorb_churn)]
    dists = np.zeros((T, S))
    cv = np.zeros(T)
    for path in itertools.product(range(S), repeat=T):
        prob = steps[0][0][path[0]]
        for t in range(1, T):
            prob *= steps[t][0][path[t - 1], path[t]]
        # suffix probabilities sum to one, so full-path mass yields each year's marginal
        for t, s in enumerate(path):
            dists[t, s] += prob
            cv[t] += prob * steps[t][1][s]
    return SimulationResult(dists, cv, discounted_clv(list(cv), d), T, d)
