"""Seeded synthetic customer panels with feature-dependent product dynamics.

Randomness comes from Philox streams keyed by (seed, year, purpose); the draw
for a customer is the element at the customer's index in that stream, so a
customer's trajectory does not depend on how many other customers are
generated or in what order they are processed.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .core import PRODUCTS, PanelDataset, csv_columns, default_schema
from .errors import ConfigError

# Typical opening balance (thousands of currency units) per product.
BALANCE_SCALE = {
    "current_account": 3.0,
    "savings": 12.0,
    "loan": 10.0,
    "credit_card": 2.5,
    "mortgage": 180.0,
    "investment": 35.0,
}
# Per-year rates on balance: revenue, expected loss, cost of capital.
REVENUE_RATE = {"current_account": 0.06, "savings": 0.012, "loan": 0.065, "credit_card": 0.16,
                "mortgage": 0.014, "investment": 0.035}
LOSS_RATE = {"current_account": 0.0, "savings": 0.0, "loan": 0.02, "credit_card": 0.05,
             "mortgage": 0.002, "investment": 0.0}
CAPITAL_RATE = {"current_account": 0.0, "savings": 0.002, "loan": 0.012, "credit_card": 0.01,
                "mortgage": 0.004, "investment": 0.004}
FIXED_REVENUE = {"current_account": 0.3, "savings": 0.0, "loan": 0.0, "credit_card": 0.1,
                 "mortgage": 0.0, "investment": 0.2}
# Year-0 holding logit: intercept, wealth and engagement coefficients.
INITIAL_HOLDING = {"current_account": (3.0, 0.3, 0.3), "savings": (0.3, 0.7, 0.6), "loan": (-1.3, -0.3, 0.2),
                   "credit_card": (-0.2, 0.3, 0.5), "mortgage": (-0.9, 0.6, 0.0), "investment": (-1.6, 0.9, 0.5)}
# Yearly log-growth of balances: base rate and sensitivity to engagement.
BALANCE_DRIFT = {"current_account": (0.02, 0.8), "savings": (0.0, 1.4), "loan": (-0.25, 0.0),
                 "credit_card": (0.0, 0.8), "mortgage": (-0.05, 0.0), "investment": (0.04, 1.2)}
# Per-decade-of-age shift in balance log-growth.
AGE_DRIFT = {"current_account": 0.0, "savings": -0.15, "loan": 0.0, "credit_card": -0.1,
             "mortgage": -0.06, "investment": 0.1}


def _default_adoption() -> dict[str, dict[str, float]]:
    # Coefficients over: wealth, engagement, age, salary, savings, n_products.
    # "attrition" is the intercept of the per-year drop probability for a held product.
    return {
        "current_account": {"intercept": 3.0, "wealth": 0.3, "engagement": 0.5, "attrition": -4.5},
        "savings": {"intercept": -1.0, "wealth": 0.6, "engagement": 2.5, "salary": 0.5, "attrition": -2.8},
        "loan": {"intercept": -2.5, "wealth": -0.5, "age": -0.8, "engagement": 0.4, "attrition": -1.2},
        "credit_card": {"intercept": -1.2, "engagement": 2.4, "salary": 0.4, "age": -0.5, "attrition": -3.0},
        "mortgage": {"intercept": -2.6, "age": -1.2, "salary": 2.5, "wealth": 0.3, "attrition": -4.0},
        "investment": {"intercept": -3.2, "wealth": 0.4, "engagement": 2.2, "savings": 2.0, "attrition": -3.0},
    }


def _default_churn() -> dict[str, float]:
    return {"engagement": -2.2, "n_products": -0.8, "age": 0.3}


@dataclass(frozen=True)
class GeneratorConfig:
    n_customers: int = 1000
    n_years: int = 3
    seed: int = 0
    churn_base_rate: float = 0.06
    adoption_weights: dict = field(default_factory=_default_adoption)
    churn_weights: dict = field(default_factory=_default_churn)
    value_noise_scale: float = 0.1
    missing_rate: float = 0.02

    def __post_init__(self):
        if self.n_customers < 0:
            raise ConfigError("n_customers must be >= 0")
        if self.n_years < 1:
            raise ConfigError("n_years must be >= 1")
        for name in ("churn_base_rate", "missing_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{name} must be a probability")
        if self.value_noise_scale < 0:
            raise ConfigError("value_noise_scale must be non-negative")
        unknown = set(self.adoption_weights) - set(PRODUCTS)
        if unknown:
            raise ConfigError(f"unknown products in adoption_weights: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        d = dict(d)
        if "adoption_weights" in d:
            merged = _default_adoption()
            for p, w in d["adoption_weights"].items():
                merged.setdefault(p, {}).update(w)
            d["adoption_weights"] = merged
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "GeneratorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


class _Streams:
    def __init__(self, seed: int, n: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.n = n

    def uniform(self, year: int, tag: str) -> np.ndarray:
        key = np.array([self.seed, (zlib.crc32(tag.encode()) << 20) ^ (year + 1)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key)).random(self.n)

    def normal(self, year: int, tag: str) -> np.ndarray:
        u1 = self.uniform(year, tag + "/a")
        u2 = self.uniform(year, tag + "/b")
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _logit(p: float) -> float:
    p = min(max(p, 1e-9), 1 - 1e-9)
    return math.log(p / (1 - p))


def _drivers(state) -> dict[str, np.ndarray]:
    held = state["held"]
    return {
        "wealth": state["wealth"],
        "engagement": (state["engagement"] - 0.5) * 4.0,
        "age": (state["age"] - 40.0) / 10.0,
        "salary": np.log(state["salary"] / 30.0),
        "savings": np.log1p(np.where(held["savings"], state["balance"]["savings"], 0.0)) - 2.5,
        "n_products": sum(held[p].astype(float) for p in PRODUCTS) - 2.0,
    }


def _linear(weights: dict, drivers: dict, intercept_key: str = "intercept") -> np.ndarray:
    z = np.full_like(drivers["wealth"], weights.get(intercept_key, 0.0))
    for name, coef in weights.items():
        if name in drivers:
            z = z + coef * drivers[name]
    return z


def generate_population(config: GeneratorConfig) -> PanelDataset:
    """Simulate ``n_years`` annual snapshots for ``n_customers`` customers."""
    schema = default_schema()
    n = config.n_customers
    if n == 0:
        return PanelDataset.empty(schema)
    rs = _Streams(config.seed, n)
    ids = np.array([f"C{i:07d}" for i in range(n)], dtype=object)

    wealth = rs.normal(0, "wealth")
    age = np.floor(22 + rs.uniform(0, "age") * 53)
    tenure_years = np.floor(rs.uniform(0, "tenure") * np.minimum(age - 18, 35))
    region = np.floor(rs.uniform(0, "region") * 5)
    income_band = np.clip(np.round(4.5 + 2.0 * wealth + 0.8 * rs.normal(0, "income_band")), 0, 9) + 0.0
    salary = 30.0 * np.exp(0.45 * wealth + 0.2 * rs.normal(0, "salary"))
    eng_logit = 0.6 * wealth + 1.2 * rs.normal(0, "engagement")
    state = {
        "wealth": wealth,
        "age": age,
        "salary": salary,
        "engagement": _sigmoid(eng_logit),
        "held": {},
        "balance": {},
        "tenure": {},
    }
    for p in PRODUCTS:
        a, b, c = INITIAL_HOLDING[p]
        prob = _sigmoid(a + b * wealth + c * (state["engagement"] - 0.5) * 4.0)
        held = rs.uniform(0, f"hold/{p}") < prob
        state["held"][p] = held
        bal = BALANCE_SCALE[p] * np.exp(0.5 * wealth + 0.5 * rs.normal(0, f"balance/{p}"))
        state["balance"][p] = np.where(held, bal, 0.0)
        months = np.floor(rs.uniform(0, f"tenure/{p}") * np.maximum(tenure_years, 1) * 12)
        state["tenure"][p] = np.where(held, months, 0.0)

    alive = np.ones(n, dtype=bool)
    frames = []
    for t in range(config.n_years):
        if t > 0:
            drivers = _drivers(state)
            churn_z = _logit(config.churn_base_rate) + _linear(config.churn_weights, drivers, "_")
            churn_now = alive & (rs.uniform(t, "churn") < _sigmoid(churn_z))
            _advance(state, config, rs, t, drivers, alive & ~churn_now)
            frames.append(_emit(ids, state, region, income_band, tenure_years + t, config, rs, t,
                                alive, churn_now))
            alive = alive & ~churn_now
        else:
            frames.append(_emit(ids, state, region, income_band, tenure_years, config, rs, t,
                                alive, np.zeros(n, dtype=bool)))
    frame = pd.concat(frames, ignore_index=True)
    frame = frame.sort_values(["customer_id", "year_index"], kind="mergesort").reset_index(drop=True)
    return PanelDataset(schema, frame[list(csv_columns(schema))])


def _advance(state, config, rs, t, drivers, active):
    """Move the latent state from year t-1 to year t for customers in ``active``."""
    eng = state["engagement"]
    eng_logit = np.log(eng / (1 - eng))
    eng_new = _sigmoid(0.85 * eng_logit + 0.1 * state["wealth"] + 0.35 * rs.normal(t, "engagement"))
    for p in PRODUCTS:
        w = config.adoption_weights.get(p, {})
        held = state["held"][p]
        adopt = ~held & (rs.uniform(t, f"adopt/{p}") < _sigmoid(_linear(w, drivers)))
        drop = held & (rs.uniform(t, f"drop/{p}") < _sigmoid(
            w.get("attrition", -3.0) - 0.5 * drivers["engagement"]))
        base, sens = BALANCE_DRIFT[p]
        growth = (base + sens * (eng - 0.5) + AGE_DRIFT[p] * drivers["age"]
                  + 0.08 * rs.normal(t, f"growth/{p}"))
        new_bal = BALANCE_SCALE[p] * np.exp(0.5 * state["wealth"] + 0.5 * rs.normal(t, f"balance/{p}"))
        bal = np.where(held, state["balance"][p] * np.exp(growth), 0.0)
        bal = np.where(adopt, new_bal * 0.6, bal)
        now_held = (held & ~drop) | adopt
        tenure = np.where(held & ~drop, state["tenure"][p] + 12, 0.0)
        tenure = np.where(adopt, np.floor(1 + rs.uniform(t, f"newtenure/{p}") * 11), tenure)
        state["held"][p] = np.where(active, now_held, held)
        state["balance"][p] = np.where(active, np.where(now_held, bal, 0.0), state["balance"][p])
        state["tenure"][p] = np.where(active, tenure, state["tenure"][p])
    state["engagement"] = np.where(active, eng_new, eng)
    state["salary"] = np.where(active, state["salary"] * np.exp(0.03 + 0.05 * rs.normal(t, "salary")),
                               state["salary"])
    state["age"] = state["age"] + 1


def _emit(ids, state, region, income_band, tenure_years, config, rs, t, alive, churned):
    rows = alive.copy()
    n = len(ids)
    cols: dict[str, np.ndarray] = {
        "customer_id": ids,
        "year_index": np.full(n, t, dtype=np.int64),
        "churned": churned.astype(np.int64),
        "region_code": region,
        "income_band": income_band,
        "age_years": state["age"].copy(),
        "tenure_years": tenure_years.astype(float),
    }
    live = ~churned
    for p in PRODUCTS:
        cols[f"{p}_tenure_months"] = np.where(live, state["tenure"][p], 0.0)
    eng = state["engagement"]
    missing = rs.uniform(t, "missing/engagement") < config.missing_rate
    cols["engagement_score"] = np.where(live, np.where(missing, np.nan, np.round(eng, 6)), 0.0)
    cols["digital_logins"] = np.where(live, np.floor(np.exp(1.0 + 3.0 * eng + 0.3 * rs.normal(t, "logins"))), 0.0)
    cols["n_transactions"] = np.where(
        live, np.floor(np.exp(2.5 + 1.5 * eng + 0.3 * state["wealth"] + 0.3 * rs.normal(t, "txn"))), 0.0)
    cols["salary_inflow"] = np.where(live, np.round(state["salary"], 4), 0.0)
    cv = np.zeros(n)
    noise = config.value_noise_scale
    for p in PRODUCTS:
        held = state["held"][p] & live
        bal = np.where(held, np.round(state["balance"][p], 4), 0.0)
        r = (FIXED_REVENUE[p] + REVENUE_RATE[p] * bal) * np.exp(noise * rs.normal(t, f"rev/{p}"))
        el = LOSS_RATE[p] * bal * np.exp(noise * rs.normal(t, f"el/{p}"))
        cc = CAPITAL_RATE[p] * bal
        cr = 0.1 * el
        r, el, cc, cr = (np.where(held, np.round(a, 6), 0.0) for a in (r, el, cc, cr))
        cols[f"{p}_held"] = held.astype(np.int64)
        cols[f"{p}_balance"] = bal
        cols[f"{p}_R"], cols[f"{p}_EL"], cols[f"{p}_CC"], cols[f"{p}_CR"] = r, el, cc, cr
        cv = cv + np.where(held, r - (el + cc + cr), 0.0)
    cols["cv"] = cv
    return pd.DataFrame(cols)[rows].copy()


def split_holdout(dataset: PanelDataset, fraction: float, seed: int) -> tuple[PanelDataset, PanelDataset]:
    """Split by customer: round(fraction * n) customers go to the test side."""
    if not 0 <= fraction <= 1:
        raise ConfigError("fraction must be in [0, 1]")
    ids = np.sort(dataset.frame["customer_id"].unique().astype(str))
    n_test = int(round(fraction * len(ids)))
    perm = np.random.default_rng(seed).permutation(len(ids))
    test_ids = set(ids[perm[:n_test]])
    in_test = dataset.frame["customer_id"].isin(test_ids).to_numpy()
    f = dataset.frame
    return (
        PanelDataset(dataset.schema, f[~in_test].reset_index(drop=True)),
        PanelDataset(dataset.schema, f[in_test].reset_index(drop=True)),
    )
