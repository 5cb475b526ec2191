"""Domain types, value arithmetic and the panel CSV format."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DataError, InvalidDiscount, InvalidValue, SchemaError

PRODUCTS = ("current_account", "savings", "loan", "credit_card", "mortgage", "investment")
FEATURE_KINDS = ("static", "yearly_progressing", "monthly_progressing", "dynamic")
VALUE_FIELDS = ("R", "EL", "CC", "CR")

# Explicit sentinel for a missing feature value.
MISSING = float("nan")


def is_missing(value: float) -> bool:
    return value != value


@dataclass(frozen=True)
class ValueComponents:
    """Per-product revenue and the three cost components of one period."""

    revenue: float
    expected_loss: float = 0.0
    cost_of_capital: float = 0.0
    collections_recoveries: float = 0.0

    def __post_init__(self):
        for name in ("revenue", "expected_loss", "cost_of_capital", "collections_recoveries"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvalidValue(f"{name} must be finite, got {v!r}")
        for name in ("expected_loss", "cost_of_capital", "collections_recoveries"):
            if getattr(self, name) < 0:
                raise InvalidValue(f"{name} must be non-negative")

    @property
    def cost(self) -> float:
        return self.expected_loss + self.cost_of_capital + self.collections_recoveries


def product_value(components: ValueComponents) -> float:
    """Revenue minus total cost (expected loss + cost of capital + collections)."""
    values = (
        components.revenue,
        components.expected_loss,
        components.cost_of_capital,
        components.collections_recoveries,
    )
    if not all(math.isfinite(v) for v in values):
        raise InvalidValue("value components must be finite")
    return components.revenue - (
        components.expected_loss + components.cost_of_capital + components.collections_recoveries
    )


@dataclass(frozen=True)
class ProductHolding:
    product_kind: str
    balance: float
    tenure_months: int
    components: ValueComponents

    def __post_init__(self):
        if self.product_kind not in PRODUCTS:
            raise SchemaError(f"unknown product kind {self.product_kind!r}")
        if self.tenure_months < 0:
            raise InvalidValue("tenure_months must be >= 0")

    @property
    def value(self) -> float:
        return product_value(self.components)


def customer_value(holdings: Iterable[ProductHolding]) -> float:
    return float(sum(product_value(h.components) for h in holdings))


def discounted_clv(cv_series: Sequence[float], d: float) -> float:
    """Present value of per-period customer values, period t discounted by (1+d)**t."""
    if d <= -1:
        raise InvalidDiscount(f"discount rate must exceed -1, got {d}")
    if len(cv_series) == 0:
        raise InvalidValue("cv_series must be non-empty")
    total = 0.0
    for t, cv in enumerate(cv_series, start=1):
        total += cv / (1.0 + d) ** t
    return total


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    low: float = -math.inf
    high: float = math.inf

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "low": _enc(self.low), "high": _enc(self.high)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSpec":
        return cls(d["name"], d["kind"], _dec(d["low"]), _dec(d["high"]))


def _enc(x: float):
    return float(x) if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _dec(x) -> float:
    return float(x)


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureSpec, ...]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature names in schema")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def __getitem__(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise SchemaError(f"feature {name!r} not in schema")

    def names_of_kind(self, *kinds: str) -> tuple[str, ...]:
        return tuple(f.name for f in self.features if f.kind in kinds)

    def to_dict(self) -> dict:
        return {"features": [f.to_dict() for f in self.features]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        return cls(tuple(FeatureSpec.from_dict(f) for f in d["features"]))

    def schema_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def product_columns(product: str) -> tuple[str, ...]:
    return (f"{product}_held", f"{product}_balance") + tuple(f"{product}_{c}" for c in VALUE_FIELDS)


PRODUCT_BLOCK = tuple(c for p in PRODUCTS for c in product_columns(p))


def default_schema() -> FeatureSchema:
    """Schema emitted by the synthetic generator."""
    feats = [
        FeatureSpec("region_code", "static", 0, 4),
        FeatureSpec("income_band", "static", 0, 9),
        FeatureSpec("age_years", "yearly_progressing", 18, 120),
        FeatureSpec("tenure_years", "yearly_progressing", 0, 100),
    ]
    feats += [FeatureSpec(f"{p}_tenure_months", "monthly_progressing", 0, 1200) for p in PRODUCTS]
    feats += [
        FeatureSpec("engagement_score", "dynamic", 0, 1),
        FeatureSpec("digital_logins", "dynamic", 0, math.inf),
        FeatureSpec("n_transactions", "dynamic", 0, math.inf),
        FeatureSpec("salary_inflow", "dynamic", 0, math.inf),
    ]
    for p in PRODUCTS:
        feats.append(FeatureSpec(f"{p}_held", "dynamic", 0, 1))
        feats.append(FeatureSpec(f"{p}_balance", "dynamic", -math.inf, math.inf))
    return FeatureSchema(tuple(feats))


@dataclass(frozen=True)
class CustomerYearRecord:
    customer_id: str
    year_index: int
    features: Mapping[str, float]
    holdings: tuple[ProductHolding, ...]
    cv: float
    churned: bool = False

    def __post_init__(self):
        if self.year_index < 0:
            raise InvalidValue("year_index must be >= 0")
        if self.churned and (self.holdings or self.cv != 0):
            raise DataError(f"churned record {self.customer_id}/{self.year_index} must be empty")
        if abs(customer_value(self.holdings) - self.cv) > 1e-9:
            raise DataError(f"cv mismatch for {self.customer_id}/{self.year_index}")


@dataclass(frozen=True)
class PanelDataset:
    """Per-customer, per-year panel held column-wise.

    ``frame`` uses the CSV column layout: ``customer_id``, ``year_index``,
    ``churned``, the schema features, the per-product block and ``cv``.
    Rows are sorted by (customer_id, year_index).
    """

    schema: FeatureSchema
    frame: pd.DataFrame = field(repr=False)

    def __post_init__(self):
        missing = [c for c in csv_columns(self.schema) if c not in self.frame.columns]
        if missing:
            raise SchemaError(f"panel is missing columns: {missing[:5]}")

    @classmethod
    def empty(cls, schema: FeatureSchema) -> "PanelDataset":
        cols = csv_columns(schema)
        frame = pd.DataFrame({c: pd.Series(dtype=_dtype_of(c)) for c in cols})
        return cls(schema, frame)

    @classmethod
    def from_records(cls, schema: FeatureSchema, records: Iterable[CustomerYearRecord]) -> "PanelDataset":
        rows = []
        for r in records:
            row = {"customer_id": r.customer_id, "year_index": r.year_index, "churned": int(r.churned)}
            for name in schema.names:
                if name not in r.features and not _is_product_feature(name):
                    raise SchemaError(f"record {r.customer_id}/{r.year_index} lacks feature {name!r}")
                row[name] = float(r.features.get(name, 0.0))
            for p in PRODUCTS:
                row.update({f"{p}_held": 0, f"{p}_balance": 0.0, f"{p}_R": 0.0,
                            f"{p}_EL": 0.0, f"{p}_CC": 0.0, f"{p}_CR": 0.0})
            for h in r.holdings:
                p = h.product_kind
                c = h.components
                row.update({f"{p}_held": 1, f"{p}_balance": h.balance, f"{p}_R": c.revenue,
                            f"{p}_EL": c.expected_loss, f"{p}_CC": c.cost_of_capital,
                            f"{p}_CR": c.collections_recoveries})
                if f"{p}_tenure_months" in schema:
                    row[f"{p}_tenure_months"] = float(h.tenure_months)
            row["cv"] = r.cv
            rows.append(row)
        if not rows:
            return cls.empty(schema)
        frame = pd.DataFrame(rows, columns=list(csv_columns(schema)))
        return cls(schema, _normalise(frame))

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def customer_ids(self) -> np.ndarray:
        return pd.unique(self.frame["customer_id"])

    @property
    def n_customers(self) -> int:
        return int(self.frame["customer_id"].nunique())

    @property
    def year_range(self) -> tuple[int, int] | None:
        if len(self.frame) == 0:
            return None
        years = self.frame["year_index"]
        return int(years.min()), int(years.max())

    def year(self, t: int) -> pd.DataFrame:
        return self.frame[self.frame["year_index"] == t]

    def select_customers(self, ids) -> "PanelDataset":
        keep = self.frame["customer_id"].isin(set(ids))
        return PanelDataset(self.schema, self.frame[keep].reset_index(drop=True))

    def records(self) -> Iterator[CustomerYearRecord]:
        names = self.schema.names
        for row in self.frame.itertuples(index=False):
            d = row._asdict()
            holdings = []
            for p in PRODUCTS:
                if d[f"{p}_held"]:
                    comp = ValueComponents(d[f"{p}_R"], d[f"{p}_EL"], d[f"{p}_CC"], d[f"{p}_CR"])
                    tenure = d.get(f"{p}_tenure_months", 0.0)
                    holdings.append(ProductHolding(p, d[f"{p}_balance"], int(tenure), comp))
            yield CustomerYearRecord(
                customer_id=d["customer_id"],
                year_index=int(d["year_index"]),
                features=MappingProxyType({n: d[n] for n in names}),
                holdings=tuple(holdings),
                cv=d["cv"],
                churned=bool(d["churned"]),
            )

    def validate(self) -> None:
        """Check panel invariants; raises DataError on the first violation."""
        f = self.frame
        if f.duplicated(["customer_id", "year_index"]).any():
            raise DataError("(customer_id, year_index) pairs are not unique")
        churned = f["churned"].astype(bool).to_numpy()
        if churned.any():
            churn_year = f.loc[churned].groupby("customer_id")["year_index"].min()
            after = f["year_index"].to_numpy() > f["customer_id"].map(churn_year).fillna(np.inf).to_numpy()
            if after.any():
                raise DataError("records found after a customer's churn year")
        value = np.zeros(len(f))
        held_any = np.zeros(len(f), dtype=bool)
        for p in PRODUCTS:
            held = f[f"{p}_held"].to_numpy().astype(bool)
            held_any |= held
            v = f[f"{p}_R"].to_numpy() - (
                f[f"{p}_EL"].to_numpy() + f[f"{p}_CC"].to_numpy() + f[f"{p}_CR"].to_numpy()
            )
            value += np.where(held, v, 0.0)
        cv = f["cv"].to_numpy(dtype=float)
        if not np.isfinite(cv).all():
            raise DataError("non-finite cv")
        if (np.abs(value - cv) > 1e-9).any():
            raise DataError("stored cv does not match the sum of product values")
        if (held_any & churned).any() or (cv[churned] != 0).any():
            raise DataError("churned records must have no holdings and zero cv")


def _is_product_feature(name: str) -> bool:
    return name in PRODUCT_BLOCK


def csv_columns(schema: FeatureSchema) -> tuple[str, ...]:
    feats = tuple(n for n in schema.names if not _is_product_feature(n))
    return ("customer_id", "year_index", "churned") + feats + PRODUCT_BLOCK + ("cv",)


def _dtype_of(col: str):
    if col == "customer_id":
        return object
    if col in ("year_index", "churned") or col.endswith("_held"):
        return np.int64
    return np.float64


def _normalise(frame: pd.DataFrame) -> pd.DataFrame:
    frame = frame.astype({c: _dtype_of(c) for c in frame.columns})
    frame["customer_id"] = frame["customer_id"].astype(str)
    return frame.sort_values(["customer_id", "year_index"], kind="mergesort").reset_index(drop=True)


def write_panel_csv(panel: PanelDataset, path: str | Path) -> None:
    """Write the panel as CSV plus a ``.schema.json`` sidecar."""
    path = Path(path)
    cols = list(csv_columns(panel.schema))
    frame = panel.frame[cols].copy()
    floats = frame.select_dtypes("float").columns
    # adding +0.0 turns -0.0 into 0.0 so rewrites stay byte-identical
    frame[floats] = frame[floats] + 0.0
    frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8", lineterminator="\n")
    schema_path(path).write_text(json.dumps(panel.schema.to_dict(), sort_keys=True, indent=1) + "\n")


def schema_path(csv_path: Path) -> Path:
    return csv_path.with_name(csv_path.name + ".schema.json")


def read_panel_csv(path: str | Path, schema: FeatureSchema | None = None) -> PanelDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"panel file not found: {path}")
    if schema is None:
        sp = schema_path(path)
        schema = FeatureSchema.from_dict(json.loads(sp.read_text())) if sp.exists() else default_schema()
    frame = pd.read_csv(path, dtype={"customer_id": str}, float_precision="round_trip", encoding="utf-8")
    missing = [c for c in csv_columns(schema) if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing[:5]}")
    return PanelDataset(schema, _normalise(frame[list(csv_columns(schema))]))
