import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clvsim.core import (
    CustomerYearRecord,
    FeatureSchema,
    FeatureSpec,
    PanelDataset,
    ProductHolding,
    ValueComponents,
    csv_columns,
    customer_value,
    default_schema,
    discounted_clv,
    product_value,
    read_panel_csv,
    write_panel_csv,
)
from clvsim.errors import DataError, InvalidDiscount, InvalidValue, SchemaError

finite = st.floats(-1e6, 1e6, allow_nan=False)
nonneg = st.floats(0, 1e6, allow_nan=False)


def vc(r, el=0.0, cc=0.0, cr=0.0) -> ValueComponents:
    return ValueComponents(revenue=r, expected_loss=el, cost_of_capital=cc, collections_recoveries=cr)


def holding(v: float, product: str = "savings") -> ProductHolding:
    return ProductHolding(product, 100.0, 12, vc(v))


class TestProductValue:
    def test_zero(self):
        assert product_value(vc(0, 0, 0, 0)) == 0

    def test_cost_decomposition(self):
        assert product_value(vc(5.0, 1.0, 0.5, 0.5)) == 3.0

    def test_negative_allowed(self):
        assert product_value(vc(2.0, 3.0)) == -1.0

    def test_rejects_nan(self):
        with pytest.raises(InvalidValue):
            vc(float("nan"))

    def test_rejects_negative_cost(self):
        with pytest.raises(InvalidValue):
            vc(1.0, el=-0.5)

    @given(finite, nonneg, nonneg, nonneg, nonneg)
    def test_linear_in_each_component(self, r, el, cc, cr, delta):
        base = product_value(vc(r, el, cc, cr))
        assert math.isclose(product_value(vc(r + delta, el, cc, cr)), base + delta, rel_tol=1e-9, abs_tol=1e-6)
        for bumped in (vc(r, el + delta, cc, cr), vc(r, el, cc + delta, cr), vc(r, el, cc, cr + delta)):
            assert math.isclose(product_value(bumped), base - delta, rel_tol=1e-9, abs_tol=1e-6)


class TestCustomerValue:
    def test_empty(self):
        assert customer_value([]) == 0

    def test_single(self):
        assert customer_value([holding(4.25)]) == 4.25

    def test_hand_sum(self):
        assert customer_value([holding(3.0), holding(-1.0), holding(0.5)]) == 2.5

    @given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), max_size=8), st.randoms())
    def test_permutation_invariant(self, values, rnd):
        hs = [holding(v) for v in values]
        shuffled = hs[:]
        rnd.shuffle(shuffled)
        assert math.isclose(customer_value(hs), customer_value(shuffled), abs_tol=1e-9)


class TestDiscountedClv:
    def test_zero_discount_single(self):
        assert discounted_clv([100], 0) == 100

    def test_hand_discounting(self):
        assert abs(discounted_clv([110, 121], 0.1) - 200) < 1e-12

    def test_zero_discount_sum(self):
        assert discounted_clv([100, 100, 100], 0) == 300

    def test_rejects_discount_at_minus_one(self):
        with pytest.raises(InvalidDiscount):
            discounted_clv([1.0], -1.0)

    def test_rejects_empty(self):
        with pytest.raises(InvalidValue):
            discounted_clv([], 0.1)

    @given(st.lists(finite, min_size=1, max_size=10))
    def test_zero_discount_is_plain_sum(self, cv):
        assert discounted_clv(cv, 0.0) == sum(cv)

    @given(st.lists(st.floats(0, 1e4), min_size=1, max_size=8).filter(lambda v: max(v) > 0),
           st.floats(0, 2), st.floats(0.001, 2))
    def test_monotone_decreasing_in_discount(self, cv, d, step):
        assert discounted_clv(cv, d + step) <= discounted_clv(cv, d)


class TestRecords:
    def test_churned_record_must_be_empty(self):
        with pytest.raises(DataError):
            CustomerYearRecord("c1", 1, {}, (holding(1.0),), 1.0, True)

    def test_cv_must_match_holdings(self):
        with pytest.raises(DataError):
            CustomerYearRecord("c1", 0, {}, (holding(1.0),), 2.0, False)
        CustomerYearRecord("c1", 0, {}, (holding(1.0),), 1.0 + 1e-12, False)


class TestSchemaAndCsv:
    def test_schema_round_trip_and_hash(self):
        schema = default_schema()
        again = FeatureSchema.from_dict(schema.to_dict())
        assert again == schema
        assert again.schema_hash() == schema.schema_hash()

    def test_duplicate_names_rejected(self):
        with pytest.raises(SchemaError):
            FeatureSchema((FeatureSpec("a", "static"), FeatureSpec("a", "dynamic")))

    def test_csv_layout(self):
        cols = csv_columns(default_schema())
        assert cols[:3] == ("customer_id", "year_index", "churned")
        assert cols[-1] == "cv"
        for suffix in ("held", "balance", "R", "EL", "CC", "CR"):
            assert f"mortgage_{suffix}" in cols

    def test_csv_round_trip_is_lossless(self, small_panel, tmp_path):
        path = tmp_path / "panel.csv"
        write_panel_csv(small_panel, path)
        back = read_panel_csv(path)
        pd.testing.assert_frame_equal(back.frame, small_panel.frame)
        write_panel_csv(back, tmp_path / "again.csv")
        assert path.read_bytes() == (tmp_path / "again.csv").read_bytes()

    def test_stored_cv_matches_components(self, small_panel):
        small_panel.validate()
        for rec in list(small_panel.records())[:200]:
            assert abs(customer_value(rec.holdings) - rec.cv) <= 1e-9

    def test_empty_panel(self):
        empty = PanelDataset.empty(default_schema())
        assert len(empty) == 0 and empty.n_customers == 0

    def test_missing_values_survive_csv(self, small_panel, tmp_path):
        assert small_panel.frame["engagement_score"].isna().any()
        path = tmp_path / "p.csv"
        write_panel_csv(small_panel, path)
        back = read_panel_csv(path)
        assert np.array_equal(back.frame["engagement_score"].isna(), small_panel.frame["engagement_score"].isna())
