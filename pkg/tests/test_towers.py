from __future__ import annotations

import numpy as np
import pytest

from ttr.data_model import BagOfStores
from ttr.embedding import adagrad_update, lookup
from ttr.towers import (
    ModelConfig,
    Variant,
    build_model,
    item_forward,
    item_forward_batch,
    parameter_count,
    parameter_count_formula,
    query_forward,
    query_forward_batch,
    score,
)


def bag(*indices):
    return BagOfStores(store_indices=tuple(indices), as_of=0)


def make(variant, n_users=10, n_stores=6, dim=4, seed=0):
    return build_model(ModelConfig(variant=variant, dim=dim, seed=seed), n_users, n_stores)


class TestVariantParsing:
    def test_cli_spellings(self):
        assert Variant.parse("bow-shared") is Variant.BOW_SHARED
        assert Variant.parse("BOW") is Variant.BOW
        assert Variant.parse("dmf") is Variant.DMF

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="unknown variant"):
            Variant.parse("mlp")


class TestModelConfig:
    def test_temperature_must_be_positive(self):
        with pytest.raises(ValueError):
            ModelConfig(temperature=0.0)

    def test_bad_pooling(self):
        with pytest.raises(ValueError):
            ModelConfig(pooling="max")


class TestTableWiring:
    def test_dmf_has_user_table_only(self):
        model = make("dmf")
        assert model.user_table is not None
        assert model.query_store_table is None
        assert model.user_table.rows == 10
        assert model.item_table.rows == 6

    def test_bow_tables_are_distinct(self):
        model = make("bow")
        assert model.user_table is None
        assert model.query_store_table is not model.item_table

    def test_shared_tables_alias(self):
        model = make("bow-shared")
        assert model.query_store_table is model.item_table


class TestForward:
    def test_dmf_query_is_user_row(self):
        model = make("dmf")
        assert np.array_equal(query_forward(model, 3), lookup(model.user_table, 3))

    def test_bow_singleton_bag_is_store_row(self):
        model = make("bow")
        assert np.array_equal(query_forward(model, bag(2)), lookup(model.query_store_table, 2))

    def test_shared_singleton_bag_reads_item_table(self):
        model = make("bow-shared")
        assert np.array_equal(query_forward(model, bag(1)), lookup(model.item_table, 1))

    def test_item_forward_reads_item_row(self):
        model = make("bow")
        model.item_table.weights[0] = [1.0, 0.0, 0.0, 0.0]
        assert np.array_equal(item_forward(model, 0), [1.0, 0.0, 0.0, 0.0])

    def test_item_forward_out_of_range(self):
        model = make("bow")
        with pytest.raises(IndexError):
            item_forward(model, 6)

    def test_shared_item_equals_query_table_row(self):
        model = make("bow-shared")
        assert np.array_equal(item_forward(model, 4), lookup(model.query_store_table, 4))

    def test_variant_mismatch(self):
        with pytest.raises(TypeError):
            query_forward(make("dmf"), bag(1))
        with pytest.raises(TypeError):
            query_forward(make("bow"), 1)

    def test_forward_determinism(self):
        model = make("bow", seed=5)
        q = bag(0, 3, 3)
        assert np.array_equal(query_forward(model, q), query_forward(model, q))

    def test_batch_forwards_match_single(self):
        for variant in ("dmf", "bow", "bow-shared"):
            model = make(variant, seed=2)
            if variant == "dmf":
                queries = [0, 4, 4, 9]
            else:
                queries = [bag(0), bag(1, 1, 5), bag(), bag(2, 3)]
            batch = query_forward_batch(model, queries)
            for i, q in enumerate(queries):
                assert np.allclose(batch[i], query_forward(model, q), atol=1e-15)
            items = [0, 5, 5, 2]
            ibatch = item_forward_batch(model, items)
            for i, it in enumerate(items):
                assert np.array_equal(ibatch[i], item_forward(model, it))


class TestScore:
    def test_orthogonal(self):
        assert score(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_hand_value(self):
        assert score(np.array([1.0, 2.0]), np.array([3.0, 4.0])) == 11.0

    def test_self_score_nonnegative(self):
        v = np.array([0.3, -0.7, 2.0])
        assert score(v, v) >= 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=5), rng.normal(size=5)
        assert score(a, b) == pytest.approx(score(b, a), abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            score(np.zeros(2), np.zeros(3))


class TestParameterCount:
    def test_dmf_hand_value(self):
        model = make("dmf", n_users=1000, n_stores=100, dim=32)
        assert parameter_count(model) == 35_200

    def test_shared_hand_value_and_ratio(self):
        shared = make("bow-shared", n_users=1000, n_stores=100, dim=32)
        assert parameter_count(shared) == 3_200
        dmf = make("dmf", n_users=1000, n_stores=100, dim=32)
        assert parameter_count(dmf) / parameter_count(shared) == 11.0

    def test_bow_counts_both_tables(self):
        model = make("bow", n_users=1000, n_stores=100, dim=32)
        assert parameter_count(model) == 6_400

    def test_formula_matches_built_models(self):
        for variant in Variant:
            for n_users, n_stores, dim in [(1, 1, 1), (7, 3, 2), (50, 20, 8)]:
                model = make(variant.value, n_users=n_users, n_stores=n_stores, dim=dim)
                assert parameter_count(model) == parameter_count_formula(variant, n_users, n_stores, dim)

    def test_formula_degenerate_catalog(self):
        assert parameter_count_formula(Variant.BOW_SHARED, 10, 0, 32) == 0


class TestSharingInvariant:
    def test_rows_identical_after_updates(self):
        model = make("bow-shared", seed=3)
        adagrad_update(model.query_store_table, 2, np.array([1.0, -1.0, 0.5, 0.0]), lr=0.1)
        adagrad_update(model.item_table, 2, np.array([0.2, 0.2, 0.2, 0.2]), lr=0.1)
        for i in range(model.n_items):
            assert np.array_equal(
                lookup(model.query_store_table, i), lookup(model.item_table, i)
            )
