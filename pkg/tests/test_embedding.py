from __future__ import annotations

import io

import numpy as np
import pytest

from ttr.data_model import BagOfStores
from ttr.embedding import (
    FormatError,
    adagrad_update,
    apply_gradients,
    load_table,
    lookup,
    new_table,
    pooled_backward,
    pooled_backward_rows,
    pooled_lookup,
    pooled_lookup_batch,
    read_table_block,
    save_table,
    write_table_block,
)


def bag(*indices):
    return BagOfStores(store_indices=tuple(indices), as_of=0)


class TestNewTable:
    def test_seeded_tables_are_bitwise_identical(self):
        a = new_table(2, 3, seed=7)
        b = new_table(2, 3, seed=7)
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.accumulators, b.accumulators)
        assert a.rng_seed == 7

    def test_zero_init_scale(self):
        table = new_table(4, 2, seed=0, init_scale=0.0)
        assert np.all(table.weights == 0.0)

    def test_bad_shapes_rejected(self):
        with pytest.raises(ValueError):
            new_table(0, 3, seed=1)
        with pytest.raises(ValueError):
            new_table(3, 0, seed=1)

    def test_init_range_and_zero_accumulators(self):
        table = new_table(100, 8, seed=3, init_scale=0.05)
        assert np.all(np.abs(table.weights) <= 0.05)
        assert np.all(table.accumulators == 0.0)


class TestLookup:
    def test_returns_set_row(self):
        table = new_table(3, 3, seed=0)
        table.weights[1] = [1.0, 2.0, 3.0]
        assert np.array_equal(lookup(table, 1), [1.0, 2.0, 3.0])

    def test_out_of_range(self):
        table = new_table(3, 3, seed=0)
        with pytest.raises(IndexError):
            lookup(table, 3)

    def test_lookup_is_a_copy(self):
        table = new_table(3, 3, seed=0)
        first = lookup(table, 0)
        second = lookup(table, 0)
        assert np.array_equal(first, second)
        first += 1.0
        assert np.array_equal(lookup(table, 0), second)


class TestPooledLookup:
    def test_singleton_equals_lookup(self):
        table = new_table(5, 4, seed=2)
        assert np.array_equal(pooled_lookup(table, bag(3)), lookup(table, 3))

    def test_mean_of_two_rows(self):
        table = new_table(2, 2, seed=0, init_scale=0.0)
        table.weights[0] = [2.0, 0.0]
        table.weights[1] = [0.0, 2.0]
        assert np.array_equal(pooled_lookup(table, bag(0, 1)), [1.0, 1.0])

    def test_empty_bag_is_zero_vector(self):
        table = new_table(2, 3, seed=0)
        assert np.array_equal(pooled_lookup(table, bag()), np.zeros(3))

    def test_sum_mode(self):
        table = new_table(2, 2, seed=0, init_scale=0.0)
        table.weights[0] = [1.0, 2.0]
        assert np.array_equal(pooled_lookup(table, bag(0, 0), mode="sum"), [2.0, 4.0])

    def test_out_of_range(self):
        table = new_table(2, 2, seed=0)
        with pytest.raises(IndexError):
            pooled_lookup(table, bag(2))

    def test_batch_matches_single(self):
        table = new_table(10, 4, seed=5)
        bags = [bag(), bag(1), bag(2, 2, 7), bag(9, 0)]
        batch = pooled_lookup_batch(table, bags)
        for i, b in enumerate(bags):
            assert np.allclose(batch[i], pooled_lookup(table, b), atol=1e-15)

    def test_batch_sum_mode_matches_single(self):
        table = new_table(6, 3, seed=8)
        bags = [bag(0, 5), bag(), bag(3)]
        batch = pooled_lookup_batch(table, bags, mode="sum")
        for i, b in enumerate(bags):
            assert np.allclose(batch[i], pooled_lookup(table, b, mode="sum"), atol=1e-15)


class TestAdagradUpdate:
    def test_hand_derived_single_step(self):
        table = new_table(1, 1, seed=0, init_scale=0.0)
        table.weights[0, 0] = 1.0
        adagrad_update(table, 0, np.array([0.5]), lr=0.1)
        assert table.accumulators[0, 0] == pytest.approx(0.25)
        assert table.weights[0, 0] == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-10), abs=1e-12)
        assert table.weights[0, 0] == pytest.approx(0.9000, abs=1e-4)

    def test_zero_gradient_changes_nothing(self):
        table = new_table(2, 2, seed=1)
        before_w = table.weights.copy()
        before_a = table.accumulators.copy()
        adagrad_update(table, 0, np.zeros(2), lr=0.1)
        assert np.array_equal(table.weights, before_w)
        assert np.array_equal(table.accumulators, before_a)

    def test_two_unit_steps_hand_derived(self):
        table = new_table(1, 1, seed=0, init_scale=0.0)
        table.weights[0, 0] = 5.0
        adagrad_update(table, 0, np.array([1.0]), lr=1.0)
        adagrad_update(table, 0, np.array([1.0]), lr=1.0)
        # w0 - 1/1 - 1/sqrt(2) = w0 - 1.70711
        assert table.weights[0, 0] == pytest.approx(5.0 - 1.70711, abs=1e-5)

    def test_lr_zero_grows_accumulator_only(self):
        table = new_table(1, 2, seed=4)
        before = table.weights.copy()
        adagrad_update(table, 0, np.array([1.0, -2.0]), lr=0.0)
        assert np.array_equal(table.weights, before)
        assert np.array_equal(table.accumulators[0], [1.0, 4.0])

    def test_rejects_nonfinite_gradient(self):
        table = new_table(1, 2, seed=0)
        with pytest.raises(ValueError):
            adagrad_update(table, 0, np.array([np.nan, 0.0]), lr=0.1)

    def test_out_of_range(self):
        table = new_table(1, 2, seed=0)
        with pytest.raises(IndexError):
            adagrad_update(table, 1, np.zeros(2), lr=0.1)

    def test_accumulators_never_decrease(self):
        rng = np.random.default_rng(0)
        table = new_table(4, 3, seed=0)
        prev = table.accumulators.copy()
        for _ in range(20):
            idx = int(rng.integers(0, 4))
            adagrad_update(table, idx, rng.normal(size=3), lr=0.05)
            assert np.all(table.accumulators >= prev)
            assert np.all(np.isfinite(table.weights))
            prev = table.accumulators.copy()


class TestApplyGradients:
    def test_duplicates_summed_before_single_step(self):
        grads = np.array([[1.0, 0.0], [2.0, 1.0], [0.5, 0.5]])
        rows = np.array([1, 1, 0])

        combined = new_table(3, 2, seed=9)
        apply_gradients(combined, rows, grads, lr=0.1)

        reference = new_table(3, 2, seed=9)
        adagrad_update(reference, 1, grads[0] + grads[1], lr=0.1)
        adagrad_update(reference, 0, grads[2], lr=0.1)
        assert np.allclose(combined.weights, reference.weights, atol=1e-15)
        assert np.allclose(combined.accumulators, reference.accumulators, atol=1e-15)

    def test_order_independent(self):
        rng = np.random.default_rng(3)
        rows = rng.integers(0, 5, size=12)
        grads = rng.normal(size=(12, 3))
        perm = rng.permutation(12)

        a = new_table(5, 3, seed=11)
        apply_gradients(a, rows, grads, lr=0.07)
        b = new_table(5, 3, seed=11)
        apply_gradients(b, rows[perm], grads[perm], lr=0.07)
        assert np.allclose(a.weights, b.weights, atol=1e-14)

    def test_empty_is_noop(self):
        table = new_table(2, 2, seed=0)
        before = table.weights.copy()
        apply_gradients(table, np.empty(0, dtype=np.int64), np.empty((0, 2)), lr=0.1)
        assert np.array_equal(table.weights, before)


class TestPooledBackward:
    def test_mean_gradient_splits_equally(self):
        table = new_table(4, 2, seed=0)
        grads = dict(pooled_backward(table, bag(0, 1), np.array([2.0, 2.0])))
        assert np.array_equal(grads[0], [1.0, 1.0])
        assert np.array_equal(grads[1], [1.0, 1.0])

    def test_multiplicity_scales_gradient(self):
        table = new_table(4, 2, seed=0)
        out = pooled_backward(table, bag(1, 1), np.array([2.0, 2.0]))
        assert len(out) == 1
        row, grad = out[0]
        assert row == 1
        assert np.array_equal(grad, [2.0, 2.0])

    def test_empty_bag(self):
        table = new_table(4, 2, seed=0)
        assert pooled_backward(table, bag(), np.ones(2)) == []

    def test_batch_rows_match_single(self):
        table = new_table(6, 3, seed=1)
        bags = [bag(0, 1, 1), bag(), bag(5)]
        upstream = np.arange(9, dtype=np.float64).reshape(3, 3)
        rows, grads = pooled_backward_rows(bags, upstream)
        merged: dict[int, np.ndarray] = {}
        for r, g in zip(rows, grads):
            merged[int(r)] = merged.get(int(r), np.zeros(3)) + g
        expected: dict[int, np.ndarray] = {}
        for i, b in enumerate(bags):
            for r, g in pooled_backward(table, b, upstream[i]):
                expected[r] = expected.get(r, np.zeros(3)) + g
        assert merged.keys() == expected.keys()
        for r in merged:
            assert np.allclose(merged[r], expected[r], atol=1e-15)

    def test_gradient_check_against_finite_differences(self):
        # d/dw of pooled_lookup(bag) . u, all touched weights, central differences
        rng = np.random.default_rng(42)
        h = 1e-4
        for trial in range(10):
            rows, dim = 6, 3
            table = new_table(rows, dim, seed=trial, init_scale=0.5)
            length = int(rng.integers(1, 6))
            indices = tuple(int(x) for x in rng.integers(0, rows, size=length))
            u = rng.normal(size=dim)
            analytic = dict(pooled_backward(table, bag(*indices), u))
            for row in set(indices):
                for d in range(dim):
                    table.weights[row, d] += h
                    up = pooled_lookup(table, bag(*indices)) @ u
                    table.weights[row, d] -= 2 * h
                    down = pooled_lookup(table, bag(*indices)) @ u
                    table.weights[row, d] += h
                    numeric = (up - down) / (2 * h)
                    assert analytic[row][d] == pytest.approx(numeric, rel=1e-4, abs=1e-10)


class TestAliasing:
    def test_update_through_one_handle_visible_through_other(self):
        table = new_table(3, 2, seed=0)
        handle_a = table
        handle_b = table
        before = lookup(handle_b, 1)
        adagrad_update(handle_a, 1, np.array([1.0, 1.0]), lr=0.5)
        after = lookup(handle_b, 1)
        assert not np.array_equal(before, after)
        assert np.array_equal(after, lookup(handle_a, 1))


class TestCheckpoint:
    def test_round_trip_bit_exact_at_f32(self, tmp_path):
        table = new_table(7, 5, seed=13)
        table.accumulators += 0.25
        path = tmp_path / "table.bin"
        save_table(table, path)
        loaded = load_table(path)
        assert np.array_equal(loaded.weights, table.weights.astype(np.float32).astype(np.float64))
        assert np.array_equal(
            loaded.accumulators, table.accumulators.astype(np.float32).astype(np.float64)
        )
        # a second save of the loaded table reproduces the file byte for byte
        path2 = tmp_path / "table2.bin"
        save_table(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        table = new_table(2, 2, seed=0)
        save_table(table, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="magic"):
            load_table(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.bin"
        table = new_table(4, 4, seed=0)
        save_table(table, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError, match="truncated"):
            load_table(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "tiny.bin"
        path.write_bytes(b"TTEB")
        with pytest.raises(FormatError):
            load_table(path)

    def test_unsupported_version(self):
        buffer = io.BytesIO()
        write_table_block(buffer, new_table(1, 1, seed=0))
        raw = bytearray(buffer.getvalue())
        raw[4] = 99
        with pytest.raises(FormatError, match="version"):
            read_table_block(io.BytesIO(bytes(raw)))
